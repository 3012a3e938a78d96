"""Compiled vs pure-Python chain kernel.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times forward and backward passes at several chain lengths for each backend,
checks that the two agree, then times one full optimisation step with the
active backend.
"""
import argparse
import timeit

import numpy as np

from foldcf import gradkit as gk
from foldcf import kernels
from foldcf.cfengine import CfConfig, build_loss, init_state
from foldcf.predictor import SurrogateContext, ToySurrogate
from foldcf.seqcore import ProteinRecord, encode_onehot

LENGTHS = (32, 128, 384, 1024)


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(repeat):
    impls = {"python": kernels.python_impl}
    if kernels.compiled_impl is not None:
        impls["cython"] = kernels.compiled_impl
    else:
        print("compiled extension not built; timing the Python kernel only")
    rng = np.random.default_rng(0)
    print(f"{'length':>7} {'backend':>8} {'forward':>12} {'backward':>12}")
    for length in LENGTHS:
        angles = rng.normal(size=(2, length))
        g = rng.normal(size=(3, length))
        ref = None
        times = {}
        for name, impl in impls.items():
            coords, frames = impl.chain_forward(angles)
            grad = impl.chain_backward(frames, g)
            if ref is None:
                ref = (coords, grad)
            else:
                assert np.allclose(coords, ref[0], atol=1e-10) and np.allclose(grad, ref[1], atol=1e-10)
            fwd = best_of(lambda: impl.chain_forward(angles), repeat)
            bwd = best_of(lambda: impl.chain_backward(frames, g), repeat)
            times[name] = fwd + bwd
            print(f"{length:>7} {name:>8} {fwd * 1e6:>10.1f}us {bwd * 1e6:>10.1f}us")
        if len(times) == 2:
            print(f"{'':>7} speedup  {times['python'] / times['cython']:>10.1f}x")


def bench_step(repeat):
    rng = np.random.default_rng(1)
    rec = ProteinRecord("bench", tuple(int(x) for x in rng.integers(0, 20, 384)))
    model, ctx = ToySurrogate(), SurrogateContext()
    P = encode_onehot(rec)
    M = ctx.refresh(P)
    S = model.predict(P, M).coords
    state = init_state("deletion-necessary", P)
    cfg = CfConfig()

    def step():
        tape = gk.Tape()
        x = tape.param(state.logits)
        loss, _, _ = build_loss("deletion-necessary", S, P.matrix, x, model, M, cfg)
        gk.backward(loss)

    t = best_of(step, repeat)
    print(f"optimisation step, l=384, backend={kernels.BACKEND}: {t * 1e3:.2f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_step(args.repeat)


if __name__ == "__main__":
    main()
