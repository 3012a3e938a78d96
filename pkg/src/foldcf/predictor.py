"""Structure predictors: a differentiable toy surrogate and an external adapter.

A predictor maps a sequence embedding and an MSA embedding to C-alpha
coordinates. Optimisation needs ``predict_var`` (tape-tracked output); the
external adapter is forward-only and only used to score finished
explanations.
"""
from __future__ import annotations

import json
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from . import gradkit as gk
from .foldmetrics import StructurePrediction, read_csv
from .kernels import chain_backward, chain_forward
from .seqcore import (N_TYPES, UNKNOWN, MsaEmbedding, SequenceEmbedding, aa_letter,
                      onehot_indices)


@runtime_checkable
class Predictor(Protocol):
    def predict(self, P: SequenceEmbedding, M: MsaEmbedding) -> StructurePrediction: ...


@runtime_checkable
class ContextProvider(Protocol):
    def refresh(self, P_cf: SequenceEmbedding) -> MsaEmbedding: ...


def chain(angles: gk.Var) -> gk.Var:
    """Tape op: per-residue (bend, twist) angles -> 3 x l coordinates."""
    coords, frames = chain_forward(angles.value)
    return angles.tape.custom(coords, [angles], lambda g: (chain_backward(frames, g),))


def column_softmax(x: gk.Var) -> gk.Var:
    tape = x.tape
    shifted = x - tape.const(np.max(x.value, axis=0, keepdims=True).repeat(x.shape[0], axis=0))
    e = gk.exp(shifted)
    norm = tape.const(np.ones((x.shape[0], 1))) @ gk.reshape(gk.sum(e, axis=0), (1, x.shape[1]))
    return e / norm


class ToySurrogate:
    """Seeded random network that folds a sequence into a unit-bond chain.

    Each embedding column is mixed with the MSA profile column (weight
    ``w_msa``) and sharpened by a column softmax, so a position mostly reads
    its dominant residue type; a partial deletion only matters once it nears
    the argmax switch. Type features are then averaged with half-weight
    neighbours. A two-layer net turns them into bend/twist angles and the
    chain is grown residue by residue, so a change at residue i moves every
    residue after it.
    """

    differentiable = True
    BEND_CENTER, BEND_RANGE = 1.7, 1.2
    TWIST_CENTER, TWIST_RANGE = 0.9, 2.4

    def __init__(self, seed: int = 42, hidden: int = 16, w_msa: float = 0.25,
                 sharpness: float = 8.0):
        if not 0.0 <= w_msa <= 1.0:
            raise ValueError("w_msa must lie in [0, 1]")
        self.seed, self.hidden, self.w_msa = seed, hidden, w_msa
        self.sharpness = sharpness
        rng = np.random.default_rng(seed)
        self.type_embed = rng.normal(size=(N_TYPES, hidden))
        # Unknown reads as the average residue
        self.type_embed[UNKNOWN] = self.type_embed[:UNKNOWN].mean(axis=0)
        self.w1 = rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, hidden))
        self.b1 = rng.normal(scale=0.1, size=hidden)
        self.w2 = rng.normal(scale=1.0 / np.sqrt(hidden), size=(2, hidden))
        self.b2 = rng.normal(scale=0.1, size=2)
        for a in (self.type_embed, self.w1, self.b1, self.w2, self.b2):
            a.setflags(write=False)

    def config(self) -> dict:
        return {"kind": "surrogate", "seed": self.seed, "hidden": self.hidden, "w_msa": self.w_msa,
                "sharpness": self.sharpness}

    @staticmethod
    def _neighbour_mix(length: int) -> np.ndarray:
        k = np.eye(length)
        idx = np.arange(length - 1)
        k[idx, idx + 1] = 0.5
        k[idx + 1, idx] = 0.5
        return k

    def predict_var(self, P: gk.Var, M: MsaEmbedding | None = None) -> gk.Var:
        tape = P.tape
        length = P.shape[1]
        if M is not None and M.m > 0:
            if M.tensor.shape[2] != length:
                raise ValueError(f"MSA length {M.tensor.shape[2]} != sequence length {length}")
            mixed = P * (1.0 - self.w_msa) + tape.const(self.w_msa * M.profile())
        else:
            mixed = P
        if self.sharpness:
            mixed = column_softmax(mixed * self.sharpness)
        feats = tape.const(self.type_embed.T) @ mixed
        feats = feats @ tape.const(self._neighbour_mix(length))
        hidden = gk.tanh(tape.const(self.w1) @ feats + tape.const(np.tile(self.b1[:, None], length)))
        raw = gk.tanh(tape.const(self.w2) @ hidden + tape.const(np.tile(self.b2[:, None], length)))
        center = np.repeat([[self.BEND_CENTER], [self.TWIST_CENTER]], length, axis=1)
        spread = np.repeat([[self.BEND_RANGE], [self.TWIST_RANGE]], length, axis=1)
        angles = raw * tape.const(spread) + tape.const(center)
        return chain(angles)

    def predict(self, P: SequenceEmbedding, M: MsaEmbedding | None = None) -> StructurePrediction:
        tape = gk.Tape()
        return StructurePrediction(self.predict_var(tape.const(P.matrix), M).value)


class SurrogateContext:
    """MSA refresh stand-in: one row, the per-column argmax of the embedding."""

    def refresh(self, P_cf: SequenceEmbedding) -> MsaEmbedding:
        return MsaEmbedding(onehot_indices(P_cf.argmax())[None])


class FixedContext:
    """Always returns the same MSA (no re-alignment)."""

    def __init__(self, msa: MsaEmbedding):
        self.msa = msa

    def refresh(self, P_cf: SequenceEmbedding) -> MsaEmbedding:
        return self.msa


class ExternalPredictorError(RuntimeError):
    def __init__(self, message, returncode=None, stdout="", stderr=""):
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr
        if returncode is not None:
            message = f"{message} (exit code {returncode})"
        if stderr:
            message = f"{message}\n--- stderr ---\n{stderr.strip()}"
        super().__init__(message)


_workdir_locks: dict = {}
_locks_guard = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    with _locks_guard:
        return _workdir_locks.setdefault(str(path.resolve()), threading.Lock())


@dataclass
class ExternalPredictor:
    """Runs an external command per prediction via request/response files.

    ``command`` is a command-line template; ``{workdir}`` is replaced with the
    job directory. The command reads ``request.json`` and writes
    ``response.csv`` (``index,x,y,z``) there.
    """

    command: str
    timeout: float = 3600.0
    workdir: str = "external_predictions"

    differentiable = False

    def config(self) -> dict:
        return {"kind": "external", "command": self.command, "timeout": self.timeout}

    def external_predict(self, P: SequenceEmbedding, workdir, msa: MsaEmbedding | None = None,
                         id: str = "query") -> StructurePrediction:
        work = Path(workdir)
        if P.form != "onehot" and not np.all((P.matrix == 0) | (P.matrix == 1)):
            raise ValueError("external prediction needs a one-hot embedding")
        sequence = P.to_sequence()
        rows = []
        if msa is not None:
            rows = ["".join("-" if i == 20 else aa_letter(int(i)) for i in np.argmax(r, axis=0))
                    for r in msa.tensor]
        with _lock_for(work):
            work.mkdir(parents=True, exist_ok=True)
            response = work / "response.csv"
            if response.exists():
                response.unlink()
            (work / "request.json").write_text(
                json.dumps({"id": id, "sequence": sequence, "msa": rows}, indent=2) + "\n")
            argv = shlex.split(self.command.format(workdir=str(work)))
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as exc:
                raise ExternalPredictorError(
                    f"external predictor timed out after {self.timeout}s",
                    stdout=exc.stdout or "", stderr=exc.stderr or "") from None
            except OSError as exc:
                raise ExternalPredictorError(f"could not run external predictor: {exc}") from None
            if proc.returncode != 0:
                raise ExternalPredictorError("external predictor failed", proc.returncode,
                                             proc.stdout, proc.stderr)
            if not response.exists():
                raise ExternalPredictorError("external predictor wrote no response.csv",
                                             proc.returncode, proc.stdout, proc.stderr)
            try:
                return read_csv(response.read_text(), expected_length=P.length)
            except ValueError as exc:
                raise ExternalPredictorError(f"malformed response: {exc}", proc.returncode,
                                             proc.stdout, proc.stderr) from None

    def predict(self, P: SequenceEmbedding, M: MsaEmbedding | None = None) -> StructurePrediction:
        return self.external_predict(P, self.workdir, M)
