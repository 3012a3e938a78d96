"""Command-line front end: explain, evaluate, exchangeability, plot.

Exit codes: 0 success, 1 user or data error, 2 internal error. The default
output directory is taken from ``FOLDCF_OUT`` when ``--out`` is not given.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .cfengine import CfConfig, ExplanationReport, ObjectiveMode, TraceRecord, explain_record
from .evalkit import (baseline_evolutionary, baseline_random, evaluate, record_dict,
                      summaries_csv, summarize)
from .exchange import (MatrixFormatError, accumulate_stats, correlate_with_indicator,
                       exchangeability, load_indicator, load_paper_fixture, write_matrix_csv,
                       write_totals_csv)
from .predictor import ExternalPredictor, ExternalPredictorError, SurrogateContext, ToySurrogate
from .seqcore import ParseError, parse_fasta, parse_msa

OUT_ENV = "FOLDCF_OUT"
MSA_SUFFIXES = (".msa", ".aln", ".txt")
BASELINE_FRACTION = {"PN": 0.33, "PS": 0.50}

log = logging.getLogger("foldcf")


class UserError(Exception):
    """Bad input or missing data; exit code 1."""


# -- shared helpers ----------------------------------------------------------

def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or "foldcf_out"
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UserError(f"output directory {out} is not writable")
    return path


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc.strerror}") from None


def _find_msa(msa_dir, record_id: str):
    if not msa_dir:
        return None
    for suffix in MSA_SUFFIXES:
        p = Path(msa_dir) / f"{record_id}{suffix}"
        if p.exists():
            return p
    return None


def load_records(fasta, msa_dir=None, min_length: int = 0) -> list:
    try:
        records = parse_fasta(_read_text(fasta))
    except ParseError as exc:
        raise UserError(f"{fasta}: {exc}") from None
    out = []
    for rec in records:
        if len(rec) < min_length:
            log.info("skipping %s: length %d < %d", rec.id, len(rec), min_length)
            continue
        path = _find_msa(msa_dir, rec.id)
        if path is not None:
            try:
                rec = rec.with_msa(parse_msa(_read_text(path), rec))
            except ParseError as exc:
                raise UserError(f"{path}: {exc}") from None
        out.append(rec)
    return out


def make_predictor(args):
    if args.predictor == "surrogate":
        return ToySurrogate(seed=args.seed)
    if not args.external_command:
        raise UserError("--predictor external needs --external-command")
    return ExternalPredictor(args.external_command, timeout=args.timeout,
                             workdir=str(Path(args.workdir or "external_predictions")))


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _safe_name(record_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in record_id)


# -- explain -----------------------------------------------------------------

def _cf_config(args) -> CfConfig:
    kw = {}
    for name in ("alpha", "lam", "negative_slope", "steps_per_phase", "phases", "lr",
                 "binarize_threshold", "chunk_len"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    try:
        return CfConfig(seed=args.seed, **kw)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid optimiser setting: {exc}") from None


def _explain_job(job: tuple) -> tuple:
    """Run one protein; logs go to ``logs/<id>.log``. Returns (id, ok, message)."""
    record, mode, cfg, seed, out = job
    out = Path(out)
    name = _safe_name(record.id)
    logger = logging.getLogger(f"foldcf.job.{name}")
    logger.propagate = False
    logger.setLevel(logging.INFO)
    handler = logging.FileHandler(out / "logs" / f"{name}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logger.handlers[:] = [handler]
    try:
        logger.info("record %s length %d mode %s", record.id, len(record), mode)
        predictor = ToySurrogate(seed=seed)
        report = explain_record(record, predictor, SurrogateContext(), mode, cfg)
        _write(out / f"{name}.json", report.to_json())
        _write(out / f"{name}.trace.csv", report.trace_csv())
        logger.info("done: size %d, final TM %.6f, feasible %s", report.explanation_size,
                    report.final_tm, report.feasible)
        return record.id, True, ""
    except Exception as exc:  # record the failure next to the outputs
        logger.error("failed: %s\n%s", exc, traceback.format_exc())
        partial = {"protein_id": record.id, "mode": ObjectiveMode(mode).value,
                   "length": len(record), "complete": False, "error": str(exc)}
        _write(out / f"{name}.json", json.dumps(partial, indent=2, sort_keys=True) + "\n")
        return record.id, False, str(exc)
    finally:
        handler.close()
        logger.handlers[:] = []


def cmd_explain(args) -> int:
    if args.predictor == "external":
        raise UserError("external predictor is forward-only; explain needs the "
                        "differentiable surrogate")
    mode = ObjectiveMode(args.mode)
    cfg = _cf_config(args)
    out = _out_dir(args)
    (out / "logs").mkdir(exist_ok=True)
    records = load_records(args.fasta, args.msa_dir, args.min_length)
    if not records:
        raise UserError("no records to explain")
    jobs = [(r, mode.value, cfg, args.seed, str(out)) for r in records]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_explain_job, jobs))
    else:
        results = [_explain_job(j) for j in jobs]
    failed = [(rid, msg) for rid, ok, msg in results if not ok]
    for rid, msg in failed:
        print(f"error: {rid}: {msg}", file=sys.stderr)
    print(f"explained {len(results) - len(failed)}/{len(results)} record(s) into {out}")
    return 1 if failed else 0


# -- evaluate ----------------------------------------------------------------

def _load_report(path: Path) -> ExplanationReport:
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read report {path}: {exc}") from None
    if not data.get("complete", True) or "explanation" not in data:
        raise UserError(f"report {path} is incomplete")
    return ExplanationReport.from_dict(data)


def cmd_evaluate(args) -> int:
    predictor = make_predictor(args)
    context = SurrogateContext()
    records = load_records(args.fasta, args.msa_dir, args.min_length)
    if not records:
        raise UserError("no records to evaluate")
    out = _out_dir(args)
    criteria = ["PN", "PS"] if args.criterion == "both" else [args.criterion.upper()]
    methods = list(args.baseline or [])
    if args.reports:
        methods.insert(0, "ours")
    if not methods:
        raise UserError("nothing to evaluate: give --reports and/or --baseline")

    reports = {}
    if args.reports:
        for rec in records:
            path = Path(args.reports) / f"{_safe_name(rec.id)}.json"
            if not path.exists():
                raise UserError(f"missing report for {rec.id}: {path}")
            reports[rec.id] = _load_report(path)

    summaries, rows = [], []
    for criterion in criteria:
        fraction = args.fraction if args.fraction is not None else BASELINE_FRACTION[criterion]
        for method in methods:
            done = []
            for rec in records:
                try:
                    if method == "ours":
                        expl = reports[rec.id].positions
                    elif method == "random":
                        expl = baseline_random(rec, fraction, args.seed)
                    else:
                        expl = baseline_evolutionary(rec, fraction)
                    _, (row,) = evaluate([rec], [expl], predictor, context, criterion, method)
                except (ValueError, ExternalPredictorError) as exc:
                    rows.append({"protein_id": rec.id, "method": method, "criterion": criterion,
                                 "error": str(exc)})
                    continue
                done.append(row)
                rows.append(dict(record_dict(row), criterion=criterion))
            summaries.append(summarize(done, criterion, method))

    _write(out / "summary.csv", summaries_csv(summaries))
    _write(out / "per_protein.json", json.dumps(rows, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(summaries_csv(summaries))
    return 1 if any(r.get("error") for r in rows) else 0


# -- exchangeability ---------------------------------------------------------

def _parse_indicator_arg(spec: str) -> tuple:
    path, _, kind = spec.partition(":")
    kind = kind or "distance"
    if kind not in ("distance", "exchangeability"):
        raise UserError(f"indicator kind must be distance or exchangeability, got {kind!r}")
    return path, kind


def cmd_exchangeability(args) -> int:
    if args.fixture:
        stats = load_paper_fixture()
    elif args.reports:
        paths = sorted(Path(args.reports).glob("*.json"))
        reports = [_load_report(p) for p in paths]
        if not reports:
            raise UserError(f"no reports in {args.reports}")
        if not args.fasta:
            raise UserError("--reports needs --fasta for residue totals")
        records = load_records(args.fasta)
        stats = {}
        for mode, key in (("substitution-conservative", "conservative"),
                          ("substitution-radical", "radical")):
            chosen = [r for r in reports if ObjectiveMode(r.mode).value == mode]
            if chosen:
                try:
                    stats[key] = accumulate_stats(chosen, records)
                except ValueError as exc:
                    raise UserError(str(exc)) from None
        if not stats:
            raise UserError("no substitution-mode reports found")
    else:
        raise UserError("give --fixture paper or --reports DIR")

    indicators = []
    for spec in args.indicator or []:
        path, kind = _parse_indicator_arg(spec)
        try:
            indicators.append(load_indicator(_read_text(path), Path(path).stem, kind))
        except MatrixFormatError as exc:
            raise UserError(f"{path}: {exc}") from None

    out = _out_dir(args)
    corr_rows = []
    for key, st in sorted(stats.items()):
        _write(out / f"{key}_counts.csv", write_matrix_csv(st.counts, integer=True))
        _write(out / "totals.csv", write_totals_csv(st.totals))
        ex = exchangeability(st, key)
        _write(out / f"{key}_exchangeability.csv", write_matrix_csv(ex.values))
        for ind in indicators:
            try:
                r = correlate_with_indicator(ex, ind, inverse=args.inverse, pairs=args.pairs)
            except ValueError as exc:
                raise UserError(f"{ind.name}: {exc}") from None
            corr_rows.append([key, ind.name, ind.kind, args.inverse, args.pairs, repr(r)])
    if indicators:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["exchangeability", "indicator", "kind", "inverse", "pairs", "pearson_r"])
        w.writerows(corr_rows)
        _write(out / "correlations.csv", buf.getvalue())
        sys.stdout.write(buf.getvalue())
    print(f"wrote exchangeability tables to {out}")
    return 0


# -- plot --------------------------------------------------------------------

def read_trace_csv(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    try:
        return [TraceRecord(int(r["step"]), int(r["phase"]), float(r["loss"]), float(r["tm"]),
                            float(r["l1"])) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise UserError(f"malformed trace CSV: {exc}") from None


def _polyline(xs, ys, x0, y0, w, h, lo, hi, colour) -> str:
    span = hi - lo if hi > lo else 1.0
    xmax = max(xs[-1], 1)
    pts = " ".join(f"{x0 + w * x / xmax:.2f},{y0 + h - h * (y - lo) / span:.2f}"
                   for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>'


def render_svg(trace: list, title: str = "") -> str:
    """Three stacked line charts (loss, TM, L1 against step) with phase boundaries."""
    if not trace:
        raise UserError("trace is empty")
    steps = [t.step for t in trace]
    boundaries = [trace[i].step for i in range(1, len(trace)) if trace[i].phase != trace[i - 1].phase]
    W, H, pad, panel = 640, 600, 50, 160
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
             '<rect width="100%" height="100%" fill="white"/>']
    if title:
        parts.append(f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-size="13">'
                     f'{_escape(title)}</text>')
    series = [("loss", [t.loss for t in trace], "#1f77b4"),
              ("TM", [t.tm for t in trace], "#d62728"),
              ("L1", [t.l1 for t in trace], "#2ca02c")]
    w = W - 2 * pad
    xmax = max(steps[-1], 1)
    for k, (name, ys, colour) in enumerate(series):
        y0 = 30 + k * (panel + 25)
        lo, hi = min(ys), max(ys)
        parts.append(f'<g class="panel" id="panel-{name}">')
        parts.append(f'<rect x="{pad}" y="{y0}" width="{w}" height="{panel}" fill="none" stroke="#444"/>')
        parts.append(f'<text x="{pad - 5}" y="{y0 + 10}" text-anchor="end">{hi:.3g}</text>')
        parts.append(f'<text x="{pad - 5}" y="{y0 + panel}" text-anchor="end">{lo:.3g}</text>')
        parts.append(f'<text x="{W - pad + 5}" y="{y0 + panel / 2:.0f}">{name}</text>')
        if name == "TM" and lo <= 0.5 <= hi and hi > lo:
            yy = y0 + panel - panel * (0.5 - lo) / (hi - lo)
            parts.append(f'<line class="tm-threshold" x1="{pad}" x2="{pad + w}" y1="{yy:.2f}" '
                         f'y2="{yy:.2f}" stroke="#999" stroke-dasharray="2,2"/>')
        for b in boundaries:
            x = pad + w * b / xmax
            parts.append(f'<line class="phase-boundary" x1="{x:.2f}" x2="{x:.2f}" y1="{y0}" '
                         f'y2="{y0 + panel}" stroke="#888" stroke-dasharray="4,3"/>')
        parts.append(_polyline(steps, ys, pad, y0, w, panel, lo, hi, colour))
        parts.append("</g>")
    parts.append(f'<text x="{W / 2:.0f}" y="{H - 8}" text-anchor="middle">step</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_plot(args) -> int:
    out = Path(args.output) if args.output else None
    for path in args.trace:
        trace = read_trace_csv(_read_text(path))
        if not trace:
            raise UserError(f"{path}: trace is empty")
        svg = render_svg(trace, title=Path(path).name)
        target = out if (out and len(args.trace) == 1) else Path(path).with_suffix(".svg")
        _write(target, svg)
        print(f"wrote {target}")
    return 0


# -- argument parsing --------------------------------------------------------

def _add_predictor_args(p) -> None:
    p.add_argument("--predictor", choices=["surrogate", "external"], default="surrogate")
    p.add_argument("--seed", type=int, default=42, help="surrogate / baseline seed")
    p.add_argument("--external-command", help="command template; {workdir} is substituted")
    p.add_argument("--timeout", type=float, default=3600.0)
    p.add_argument("--workdir", help="scratch directory for the external predictor")


def _add_input_args(p) -> None:
    p.add_argument("--fasta", required=True)
    p.add_argument("--msa-dir", help="directory with <id>.msa aligned-row files")
    p.add_argument("--min-length", type=int, default=0, help="skip shorter records")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./foldcf_out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foldcf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"foldcf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="learn counterfactual explanations")
    p.add_argument("--mode", required=True, choices=[m.value for m in ObjectiveMode])
    _add_input_args(p)
    _add_predictor_args(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--negative-slope", dest="negative_slope", type=float)
    p.add_argument("--steps-per-phase", dest="steps_per_phase", type=int)
    p.add_argument("--phases", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--binarize-threshold", dest="binarize_threshold", type=float)
    p.add_argument("--chunk-len", dest="chunk_len", type=int)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="PN / PS scores of explanations and baselines")
    _add_input_args(p)
    _add_predictor_args(p)
    p.add_argument("--reports", help="directory of explain reports")
    p.add_argument("--criterion", choices=["PN", "PS", "both"], default="both")
    p.add_argument("--baseline", action="append", choices=["random", "evolutionary"])
    p.add_argument("--fraction", type=float, help="baseline size (default 0.33 PN, 0.50 PS)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("exchangeability", help="amino-acid exchangeability and correlations")
    p.add_argument("--fixture", choices=["paper"], help="use the shipped aggregate statistics")
    p.add_argument("--reports", help="directory of substitution-mode reports")
    p.add_argument("--fasta", help="records the reports came from (for totals)")
    p.add_argument("--indicator", action="append", metavar="PATH[:KIND]",
                   help="20x20 CSV; KIND is distance (default) or exchangeability")
    p.add_argument("--inverse", choices=["reciprocal", "negate"], default="reciprocal")
    p.add_argument("--pairs", choices=["ordered", "symmetric"], default="ordered")
    p.add_argument("--out")
    p.set_defaults(func=cmd_exchangeability)

    p = sub.add_parser("plot", help="render trace CSVs as SVG learning curves")
    p.add_argument("trace", nargs="+")
    p.add_argument("-o", "--output", help="SVG path (single trace only)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; those are user errors
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
