"""Necessity/sufficiency scoring of explanations and the two baselines.

PN counts proteins whose explanation residues, masked to Unknown, drop the
TM-score to 0.5 or below. PS counts proteins whose explanation residues alone
(everything else masked) keep it above 0.5.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .foldmetrics import tm_score
from .seqcore import (ProteinRecord, SequenceEmbedding, encode_onehot, msa_embedding,
                      unknown_matrix)


@dataclass(frozen=True)
class EvaluationRecord:
    protein_id: str
    method: str
    explanation_size: int
    complexity: float
    tm: float
    pn: int
    ps: int


@dataclass(frozen=True)
class BenchmarkSummary:
    method: str
    criterion: str  # "PN" or "PS"
    n: int
    ave_size: float
    ave_complexity: float
    ave_tm: float
    score: float


def pn_indicator(tm: float) -> int:
    return int(tm <= 0.5)


def ps_indicator(tm: float) -> int:
    return int(tm > 0.5)


def summarize(records: Sequence[EvaluationRecord], criterion: str, method: str = "") -> BenchmarkSummary:
    criterion = criterion.upper()
    if criterion not in ("PN", "PS"):
        raise ValueError("criterion must be PN or PS")
    n = len(records)
    if n == 0:
        return BenchmarkSummary(method, criterion, 0, math.nan, math.nan, math.nan, math.nan)
    key = "pn" if criterion == "PN" else "ps"
    return BenchmarkSummary(
        method=method or records[0].method, criterion=criterion, n=n,
        ave_size=sum(r.explanation_size for r in records) / n,
        ave_complexity=sum(r.complexity for r in records) / n,
        ave_tm=sum(r.tm for r in records) / n,
        score=sum(getattr(r, key) for r in records) / n)


def _check_positions(record: ProteinRecord, positions) -> list:
    pos = sorted(set(int(p) for p in positions))
    bad = [p for p in pos if p < 0 or p >= len(record)]
    if bad:
        raise ValueError(f"{record.id}: explanation position(s) {bad} out of range [0, {len(record)})")
    return pos


def masked_tm(record: ProteinRecord, masked, predictor, context, reference=None) -> float:
    """TM-score after replacing ``masked`` positions with Unknown."""
    P = encode_onehot(record)
    if reference is None:
        M = msa_embedding(record) if record.msa else context.refresh(P)
        reference = predictor.predict(P, M).coords
    m = P.matrix.copy()
    cols = list(masked)
    m[:, cols] = unknown_matrix(len(record))[:, cols]
    hard = SequenceEmbedding(m, "onehot")
    return tm_score(reference, predictor.predict(hard, context.refresh(hard)).coords)


def evaluate(records: Sequence[ProteinRecord], explanations: Sequence[Iterable[int]], predictor,
             context, criterion: str, method: str = "ours") -> tuple:
    """Score explanations under PN (mask them) or PS (mask the rest).

    Returns ``(summary, per-protein EvaluationRecords)``.
    """
    criterion = criterion.upper()
    if len(records) != len(explanations):
        raise ValueError("need exactly one explanation per record")
    rows = []
    for record, expl in zip(records, explanations):
        pos = _check_positions(record, expl)
        masked = pos if criterion == "PN" else sorted(set(range(len(record))) - set(pos))
        tm = masked_tm(record, masked, predictor, context)
        rows.append(EvaluationRecord(record.id, method, len(pos), len(pos) / len(record), tm,
                                     pn_indicator(tm), ps_indicator(tm)))
    return summarize(rows, criterion, method), rows


def evaluate_pn(records, explanations, predictor, context, method: str = "ours"):
    return evaluate(records, explanations, predictor, context, "PN", method)


def evaluate_ps(records, explanations, predictor, context, method: str = "ours"):
    return evaluate(records, explanations, predictor, context, "PS", method)


def _target_size(fraction: float, length: int) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    # round half up, deterministic
    return min(length, int(math.floor(fraction * length + 0.5)))


def baseline_random(record: ProteinRecord, fraction: float, seed: int) -> list:
    k = _target_size(fraction, len(record))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(len(record), size=k, replace=False))


def conservation(record: ProteinRecord) -> np.ndarray:
    """Per position, the number of MSA rows agreeing with the query (query row included)."""
    if not record.msa:
        raise ValueError(f"{record.id}: evolutionary baseline needs an MSA")
    rows = np.asarray(record.msa)
    return (rows == np.asarray(record.residues)[None, :]).sum(axis=0)


def baseline_evolutionary(record: ProteinRecord, fraction: float) -> list:
    """Top positions by conservation; ties go to the lower index."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    score = conservation(record)
    k = _target_size(fraction, len(record))
    order = sorted(range(len(record)), key=lambda i: (-score[i], i))
    return sorted(order[:k])


SUMMARY_FIELDS = ["method", "criterion", "n", "ave_size", "ave_complexity", "ave_tm", "score"]


def summaries_csv(summaries: Sequence[BenchmarkSummary]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for s in summaries:
        d = asdict(s)
        w.writerow([d[k] if not isinstance(d[k], float) else repr(d[k]) for k in SUMMARY_FIELDS])
    return out.getvalue()


def record_dict(r: EvaluationRecord, error: Optional[str] = None) -> dict:
    d = asdict(r)
    d["error"] = error
    return d
