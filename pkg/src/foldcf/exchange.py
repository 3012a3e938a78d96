"""Amino-acid exchangeability from substitution explanations.

Conservative substitutions (fold kept) count as evidence that X -> Y is
safe: exchangeability = |X -> Y| / |X|. Radical substitutions (fold broken)
count against it: exchangeability = |X| / |X -> Y|, absent when the count is
zero. Matrices are indexed in the order ``AMINO_ACIDS``; the diagonal is
never used.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .cfengine import ExplanationReport, ObjectiveMode
from .seqcore import AMINO_ACIDS, UNKNOWN, ProteinRecord

N = len(AMINO_ACIDS)
_IDX = {a: i for i, a in enumerate(AMINO_ACIDS)}
DISTANCE_EPS = 1e-6


class MatrixFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SubstitutionStats:
    counts: np.ndarray  # 20 x 20 ints, (from, to)
    totals: np.ndarray  # 20 ints

    def __post_init__(self):
        if self.counts.shape != (N, N) or self.totals.shape != (N,):
            raise ValueError("counts must be 20 x 20 and totals length 20")
        if np.any(self.counts < 0) or np.any(self.totals < 0):
            raise ValueError("counts and totals must be non-negative")
        if np.any(np.diag(self.counts) != 0):
            raise ValueError("self-substitutions (diagonal) must be zero")


@dataclass(frozen=True)
class ExchangeabilityMatrix:
    values: np.ndarray  # NaN = absent / diagonal
    mode: str  # "conservative" or "radical"


@dataclass(frozen=True)
class IndicatorMatrix:
    values: np.ndarray
    name: str
    kind: str = "distance"  # or "exchangeability"

    def __post_init__(self):
        if self.kind not in ("distance", "exchangeability"):
            raise ValueError(f"unknown indicator kind {self.kind!r}")


def accumulate_stats(reports: Iterable[ExplanationReport], records: Sequence[ProteinRecord]
                     ) -> SubstitutionStats:
    """Count X -> Y substitutions over reports; totals count residues in ``records``."""
    counts = np.zeros((N, N), dtype=np.int64)
    for rep in reports:
        if ObjectiveMode(rep.mode).is_deletion:
            raise ValueError(f"{rep.protein_id}: deletion-mode report cannot feed "
                             "substitution statistics")
        for _, orig, repl in rep.explanation:
            if orig not in _IDX or repl not in _IDX:
                continue  # Unknown residues carry no exchangeability signal
            counts[_IDX[orig], _IDX[repl]] += 1
    totals = np.zeros(N, dtype=np.int64)
    for rec in records:
        idx = np.asarray(rec.residues)
        totals += np.bincount(idx[idx != UNKNOWN], minlength=N)[:N]
    return SubstitutionStats(counts, totals)


def exchangeability(stats: SubstitutionStats, mode: str) -> ExchangeabilityMatrix:
    mode = mode.lower()
    counts = stats.counts.astype(float)
    totals = stats.totals.astype(float)[:, None]
    bad = (stats.totals == 0) & (stats.counts.sum(axis=1) > 0)
    if np.any(bad):
        letters = [AMINO_ACIDS[i] for i in np.flatnonzero(bad)]
        raise ValueError(f"total count is zero for substituted residue(s) {letters}")
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == "conservative":
            values = np.where(totals > 0, counts / totals, np.nan)
        elif mode == "radical":
            values = np.where(counts > 0, totals / counts, np.nan)
        else:
            raise ValueError("mode must be 'conservative' or 'radical'")
    np.fill_diagonal(values, np.nan)
    return ExchangeabilityMatrix(values, mode)


def pearson_correlation(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.dot(dx, dx))
    sy = np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise ValueError("correlation is undefined for constant input")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def indicator_as_exchangeability(ind: IndicatorMatrix, inverse: str = "reciprocal") -> np.ndarray:
    v = np.asarray(ind.values, dtype=float)
    if ind.kind == "exchangeability":
        return v
    if inverse == "reciprocal":
        return 1.0 / (v + DISTANCE_EPS)
    if inverse == "negate":
        return -v
    raise ValueError("inverse must be 'reciprocal' or 'negate'")


def paired_values(ex: ExchangeabilityMatrix, ind: IndicatorMatrix, inverse: str = "reciprocal",
                  pairs: str = "ordered") -> tuple:
    """Off-diagonal entries defined in both matrices.

    ``pairs="symmetric"`` averages (X, Y) with (Y, X) and keeps each unordered
    pair once; a pair counts only if all four entries are defined.
    """
    a = np.array(ex.values, dtype=float)
    b = indicator_as_exchangeability(ind, inverse)
    if b.shape != (N, N):
        raise ValueError(f"indicator {ind.name!r} must be 20 x 20")
    if pairs == "symmetric":
        a = (a + a.T) / 2.0
        b = (b + b.T) / 2.0
        mask = np.triu(np.ones((N, N), dtype=bool), k=1)
    elif pairs == "ordered":
        mask = ~np.eye(N, dtype=bool)
    else:
        raise ValueError("pairs must be 'ordered' or 'symmetric'")
    mask &= np.isfinite(a) & np.isfinite(b)
    return a[mask], b[mask]


def correlate_with_indicator(ex: ExchangeabilityMatrix, ind: IndicatorMatrix,
                             inverse: str = "reciprocal", pairs: str = "ordered") -> float:
    x, y = paired_values(ex, ind, inverse, pairs)
    if x.size < 3:
        raise ValueError(f"only {x.size} overlapping entries with {ind.name!r}; need 3")
    return pearson_correlation(x, y)


# -- CSV I/O -----------------------------------------------------------------

def _fmt(v, integer: bool) -> str:
    if not np.isfinite(v):
        return ""
    return str(int(v)) if integer else repr(float(v))


def write_matrix_csv(values: np.ndarray, integer: bool = False) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([""] + list(AMINO_ACIDS))
    for a, row in zip(AMINO_ACIDS, values):
        w.writerow([a] + [_fmt(v, integer) for v in row])
    return out.getvalue()


def read_matrix_csv(text: str, name: str = "matrix") -> np.ndarray:
    """20 x 20 matrix with letter headers; empty cells become NaN."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        raise MatrixFormatError(f"{name}: empty file")
    header = [c.strip() for c in rows[0][1:]]
    if header != list(AMINO_ACIDS):
        raise MatrixFormatError(f"{name}: header must list {','.join(AMINO_ACIDS)}")
    body = rows[1:]
    if [r[0].strip() for r in body] != list(AMINO_ACIDS):
        raise MatrixFormatError(f"{name}: first column must list {','.join(AMINO_ACIDS)}")
    values = np.full((N, N), np.nan)
    for i, r in enumerate(body):
        if len(r) != N + 1:
            raise MatrixFormatError(f"{name}: row {AMINO_ACIDS[i]} has {len(r) - 1} cells, expected {N}")
        for j, cell in enumerate(r[1:]):
            cell = cell.strip()
            if not cell:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise MatrixFormatError(
                    f"{name}: cell ({AMINO_ACIDS[i]},{AMINO_ACIDS[j]}) = {cell!r} is not a number"
                ) from None
            if not np.isfinite(v):
                raise MatrixFormatError(
                    f"{name}: cell ({AMINO_ACIDS[i]},{AMINO_ACIDS[j]}) is not finite")
            values[i, j] = v
    return values


def write_totals_csv(totals: np.ndarray) -> str:
    lines = ["amino_acid,count"] + [f"{a},{int(n)}" for a, n in zip(AMINO_ACIDS, totals)]
    return "\n".join(lines) + "\n"


def read_totals_csv(text: str) -> np.ndarray:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if rows and rows[0][0].strip().lower() == "amino_acid":
        rows = rows[1:]
    got = {r[0].strip(): int(r[1]) for r in rows}
    if sorted(got) != sorted(AMINO_ACIDS):
        raise MatrixFormatError("totals must list each standard amino acid once")
    return np.array([got[a] for a in AMINO_ACIDS], dtype=np.int64)


def _counts_from_csv(text: str, name: str) -> np.ndarray:
    v = read_matrix_csv(text, name)
    if np.any(np.isnan(v)) or np.any(v != np.round(v)):
        raise MatrixFormatError(f"{name}: counts must be integers in every cell")
    return v.astype(np.int64)


FIXTURE_FILES = {
    "totals": "paper_totals.csv",
    "conservative": "paper_conservative_counts.csv",
    "radical": "paper_radical_counts.csv",
}


def fixture_text(which: str) -> str:
    return resources.files("foldcf").joinpath("data", FIXTURE_FILES[which]).read_text()


def load_paper_fixture() -> dict:
    """Published aggregate statistics: {"conservative": stats, "radical": stats}."""
    totals = read_totals_csv(fixture_text("totals"))
    return {mode: SubstitutionStats(_counts_from_csv(fixture_text(mode), mode), totals)
            for mode in ("conservative", "radical")}


def load_indicator(text: str, name: str, kind: str = "distance") -> IndicatorMatrix:
    return IndicatorMatrix(read_matrix_csv(text, name), name, kind)
