"""Kabsch superposition and TM-score between C-alpha traces.

Structures are 3 x l arrays. Residue i of one structure corresponds to
residue i of the other; there is no sequence re-alignment.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import gradkit as gk

D0_MIN = 0.5
REFINE_ROUNDS = 3
REFINE_CUTOFF = 8.0  # in units of d0
MIN_REFINE_RESIDUES = 4


@dataclass(frozen=True)
class StructurePrediction:
    coords: np.ndarray  # 3 x l

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim != 2 or c.shape[0] != 3 or c.shape[1] < 1:
            raise ValueError(f"coords must be 3 x l with l >= 1, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coords contain non-finite values")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def length(self) -> int:
        return self.coords.shape[1]


class Superposition(NamedTuple):
    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float


def _coords(s) -> np.ndarray:
    return s.coords if isinstance(s, StructurePrediction) else np.asarray(s, dtype=float)


def kabsch(A, B, weights=None) -> Superposition:
    """Rotation ``R`` and translation ``t`` minimising ``|R @ B + t - A|``.

    ``weights`` (0/1 or positive) restricts the fit to a residue subset; the
    reported RMSD is always over all residues.
    """
    a, b = _coords(A), _coords(B)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[1]} vs {b.shape[1]}")
    w = np.ones(a.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    ca = a @ w
    cb = b @ w
    a0 = a - ca[:, None]
    b0 = b - cb[:, None]
    H = (b0 * w) @ a0.T  # 3 x 3 covariance
    if np.allclose(H, 0.0, atol=1e-15):
        R = np.eye(3)
    else:
        U, _, Vt = np.linalg.svd(H)
        d = np.sign(np.linalg.det(Vt.T @ U.T))
        if d == 0:
            d = 1.0
        R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = ca - R @ cb
    diff = R @ b + t[:, None] - a
    rmsd = float(np.sqrt(np.mean(np.sum(diff * diff, axis=0))))
    return Superposition(R, t, rmsd)


def kabsch_superpose(A, B):
    """(rotation, translation, rmsd) placing ``B`` onto ``A``."""
    return tuple(kabsch(A, B))


def d0(length: int) -> float:
    return max(1.24 * np.cbrt(length - 15.0) - 1.8, D0_MIN)


def _tm_terms(a, b, R, t, scale):
    diff = R @ b + t[:, None] - a
    dist2 = np.sum(diff * diff, axis=0)
    return 1.0 / (1.0 + dist2 / (scale * scale)), np.sqrt(dist2)


def superpose_for_tm(S, S_star) -> Superposition:
    """The superposition the TM-score is evaluated at.

    Fit on all residues, then up to three rounds re-fitting on residues
    closer than 8 * d0; stop when fewer than 4 qualify. The candidate with
    the highest TM-score is kept.
    """
    a, b = _coords(S), _coords(S_star)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[1]} vs {b.shape[1]}")
    scale = d0(a.shape[1])
    best = kabsch(a, b)
    terms, dist = _tm_terms(a, b, best.rotation, best.translation, scale)
    best_tm = terms.mean()
    for _ in range(REFINE_ROUNDS):
        keep = dist < REFINE_CUTOFF * scale
        if keep.sum() < MIN_REFINE_RESIDUES:
            break
        cand = kabsch(a, b, keep)
        terms, dist = _tm_terms(a, b, cand.rotation, cand.translation, scale)
        if terms.mean() > best_tm:
            best, best_tm = cand, terms.mean()
    return best


def tm_score_at(S, S_star, rotation, translation) -> float:
    """TM-score with a fixed superposition of ``S_star`` onto ``S``."""
    a, b = _coords(S), _coords(S_star)
    terms, _ = _tm_terms(a, b, np.asarray(rotation), np.asarray(translation), d0(a.shape[1]))
    return float(terms.mean())


def tm_score(S, S_star) -> float:
    """TM-score in (0, 1]; ``S`` is the reference."""
    sup = superpose_for_tm(S, S_star)
    return tm_score_at(S, S_star, sup.rotation, sup.translation)


def tm_score_differentiable(S, S_star: gk.Var, superposition: Superposition | None = None) -> gk.Var:
    """TM-score as a tape node; gradients reach ``S_star`` only.

    The superposition is recomputed from current values (unless given) and
    held constant during the backward pass.
    """
    a = _coords(S)
    if S_star.shape != a.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {S_star.shape}")
    sup = superposition or superpose_for_tm(a, S_star.value)
    tape = S_star.tape
    l = a.shape[1]
    scale = d0(l)
    moved = tape.const(sup.rotation) @ S_star
    moved = moved + tape.const(np.repeat(sup.translation[:, None], l, axis=1) - a)
    dist2 = gk.sum(moved * moved, axis=0)
    terms = 1.0 / (dist2 * (1.0 / (scale * scale)) + 1.0)
    return gk.mean(terms)


# -- structure I/O ---------------------------------------------------------

def write_csv(structure: StructurePrediction) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["index", "x", "y", "z"])
    for i, (x, y, z) in enumerate(structure.coords.T):
        w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])
    return out.getvalue()


def read_csv(text: str, expected_length: int | None = None) -> StructurePrediction:
    """Parse ``index,x,y,z`` rows; indices must be 0-based and contiguous."""
    rows = list(csv.reader(io.StringIO(text)))
    if rows and rows[0] and rows[0][0].strip().lower() == "index":
        rows = rows[1:]
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError("structure CSV has no residue rows")
    coords = []
    for k, r in enumerate(rows):
        if len(r) != 4:
            raise ValueError(f"row {k}: expected 4 columns, got {len(r)}")
        try:
            idx = int(r[0])
            xyz = [float(c) for c in r[1:]]
        except ValueError as exc:
            raise ValueError(f"row {k}: {exc}") from None
        if idx != k:
            raise ValueError(f"row {k}: index {idx} breaks 0-based contiguous order")
        coords.append(xyz)
    if expected_length is not None and len(coords) != expected_length:
        raise ValueError(f"length mismatch: structure has {len(coords)} residues, "
                         f"expected {expected_length}")
    return StructurePrediction(np.array(coords).T)


_THREE_LETTER = {
    "A": "ALA", "R": "ARG", "N": "ASN", "D": "ASP", "C": "CYS", "Q": "GLN", "E": "GLU",
    "G": "GLY", "H": "HIS", "I": "ILE", "L": "LEU", "K": "LYS", "M": "MET", "F": "PHE",
    "P": "PRO", "S": "SER", "T": "THR", "W": "TRP", "Y": "TYR", "V": "VAL", "X": "UNK",
}


def write_pdb(structure: StructurePrediction, sequence: str | None = None, chain: str = "A") -> str:
    """CA-only PDB text for viewing in standard molecular viewers."""
    lines = []
    for i, (x, y, z) in enumerate(structure.coords.T):
        res = _THREE_LETTER.get(sequence[i], "UNK") if sequence else "UNK"
        lines.append(
            f"ATOM  {i + 1:5d}  CA  {res:3s} {chain}{i + 1:4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}           C")
    lines.append("END")
    return "\n".join(lines) + "\n"
