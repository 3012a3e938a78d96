"""Protein records, FASTA/MSA ingestion and sequence embeddings.

Embeddings are 21 x l matrices: one row per standard amino acid plus a final
row for the Unknown residue, one column per residue.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

AMINO_ACIDS = "ARNDCQEGHILKMFPSTWYV"
UNKNOWN = 20
N_TYPES = 21
UNKNOWN_LETTER = "X"
GAP = "-"

_INDEX = {aa: i for i, aa in enumerate(AMINO_ACIDS)}
_INDEX[UNKNOWN_LETTER] = UNKNOWN


class ParseError(ValueError):
    """Malformed FASTA or MSA input. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def aa_index(letter: str) -> int:
    try:
        return _INDEX[letter]
    except KeyError:
        raise ValueError(f"illegal residue letter {letter!r}") from None


def aa_letter(index: int) -> str:
    if index == UNKNOWN:
        return UNKNOWN_LETTER
    return AMINO_ACIDS[index]


@dataclass(frozen=True)
class ProteinRecord:
    id: str
    residues: tuple  # residue indices, 0..20
    msa: Optional[tuple] = None  # rows of residue indices, each of length l

    def __post_init__(self):
        if len(self.residues) < 1:
            raise ValueError(f"record {self.id!r} has an empty sequence")
        if self.msa is not None:
            for k, row in enumerate(self.msa):
                if len(row) != len(self.residues):
                    raise ValueError(
                        f"record {self.id!r}: MSA row {k} has length {len(row)}, "
                        f"expected {len(self.residues)}")

    @classmethod
    def from_sequence(cls, id: str, sequence: str, msa: Optional[Sequence[str]] = None):
        residues = tuple(aa_index(c) for c in sequence)
        rows = None
        if msa is not None:
            rows = tuple(tuple(UNKNOWN if c == GAP else aa_index(c) for c in r) for r in msa)
        return cls(id, residues, rows)

    def __len__(self) -> int:
        return len(self.residues)

    @property
    def sequence(self) -> str:
        return "".join(aa_letter(i) for i in self.residues)

    def with_msa(self, msa: "MsaEmbedding") -> "ProteinRecord":
        rows = tuple(tuple(int(i) for i in np.argmax(row, axis=0)) for row in msa.tensor)
        return ProteinRecord(self.id, self.residues, rows)


@dataclass(frozen=True)
class SequenceEmbedding:
    matrix: np.ndarray
    form: str = "onehot"  # or "continuous"

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != N_TYPES:
            raise ValueError(f"embedding must be 21 x l, got {m.shape}")
        if self.form not in ("onehot", "continuous"):
            raise ValueError(f"unknown embedding form {self.form!r}")
        m.setflags(write=False)

    @property
    def length(self) -> int:
        return self.matrix.shape[1]

    def argmax(self, standard_only: bool = False) -> np.ndarray:
        """Per-column argmax; ties go to the lowest row."""
        rows = self.matrix[:UNKNOWN] if standard_only else self.matrix
        return np.argmax(rows, axis=0)

    def to_sequence(self) -> str:
        return "".join(aa_letter(int(i)) for i in self.argmax())


@dataclass(frozen=True)
class MsaEmbedding:
    tensor: np.ndarray  # m x 21 x l, one-hot over axis 1

    def __post_init__(self):
        if self.tensor.ndim != 3 or self.tensor.shape[1] != N_TYPES:
            raise ValueError(f"MSA tensor must be m x 21 x l, got {self.tensor.shape}")
        self.tensor.setflags(write=False)

    @property
    def m(self) -> int:
        return self.tensor.shape[0]

    def profile(self) -> np.ndarray:
        """Column-wise residue frequencies (21 x l)."""
        return self.tensor.mean(axis=0)


def onehot_indices(indices: Sequence[int]) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.intp)
    out = np.zeros((N_TYPES, idx.size))
    out[idx, np.arange(idx.size)] = 1.0
    return out


def unknown_matrix(length: int) -> np.ndarray:
    u = np.zeros((N_TYPES, length))
    u[UNKNOWN] = 1.0
    return u


def encode_onehot(record: ProteinRecord) -> SequenceEmbedding:
    return SequenceEmbedding(onehot_indices(record.residues), "onehot")


def parse_fasta(text: str) -> list:
    """Parse FASTA text into records, in file order.

    ``X`` is accepted as Unknown; every other non-standard letter is an error.
    """
    records = []
    seen = set()
    header = None
    header_line = 0
    chunks: list = []

    def flush():
        if header is None:
            return
        seq = "".join(chunks)
        if not seq:
            raise ParseError(f"empty sequence for {header!r}", header_line)
        records.append(ProteinRecord.from_sequence(header, seq))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            name = line[1:].split()[0] if line[1:].strip() else ""
            if not name:
                raise ParseError("malformed header (missing id)", lineno)
            if name in seen:
                raise ParseError(f"duplicate id {name!r}", lineno)
            seen.add(name)
            header, header_line, chunks = name, lineno, []
            continue
        if header is None:
            raise ParseError("sequence data before first header", lineno)
        letters = line.upper()
        for c in letters:
            if c not in _INDEX:
                raise ParseError(f"illegal residue letter {c!r}", lineno)
        chunks.append(letters)
    flush()
    return records


def format_fasta(records: Sequence[ProteinRecord], width: int = 60) -> str:
    out = []
    for r in records:
        out.append(f">{r.id}")
        seq = r.sequence
        out.extend(seq[i:i + width] for i in range(0, len(seq), width))
    return "\n".join(out) + "\n"


def parse_msa(text: str, query: ProteinRecord) -> MsaEmbedding:
    """Parse plain aligned rows (one per line, '-' = gap) against ``query``.

    The first row must be the query itself. Empty text gives the query alone.
    """
    length = len(query)
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if len(line) != length:
            raise ParseError(f"MSA row has length {len(line)}, expected {length}", lineno)
        try:
            row = tuple(UNKNOWN if c == GAP else aa_index(c) for c in line.upper())
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not rows and row != query.residues:
            raise ParseError("first MSA row must equal the query sequence", lineno)
        rows.append(row)
    if not rows:
        rows.append(query.residues)
    return MsaEmbedding(np.stack([onehot_indices(r) for r in rows]))


def msa_embedding(record: ProteinRecord) -> MsaEmbedding:
    """MSA tensor of a record: its stored rows, or the query alone."""
    rows = list(record.msa) if record.msa else [record.residues]
    return MsaEmbedding(np.stack([onehot_indices(r) for r in rows]))


def apply_deletion_mask(P: SequenceEmbedding, gate) -> SequenceEmbedding:
    """Blend each column toward Unknown by its gate value."""
    g = np.asarray(gate, dtype=float)
    if g.shape != (P.length,):
        raise ValueError(f"gate must have length {P.length}, got shape {g.shape}")
    if np.any(g < 0) or np.any(g > 1) or not np.all(np.isfinite(g)):
        raise ValueError("gate entries must lie in [0, 1]")
    out = P.matrix * (1.0 - g) + unknown_matrix(P.length) * g
    return SequenceEmbedding(out, "continuous")


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split branches to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relax_substitution(logits) -> SequenceEmbedding:
    """Entrywise sigmoid of substitution logits (not column-normalized)."""
    z = np.asarray(logits, dtype=float)
    if z.ndim != 2 or z.shape[0] != N_TYPES:
        raise ValueError(f"logits must be 21 x l, got {z.shape}")
    return SequenceEmbedding(sigmoid(z), "continuous")


def chunk_record(record: ProteinRecord, chunk_len: int = 384) -> list:
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    n = len(record)
    if n <= chunk_len:
        return [record]
    chunks = []
    for k, start in enumerate(range(0, n, chunk_len)):
        stop = min(start + chunk_len, n)
        msa = None
        if record.msa is not None:
            msa = tuple(tuple(row[start:stop]) for row in record.msa)
        chunks.append(ProteinRecord(f"{record.id}/{k}", record.residues[start:stop], msa))
    return chunks
