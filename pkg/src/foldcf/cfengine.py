"""Counterfactual optimisation: deletion (necessary/sufficient) and
substitution (radical/conservative) explanations.

Each mode relaxes a discrete search into a hinge-plus-L1 objective over
sigmoid-squashed logits, optimises it with Adam in phases separated by
context (MSA) refreshes, then binarises the result and re-checks it with one
hard forward pass.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import gradkit as gk
from .foldmetrics import tm_score, tm_score_differentiable
from .seqcore import (N_TYPES, UNKNOWN, ProteinRecord, SequenceEmbedding, aa_letter,
                      chunk_record, encode_onehot, msa_embedding, onehot_indices,
                      sigmoid, unknown_matrix)

SCHEMA_VERSION = 1


class ObjectiveMode(str, Enum):
    DELETION_NECESSARY = "deletion-necessary"
    DELETION_SUFFICIENT = "deletion-sufficient"
    SUBSTITUTION_RADICAL = "substitution-radical"
    SUBSTITUTION_CONSERVATIVE = "substitution-conservative"

    @property
    def is_deletion(self) -> bool:
        return self in (ObjectiveMode.DELETION_NECESSARY, ObjectiveMode.DELETION_SUFFICIENT)

    @property
    def flips_fold(self) -> bool:
        """True for modes that must push the TM-score to 0.5 or below."""
        return self in (ObjectiveMode.DELETION_NECESSARY, ObjectiveMode.SUBSTITUTION_RADICAL)


DEFAULT_LAMBDA = {
    ObjectiveMode.DELETION_NECESSARY: 1e-5,
    ObjectiveMode.DELETION_SUFFICIENT: 2e-3,
    ObjectiveMode.SUBSTITUTION_RADICAL: 1e-2,
    ObjectiveMode.SUBSTITUTION_CONSERVATIVE: 1e-4,
}


@dataclass(frozen=True)
class CfConfig:
    alpha: float = 0.2
    lam: Optional[float] = None  # None -> per-mode default
    negative_slope: float = 0.1
    steps_per_phase: int = 100
    phases: int = 3
    lr: float = 0.01
    binarize_threshold: float = 0.5
    chunk_len: int = 384
    seed: int = 0
    init_deletion_logit: float = -4.0
    init_substitution_logit: float = 2.2

    def __post_init__(self):
        if not 0.0 <= self.alpha < 0.5:
            raise ValueError("alpha must lie in [0, 0.5)")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.steps_per_phase < 0:
            raise ValueError("steps_per_phase must be >= 0")
        if self.phases < 1:
            raise ValueError("phases must be >= 1")
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")

    def lambda_for(self, mode: ObjectiveMode) -> float:
        return DEFAULT_LAMBDA[ObjectiveMode(mode)] if self.lam is None else self.lam

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PerturbationState:
    mode: ObjectiveMode
    delta_logits: Optional[np.ndarray] = None
    sub_logits: Optional[np.ndarray] = None
    adam: gk.AdamState = field(default_factory=gk.AdamState)

    def __post_init__(self):
        have_delta = self.delta_logits is not None
        if have_delta == (self.sub_logits is not None):
            raise ValueError("exactly one of delta_logits / sub_logits must be set")
        if have_delta != ObjectiveMode(self.mode).is_deletion:
            raise ValueError(f"parameters do not match mode {self.mode}")

    @property
    def logits(self) -> np.ndarray:
        return self.delta_logits if self.delta_logits is not None else self.sub_logits


# -- objectives --------------------------------------------------------------

def hinge_objective(tm: gk.Var, l1: gk.Var, mode: ObjectiveMode, cfg: CfConfig) -> gk.Var:
    """Combine a TM-score node and an L1 node into the mode's loss."""
    mode = ObjectiveMode(mode)
    lam = cfg.lambda_for(mode)
    if mode.flips_fold:
        return gk.leaky_relu(tm - (0.5 - cfg.alpha), cfg.negative_slope) + l1 * lam
    return gk.leaky_relu((0.5 + cfg.alpha) - tm, cfg.negative_slope) - l1 * lam


def deletion_l1(delta_logits: gk.Var) -> gk.Var:
    return gk.sum(gk.abs(gk.sigmoid(delta_logits)))


def substitution_l1(P: np.ndarray, sub_logits: gk.Var) -> gk.Var:
    return gk.sum(gk.abs(sub_logits.tape.const(P) - gk.sigmoid(sub_logits)))


def deletion_embedding(P: np.ndarray, delta_logits: gk.Var) -> gk.Var:
    """P * (1 - gate) + U * gate with gate = sigmoid(delta), as a tape node."""
    tape = delta_logits.tape
    length = P.shape[1]
    gate = gk.reshape(gk.sigmoid(delta_logits), (1, length))
    spread = tape.const(np.ones((N_TYPES, 1))) @ gate
    return tape.const(P) + tape.const(unknown_matrix(length) - P) * spread


def loss_deletion_necessary(S, S_star: gk.Var, delta_logits: gk.Var, cfg: CfConfig,
                            superposition=None) -> gk.Var:
    tm = tm_score_differentiable(S, S_star, superposition)
    return hinge_objective(tm, deletion_l1(delta_logits), ObjectiveMode.DELETION_NECESSARY, cfg)


def loss_deletion_sufficient(S, S_star: gk.Var, delta_logits: gk.Var, cfg: CfConfig,
                             superposition=None) -> gk.Var:
    tm = tm_score_differentiable(S, S_star, superposition)
    return hinge_objective(tm, deletion_l1(delta_logits), ObjectiveMode.DELETION_SUFFICIENT, cfg)


def loss_substitution_radical(S, S_prime: gk.Var, P: np.ndarray, sub_logits: gk.Var,
                              cfg: CfConfig, superposition=None) -> gk.Var:
    tm = tm_score_differentiable(S, S_prime, superposition)
    return hinge_objective(tm, substitution_l1(P, sub_logits),
                           ObjectiveMode.SUBSTITUTION_RADICAL, cfg)


def loss_substitution_conservative(S, S_prime: gk.Var, P: np.ndarray, sub_logits: gk.Var,
                                   cfg: CfConfig, superposition=None) -> gk.Var:
    tm = tm_score_differentiable(S, S_prime, superposition)
    return hinge_objective(tm, substitution_l1(P, sub_logits),
                           ObjectiveMode.SUBSTITUTION_CONSERVATIVE, cfg)


def build_loss(mode, S, P: np.ndarray, logits: gk.Var, predictor, M, cfg: CfConfig,
               superposition=None):
    """Counterfactual forward pass plus loss. Returns (loss, tm, l1) nodes."""
    mode = ObjectiveMode(mode)
    if mode.is_deletion:
        emb = deletion_embedding(P, logits)
        l1 = deletion_l1(logits)
    else:
        emb = gk.sigmoid(logits)
        l1 = substitution_l1(P, logits)
    coords = predictor.predict_var(emb, M)
    tm = tm_score_differentiable(S, coords, superposition)
    return hinge_objective(tm, l1, mode, cfg), tm, l1


# -- state, binarisation -----------------------------------------------------

def init_state(mode, P: SequenceEmbedding, cfg: CfConfig = CfConfig()) -> PerturbationState:
    """Start from (almost) the original sequence."""
    mode = ObjectiveMode(mode)
    if mode.is_deletion:
        return PerturbationState(mode, delta_logits=np.full(P.length, cfg.init_deletion_logit))
    z = cfg.init_substitution_logit
    return PerturbationState(mode, sub_logits=np.where(P.matrix > 0.5, z, -z))


def relaxed_embedding(state: PerturbationState, P: SequenceEmbedding) -> SequenceEmbedding:
    if state.delta_logits is not None:
        g = sigmoid(state.delta_logits)
        return SequenceEmbedding(P.matrix * (1.0 - g) + unknown_matrix(P.length) * g, "continuous")
    return SequenceEmbedding(sigmoid(state.sub_logits), "continuous")


@dataclass(frozen=True)
class Binarized:
    residues: list  # [(position, original index, replacement index or None)]
    deleted: tuple  # positions replaced by Unknown (deletion modes)
    embedding: SequenceEmbedding  # hard counterfactual


def binarize(state: PerturbationState, P: SequenceEmbedding, threshold: float = 0.5) -> Binarized:
    """Hard explanation from learned logits.

    Necessary: the deleted residues. Sufficient: the residues left intact.
    Substitution modes: columns whose argmax over the 20 standard rows moved
    away from the original residue.
    """
    original = P.argmax()
    mode = ObjectiveMode(state.mode)
    if mode.is_deletion:
        deleted = sigmoid(state.delta_logits) > threshold
        hard = np.where(deleted[None, :], unknown_matrix(P.length), P.matrix)
        if mode is ObjectiveMode.DELETION_NECESSARY:
            chosen = np.flatnonzero(deleted)
            residues = [(int(i), int(original[i]), UNKNOWN) for i in chosen]
        else:
            chosen = np.flatnonzero(~deleted)
            residues = [(int(i), int(original[i]), None) for i in chosen]
        return Binarized(residues, tuple(int(i) for i in np.flatnonzero(deleted)),
                         SequenceEmbedding(hard, "onehot"))
    new = np.argmax(sigmoid(state.sub_logits)[:UNKNOWN], axis=0)
    changed = np.flatnonzero(new != original)
    residues = [(int(i), int(original[i]), int(new[i])) for i in changed]
    return Binarized(residues, (), SequenceEmbedding(onehot_indices(new), "onehot"))


# -- reports -----------------------------------------------------------------

@dataclass
class TraceRecord:
    step: int
    phase: int
    loss: float
    tm: float
    l1: float


@dataclass
class ExplanationReport:
    protein_id: str
    mode: ObjectiveMode
    length: int
    explanation: list  # [(position, original letter, replacement letter / "deleted" / "kept")]
    final_tm: float
    feasible: bool
    counterfactual_sequence: str
    trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    chunks: list = field(default_factory=list)
    complete: bool = True

    @property
    def explanation_size(self) -> int:
        return len(self.explanation)

    @property
    def complexity(self) -> float:
        return self.explanation_size / self.length

    @property
    def positions(self) -> list:
        return [e[0] for e in self.explanation]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "protein_id": self.protein_id,
            "mode": ObjectiveMode(self.mode).value,
            "length": self.length,
            "explanation": [{"position": p, "original": o, "replacement": r}
                            for p, o, r in self.explanation],
            "explanation_size": self.explanation_size,
            "complexity": self.complexity,
            "final_tm": self.final_tm,
            "feasible": self.feasible,
            "counterfactual_sequence": self.counterfactual_sequence,
            "complete": self.complete,
            "chunks": self.chunks,
            "config": self.config,
            "trace_steps": len(self.trace),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExplanationReport":
        return cls(
            protein_id=d["protein_id"], mode=ObjectiveMode(d["mode"]), length=d["length"],
            explanation=[(e["position"], e["original"], e["replacement"]) for e in d["explanation"]],
            final_tm=d["final_tm"], feasible=d["feasible"],
            counterfactual_sequence=d["counterfactual_sequence"], config=d.get("config", {}),
            chunks=d.get("chunks", []), complete=d.get("complete", True))

    def trace_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "phase", "loss", "tm", "l1"])
        for t in self.trace:
            w.writerow([t.step, t.phase, repr(t.loss), repr(t.tm), repr(t.l1)])
        return out.getvalue()


def _explanation_entries(residues) -> list:
    out = []
    for pos, orig, repl in residues:
        if repl is None:
            label = "kept"
        elif repl == UNKNOWN:
            label = "deleted"
        else:
            label = aa_letter(repl)
        out.append((pos, aa_letter(orig), label))
    return out


def evaluate_counterfactual(S, hard: SequenceEmbedding, predictor, context) -> float:
    """TM-score of a hard counterfactual against the reference, context refreshed."""
    S_cf = predictor.predict(hard, context.refresh(hard))
    return tm_score(S, S_cf.coords)


def optimize(record: ProteinRecord, predictor, context, mode, cfg: CfConfig = CfConfig()
             ) -> ExplanationReport:
    """Learn one explanation for a record no longer than ``cfg.chunk_len``."""
    mode = ObjectiveMode(mode)
    if len(record) > cfg.chunk_len:
        raise ValueError(f"record {record.id!r} has length {len(record)} > chunk_len "
                         f"{cfg.chunk_len}; chunk it first")
    if not getattr(predictor, "differentiable", False):
        raise ValueError("external predictor is forward-only; optimisation needs gradients")
    P = encode_onehot(record)
    M_ref = msa_embedding(record) if record.msa else context.refresh(P)
    S = predictor.predict(P, M_ref).coords
    state = init_state(mode, P, cfg)
    trace = []
    step = 0
    for phase in range(cfg.phases):
        M = context.refresh(relaxed_embedding(state, P))
        for _ in range(cfg.steps_per_phase):
            tape = gk.Tape()
            logits = tape.param(state.logits)
            loss, tm, l1 = build_loss(mode, S, P.matrix, logits, predictor, M, cfg)
            grad = gk.backward(loss)[logits]
            trace.append(TraceRecord(step, phase, loss.item(), tm.item(), l1.item()))
            (new,), adam = gk.adam_step([state.logits], [grad], state.adam, lr=cfg.lr)
            if mode.is_deletion:
                state = PerturbationState(mode, delta_logits=new, adam=adam)
            else:
                state = PerturbationState(mode, sub_logits=new, adam=adam)
            step += 1
    hard = binarize(state, P, cfg.binarize_threshold)
    final_tm = evaluate_counterfactual(S, hard.embedding, predictor, context)
    feasible = final_tm <= 0.5 if mode.flips_fold else final_tm > 0.5
    return ExplanationReport(
        protein_id=record.id, mode=mode, length=len(record),
        explanation=_explanation_entries(hard.residues), final_tm=final_tm, feasible=feasible,
        counterfactual_sequence=hard.embedding.to_sequence(), trace=trace,
        config={"mode": mode.value, "cf": cfg.to_dict(), "sequence": record.sequence})


def explain_record(record: ProteinRecord, predictor, context, mode,
                   cfg: CfConfig = CfConfig()) -> ExplanationReport:
    """Chunk a record, explain each chunk independently and merge.

    The merged report's TM-score is the mean over chunks and it is feasible
    only if every chunk is.
    """
    mode = ObjectiveMode(mode)
    chunks = chunk_record(record, cfg.chunk_len)
    if len(chunks) == 1:
        report = optimize(record, predictor, context, mode, cfg)
        report.config["predictor"] = _predictor_config(predictor)
        return report
    explanation, trace, chunk_info, seq = [], [], [], []
    offset = 0
    for chunk in chunks:
        r = optimize(chunk, predictor, context, mode, cfg)
        explanation.extend((p + offset, o, rep) for p, o, rep in r.explanation)
        trace.extend(r.trace)
        seq.append(r.counterfactual_sequence)
        chunk_info.append({"id": chunk.id, "start": offset, "length": r.length,
                           "final_tm": r.final_tm, "feasible": r.feasible,
                           "explanation_size": r.explanation_size})
        offset += r.length
    tms = [c["final_tm"] for c in chunk_info]
    return ExplanationReport(
        protein_id=record.id, mode=mode, length=len(record), explanation=explanation,
        final_tm=float(np.mean(tms)), feasible=all(c["feasible"] for c in chunk_info),
        counterfactual_sequence="".join(seq), trace=trace,
        config={"mode": mode.value, "cf": cfg.to_dict(), "sequence": record.sequence,
                "predictor": _predictor_config(predictor)},
        chunks=chunk_info)


def _predictor_config(predictor) -> dict:
    cfg = getattr(predictor, "config", None)
    return cfg() if callable(cfg) else {"kind": type(predictor).__name__}
