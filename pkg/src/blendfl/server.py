"""Vertical coordinator and aggregation server (BlendAvg / FedAvg)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import nn_core
from .client import ModelBundle
from .messages import FeatureBatch, GradientBatch
from .metrics import SCORERS, MetricError
from .nn_core import Network

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


class AggregationError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


# -- vertical path ---------------------------------------------------------------

class VerticalResult(NamedTuple):
    g_v: Network
    gradients: list
    loss: Optional[float]
    n_aligned: int
    warning: Optional[str] = None


def server_aggregate_and_train_vertical(g_v: Network, alignment: dict, batches: Sequence[FeatureBatch],
                                        lr: float) -> VerticalResult:
    """Align staged features by id, train ``g_v`` one step, split gradients back.

    Labels are taken from the modality-A batches.  Every input batch gets a
    ``GradientBatch`` of its own shape; rows whose id found no partner carry
    zero gradient.
    """
    rows = {"A": {}, "B": {}}
    labels = {}
    for bi, batch in enumerate(batches):
        side = 0 if batch.modality == "A" else 1
        for r, sid in enumerate(batch.ids):
            owner = alignment.get(sid)
            if owner is None:
                raise AlignmentError(f"sample {sid} is not in the alignment table")
            if owner[side] != batch.client_id:
                raise AlignmentError(
                    f"sample {sid}: modality {batch.modality} expected from client {owner[side]}, "
                    f"got client {batch.client_id}"
                )
            rows[batch.modality][sid] = (bi, r)
            if batch.modality == "A":
                if batch.labels is None:
                    raise AlignmentError(f"modality-A batch from client {batch.client_id} carries no labels")
                labels[sid] = int(batch.labels[r])

    aligned = [sid for b in batches if b.modality == "A" for sid in b.ids if sid in rows["B"]]
    grads = [np.zeros_like(b.features) for b in batches]
    if not aligned:
        out = [GradientBatch(b.client_id, b.modality, b.round_tag, b.ids, g) for b, g in zip(batches, grads)]
        msg = "vertical step skipped: no aligned ids among staged features" if batches else None
        if msg:
            log.warning(msg)
        return VerticalResult(g_v, out, None, 0, msg)

    def gather(mod):
        return np.vstack([batches[rows[mod][sid][0]].features[rows[mod][sid][1]] for sid in aligned])

    ha, hb = gather("A"), gather("B")
    y = np.array([labels[sid] for sid in aligned], dtype=np.int64)
    H = np.hstack([ha, hb])
    if H.shape[1] != g_v.input_dim:
        raise AlignmentError(f"concatenated features have width {H.shape[1]}, g_v expects {g_v.input_dim}")
    out, trace = nn_core.forward(g_v, H)
    loss, dout = nn_core.loss_and_grad(out, y)
    pgrad, dH = nn_core.backward(g_v, trace, dout)
    split = ha.shape[1]
    for k, sid in enumerate(aligned):
        bi, r = rows["A"][sid]
        grads[bi][r] = dH[k, :split]
        bi, r = rows["B"][sid]
        grads[bi][r] = dH[k, split:]
    out_batches = [GradientBatch(b.client_id, b.modality, b.round_tag, b.ids, g) for b, g in zip(batches, grads)]
    return VerticalResult(nn_core.sgd_step(g_v, pgrad, lr), out_batches, loss, len(aligned))


class VerticalServer:
    """Holds ``g_v`` and the id alignment; processes one round tag at a time."""

    def __init__(self, g_v: Network, alignment: dict):
        self.g_v = g_v
        self.alignment = dict(alignment)
        self.staged: list = []

    def stage(self, batch: FeatureBatch) -> None:
        if self.staged and self.staged[0].round_tag != batch.round_tag:
            raise AlignmentError("features from two round tags staged at once")
        self.staged.append(batch)

    def step(self, lr: float) -> VerticalResult:
        result = server_aggregate_and_train_vertical(self.g_v, self.alignment, self.staged, lr)
        self.g_v = result.g_v
        self.staged = []
        return result


# -- scoring -----------------------------------------------------------------------

def evaluate_on_validation(scores: np.ndarray, labels, metric: str = "auroc") -> float:
    """Performance score A_i of predicted class probabilities on validation labels."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("empty validation set")
    if np.unique(labels).size < 2:
        raise EvaluationError("validation labels contain a single class")
    try:
        return float(SCORERS[metric](scores, labels))
    except MetricError as exc:
        raise EvaluationError(str(exc)) from None


class ValidationSet:
    """Server-private validation arrays; every sample carries both modalities."""

    def __init__(self, samples):
        if not samples:
            raise EvaluationError("empty validation set")
        if any(not s.is_multimodal for s in samples):
            raise EvaluationError("validation samples must carry both modalities")
        self.XA = np.vstack([s.x_a for s in samples])
        self.XB = np.vstack([s.x_b for s in samples])
        self.y = np.array([s.label for s in samples], dtype=np.int64)

    def __len__(self):
        return len(self.y)

    def probs(self, bundle: ModelBundle, head: str, g_m: Optional[Network] = None) -> np.ndarray:
        if head == "A":
            return bundle.predict("A", self.XA)
        if head == "B":
            return bundle.predict("B", self.XB)
        return bundle.predict_multimodal(self.XA, self.XB, g_m)

    def score(self, bundle: ModelBundle, head: str, metric: str = "auroc", g_m: Optional[Network] = None) -> float:
        return evaluate_on_validation(self.probs(bundle, head, g_m), self.y, metric)


# -- aggregation rules ------------------------------------------------------------

@dataclass
class AggregationWeights:
    kept: dict = field(default_factory=dict)
    discarded: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    a_global: Optional[float] = None

    def to_dict(self) -> dict:
        return {"a_global": self.a_global, "scores": self.scores, "deltas": self.deltas,
                "weights": self.kept, "discarded": self.discarded}


def _check_layout(vectors) -> int:
    sizes = {np.asarray(v).size for v in vectors}
    if len(sizes) != 1:
        raise AggregationError(f"parameter vectors differ in length: {sorted(sizes)}")
    return sizes.pop()


def blend_avg(submissions: Sequence[tuple], a_global: float,
              previous: Optional[np.ndarray] = None) -> tuple[np.ndarray, AggregationWeights]:
    """Performance-weighted averaging.

    ``submissions`` holds ``(tag, params, score)``.  Models whose score does
    not beat ``a_global`` are discarded; the rest are weighted by their
    improvement over it.  When every model is discarded ``previous`` is
    returned unchanged.
    """
    if not submissions:
        raise AggregationError("blend_avg needs at least one submission")
    vectors = [np.asarray(p, dtype=np.float64) for _, p, _ in submissions]
    if previous is not None:
        vectors.append(np.asarray(previous, dtype=np.float64))
    _check_layout(vectors)

    info = AggregationWeights(a_global=float(a_global))
    kept = []
    for tag, params, score in submissions:
        delta = float(score) - float(a_global)
        info.scores[tag] = float(score)
        info.deltas[tag] = delta
        if delta > 0:
            kept.append((tag, np.asarray(params, dtype=np.float64), delta))
        else:
            info.discarded.append(tag)
    if not kept:
        if previous is None:
            raise AggregationError("every submission was discarded and no previous global was given")
        return np.array(previous, dtype=np.float64), info
    total = sum(d for _, _, d in kept)
    blended = np.zeros_like(kept[0][1])
    for tag, params, delta in kept:
        w = delta / total
        info.kept[tag] = w
        blended += w * params
    return blended, info


def fed_avg(submissions: Sequence[tuple]) -> np.ndarray:
    """Sample-count weighted mean of ``(tag, params, n_samples)`` submissions."""
    if not submissions:
        raise AggregationError("fed_avg needs at least one submission")
    vectors = [np.asarray(p, dtype=np.float64) for _, p, _ in submissions]
    _check_layout(vectors)
    total = float(sum(n for _, _, n in submissions))
    if total <= 0:
        raise AggregationError("total sample count must be positive")
    out = np.zeros_like(vectors[0])
    for (_, _, n), v in zip(submissions, vectors):
        out += (n / total) * v
    return out


# -- round aggregation -----------------------------------------------------------

@dataclass
class Submission:
    """What a client uploads after its local phases."""
    client_id: int
    bundle: ModelBundle
    heads: tuple  # subset of ("A", "B", "M") the client trained this round
    counts: dict  # per head: number of local records backing it


class AggregationServer:
    def __init__(self, globals_: ModelBundle, validation: ValidationSet, strategy: str = "blendavg",
                 metric: str = "auroc"):
        if strategy not in ("blendavg", "fedavg"):
            raise ValueError(f"unknown aggregation strategy {strategy!r}")
        self.globals = globals_
        self.validation = validation
        self.strategy = strategy
        self.metric = metric

    def score(self, bundle: ModelBundle, head: str, g_m: Optional[Network] = None) -> float:
        return self.validation.score(bundle, head, self.metric, g_m)

    def _combine(self, candidates, previous, a_global_fn):
        """candidates: list of (tag, params, score_fn, count)."""
        if self.strategy == "fedavg":
            vec = fed_avg([(t, p, n) for t, p, _, n in candidates])
            return vec, {"weights": {t: n for t, _, _, n in candidates}, "strategy": "fedavg"}
        a_global = a_global_fn()
        subs = [(t, p, fn()) for t, p, fn, _ in candidates]
        vec, info = blend_avg(subs, a_global, previous)
        return vec, info.to_dict()

    def aggregate_round(self, submissions: Sequence[Submission], g_v: Optional[Network] = None,
                        n_vertical: int = 0) -> tuple[ModelBundle, dict]:
        """Blend unimodal stacks per modality, then the multimodal head.

        Returns the new global bundle and per-head diagnostics.
        """
        prev = self.globals
        new = prev
        report = {}
        for m in ("A", "B"):
            cands = [(f"client{s.client_id}", s.bundle.unimodal_vector(m),
                      (lambda b=s.bundle, m=m: self.score(b, m)), s.counts.get(m, 0))
                     for s in submissions if m in s.heads]
            if not cands:
                report[m] = {"skipped": True}
                continue
            vec, info = self._combine(cands, prev.unimodal_vector(m), lambda m=m: self.score(prev, m))
            new = new.with_unimodal_vector(m, vec)
            report[m] = info

        cands = [(f"client{s.client_id}", s.bundle.g_m.params,
                  (lambda b=s.bundle: self.score(b, "multimodal")), s.counts.get("M", 0))
                 for s in submissions if "M" in s.heads]
        if g_v is not None and n_vertical > 0:
            cands.append(("vertical", g_v.params,
                          (lambda enc=new: self.score(enc, "multimodal", g_m=g_v)), n_vertical))
        if cands:
            vec, info = self._combine(cands, prev.g_m.params, lambda: self.score(prev, "multimodal"))
            new = replace(new, g_m=prev.g_m.with_params(vec))
            report["M"] = info
        else:
            report["M"] = {"skipped": True}

        for key, head in (("A", "A"), ("B", "B"), ("M", "multimodal")):
            report[key]["post_score"] = self.score(new, head)
        self.globals = new
        return new, report
