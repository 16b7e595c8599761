"""Ranking metrics: ROC-AUC and average precision, binary and macro one-vs-rest."""
from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise MetricError("binary labels must be 0/1")
    return s, y


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # start index of each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc_binary(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied pairs count one half."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    ranks = _average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc_binary(scores, labels) -> float:
    """Average precision with step interpolation.

    Tied scores form a single threshold, so precision is taken after all
    samples sharing a score are admitted.
    """
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp_t = tp[last].astype(np.float64)
    seen = (np.flatnonzero(last) + 1).astype(np.float64)
    precision = tp_t / seen
    recall_step = np.diff(np.r_[0.0, tp_t]) / n_pos
    return float(np.sum(recall_step * precision))


def macro_ovr(metric, scores, labels) -> float:
    """Unweighted mean of ``metric`` over the k one-vs-rest problems.

    A single score column is treated as the positive-class score of a binary
    problem.
    """
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel().astype(np.int64)
    if S.ndim == 1 or S.shape[1] == 1:
        return metric(S.ravel(), y)
    k = S.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise MetricError(f"labels must lie in [0, {k})")
    present = np.bincount(y, minlength=k)
    if np.any(present == 0):
        missing = [int(c) for c in np.flatnonzero(present == 0)]
        raise MetricError(f"classes {missing} absent from labels")
    return float(np.mean([metric(S[:, c], (y == c).astype(np.int64)) for c in range(k)]))


def macro_auroc(scores, labels) -> float:
    return macro_ovr(auroc_binary, scores, labels)


def macro_auprc(scores, labels) -> float:
    return macro_ovr(auprc_binary, scores, labels)


def accuracy(scores, labels) -> float:
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel()
    pred = (S.ravel() >= 0.5).astype(int) if S.ndim == 1 or S.shape[1] == 1 else S.argmax(axis=1)
    return float(np.mean(pred == y))


SCORERS = {"auroc": macro_auroc, "auprc": macro_auprc, "accuracy": accuracy}
