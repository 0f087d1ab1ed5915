"""AUROC / AUPRC with explicit tie handling.

auroc: Mann-Whitney form, i.e. the fraction of (positive, negative) pairs
ordered correctly, a tied pair counting one half.  Computed from midranks.

auprc: average precision as a step function over score thresholds.  Tied
scores form one threshold, so every positive in a tie group receives the
precision measured after the whole group is admitted:

    AP = sum_k (R_k - R_{k-1}) * P_k

over distinct scores in descending order.  This is the usual
"average_precision" definition and does not depend on the order of tied
items.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isfinite(s).all():
        raise ValueError("scores contain non-finite values")
    return s, y


def auroc(scores, labels) -> float:
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def staging_metrics(probabilities, labels, n_classes: int = 4) -> dict:
    """Macro one-vs-rest AUROC/AUPRC.

    Classes absent from ``labels`` are skipped with a warning; per-class
    values are returned under ``per_class``.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if p.ndim != 2 or p.shape[1] != n_classes:
        raise ValueError(f"probabilities must be (N, {n_classes}), got {p.shape}")
    if np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > 1e-5:
        raise ValueError("probability rows must sum to 1")
    present = [c for c in range(n_classes) if (y == c).any()]
    if len(present) < 2:
        raise UndefinedMetricError("staging metrics need at least two classes in the labels")
    absent = sorted(set(range(n_classes)) - set(present))
    if absent:
        logger.warning("classes %s absent from labels; excluded from macro average", absent)
    per_class = {c: {"auroc": auroc(p[:, c], y == c), "auprc": auprc(p[:, c], y == c)} for c in present}
    return {
        "auroc": float(np.mean([v["auroc"] for v in per_class.values()])),
        "auprc": float(np.mean([v["auprc"] for v in per_class.values()])),
        "per_class": per_class,
    }
