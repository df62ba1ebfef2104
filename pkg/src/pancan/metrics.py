"""Multi-label evaluation: mean average precision plus per-class (macro) and
overall (micro) precision/recall/F1, with the top-k prediction variant.

Scores are sigmoid probabilities in [0, 1]; the decision threshold for the
P/R/F1 family is 0.5.  The top-k variant instead marks each sample's k
highest-scoring labels as its predictions.  Average precision ranks by
score (ties keep the original sample order) and averages precision at every
positive.  Classes without positives are excluded from the mAP mean with a
warning.  All reported values are percentages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PrfBundle:
    cp: float
    cr: float
    cf1: float
    op: float
    or_: float
    of1: float


@dataclass(frozen=True)
class MetricsReport:
    map: float
    overall: PrfBundle
    topk: PrfBundle | None = None

    # convenience accessors mirroring the table columns
    @property
    def cp(self):
        return self.overall.cp

    @property
    def cr(self):
        return self.overall.cr

    @property
    def cf1(self):
        return self.overall.cf1

    @property
    def op(self):
        return self.overall.op

    @property
    def or_(self):
        return self.overall.or_

    @property
    def of1(self):
        return self.overall.of1

    def as_dict(self):
        out = {"mAP": self.map, "CP": self.cp, "CR": self.cr, "CF1": self.cf1,
               "OP": self.op, "OR": self.or_, "OF1": self.of1}
        if self.topk is not None:
            out.update({"CP@k": self.topk.cp, "CR@k": self.topk.cr,
                        "CF1@k": self.topk.cf1, "OP@k": self.topk.op,
                        "OR@k": self.topk.or_, "OF1@k": self.topk.of1})
        return out


def _check_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    if scores.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not np.all(np.isin(labels, (-1, 1))):
        raise ValueError("labels must be -1 or +1")
    return scores, labels


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Precision averaged at each positive, ranking by descending score.

    Ties keep ascending sample order (stable sort), so the value is
    deterministic.
    """
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    found = np.arange(1, n_pos + 1)
    return float((found / ranks).mean())


def _safe_div(num, den):
    return num / den if den > 0 else 0.0


def _f1(p, r):
    return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0


def _prf(preds: np.ndarray, labels: np.ndarray) -> PrfBundle:
    pos = labels == 1
    tp = (preds & pos).sum(axis=0).astype(float)
    pred_pos = preds.sum(axis=0).astype(float)
    actual_pos = pos.sum(axis=0).astype(float)
    per_class_p = [_safe_div(tp[l], pred_pos[l]) for l in range(labels.shape[1])]
    per_class_r = [_safe_div(tp[l], actual_pos[l]) for l in range(labels.shape[1])]
    cp = float(np.mean(per_class_p))
    cr = float(np.mean(per_class_r))
    op = _safe_div(tp.sum(), pred_pos.sum())
    orr = _safe_div(tp.sum(), actual_pos.sum())
    return PrfBundle(100 * cp, 100 * cr, 100 * _f1(cp, cr),
                     100 * op, 100 * orr, 100 * _f1(op, orr))


def topk_predictions(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask keeping each sample's k highest scores (ties by index)."""
    n, l = scores.shape
    out = np.zeros((n, l), dtype=bool)
    kk = min(k, l)
    for i in range(n):
        order = np.argsort(-scores[i], kind="stable")[:kk]
        out[i, order] = True
    return out


def compute_metrics(scores, labels, topk: int | None = None) -> MetricsReport:
    """Full report over an N x L score matrix and matching {-1,+1} labels."""
    scores, labels = _check_inputs(scores, labels)
    n, l = scores.shape
    aps = []
    for col in range(l):
        pos = labels[:, col] == 1
        if not pos.any():
            warnings.warn(f"label {col} has no positives; excluded from mAP",
                          RuntimeWarning, stacklevel=2)
            continue
        aps.append(average_precision(scores[:, col], pos))
    if not aps:
        raise ValueError("no label has positives; mAP undefined")
    overall = _prf(scores >= 0.5, labels)
    report_topk = None
    if topk is not None:
        if topk < 1:
            raise ValueError("topk must be >= 1")
        report_topk = _prf(topk_predictions(scores, topk), labels)
    return MetricsReport(100 * float(np.mean(aps)), overall, report_topk)
