"""Snippet-level ranking metrics (micro-averaged over all test snippets)."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class EvalResult:
    auc: float
    ap: float
    auc_a: float
    ap_a: float
    per_class_auc: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_auc"] = {str(k): v for k, v in sorted(self.per_class_auc.items())}
        return d


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties
    counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both positive and negative labels")
    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # tie groups in ascending score order
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    pos_in = np.add.reduceat(y_sorted.astype(np.int64), starts)
    size = np.diff(np.r_[starts, s.size])
    neg_in = size - pos_in
    neg_below = np.cumsum(neg_in) - neg_in
    # twice the Mann-Whitney U, kept in integers
    twice_u = int(np.sum(pos_in * (2 * neg_below + neg_in)))
    return twice_u / (2 * n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Sum over ranked prefixes of (recall gain) x precision.

    Ranking is a stable sort on (score descending, index ascending), so tied
    scores are resolved by input order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average_precision needs at least one positive")
    order = np.lexsort((np.arange(s.size), -s))
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, s.size + 1)
    return float(precision[hits].sum() / n_pos)


def _scores_for(records, scores) -> list:
    if isinstance(scores, dict):
        return [np.asarray(scores[r.id], dtype=np.float64) for r in records]
    return [np.asarray(s, dtype=np.float64) for s in scores]


def _concat(records, scores):
    if not records:
        return np.zeros(0), np.zeros(0)
    return (np.concatenate(scores),
            np.concatenate([np.asarray(r.snippet_gt) for r in records]))


def abnormal_only(records, scores) -> tuple[float, float]:
    """AUC and AP over abnormal videos that hold both normal and anomalous snippets."""
    scores = _scores_for(records, scores)
    keep = [(r, s) for r, s in zip(records, scores)
            if r.video_label == 1 and r.snippet_gt is not None
            and 0 < np.sum(r.snippet_gt) < len(r.snippet_gt)]
    if not keep:
        raise UndefinedMetricError("no abnormal videos with both normal and anomalous snippets")
    s, y = _concat([r for r, _ in keep], [s for _, s in keep])
    return roc_auc(s, y), average_precision(s, y)


def per_class_auc(records, scores) -> dict:
    """AUC per anomaly class over that class's abnormal videos plus every normal video."""
    scores = _scores_for(records, scores)
    normal = [(r, s) for r, s in zip(records, scores) if r.video_label == 0]
    out = {}
    for c in sorted({r.class_id for r in records if r.video_label == 1}):
        subset = [(r, s) for r, s in zip(records, scores)
                  if r.video_label == 1 and r.class_id == c] + normal
        s, y = _concat([r for r, _ in subset], [s for _, s in subset])
        try:
            out[int(c)] = roc_auc(s, y)
        except UndefinedMetricError:
            continue
    return out


def evaluate(records, scores) -> EvalResult:
    scores = _scores_for(records, scores)
    s, y = _concat(records, scores)
    auc_a, ap_a = abnormal_only(records, scores)
    return EvalResult(roc_auc(s, y), average_precision(s, y), auc_a, ap_a,
                      per_class_auc(records, scores))


def write_json(path, result: EvalResult, extra: dict | None = None) -> None:
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in ("auc", "ap", "auc_a", "ap_a"):
            w.writerow([k, repr(getattr(result, k))])
        for c, v in sorted(result.per_class_auc.items()):
            w.writerow([f"auc_class_{c}", repr(v)])
