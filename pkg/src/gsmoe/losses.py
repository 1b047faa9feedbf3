"""Losses for weakly-supervised training.

Top-k terms take pre-sigmoid logits; ``bce`` takes probabilities. Batched
inputs are ``Tensor``s of shape (n_videos, T); variable-length videos may be
passed as a list of 1-D tensors instead.
"""
from __future__ import annotations

import math

import numpy as np

from . import nn
from .errors import InvalidInputError
from .nn import Tensor

BCE_EPS = 1e-7
SMOOTHNESS_COEF = 8e-4
SPARSITY_COEF = 8e-3


def default_k(T: int) -> int:
    return max(1, math.ceil(T / 16))


def _per_video(logits):
    if isinstance(logits, Tensor):
        if logits.ndim == 1:
            return [nn.reshape(logits, (1, -1))], True
        if logits.ndim != 2:
            raise InvalidInputError(f"expected (videos, T) logits, got shape {logits.shape}")
        return [logits], True
    vids = [nn.reshape(nn.as_tensor(v), (1, -1)) for v in logits]
    if not vids:
        raise InvalidInputError("need at least one video")
    return vids, False


def topk_select(logits: Tensor, k: int) -> Tensor:
    """The k largest entries along the last axis, in descending order."""
    T = logits.shape[-1]
    if not 1 <= k <= T:
        raise InvalidInputError(f"k={k} outside [1, {T}]")
    idx = np.argsort(-logits.data, axis=-1, kind="stable")[..., :k]
    return nn.gather(logits, idx, axis=-1)


def _topk_term(logits, k: int, abnormal: bool) -> Tensor:
    groups, batched = _per_video(logits)
    if batched:
        top = topk_select(groups[0], k)
        ll = nn.log_sigmoid(top) if abnormal else nn.log_sigmoid(nn.mul(top, -1.0))
        return nn.mul(nn.mean(ll), -1.0)
    terms = []
    for v in groups:
        top = topk_select(v, k)
        ll = nn.log_sigmoid(top) if abnormal else nn.log_sigmoid(nn.mul(top, -1.0))
        terms.append(nn.mean(ll))
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    return nn.mul(total, -1.0 / len(terms))


def topk_abnormal_term(logits, k: int) -> Tensor:
    """-mean over videos of the mean log sigmoid of each video's top-k logits."""
    return _topk_term(logits, k, abnormal=True)


def topk_normal_term(logits, k: int) -> Tensor:
    """-mean over videos of the mean log(1 - sigmoid) of each video's top-k logits."""
    return _topk_term(logits, k, abnormal=False)


def topk_loss(abn_logits, norm_logits, k: int) -> Tensor:
    return nn.add(topk_abnormal_term(abn_logits, k), topk_normal_term(norm_logits, k))


def bce(pred_probs, targets, eps: float = BCE_EPS) -> Tensor:
    p = nn.as_tensor(pred_probs)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidInputError(f"bce: prediction shape {p.shape} != target shape {y.shape}")
    p = nn.clamp(p, eps, 1.0 - eps)
    ll = nn.add(nn.mul(nn.log(p), y), nn.mul(nn.log(nn.sub(1.0, p)), 1.0 - y))
    return nn.mul(nn.mean(ll), -1.0)


def bce_with_logits(logits, targets) -> Tensor:
    """``bce`` evaluated from pre-sigmoid logits via log-sigmoid.

    Equal to ``bce(sigmoid(logits), targets)`` wherever the probabilities lie
    inside the clamp range, but finite with a non-zero gradient everywhere, so
    a saturated head can still be pulled back.
    """
    z = nn.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise InvalidInputError(f"bce: prediction shape {z.shape} != target shape {y.shape}")
    ll = nn.add(nn.mul(nn.log_sigmoid(z), y), nn.mul(nn.log_sigmoid(nn.mul(z, -1.0)), 1.0 - y))
    return nn.mul(nn.mean(ll), -1.0)


def tgs_loss(abn_pred, pseudo, norm_logits, k: int) -> Tensor:
    """Top-k normal term plus BCE against splatted pseudo-labels."""
    return nn.add(topk_normal_term(norm_logits, k), bce(abn_pred, pseudo))


def smoothness(scores, coef: float = SMOOTHNESS_COEF) -> Tensor:
    """coef * sum_t (s_t - s_{t+1})^2, averaged over videos if batched."""
    s = nn.as_tensor(scores)
    if s.shape[-1] < 2:
        raise InvalidInputError("smoothness needs at least two snippets")
    T = s.shape[-1]
    lead = s.shape[:-1]
    d = nn.sub(nn.gather(s, np.broadcast_to(np.arange(1, T), lead + (T - 1,)), axis=-1),
               nn.gather(s, np.broadcast_to(np.arange(T - 1), lead + (T - 1,)), axis=-1))
    per = nn.tsum(nn.mul(d, d), axis=-1)
    return nn.mul(nn.mean(per), coef)


def sparsity(scores, coef: float = SPARSITY_COEF) -> Tensor:
    """coef * sum_t s_t, averaged over videos if batched."""
    s = nn.as_tensor(scores)
    return nn.mul(nn.mean(nn.tsum(s, axis=-1)), coef)
