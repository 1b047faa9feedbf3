"""Temporal Gaussian splatting of per-snippet abnormal scores.

Peaks in a score series are turned into binary support masks, each mask is
splatted with a Gaussian centred on its peak, and the splats are summed and
clamped into per-snippet pseudo-labels in [0, 1].
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

TAIL_MODES = ("truncated", "full")


@dataclass(frozen=True)
class SplatConfig:
    prominence_threshold: float = 0.2
    sigma_floor: float = 0.5
    clamp_mode: str = "clamp"
    tail_mode: str = "truncated"

    def __post_init__(self):
        if not 0.0 < self.prominence_threshold < 1.0:
            raise InvalidInputError("prominence_threshold must lie in (0, 1)")
        if not self.sigma_floor > 0.0:
            raise InvalidInputError("sigma_floor must be positive")
        if self.clamp_mode != "clamp":
            raise InvalidInputError(f"unknown clamp_mode {self.clamp_mode!r}")
        if self.tail_mode not in TAIL_MODES:
            raise InvalidInputError(f"unknown tail_mode {self.tail_mode!r}")


@dataclass(frozen=True)
class Peak:
    position: int
    score_at_peak: float
    v1: int
    v2: int
    width: int
    sigma: float


@dataclass(frozen=True)
class GaussianKernel:
    support_mask: np.ndarray
    peak: Peak


def as_scores(values) -> np.ndarray:
    """Validate a score series and return it as a float64 array."""
    s = np.asarray(values, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise InvalidInputError("score series must be a non-empty 1-D sequence")
    if np.isnan(s).any():
        raise InvalidInputError("score series contains NaN")
    if s.min() < 0.0 or s.max() > 1.0:
        raise InvalidInputError("scores must lie in [0, 1]")
    return s


def _run_left(s: np.ndarray, t: int) -> int:
    n = 0
    while t - n - 1 >= 0 and s[t - n - 1] < s[t - n]:
        n += 1
    return n


def _run_right(s: np.ndarray, t: int) -> int:
    n = 0
    while t + n + 1 < s.size and s[t + n + 1] < s[t + n]:
        n += 1
    return n


def detect_peaks(scores, cfg: SplatConfig = SplatConfig()) -> list[Peak]:
    """Strict maxima of the 5-snippet window whose prominence (peak minus the
    window minimum) reaches ``cfg.prominence_threshold``.

    The first two and last two snippets are never peaks.
    """
    s = as_scores(scores)
    T = s.size
    if T < 5:
        return []
    # vectorised candidate scan; run lengths are walked per candidate
    centre = s[2:-2]
    others = np.stack([s[:-4], s[1:-3], s[3:-1], s[4:]])
    strict = (centre[None, :] > others).all(axis=0)
    prominence = centre - np.minimum(others.min(axis=0), centre)
    candidates = np.flatnonzero(strict & (prominence >= cfg.prominence_threshold)) + 2

    peaks = []
    for t in candidates:
        t = int(t)
        v1, v2 = _run_left(s, t), _run_right(s, t)
        w = min(v1, v2)
        seg = s[t - w:t + w + 1]
        sd = float(np.std(seg, ddof=1)) if seg.size > 1 else 0.0
        peaks.append(Peak(t, float(s[t]), v1, v2, w, max(sd, cfg.sigma_floor)))
    return peaks


def init_kernel(scores, peak: Peak) -> GaussianKernel:
    s = as_scores(scores)
    T = s.size
    P = peak.position
    if not 0 <= P < T:
        raise InvalidInputError(f"peak position {P} outside series of length {T}")
    t = np.arange(T)
    inside = np.abs(t - P) <= peak.width
    mask = inside & (s >= s[P] - peak.sigma)
    mask[P] = True
    return GaussianKernel(mask.astype(np.float64), peak)


def splat_kernel(kernel: GaussianKernel, T: int, tail_mode: str = "truncated") -> np.ndarray:
    G = kernel.support_mask
    if G.shape != (T,):
        raise InvalidInputError(f"kernel length {G.shape} does not match T={T}")
    if tail_mode not in TAIL_MODES:
        raise InvalidInputError(f"unknown tail_mode {tail_mode!r}")
    t = np.arange(T, dtype=np.float64)
    p = kernel.peak
    g = np.exp(-((t - p.position) ** 2) / (2.0 * p.sigma ** 2))
    if tail_mode == "full":
        return g
    return G * g


def render_pseudo_labels(kernels: Sequence[GaussianKernel], T: int,
                         cfg: SplatConfig = SplatConfig()) -> np.ndarray:
    total = np.zeros(T)
    for k in kernels:
        if k.support_mask.shape != (T,):
            raise InvalidInputError("all kernels must have length T")
        total += splat_kernel(k, T, cfg.tail_mode)
    return np.clip(total, 0.0, 1.0)


def make_targets(scores, cfg: SplatConfig = SplatConfig()) -> np.ndarray:
    """Pseudo-labels for one score series (peaks -> kernels -> splats -> render)."""
    s = as_scores(scores)
    kernels = [init_kernel(s, p) for p in detect_peaks(s, cfg)]
    return render_pseudo_labels(kernels, s.size, cfg)


def read_scores_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["score"]:
        raise InvalidInputError(f"{path}: expected a single 'score' header column")
    try:
        vals = [float(r[0]) for r in rows[1:] if r]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    return as_scores(vals)


def write_scores_csv(path, values: Iterable[float], header: str = "score") -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([header])
        for v in values:
            w.writerow([repr(float(v))])
