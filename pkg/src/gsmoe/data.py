"""Synthetic weakly-labelled feature streams, fixed-length resampling,
balanced batching and dataset persistence."""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import container
from .errors import InvalidInputError


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray  # (T, d_feat) float32
    video_label: int  # 0 normal, 1 abnormal
    class_id: int = -1  # -1 for normal videos
    snippet_gt: Optional[np.ndarray] = None  # (T,) of {0, 1}, test split only

    def __post_init__(self):
        if self.snippet_gt is not None and len(self.snippet_gt) != len(self.features):
            raise InvalidInputError(f"{self.id}: snippet_gt length != T")

    @property
    def T(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 6
    videos_per_class: int = 20
    normal_videos: int = 100
    test_videos_per_class: int = 6
    test_normal_videos: int = 30
    T_range: tuple = (40, 100)
    d_feat: int = 32
    anomaly_window_range: tuple = (6, 20)
    signature_strength: float = 6.0
    noise_scale: float = 1.0
    drift_scale: float = 0.5
    multi_event_prob: float = 0.3
    normal_event_prob: float = 0.5
    seed: int = 0

    def validate(self):
        for name in ("n_classes", "videos_per_class", "normal_videos",
                     "test_videos_per_class", "test_normal_videos", "d_feat"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        lo, hi = self.T_range
        wlo, whi = self.anomaly_window_range
        if not 1 <= lo <= hi:
            raise InvalidInputError(f"bad T_range {self.T_range}")
        if not 1 <= wlo <= whi:
            raise InvalidInputError(f"bad anomaly_window_range {self.anomaly_window_range}")
        if whi >= lo:
            raise InvalidInputError(
                f"anomaly windows up to {whi} snippets do not fit videos of {lo} snippets")
        for name in ("multi_event_prob", "normal_event_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1]")
        if self.signature_strength < 0 or self.noise_scale < 0 or self.drift_scale < 0:
            raise InvalidInputError("strengths and scales must be non-negative")


def _rng_for(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(key.encode())]))


def signature_components(cfg: SyntheticConfig) -> np.ndarray:
    """Orthonormal (when d_feat allows) component directions, shape
    (n_classes, 2, d_feat): each class signature is built from its own pair."""
    rng = _rng_for(cfg.seed, "signatures")
    n = 2 * cfg.n_classes
    raw = rng.normal(size=(cfg.d_feat, n))
    if n <= cfg.d_feat:
        q, _ = np.linalg.qr(raw)
    else:
        q = raw / np.linalg.norm(raw, axis=0)
    return q.T.reshape(cfg.n_classes, 2, cfg.d_feat).copy()


def class_signatures(cfg: SyntheticConfig) -> np.ndarray:
    """Unit-norm planted direction per class, shape (n_classes, d_feat): the
    normalised sum of the class's two components."""
    sig = signature_components(cfg).sum(axis=1)
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


RAMP_FLOOR = 0.2


def _ramp(L: int) -> np.ndarray:
    """Triangular amplitude: RAMP_FLOOR at the window edges, 1 at its centre."""
    j = np.arange(L)
    return RAMP_FLOOR + (1 - RAMP_FLOOR) * (1 - np.abs(2 * (j + 0.5) / L - 1))


def _place_windows(rng, T: int, cfg: SyntheticConfig, n: int, taken=()) -> list:
    wlo, whi = cfg.anomaly_window_range
    windows = list(taken)
    for _ in range(n):
        L = int(rng.integers(wlo, whi + 1))
        for _attempt in range(20):
            start = int(rng.integers(0, T - L + 1))
            # one free snippet between events keeps them distinct
            if all(start + L + 1 <= s or e + 1 <= start for s, e in windows):
                windows.append((start, start + L))
                break
    return sorted(w for w in windows if w not in taken)


def _make_video(cfg: SyntheticConfig, sig: np.ndarray, comps: np.ndarray, vid: str,
                class_id: int, with_gt: bool) -> VideoRecord:
    rng = _rng_for(cfg.seed, vid)
    T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
    x = rng.normal(scale=cfg.noise_scale, size=(T, cfg.d_feat))
    t = np.arange(T)[:, None]
    for _ in range(2):
        direction = rng.normal(size=cfg.d_feat)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(0.5, 2.0) / T
        phase = rng.uniform(0, 2 * np.pi)
        x += cfg.drift_scale * np.sin(2 * np.pi * freq * t + phase) * direction
    gt = np.zeros(T)
    events = []
    if class_id >= 0:
        n = int(rng.integers(2, 4)) if rng.random() < cfg.multi_event_prob else 1
        events = _place_windows(rng, T, cfg, n)
        for s, e in events:
            x[s:e] += cfg.signature_strength * _ramp(e - s)[:, None] * sig[class_id]
            gt[s:e] = 1.0
    if rng.random() < cfg.normal_event_prob:
        # a salient but normal event: one component of some signature on its own
        for s, e in _place_windows(rng, T, cfg, 1, events):
            c, k = rng.integers(len(comps)), rng.integers(2)
            x[s:e] += cfg.signature_strength * _ramp(e - s)[:, None] * comps[c, k]
    return VideoRecord(vid, x.astype(np.float32), int(class_id >= 0), class_id,
                       gt if with_gt else None)


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> tuple[list, list]:
    """(train, test) record lists. Train records carry only video-level
    labels; test records carry snippet ground truth."""
    cfg.validate()
    sig, comps = class_signatures(cfg), signature_components(cfg)
    train, test = [], []
    for split, per_class, normals, out in (
            ("train", cfg.videos_per_class, cfg.normal_videos, train),
            ("test", cfg.test_videos_per_class, cfg.test_normal_videos, test)):
        gt = split == "test"
        for c in range(cfg.n_classes):
            for i in range(per_class):
                out.append(_make_video(cfg, sig, comps, f"{split}/c{c}/{i:04d}", c, gt))
        for i in range(normals):
            out.append(_make_video(cfg, sig, comps, f"{split}/normal/{i:04d}", -1, gt))
    return train, test


def resample_to_fixed(features: np.ndarray, D: int = 200) -> np.ndarray:
    """Evenly spaced linear interpolation of T snippets onto D positions.

    Position j maps to j (T-1)/(D-1) (0-based); fractional positions blend
    the two bracketing snippets.
    """
    x = np.asarray(features, dtype=np.float64)
    if D < 2:
        raise InvalidInputError("D must be at least 2")
    T = x.shape[0]
    if T < 1:
        raise InvalidInputError("need at least one snippet")
    if T == 1:
        return np.repeat(x, D, axis=0)
    pos = np.arange(D) * (T - 1) / (D - 1)
    lo = np.minimum(np.floor(pos).astype(int), T - 2)
    w = (pos - lo).reshape((D,) + (1,) * (x.ndim - 1))
    # x_lo + w (x_hi - x_lo) keeps constant sequences exact
    out = x[lo] + w * (x[lo + 1] - x[lo])
    out[-1] = x[-1]  # w = 1 there; avoid round-off on the endpoint
    return out


@dataclass
class Batch:
    features: np.ndarray  # (B, D, d_feat)
    labels: np.ndarray
    class_ids: np.ndarray
    ids: list = field(default_factory=list)


def epoch_plan(n_abnormal: int, n_normal: int, half: int,
               rng: np.random.Generator) -> list:
    """Index pairs (abnormal, normal) for one epoch of balanced batches.

    The epoch covers the larger polarity once; the smaller one is cycled
    through fresh permutations so every video appears a near-equal number
    of times.
    """
    if n_abnormal < 1 or n_normal < 1:
        raise InvalidInputError("need at least one video of each polarity")
    n_batches = math.ceil(max(n_abnormal, n_normal) / half)
    need = n_batches * half

    def stream(n):
        reps = math.ceil(need / n)
        return np.concatenate([rng.permutation(n) for _ in range(reps)])[:need]

    a, b = stream(n_abnormal), stream(n_normal)
    return [(a[i * half:(i + 1) * half], b[i * half:(i + 1) * half]) for i in range(n_batches)]


def make_batches(train: list, B: int, D: int, seed: int, epochs: int = 1) -> Iterator[Batch]:
    """Balanced batches of B/2 abnormal then B/2 normal videos resampled to D."""
    if B < 2 or B % 2:
        raise InvalidInputError("batch size must be even and >= 2")
    abn = [r for r in train if r.video_label == 1]
    nor = [r for r in train if r.video_label == 0]
    if not abn or not nor:
        raise InvalidInputError("need at least one video of each polarity")
    cache = {}

    def fixed(r):
        if r.id not in cache:
            cache[r.id] = resample_to_fixed(r.features, D)
        return cache[r.id]

    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for ai, ni in epoch_plan(len(abn), len(nor), B // 2, rng):
            recs = [abn[i] for i in ai] + [nor[i] for i in ni]
            yield Batch(np.stack([fixed(r) for r in recs]),
                        np.array([r.video_label for r in recs]),
                        np.array([r.class_id for r in recs]),
                        [r.id for r in recs])


def save_container(path, records: list) -> None:
    index, arrays = [], []
    for r in records:
        index.append({"id": r.id, "label": int(r.video_label), "class_id": int(r.class_id),
                      "shape": list(r.features.shape), "has_gt": r.snippet_gt is not None})
        arrays.append(("f4", r.features))
        if r.snippet_gt is not None:
            arrays.append(("f4", r.snippet_gt))
    container.write(path, arrays, {"kind": "dataset", "records": index})


def load_container(path) -> list:
    head, arrays = container.read(path)
    if head.get("kind") != "dataset":
        raise InvalidInputError(f"{path}: not a dataset container")
    out, k = [], 0
    for entry in head["records"]:
        feats = arrays[k]
        k += 1
        gt = None
        if entry["has_gt"]:
            gt = arrays[k].astype(np.float64)
            k += 1
        out.append(VideoRecord(entry["id"], feats, entry["label"], entry["class_id"], gt))
    return out


def write_ground_truth_csv(path, records: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "snippet", "label"])
        for r in records:
            if r.snippet_gt is None:
                continue
            for t, y in enumerate(r.snippet_gt):
                w.writerow([r.id, t, int(y)])
