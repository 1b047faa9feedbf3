"""Three-stage training: task encoder (MIL then TGS fine-tuning), per-class
or per-cluster experts, and the gate (or soft-MoE) over frozen experts."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import losses, nn
from .data import VideoRecord, _rng_for, epoch_plan, resample_to_fixed
from .errors import DivergenceError, InvalidInputError
from .metrics import EvalResult, evaluate
from .model import Expert, Gate, ModelBundle, SoftMoE, TaskEncoder, mask_expert
from .signal import SplatConfig, make_targets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    E1_mil: int = 10
    E1_tgs: int = 10
    E2: int = 15
    E3: int = 15
    lr: float = 2e-3
    weight_decay: float = 1e-5
    batch_size: int = 16
    D: int = 50
    d: int = 64
    k: int = 0  # 0 selects ceil(D / 16)
    warmup_epochs: int = 3
    warmup_loss: str = "mil"  # or "topk_norm": normal-video term only
    pseudo_refresh: str = "epoch"  # or "frozen": labels fixed after warm-up
    gate_reference: str = "self"  # "experts": max expert score; "encoder": encoder scores
    expert_reference: str = "self"  # or "encoder": expert labels from frozen encoder scores
    # abnormal videos whose scores hold no qualifying peak: "topk" keeps the
    # top-k abnormal term for them, "zero" fits their all-zero pseudo-labels
    peakless: str = "topk"
    smoothness_coef: float = losses.SMOOTHNESS_COEF
    sparsity_coef: float = losses.SPARSITY_COEF
    # scores live in [0, 1], so a 0.5 floor makes each splat about one snippet
    # wide; training uses a wider floor
    splat: SplatConfig = field(default_factory=lambda: SplatConfig(sigma_floor=2.0))
    seed: int = 0
    expert_mode: str = "class"
    n_clusters: int = 6
    use_task_features: bool = True
    fusion: str = "gate"

    def validate(self):
        for name in ("E1_mil", "E1_tgs", "E2", "E3"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidInputError("batch_size must be even and >= 2")
        if self.expert_mode not in ("class", "cluster"):
            raise InvalidInputError(f"unknown expert_mode {self.expert_mode!r}")
        if self.warmup_loss not in ("topk_norm", "mil"):
            raise InvalidInputError(f"unknown warmup_loss {self.warmup_loss!r}")
        if self.pseudo_refresh not in ("epoch", "frozen"):
            raise InvalidInputError(f"unknown pseudo_refresh {self.pseudo_refresh!r}")
        if self.gate_reference not in ("self", "experts", "encoder"):
            raise InvalidInputError(f"unknown gate_reference {self.gate_reference!r}")
        if self.peakless not in ("zero", "topk"):
            raise InvalidInputError(f"unknown peakless {self.peakless!r}")
        if self.expert_reference not in ("self", "encoder"):
            raise InvalidInputError(f"unknown expert_reference {self.expert_reference!r}")
        if self.fusion not in ("gate", "soft"):
            raise InvalidInputError(f"unknown fusion {self.fusion!r}")
        if self.d % 4:
            raise InvalidInputError("model width d must be divisible by 4")

    @property
    def top_k(self) -> int:
        return self.k or losses.default_k(self.D)


# ---------------------------------------------------------------- optimizer

def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                 lr: float, wd: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One in-place AdamW update; ``step`` counts from 1."""
    if wd:
        param -= lr * wd * param
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params, lr=1e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.skipped = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite gradients."""
        if not all(np.isfinite(p.grad).all() for p in self.params):
            self.skipped += 1
            log.warning("non-finite gradient, step skipped (%d so far)", self.skipped)
            return False
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            adamw_update(p.data, p.grad, m, v, self.t, self.lr, self.wd, b1, b2, self.eps)
        return True


# ---------------------------------------------------------------- logging

class JsonlLog:
    """Collects per-epoch records; mirrors them to a JSON-lines file if given."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "a") if path else None

    def write(self, **rec):
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(dict(rec, time=time.time()), sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _finite(loss: nn.Tensor, where: str) -> float:
    val = float(loss.data)
    if not np.isfinite(val):
        raise DivergenceError(f"non-finite loss during {where}")
    return val


# ---------------------------------------------------------------- helpers

@dataclass
class TrainSet:
    """Training videos resampled to D and split by polarity."""
    abnormal: np.ndarray  # (N_a, D, d_feat)
    normal: np.ndarray  # (N_n, D, d_feat)
    abnormal_ids: list
    abnormal_classes: np.ndarray
    abnormal_records: list

    @classmethod
    def from_records(cls, train: list, D: int) -> "TrainSet":
        abn = [r for r in train if r.video_label == 1]
        nor = [r for r in train if r.video_label == 0]
        if not abn or not nor:
            raise InvalidInputError("training needs both normal and abnormal videos")
        return cls(np.stack([resample_to_fixed(r.features, D) for r in abn]),
                   np.stack([resample_to_fixed(r.features, D) for r in nor]),
                   [r.id for r in abn], np.array([r.class_id for r in abn]), abn)


def _pseudo_labels(scores: np.ndarray, splat: SplatConfig) -> np.ndarray:
    return np.stack([make_targets(s, splat) for s in scores])


def _batched(fn, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    with nn.no_grad():
        return np.concatenate([fn(x[i:i + chunk]) for i in range(0, len(x), chunk)])


def _pseudo_fit(abn: nn.Tensor, targets: np.ndarray, probs: bool, peakless: str,
                k: int) -> nn.Tensor:
    """BCE against pseudo-labels. With ``peakless='topk'`` abnormal videos
    whose scores hold no qualifying peak (all-zero targets) get the top-k
    abnormal term instead; each part is weighted by its share of the batch."""
    def bce(out, y):
        return losses.bce(out, y) if probs else losses.bce_with_logits(out, y)

    empty = ~targets.any(axis=1)
    if peakless == "zero" or not empty.any():
        return bce(abn, targets)
    rows = np.flatnonzero(empty)
    mil = losses.topk_abnormal_term(nn.logit(nn.take(abn, rows, axis=0)) if probs
                                    else nn.take(abn, rows, axis=0), k)
    if empty.all():
        return mil
    keep = np.flatnonzero(~empty)
    fit = bce(nn.take(abn, keep, axis=0), targets[keep])
    share = len(rows) / len(targets)
    return nn.add(nn.mul(fit, 1.0 - share), nn.mul(mil, share))


def _fit(name: str, forward: Callable, params: list, abn_inputs: np.ndarray,
         norm_inputs: np.ndarray, epochs: int, cfg: TrainConfig, rng, logger: JsonlLog,
         mil_epochs: int = 0, callback: Optional[Callable] = None, probs: bool = False,
         reference: Optional[np.ndarray] = None):
    """Shared training loop.

    ``forward`` maps a stacked batch of inputs to per-snippet logits (or
    probabilities when ``probs``). The first ``mil_epochs`` epochs use the
    top-k MIL objective with smoothness and sparsity; the rest use the TGS
    objective with pseudo-labels refreshed at the start of every epoch. The
    first ``cfg.warmup_epochs`` epochs of each phase use the top-k normal
    term alone (both top-k terms with ``warmup_loss='mil'``).

    Pseudo-labels come from ``reference`` scores when given, otherwise from
    the model's own scores; with ``pseudo_refresh='frozen'`` they are
    computed once, after warm-up, and kept.
    """
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    half = cfg.batch_size // 2
    k = cfg.top_k

    def to_logits(out):
        return nn.logit(out) if probs else out

    def to_probs(out):
        return out if probs else nn.sigmoid(out)

    pseudo = None
    for epoch in range(epochs):
        tgs = epoch >= mil_epochs
        phase_epoch = epoch - mil_epochs if tgs else epoch
        warm = phase_epoch < cfg.warmup_epochs
        if tgs and not warm and (pseudo is None or cfg.pseudo_refresh == "epoch"):
            if reference is not None:
                scores = reference
            else:
                scores = _batched(lambda x: to_probs(forward(x)).data, abn_inputs)
            pseudo = _pseudo_labels(scores, cfg.splat)
            if callback:
                callback(name, epoch, scores, pseudo)
        total, n = 0.0, 0
        for ai, ni in epoch_plan(len(abn_inputs), len(norm_inputs), half, rng):
            opt.zero_grad()
            out = forward(np.concatenate([abn_inputs[ai], norm_inputs[ni]]))
            abn = nn.take(out, np.arange(half), axis=0)
            nor = nn.take(out, np.arange(half, 2 * half), axis=0)
            norm_term = losses.topk_normal_term(to_logits(nor), k)
            if warm and cfg.warmup_loss == "topk_norm":
                loss = norm_term
            elif warm:
                loss = nn.add(norm_term, losses.topk_abnormal_term(to_logits(abn), k))
            elif not tgs:
                a = to_probs(abn)
                loss = nn.add(nn.add(norm_term, losses.topk_abnormal_term(to_logits(abn), k)),
                              nn.add(losses.smoothness(a, cfg.smoothness_coef),
                                     losses.sparsity(a, cfg.sparsity_coef)))
            else:
                loss = nn.add(norm_term, _pseudo_fit(abn, pseudo[ai], probs, cfg.peakless, k))
            total += _finite(loss, f"{name} epoch {epoch}")
            n += 1
            loss.backward()
            opt.step()
        logger.write(stage=name, epoch=epoch, phase="tgs" if tgs else "mil",
                     warmup=warm, loss=total / n, skipped_steps=opt.skipped)


# ---------------------------------------------------------------- stages

def train_task_encoder(ts: TrainSet, cfg: TrainConfig, logger: JsonlLog | None = None,
                       callback=None) -> tuple[TaskEncoder, dict]:
    """Stage one. Returns the fine-tuned encoder and the parameter snapshot
    taken at the end of the MIL phase."""
    logger = logger or JsonlLog()
    d_feat = ts.abnormal.shape[-1]
    enc = TaskEncoder(d_feat, cfg.d, _rng_for(cfg.seed, "init/encoder"))
    rng = _rng_for(cfg.seed, "batches/encoder")
    snapshot = {}

    def forward(x):
        return enc(x)[1]

    _fit("encoder", forward, enc.parameters(), ts.abnormal, ts.normal, cfg.E1_mil, cfg, rng,
         logger, mil_epochs=cfg.E1_mil, callback=callback)
    snapshot.update(enc.state_dict())
    _fit("encoder", forward, enc.parameters(), ts.abnormal, ts.normal, cfg.E1_tgs, cfg, rng,
         logger, mil_epochs=0, callback=callback)
    return enc, snapshot


def encode(encoder: TaskEncoder, x: np.ndarray) -> np.ndarray:
    return _batched(lambda b: encoder(b)[0].data, x)


def expert_groups(encoder: TaskEncoder, ts: TrainSet, cfg: TrainConfig) -> dict:
    """Abnormal-video indices routed to each expert."""
    if cfg.expert_mode == "class":
        keys = ts.abnormal_classes
    else:
        assign = cluster_videos(encoder, ts.abnormal_records, cfg.n_clusters, cfg.seed)
        keys = np.array([assign[i] for i in ts.abnormal_ids])
    return {int(g): np.flatnonzero(keys == g) for g in sorted(set(keys.tolist()))}


def train_experts(encoder: TaskEncoder, ts: TrainSet, cfg: TrainConfig,
                  logger: JsonlLog | None = None, n_groups: int | None = None,
                  callback=None, groups: dict | None = None) -> list:
    """Stage two: one expert per class (or cluster) on that group's abnormal
    videos plus all normal videos. The encoder stays frozen."""
    logger = logger or JsonlLog()
    groups = expert_groups(encoder, ts, cfg) if groups is None else groups
    n_groups = n_groups or (max(groups) + 1 if groups else 0)
    tl_abn, tl_nor = encode(encoder, ts.abnormal), encode(encoder, ts.normal)
    ref = None
    if cfg.expert_reference == "encoder":
        ref = _batched(lambda b: nn.sigmoid(encoder(b)[1]).data, ts.abnormal)
    experts = []
    for g in range(n_groups):
        rng_init = _rng_for(cfg.seed, f"init/expert{g}")
        ex = Expert(cfg.d, rng_init)
        idx = groups.get(g, np.zeros(0, int))
        if idx.size == 0:
            log.warning("expert %d has no abnormal training videos; left untrained", g)
            experts.append(ex)
            continue
        _fit(f"expert{g}", ex, ex.parameters(), tl_abn[idx], tl_nor, cfg.E2, cfg,
             _rng_for(cfg.seed, f"batches/expert{g}"), logger, callback=callback,
             reference=None if ref is None else ref[idx])
        experts.append(ex)
    return experts


def stack_expert_scores(experts: list, task_logits: np.ndarray) -> np.ndarray:
    """(..., T, N_experts) sigmoid scores of frozen experts."""
    return np.stack([_batched(lambda b: nn.sigmoid(e(b)).data, task_logits) for e in experts],
                    axis=-1)


def train_gate(encoder: TaskEncoder, experts: list, ts: TrainSet, cfg: TrainConfig,
               logger: JsonlLog | None = None, callback=None):
    """Stage three over frozen encoder and experts; returns a Gate, or a
    SoftMoE when ``cfg.fusion == 'soft'``."""
    logger = logger or JsonlLog()
    tl_abn, tl_nor = encode(encoder, ts.abnormal), encode(encoder, ts.normal)
    es_abn, es_nor = stack_expert_scores(experts, tl_abn), stack_expert_scores(experts, tl_nor)
    rng_init = _rng_for(cfg.seed, "init/gate")
    n = len(experts)
    soft = cfg.fusion == "soft"
    if soft:
        fuser = SoftMoE(n, cfg.d, rng_init)
    else:
        fuser = Gate(n, cfg.d, rng_init, use_task_features=cfg.use_task_features)
    width = cfg.d
    # concatenate the two inputs along features so _fit can slice batches
    abn_in = np.concatenate([es_abn, tl_abn], axis=-1)
    nor_in = np.concatenate([es_nor, tl_nor], axis=-1)

    def forward(x):
        return fuser(x[..., :n], x[..., n:n + width])

    reference = None
    if cfg.gate_reference == "experts":
        reference = es_abn.max(axis=-1)
    elif cfg.gate_reference == "encoder":
        reference = _batched(lambda b: nn.sigmoid(encoder(b)[1]).data, ts.abnormal)
    _fit("gate", forward, fuser.parameters(), abn_in, nor_in, cfg.E3, cfg,
         _rng_for(cfg.seed, "batches/gate"), logger, callback=callback, probs=soft,
         reference=reference)
    return fuser


# ---------------------------------------------------------------- clustering

def kmeans(X: np.ndarray, k: int, seed: int, max_iter: int = 50, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding. Returns (labels, centroids).

    An empty cluster is re-seeded at the point farthest from its current
    centroid."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise InvalidInputError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() == 0:
            centroids.append(X[rng.integers(n)])
        else:
            centroids.append(X[rng.choice(n, p=d2 / d2.sum())])
    C = np.array(centroids)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        labels = dist.argmin(axis=1)
        new = C.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(n), labels]))
                new[j] = X[far]
                labels[far] = j
        shift = np.abs(new - C).max()
        C = new
        if shift < tol:
            break
    labels = ((X[:, None, :] - C[None]) ** 2).sum(-1).argmin(axis=1)
    return labels, C


def video_embeddings(encoder: TaskEncoder, records: list) -> np.ndarray:
    """Mean task-aware feature per video, at native length."""
    with nn.no_grad():
        return np.stack([encoder(r.features.astype(np.float64))[0].data.mean(axis=0)
                         for r in records])


def cluster_videos(encoder: TaskEncoder, abnormal_train: list, k: int, seed: int) -> dict:
    """Map video id -> cluster index by k-means over mean task-aware features."""
    labels, _ = kmeans(video_embeddings(encoder, abnormal_train), k, seed)
    return {r.id: int(c) for r, c in zip(abnormal_train, labels)}


# ---------------------------------------------------------------- pipeline & scoring

@dataclass
class PipelineState:
    encoder: TaskEncoder
    mil_encoder_state: dict
    experts: list = field(default_factory=list)
    gate: object = None
    history: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)

    def bundle(self, cfg: TrainConfig, extra_meta: dict | None = None) -> ModelBundle:
        meta = {"d": cfg.d, "d_feat": self.encoder.d_feat, "train_config": config_to_dict(cfg)}
        meta.update(extra_meta or {})
        b = ModelBundle(self.encoder, list(self.experts), meta=meta)
        if self.mil_encoder_state:
            b.mil_encoder = TaskEncoder(self.encoder.d_feat, self.encoder.d,
                                        np.random.default_rng(0))
            b.mil_encoder.load_state_dict(self.mil_encoder_state)
        if isinstance(self.gate, SoftMoE):
            b.soft = self.gate
        else:
            b.gate = self.gate
        return b


    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "PipelineState":
        mil = bundle.mil_encoder.state_dict() if bundle.mil_encoder is not None else {}
        return cls(bundle.encoder, mil, list(bundle.experts),
                   bundle.gate if bundle.gate is not None else bundle.soft)


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))


def run_pipeline(train: list, cfg: TrainConfig, stages=("encoder", "experts", "gate"),
                 logger: JsonlLog | None = None, state: PipelineState | None = None,
                 callback=None) -> PipelineState:
    """Run stages in order. Later stages need the earlier ones, either in
    ``stages`` or already present in ``state``."""
    cfg.validate()
    logger = logger or JsonlLog()
    ts = TrainSet.from_records(train, cfg.D)
    if "encoder" in stages:
        enc, snap = train_task_encoder(ts, cfg, logger, callback)
        state = PipelineState(enc, snap)
    if state is None:
        raise InvalidInputError("experts/gate stages need a trained encoder")
    if "experts" in stages:
        groups = expert_groups(state.encoder, ts, cfg)
        n_groups = cfg.n_clusters if cfg.expert_mode == "cluster" else None
        state.experts = train_experts(state.encoder, ts, cfg, logger, n_groups, callback, groups)
        state.groups = {g: [ts.abnormal_ids[i] for i in idx] for g, idx in groups.items()}
    if "gate" in stages:
        if not state.experts:
            raise InvalidInputError("gate stage needs trained experts")
        state.gate = train_gate(state.encoder, state.experts, ts, cfg, logger, callback)
    state.history = list(logger.records)
    return state


def _per_video(records: list, fn) -> list:
    with nn.no_grad():
        return [fn(r.features.astype(np.float64)) for r in records]


def score_encoder(encoder: TaskEncoder, records: list) -> list:
    return _per_video(records, lambda x: nn.sigmoid(encoder(x)[1]).data)


def expert_score_matrix(encoder: TaskEncoder, experts: list, records: list) -> list:
    def f(x):
        tl = encoder(x)[0]
        return np.stack([nn.sigmoid(e(tl)).data for e in experts], axis=-1)
    return _per_video(records, f)


def score_fusion(encoder: TaskEncoder, fuser, experts: list, records: list,
                 masked: int | None = None) -> list:
    def f(x):
        tl = encoder(x)[0]
        es = np.stack([nn.sigmoid(e(tl)).data for e in experts], axis=-1)
        if masked is not None:
            es = mask_expert(es, masked)
        out = fuser(es, tl)
        return out.data if isinstance(fuser, SoftMoE) else nn.sigmoid(out).data
    return _per_video(records, f)


def evaluate_variants(state: PipelineState, test: list, masks: bool = False) -> dict:
    """EvalResults for the ablation rows: MIL encoder, TGS encoder, experts
    (max over expert scores), and the fused model; optionally the fused model
    with each expert masked in turn."""
    out = {}
    mil = TaskEncoder(state.encoder.d_feat, state.encoder.d, np.random.default_rng(0))
    mil.load_state_dict(state.mil_encoder_state)
    out["mil_encoder"] = evaluate(test, score_encoder(mil, test))
    out["tgs_encoder"] = evaluate(test, score_encoder(state.encoder, test))
    if state.experts:
        mats = expert_score_matrix(state.encoder, state.experts, test)
        out["experts_only"] = evaluate(test, [m.max(axis=-1) for m in mats])
    if state.gate is not None:
        out["gate"] = evaluate(test, score_fusion(state.encoder, state.gate, state.experts, test))
        if masks:
            for c in range(len(state.experts)):
                out[f"gate_mask{c}"] = evaluate(
                    test, score_fusion(state.encoder, state.gate, state.experts, test, masked=c))
    return out


def results_to_dict(results: dict) -> dict:
    return {k: v.to_dict() if isinstance(v, EvalResult) else v for k, v in results.items()}


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
