"""Task encoder, per-class experts, cross-attention gate and the soft-MoE
variant. Every head returns pre-sigmoid logits; scores are their sigmoid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container, nn
from .errors import InvalidInputError
from .nn import Linear, Module, ScoreMLP, Tensor, TransformerBlock

MASK_VALUE = 0.5
SOFT_EPS = 1e-8


def _check_width(x: Tensor, d: int, what: str):
    if x.ndim not in (2, 3) or x.shape[-1] != d:
        raise InvalidInputError(f"{what}: expected (..., T, {d}), got {x.shape}")


class TaskEncoder(Module):
    """Stage-one stand-in: input projection, one 2-head block, linear score head."""

    def __init__(self, d_feat: int, d: int, rng: np.random.Generator, n_heads: int = 2):
        self.d_feat, self.d = d_feat, d
        self.proj = Linear(d_feat, d, rng)
        self.block = TransformerBlock(d, n_heads, rng)
        self.head = Linear(d, 1, rng)

    def __call__(self, features) -> tuple[Tensor, Tensor]:
        x = nn.as_tensor(features)
        _check_width(x, self.d_feat, "task encoder")
        task_logits = self.block(self.proj(x))
        logits = self.head(task_logits)
        return task_logits, nn.reshape(logits, logits.shape[:-1])


class Expert(Module):
    def __init__(self, d: int, rng: np.random.Generator, n_heads: int = 2):
        self.d = d
        self.block = TransformerBlock(d, n_heads, rng)
        self.mlp = ScoreMLP(d, d, rng)

    def __call__(self, task_logits) -> Tensor:
        x = nn.as_tensor(task_logits)
        _check_width(x, self.d, "expert")
        out = self.mlp(self.block(x))
        return nn.reshape(out, out.shape[:-1])


class Gate(Module):
    """Fuses expert scores with task-aware logits.

    Expert scores are projected to width d. One attention direction uses the
    task logits as queries and keys over projected-score values, the other
    uses projected scores as queries and keys over task-logit values. The two
    outputs are concatenated to width 2d and passed through a 4-head block and
    the score MLP. With ``use_task_features=False`` the projected scores stand
    in for the task logits everywhere.
    """

    def __init__(self, n_experts: int, d: int, rng: np.random.Generator,
                 use_task_features: bool = True, cross_heads: int = 2, block_heads: int = 4,
                 residual: bool = True):
        self.n_experts, self.d = n_experts, d
        self.use_task_features = use_task_features
        self.residual = residual
        self.score_proj = Linear(n_experts, d, rng)
        self.scores_by_logits = nn.MultiHeadAttention(d, cross_heads, rng)
        self.logits_by_scores = nn.MultiHeadAttention(d, cross_heads, rng)
        self.block = TransformerBlock(2 * d, block_heads, rng)
        self.mlp = ScoreMLP(2 * d, d, rng)

    def __call__(self, expert_scores, task_logits) -> Tensor:
        e = nn.as_tensor(expert_scores)
        if e.shape[-1] != self.n_experts:
            raise InvalidInputError(
                f"gate built for {self.n_experts} experts, got {e.shape[-1]} score columns")
        ps = self.score_proj(e)
        if self.use_task_features:
            tl = nn.as_tensor(task_logits)
            _check_width(tl, self.d, "gate")
            if tl.shape[:-1] != e.shape[:-1]:
                raise InvalidInputError(f"gate: T mismatch {tl.shape[:-1]} vs {e.shape[:-1]}")
        else:
            tl = ps
        a = self.scores_by_logits(tl, tl, ps)
        b = self.logits_by_scores(ps, ps, tl)
        if self.residual:
            # each direction adds its attention output onto its value stream
            a, b = nn.add(ps, a), nn.add(tl, b)
        out = self.mlp(self.block(nn.concat([a, b], axis=-1)))
        return nn.reshape(out, out.shape[:-1])


class SoftMoE(Module):
    """Per-class scores from the task pathway, averaged with weights given by
    the expert scores. Returns probabilities, not logits."""

    def __init__(self, n_classes: int, d: int, rng: np.random.Generator, n_heads: int = 2):
        self.n_classes, self.d = n_classes, d
        self.proj = Linear(d, d, rng)
        self.block = TransformerBlock(d, n_heads, rng)
        self.mlp = ScoreMLP(d, d, rng, n_out=n_classes)

    def __call__(self, expert_scores, task_logits) -> Tensor:
        e = nn.as_tensor(expert_scores)
        if e.shape[-1] != self.n_classes:
            raise InvalidInputError(f"soft MoE expects {self.n_classes} expert columns")
        tl = nn.as_tensor(task_logits)
        _check_width(tl, self.d, "soft MoE")
        cls = nn.sigmoid(self.mlp(self.block(self.proj(tl))))
        num = nn.tsum(nn.mul(cls, e), axis=-1)
        den = nn.add(nn.tsum(e, axis=-1), SOFT_EPS)
        return nn.div(num, den)


def task_encoder_forward(encoder: TaskEncoder, features) -> tuple[np.ndarray, np.ndarray]:
    with nn.no_grad():
        tl, logits = encoder(features)
    return tl.data, nn.sigmoid(logits).data


def expert_forward(expert: Expert, task_logits) -> np.ndarray:
    with nn.no_grad():
        return nn.sigmoid(expert(task_logits)).data


def gate_forward(gate: Gate, expert_scores, task_logits) -> np.ndarray:
    with nn.no_grad():
        return nn.sigmoid(gate(expert_scores, task_logits)).data


def soft_moe_forward(model: SoftMoE, expert_scores, task_logits) -> np.ndarray:
    with nn.no_grad():
        return model(expert_scores, task_logits).data


def mask_expert(expert_scores, class_index: int) -> np.ndarray:
    """Replace one expert's score column with the uninformative constant 0.5."""
    e = np.array(expert_scores.data if isinstance(expert_scores, Tensor) else expert_scores,
                 dtype=np.float64)
    n = e.shape[-1]
    if not 0 <= class_index < n:
        raise InvalidInputError(f"expert index {class_index} outside [0, {n})")
    e[..., class_index] = MASK_VALUE
    return e


@dataclass
class ModelBundle:
    encoder: TaskEncoder
    experts: list = field(default_factory=list)
    gate: Gate | None = None
    soft: SoftMoE | None = None
    meta: dict = field(default_factory=dict)
    mil_encoder: TaskEncoder | None = None  # stage-one snapshot before TGS fine-tuning

    def modules(self) -> dict:
        out = {"encoder": self.encoder}
        if self.mil_encoder is not None:
            out["mil_encoder"] = self.mil_encoder
        for i, e in enumerate(self.experts):
            out[f"expert{i}"] = e
        if self.gate is not None:
            out["gate"] = self.gate
        if self.soft is not None:
            out["soft"] = self.soft
        return out


def save_checkpoint(path, bundle: ModelBundle) -> None:
    names, arrays = [], []
    for mname, mod in bundle.modules().items():
        for pname, arr in mod.state_dict().items():
            names.append(f"{mname}/{pname}")
            arrays.append(("f8", arr))
    meta = dict(bundle.meta, n_experts=len(bundle.experts),
                has_gate=bundle.gate is not None, has_soft=bundle.soft is not None,
                use_task_features=bundle.gate.use_task_features if bundle.gate else True)
    container.write(path, arrays, {"kind": "checkpoint", "meta": meta, "names": names})


def load_checkpoint(path) -> ModelBundle:
    head, arrays = container.read(path)
    if head.get("kind") != "checkpoint":
        raise InvalidInputError(f"{path}: not a checkpoint container")
    meta = head["meta"]
    states: dict = {}
    for name, arr in zip(head["names"], arrays):
        mname, pname = name.split("/", 1)
        states.setdefault(mname, {})[pname] = arr.astype(np.float64)
    rng = np.random.default_rng(0)
    d, d_feat = meta["d"], meta["d_feat"]
    bundle = ModelBundle(TaskEncoder(d_feat, d, rng), meta=meta)
    if "mil_encoder" in states:
        bundle.mil_encoder = TaskEncoder(d_feat, d, rng)
    bundle.experts = [Expert(d, rng) for _ in range(meta["n_experts"])]
    if meta["has_gate"]:
        bundle.gate = Gate(meta["n_experts"], d, rng, use_task_features=meta["use_task_features"])
    if meta["has_soft"]:
        bundle.soft = SoftMoE(meta["n_experts"], d, rng)
    for mname, mod in bundle.modules().items():
        mod.load_state_dict(states.get(mname, {}))
    return bundle
