"""Small dense-tensor engine with reverse-mode differentiation.

Everything is float64 numpy. A ``Tensor`` records the op that produced it
when any input requires a gradient; ``backward`` walks that graph in reverse
topological order and *adds* into the ``grad`` buffers of leaf tensors.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .errors import InvalidInputError

GELU_C = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidInputError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed=None):
        if not self.requires_grad:
            raise InvalidInputError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise InvalidInputError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 else axes)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably."""
    x = as_tensor(x)
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _result(out, (x,), lambda g: (g * _sigmoid(z),))


def log_sigmoid(x) -> Tensor:
    return mul(softplus(mul(x, -1.0)), -1.0)


def logit(p, eps: float = 1e-7) -> Tensor:
    p = clamp(p, eps, 1.0 - eps)
    return sub(log(p), log(sub(1.0, p)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    z = x.data
    u = _SQRT_2_OVER_PI * (z + GELU_C * z ** 3)
    th = np.tanh(u)
    out = 0.5 * z * (1.0 + th)

    def back(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * z ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th ** 2) * du),)

    return _result(out, (x,), back)


# ---------------------------------------------------------------- reductions & shape

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _result(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather(x, index: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward."""
    x = as_tensor(x)
    index = np.asarray(index)

    def back(g):
        gx = np.zeros_like(x.data)
        # add.at so repeated indices accumulate
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis % x.ndim] = index
        np.add.at(gx, tuple(idx), g)
        return (gx,)

    return _result(np.take_along_axis(x.data, index, axis=axis), (x,), back)


def take(x, indices, axis: int = 0) -> Tensor:
    """Select entries along one axis (``np.take``)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)

    def back(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = indices
        np.add.at(gx, tuple(sl), g)
        return (gx,)

    return _result(np.take(x.data, indices, axis=axis), (x,), back)


def column(x, j: int) -> Tensor:
    """x[..., j] keeping the trailing axis."""
    idx = np.full(x.shape[:-1] + (1,), j)
    return gather(x, idx, axis=-1)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), back)


def linear(x, W, b=None) -> Tensor:
    """x[..., in] @ W[in, out] + b[out]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise InvalidInputError(f"linear: input width {x.shape[-1]} != {W.shape[0]}")
    out = x.data @ W.data
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise InvalidInputError(f"linear: bias shape {b.shape} != ({W.shape[1]},)")
        out = out + b.data
        parents = (x, W, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.reshape(-1, x.shape[-1]).T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _result(out, parents, back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Standardise the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise InvalidInputError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gain, bias), back)


# ---------------------------------------------------------------- modules

class Module:
    """Parameter container; attributes holding Tensors, Modules or lists of
    Modules are discovered in assignment order."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        out.update(m.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) ^ set(state)
        if missing:
            raise InvalidInputError(f"state dict mismatch on {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise InvalidInputError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = uniform_param(rng, (n_in, n_out), n_in)
        self.b = uniform_param(rng, (n_out,), n_in)

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` heads with an output
    projection. No positional information is added.

    Queries come from ``q_src``, keys from ``kv_src`` and values from
    ``v_src`` (defaulting to ``kv_src``); self-attention is ``q_src`` alone.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise InvalidInputError(f"width {d} not divisible by {n_heads} heads")
        self.d, self.n_heads = d, n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self._last_weights = None

    @property
    def last_weights(self):
        """Attention weights of the latest call, shape (B, H, T_q, T_k)."""
        return self._last_weights

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return transpose(reshape(x, (B, T, self.n_heads, self.d // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, q_src, kv_src=None, v_src=None) -> Tensor:
        q_src = as_tensor(q_src)
        kv_src = q_src if kv_src is None else as_tensor(kv_src)
        v_src = kv_src if v_src is None else as_tensor(v_src)
        squeeze = q_src.ndim == 2
        if squeeze:
            q_src, kv_src, v_src = (reshape(t, (1,) + t.shape) for t in (q_src, kv_src, v_src))
        for t in (q_src, kv_src, v_src):
            if t.ndim != 3 or t.shape[-1] != self.d:
                raise InvalidInputError(f"attention input shape {t.shape} incompatible with d={self.d}")
        if kv_src.shape[:2] != v_src.shape[:2] or q_src.shape[0] != kv_src.shape[0]:
            raise InvalidInputError("attention: key/value sequences disagree")
        B, Tq, _ = q_src.shape
        dh = self.d // self.n_heads
        q = self._split(self.q(q_src))
        k = self._split(self.k(kv_src))
        v = self._split(self.v(v_src))
        logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        w = softmax(logits, axis=-1)
        self._last_weights = w.data
        ctx = transpose(matmul(w, v), (0, 2, 1, 3))
        out = self.out(reshape(ctx, (B, Tq, self.d)))
        if squeeze:
            out = reshape(out, out.shape[1:])
        return out


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then h + MLP(LN(h)) with a
    d -> d/2 -> d ReLU MLP."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, d // 2, rng)
        self.fc2 = Linear(d // 2, d, rng)

    def __call__(self, x) -> Tensor:
        h = add(x, self.attn(self.ln1(x)))
        return add(h, self.fc2(relu(self.fc1(self.ln2(h)))))


class ScoreMLP(Module):
    """d_in -> w/4 -> w/8 -> w/16 -> 1 with GELU before the final layer only;
    returns pre-sigmoid logits of shape (..., n_out)."""

    def __init__(self, d_in: int, width: int, rng: np.random.Generator, n_out: int = 1):
        h1, h2, h3 = max(width // 4, 1), max(width // 8, 1), max(width // 16, 1)
        self.layers = [Linear(d_in, h1, rng), Linear(h1, h2, rng),
                       Linear(h2, h3, rng), Linear(h3, n_out, rng)]

    def __call__(self, x) -> Tensor:
        l1, l2, l3, l4 = self.layers
        return l4(gelu(l3(l2(l1(x)))))
