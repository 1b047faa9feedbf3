import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gsmoe import nn
from gsmoe.errors import InvalidInputError
from oracles import module_grad_errors, numeric_grad, rel_err

TOL = 1e-4


def _weighted_sum(out, w):
    """A scalar with no symmetric cancellations: sum(out * w) for fixed w."""
    return nn.tsum(nn.mul(out, w))


def _op_grad_err(op, *shapes, rng, positive=False):
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    w = rng.normal(size=op(*[nn.Tensor(x) for x in xs]).shape)
    leaves = [nn.Tensor(x.copy(), requires_grad=True) for x in xs]
    _weighted_sum(op(*leaves), w).backward()
    errs = []
    for x, leaf in zip(xs, leaves):
        num = numeric_grad(lambda: _weighted_sum(op(*[nn.Tensor(v) for v in xs]), w).item(), x)
        errs.append(rel_err(leaf.grad, num))
    return max(errs)


# ---------------------------------------------------------------- tensor basics

def test_backward_twice_doubles_gradients(rng):
    x = nn.Tensor(rng.normal(size=4), requires_grad=True)
    nn.tsum(nn.mul(x, x)).backward()
    once = x.grad.copy()
    nn.tsum(nn.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * once)
    np.testing.assert_allclose(once, 2 * x.data)


def test_no_grad_records_nothing():
    x = nn.Tensor([1.0, 2.0], requires_grad=True)
    with nn.no_grad():
        y = nn.mul(x, 3.0)
    assert not y.requires_grad
    assert nn.grad_enabled()


def test_backward_needs_scalar_or_seed():
    x = nn.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(InvalidInputError):
        nn.mul(x, 2.0).backward()
    nn.mul(x, 2.0).backward(np.array([1.0, -1.0]))
    np.testing.assert_array_equal(x.grad, [2.0, -2.0])


def test_shared_subexpression_accumulates(rng):
    x = nn.Tensor(rng.normal(size=3), requires_grad=True)
    y = nn.exp(x)
    nn.tsum(nn.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 2 * np.exp(x.data), rtol=1e-15)


# ---------------------------------------------------------------- activations

def test_activation_values():
    assert nn.relu(nn.Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert nn.sigmoid(nn.Tensor([0.0])).item() == 0.5
    assert nn.gelu(nn.Tensor([0.0])).item() == 0.0


def test_gelu_tanh_approximation_at_one():
    want = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert nn.gelu(nn.Tensor([1.0])).item() == pytest.approx(want, abs=1e-15)
    assert nn.gelu(nn.Tensor([1.0])).item() == pytest.approx(0.841192, abs=1e-6)


def test_sigmoid_is_stable_at_extremes():
    s = nn.sigmoid(nn.Tensor([-1000.0, 1000.0])).data
    assert s[0] == 0.0 and s[1] == 1.0
    assert np.isfinite(nn.log_sigmoid(nn.Tensor([-1000.0, 1000.0])).data).all()


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_log_sigmoid_matches_log_of_sigmoid(x):
    np.testing.assert_allclose(nn.log_sigmoid(nn.Tensor(x)).data,
                               np.log(1 / (1 + np.exp(-x))), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name", ["gelu", "relu", "sigmoid", "exp", "softplus", "log_sigmoid"])
def test_activation_gradients(name, rng):
    op = getattr(nn, name)
    for _ in range(5):
        # relu's kink at 0 is hit with probability zero
        assert _op_grad_err(op, (3, 4), rng=rng) < TOL


def test_log_and_logit_gradients(rng):
    assert _op_grad_err(nn.log, (5,), rng=rng, positive=True) < TOL
    p = rng.uniform(0.05, 0.95, size=6)
    leaf = nn.Tensor(p.copy(), requires_grad=True)
    nn.tsum(nn.logit(leaf)).backward()
    np.testing.assert_allclose(leaf.grad, 1 / (p * (1 - p)), rtol=1e-12)


# ---------------------------------------------------------------- linear algebra ops

def test_linear_identity_and_scalar():
    x = np.arange(6.0).reshape(2, 3)
    out = nn.linear(nn.Tensor(x), nn.Tensor(np.eye(3)), nn.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    out = nn.linear(nn.Tensor([[2.0]]), nn.Tensor([[3.0]]), nn.Tensor([1.0]))
    assert out.data.tolist() == [[7.0]]


def test_linear_shape_mismatch_is_rejected():
    with pytest.raises(InvalidInputError):
        nn.linear(nn.Tensor(np.zeros((2, 3))), nn.Tensor(np.zeros((4, 2))), nn.Tensor(np.zeros(2)))


def test_linear_gradient_within_1e6(rng):
    for shape_x, n_out in [((5, 3), 4), ((2, 4, 3), 2), ((7,), 1)]:
        d_in = shape_x[-1]
        assert _op_grad_err(nn.linear, shape_x, (d_in, n_out), (n_out,), rng=rng) < 1e-6


@pytest.mark.parametrize("op,shapes", [
    (nn.add, [(3, 4), (4,)]),
    (nn.sub, [(3, 1), (3, 4)]),
    (nn.mul, [(2, 3, 4), (3, 4)]),
    (nn.matmul, [(2, 3, 4), (2, 4, 5)]),
    (lambda a: nn.tsum(a, axis=1), [(3, 4, 2)]),
    (lambda a: nn.mean(a, axis=-1, keepdims=True), [(3, 4)]),
    (lambda a: nn.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    (lambda a: nn.reshape(a, (6, 2)), [(3, 4)]),
    (lambda a, b: nn.concat([a, b], axis=-1), [(3, 2), (3, 5)]),
    (lambda a: nn.softmax(a, axis=-1), [(3, 5)]),
    (lambda a: nn.take(a, np.array([2, 0, 2]), axis=0), [(4, 3)]),
    (lambda a: nn.gather(a, np.array([[1, 0], [2, 2]]), axis=-1), [(2, 3)]),
    (lambda a: nn.column(a, 1), [(4, 3)]),
])
def test_op_gradients(op, shapes, rng):
    for _ in range(3):
        assert _op_grad_err(op, *shapes, rng=rng) < TOL


def test_division_gradient(rng):
    assert _op_grad_err(nn.div, (3, 4), (3, 4), rng=rng, positive=True) < TOL


def test_clamp_gradient_is_masked():
    x = nn.Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    nn.tsum(nn.clamp(x, 0.0, 1.0)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


# ---------------------------------------------------------------- softmax and layer norm

@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = nn.softmax(nn.Tensor(x), axis=-1).data
    assert np.abs(s.sum(axis=-1) - 1).max() <= 1e-12


def test_layer_norm_constant_row_is_zero():
    out = nn.layer_norm(nn.Tensor(np.full((2, 5), 3.0)), nn.Tensor(np.ones(5)), nn.Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_standardises(rng):
    x = rng.normal(3, 5, size=(6, 16))
    out = nn.layer_norm(nn.Tensor(x), nn.Tensor(np.ones(16)), nn.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-5)


def test_layer_norm_gradient(rng):
    for _ in range(5):
        assert _op_grad_err(nn.layer_norm, (3, 6), (6,), (6,), rng=rng) < TOL


def test_layer_norm_needs_two_features():
    with pytest.raises(InvalidInputError):
        nn.layer_norm(nn.Tensor(np.zeros((2, 1))), nn.Tensor([1.0]), nn.Tensor([0.0]))


# ---------------------------------------------------------------- attention and blocks

def test_single_key_attention_returns_projected_value(rng):
    mha = nn.MultiHeadAttention(8, 2, rng)
    q, kv = rng.normal(size=(5, 8)), rng.normal(size=(1, 8))
    out = mha(nn.Tensor(q), nn.Tensor(kv)).data
    assert np.all(mha.last_weights == 1.0)
    v = kv @ mha.v.W.data + mha.v.b.data
    want = v @ mha.out.W.data + mha.out.b.data
    np.testing.assert_allclose(out, np.repeat(want, 5, axis=0), rtol=1e-13)


def test_attention_weight_rows_sum_to_one(rng):
    mha = nn.MultiHeadAttention(8, 2, rng)
    mha(nn.Tensor(rng.normal(size=(3, 6, 8))))
    assert mha.last_weights.shape == (3, 2, 6, 6)
    assert np.abs(mha.last_weights.sum(-1) - 1).max() <= 1e-12


def test_attention_rejects_bad_shapes(rng):
    with pytest.raises(InvalidInputError):
        nn.MultiHeadAttention(6, 4, rng)
    mha = nn.MultiHeadAttention(8, 2, rng)
    with pytest.raises(InvalidInputError):
        mha(nn.Tensor(np.zeros((4, 6))))
    with pytest.raises(InvalidInputError):
        mha(nn.Tensor(np.zeros((4, 8))), nn.Tensor(np.zeros((3, 8))), nn.Tensor(np.zeros((2, 8))))


def test_attention_is_permutation_equivariant(rng):
    mha = nn.MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(7, 8))
    perm = rng.permutation(7)
    np.testing.assert_allclose(mha(nn.Tensor(x[perm])).data, mha(nn.Tensor(x)).data[perm],
                               rtol=1e-12, atol=1e-14)


def test_attention_gradient_two_heads(rng):
    for _ in range(3):
        mha = nn.MultiHeadAttention(8, 2, rng)
        q, kv, w = rng.normal(size=(4, 8)), rng.normal(size=(5, 8)), rng.normal(size=(4, 8))
        errs = module_grad_errors(mha, lambda a, b: _weighted_sum(mha(a, b), w), (q, kv))
        assert max(errs.values()) < TOL, errs


def test_block_with_zeroed_output_weights_is_identity(rng):
    blk = nn.TransformerBlock(8, 2, rng)
    for lin in (blk.attn.out, blk.fc2):
        lin.W.data[:] = 0
        lin.b.data[:] = 0
    x = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(blk(nn.Tensor(x)).data, x)


def test_block_shape_and_determinism(rng):
    blk = nn.TransformerBlock(8, 2, np.random.default_rng(7))
    twin = nn.TransformerBlock(8, 2, np.random.default_rng(7))
    x = rng.normal(size=(2, 9, 8))
    out = blk(nn.Tensor(x)).data
    assert out.shape == x.shape
    np.testing.assert_array_equal(out, twin(nn.Tensor(x)).data)


def test_block_gradient_end_to_end(rng):
    for _ in range(3):
        blk = nn.TransformerBlock(8, 2, rng)
        x, w = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        errs = module_grad_errors(blk, lambda a: _weighted_sum(blk(a), w), (x,))
        assert max(errs.values()) < TOL, errs


def test_score_mlp_widths(rng):
    mlp = nn.ScoreMLP(64, 64, rng)
    assert [l.W.shape for l in mlp.layers] == [(64, 16), (16, 8), (8, 4), (4, 1)]


# ---------------------------------------------------------------- modules

def test_parameter_init_bounds():
    lin = nn.Linear(16, 4, np.random.default_rng(0))
    assert np.abs(lin.W.data).max() <= 0.25 and np.abs(lin.b.data).max() <= 0.25


def test_state_dict_round_trip_and_mismatch(rng):
    a, b = nn.TransformerBlock(8, 2, rng), nn.TransformerBlock(8, 2, rng)
    b.load_state_dict(a.state_dict())
    x = rng.normal(size=(3, 8))
    np.testing.assert_array_equal(a(nn.Tensor(x)).data, b(nn.Tensor(x)).data)
    bad = a.state_dict()
    bad.pop("fc1.W")
    with pytest.raises(InvalidInputError):
        b.load_state_dict(bad)
