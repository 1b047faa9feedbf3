import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gsmoe import losses, nn
from gsmoe.errors import InvalidInputError
from oracles import numeric_grad, rel_err

LN2 = math.log(2.0)


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def sort_and_sum(videos, k, abnormal):
    """Mean over videos of -(1/k) sum of log-likelihoods of the k largest logits."""
    total = 0.0
    for v in videos:
        top = sorted(v, reverse=True)[:k]
        total += -sum(math.log(_sigmoid(z) if abnormal else 1.0 - _sigmoid(z)) for z in top) / k
    return total / len(videos)


def _grad_of(loss_fn, x):
    t = nn.Tensor(x.copy(), requires_grad=True)
    loss_fn(t).backward()
    return t.grad, numeric_grad(lambda: loss_fn(nn.Tensor(x)).item(), x)


# ---------------------------------------------------------------- top-k terms

def test_default_k():
    assert losses.default_k(200) == 13
    assert losses.default_k(16) == 1
    assert losses.default_k(17) == 2
    assert losses.default_k(1) == 1


@pytest.mark.parametrize("term", [losses.topk_abnormal_term, losses.topk_normal_term])
def test_zero_logits_give_ln2(term):
    assert term(nn.Tensor(np.zeros((1, 5))), 1).item() == pytest.approx(LN2, abs=1e-15)


def test_saturated_logits_give_zero():
    assert losses.topk_abnormal_term(nn.Tensor([[100.0, -3.0, 0.0]]), 1).item() < 1e-40
    assert losses.topk_normal_term(nn.Tensor([[-100.0, -300.0, -200.0]]), 1).item() < 1e-40


@pytest.mark.parametrize("abnormal", [True, False])
def test_topk_matches_sort_and_sum(rng, abnormal):
    term = losses.topk_abnormal_term if abnormal else losses.topk_normal_term
    for _ in range(30):
        x = rng.normal(0, 3, size=(4, 20))
        assert term(nn.Tensor(x), 3).item() == pytest.approx(
            sort_and_sum(x.tolist(), 3, abnormal), rel=1e-12)


def test_variable_length_videos_match_sort_and_sum(rng):
    vids = [rng.normal(size=n) for n in (5, 9, 14)]
    got = losses.topk_abnormal_term([nn.Tensor(v) for v in vids], 2).item()
    assert got == pytest.approx(sort_and_sum([v.tolist() for v in vids], 2, True), rel=1e-12)


def test_k_larger_than_video_is_rejected():
    with pytest.raises(InvalidInputError):
        losses.topk_abnormal_term(nn.Tensor(np.zeros((2, 3))), 4)
    with pytest.raises(InvalidInputError):
        losses.topk_normal_term([nn.Tensor(np.zeros(5)), nn.Tensor(np.zeros(2))], 3)


@given(arrays(np.float64, (3, 12), elements=st.floats(-20, 20)), st.integers(1, 12),
       st.randoms(use_true_random=False))
def test_topk_is_permutation_invariant(x, k, random):
    perm = list(range(12))
    random.shuffle(perm)
    for term in (losses.topk_abnormal_term, losses.topk_normal_term):
        a = term(nn.Tensor(x), k).item()
        b = term(nn.Tensor(x[:, perm]), k).item()
        assert a == pytest.approx(b, rel=1e-12, abs=1e-300)
        assert a >= 0 and math.isfinite(a)


def test_topk_loss_is_sum_of_terms(rng):
    a, n = rng.normal(size=(3, 10)), rng.normal(size=(3, 10))
    want = (losses.topk_abnormal_term(nn.Tensor(a), 2).item()
            + losses.topk_normal_term(nn.Tensor(n), 2).item())
    assert losses.topk_loss(nn.Tensor(a), nn.Tensor(n), 2).item() == pytest.approx(want, rel=1e-14)


# ---------------------------------------------------------------- BCE and TGS

def test_bce_perfect_predictions_near_zero():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert losses.bce(nn.Tensor(y), y).item() == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)


def test_bce_half_against_one_is_ln2():
    assert losses.bce(nn.Tensor([0.5]), [1.0]).item() == pytest.approx(LN2, abs=1e-15)


def test_bce_matches_elementwise_oracle(rng):
    p, y = rng.random(37), rng.random(37)
    want = -np.mean([yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)])
    assert losses.bce(nn.Tensor(p), y).item() == pytest.approx(want, rel=1e-12)


def test_bce_clamps_instead_of_overflowing():
    v = losses.bce(nn.Tensor([0.0, 1.0]), [1.0, 0.0]).item()
    assert v == pytest.approx(-math.log(1e-7), rel=1e-9)


def test_bce_length_mismatch_is_rejected():
    with pytest.raises(InvalidInputError):
        losses.bce(nn.Tensor([0.5, 0.5]), [1.0])


def test_bce_with_logits_matches_bce_inside_clamp_range(rng):
    z, y = rng.normal(0, 4, size=(3, 11)), rng.random((3, 11))
    want = losses.bce(nn.sigmoid(nn.Tensor(z)), y).item()
    assert losses.bce_with_logits(nn.Tensor(z), y).item() == pytest.approx(want, rel=1e-9)


def test_bce_with_logits_keeps_a_gradient_when_saturated():
    z = nn.Tensor([40.0, -40.0], requires_grad=True)
    losses.bce_with_logits(z, [0.0, 1.0]).backward()
    # d/dz of -log(1 - sigmoid(z)) is sigmoid(z) = 1, halved by the mean
    np.testing.assert_allclose(z.grad, [0.5, -0.5])
    clamped = nn.Tensor([40.0, -40.0], requires_grad=True)
    losses.bce(nn.sigmoid(clamped), [0.0, 1.0]).backward()
    assert (clamped.grad == 0).all()  # the probability form goes flat


def test_tgs_loss_vanishes_at_its_optimum():
    pseudo = np.zeros((2, 6))
    v = losses.tgs_loss(nn.Tensor(np.full((2, 6), 1e-12)), pseudo,
                        nn.Tensor(np.full((2, 6), -100.0)), 1).item()
    assert 0 <= v < 1e-6


def test_tgs_loss_decomposes(rng):
    p, y, n = rng.random((3, 8)), rng.random((3, 8)), rng.normal(size=(3, 8))
    want = losses.topk_normal_term(nn.Tensor(n), 2).item() + losses.bce(nn.Tensor(p), y).item()
    assert losses.tgs_loss(nn.Tensor(p), y, nn.Tensor(n), 2).item() == pytest.approx(want, rel=1e-14)


# ---------------------------------------------------------------- regularisers

def test_smoothness_and_sparsity_arithmetic():
    s = nn.Tensor([0.0, 1.0, 0.0])
    assert losses.smoothness(s, 1.0).item() == 2.0
    assert losses.sparsity(s, 1.0).item() == 1.0
    assert losses.smoothness(s).item() == pytest.approx(2 * 8e-4)
    assert losses.sparsity(s).item() == pytest.approx(8e-3)


def test_constant_and_zero_series():
    assert losses.smoothness(nn.Tensor([0.3] * 7)).item() == 0.0
    assert losses.sparsity(nn.Tensor([0.0] * 7)).item() == 0.0


def test_smoothness_needs_two_snippets():
    with pytest.raises(InvalidInputError):
        losses.smoothness(nn.Tensor([0.3]))


def test_regularisers_average_over_videos():
    s = nn.Tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    assert losses.smoothness(s, 1.0).item() == 1.0
    assert losses.sparsity(s, 1.0).item() == 0.5


# ---------------------------------------------------------------- gradients

def _probs(t):
    return nn.sigmoid(t)


LOSS_FNS = {
    "topk_abn": lambda t: losses.topk_abnormal_term(t, 3),
    "topk_norm": lambda t: losses.topk_normal_term(t, 3),
    "bce": lambda t: losses.bce(_probs(t), np.linspace(0, 1, t.data.size).reshape(t.shape)),
    "bce_logits": lambda t: losses.bce_with_logits(t, np.linspace(0, 1, t.data.size).reshape(t.shape)),
    "tgs": lambda t: losses.tgs_loss(_probs(t), np.linspace(1, 0, t.data.size).reshape(t.shape),
                                     nn.mul(t, 0.7), 2),
    "smoothness": lambda t: losses.smoothness(_probs(t), 1.0),
    "sparsity": lambda t: losses.sparsity(_probs(t), 1.0),
}


@pytest.mark.parametrize("name", sorted(LOSS_FNS))
def test_loss_gradients_match_finite_differences(name, rng):
    fn = LOSS_FNS[name]
    for _ in range(10):
        # spread-out logits keep the top-k set away from ties
        x = rng.normal(0, 2, size=(3, 9))
        analytic, numeric = _grad_of(fn, x)
        assert rel_err(analytic, numeric) < 1e-4
