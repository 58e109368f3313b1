import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coe.egm import (
    ConfigurationError,
    EgmParams,
    FrameFeatures,
    QuestionEmbedding,
    attention_curve_csv,
    egm_forward,
    frame_importance,
    grounding_loss,
    grounding_loss_and_grads,
    grounding_scores,
    project_queries,
)
from coe.numerics import DimensionError, Rng, grad_check, softmax_rows

from conftest import random_attention_instance


def test_project_queries_cases():
    q = QuestionEmbedding(np.ones((6, 16)))
    zero = EgmParams(np.zeros((4, 32)), np.zeros((16, 32)))
    assert np.array_equal(project_queries(q, zero), np.zeros((4, 32)))
    base = np.arange(128.0).reshape(4, 32)
    assert np.array_equal(project_queries(q, EgmParams(base, np.zeros((16, 32)))), base)
    with pytest.raises(DimensionError):
        project_queries(QuestionEmbedding(np.ones((2, 5))), zero)


def test_uniform_attention_gives_frame_mean():
    v = FrameFeatures(np.random.default_rng(0).normal(size=(7, 3)))
    p = EgmParams(np.zeros((1, 3)), np.zeros((2, 3)), num_layers=1)
    st_ = egm_forward(v, QuestionEmbedding(np.ones((1, 2))), p)
    assert np.allclose(st_.attention, 1 / 7, rtol=1e-15)
    assert np.allclose(st_.grounded[0], v.features.mean(axis=0), atol=1e-15)


def test_saturated_attention():
    feats = np.zeros((5, 4))
    feats[2, 0] = 1.0
    # logit margin 60 after the 1/sqrt(D_v) scaling
    p = EgmParams(np.array([[120.0, 0, 0, 0]]), np.zeros((1, 4)), num_layers=1)
    st_ = egm_forward(FrameFeatures(feats), QuestionEmbedding(np.zeros((1, 1))), p)
    assert st_.attention[0, 2] >= 1 - 1e-9


def _unrolled(v, q, p):
    queries = p.base_queries + q.tokens.mean(axis=0) @ p.question_proj
    for _ in range(p.num_layers):
        a = softmax_rows(queries @ v.T / math.sqrt(v.shape[1]))
        e = a @ v
        queries = queries + e
    return a, e


def test_two_layers_match_hand_unrolled_recurrence(nprng):
    for _ in range(20):
        v, q, p = random_attention_instance(nprng, 9, 5, 3, m=2)
        a, e = _unrolled(v.features, q, p)
        st_ = egm_forward(v, q, p)
        assert np.allclose(st_.attention, a, rtol=1e-13, atol=1e-15)
        assert np.allclose(st_.grounded, e, rtol=1e-13, atol=1e-14)


def test_more_queries_than_frames_is_rejected():
    p = EgmParams(np.zeros((4, 2)), np.zeros((1, 2)))
    with pytest.raises(ConfigurationError):
        egm_forward(FrameFeatures(np.zeros((3, 2))), QuestionEmbedding(np.zeros((1, 1))), p)


def test_frame_importance_examples():
    a = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    assert np.array_equal(frame_importance(a), [0.7, 0.2, 0.8])
    assert np.array_equal(frame_importance(a[:1]), a[0])
    assert np.allclose(frame_importance(np.full((3, 4), 0.25)), 0.25)


def _mp_bce(a, y):
    mpmath.mp.dps = 40
    total = mpmath.mpf(0)
    for ai, yi in zip(a, y):
        s = 1 / (1 + mpmath.exp(-mpmath.mpf(ai)))
        total += yi * mpmath.log(s) + (1 - yi) * mpmath.log(1 - s)
    return float(-total / len(a))


def test_grounding_loss_worked_value():
    loss, _ = grounding_loss(np.array([0.8, 0.1]), np.array([1.0, 0.0]))
    assert loss == pytest.approx(_mp_bce([0.8, 0.1], [1, 0]), abs=1e-14)
    assert round(loss, 6) == 0.557749


def test_grounding_loss_decreases_toward_saturation():
    values = [grounding_loss(np.full(3, a), np.ones(3))[0] for a in (1, 2, 4, 8)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_grounding_loss_gradient(nprng):
    for _ in range(10):
        a, y = nprng.normal(size=6), (nprng.random(6) < 0.5).astype(float)

        def f(params):
            loss, g = grounding_loss(params[0], y)
            return loss, [g]

        assert grad_check(f, [a]) < 1e-6


@pytest.mark.parametrize("mode", ["literal", "logit"])
def test_end_to_end_grounding_gradient_n8(mode):
    rng = np.random.default_rng(3)
    v, q, p = random_attention_instance(rng, 8, 4, 3)
    y = np.zeros(8)
    y[[1, 5]] = 1

    def f(arrays):
        loss, g, _ = grounding_loss_and_grads(v, q, p, y, mode)
        return loss, [g["base_queries"], g["question_proj"]]

    assert grad_check(f, [p.base_queries, p.question_proj]) < 1e-5


def test_unknown_mode():
    v, q, p = random_attention_instance(np.random.default_rng(0), 4, 2, 1)
    with pytest.raises(ValueError):
        grounding_scores(egm_forward(v, q, p), "soft")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 6), st.integers(1, 4), st.integers(1, 3))
def test_attention_invariants(seed, n, d_v, k, m):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    v, q, p = random_attention_instance(rng, n, d_v, k, m=m, scale=3.0)
    st_ = egm_forward(v, q, p)
    a = st_.attention
    assert np.all(a >= 0) and np.allclose(a.sum(axis=1), 1, atol=1e-9, rtol=0)
    assert np.array_equal(st_.importance, a.max(axis=0))
    assert np.all(st_.importance > 0) and np.all(st_.importance <= 1)
    lo, hi = v.features.min(axis=0), v.features.max(axis=0)
    assert np.all(st_.grounded >= lo - 1e-12) and np.all(st_.grounded <= hi + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_frame_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    v, q, p = random_attention_instance(rng, 7, 4, 2)
    y = (rng.random(7) < 0.4).astype(float)
    perm = rng.permutation(7)
    a = egm_forward(v, q, p)
    b = egm_forward(FrameFeatures(v.features[perm]), q, p)
    assert np.allclose(b.attention, a.attention[:, perm], atol=1e-14)
    assert np.allclose(b.importance, a.importance[perm], atol=1e-14)
    la = grounding_loss(a.importance, y)[0]
    lb = grounding_loss(b.importance, y[perm])[0]
    assert la == pytest.approx(lb, rel=1e-13)


def test_attention_curve_csv():
    text = attention_curve_csv(np.array([0.25, 0.5]), fps=2.0)
    assert text.splitlines() == ["frame_index,time_seconds,importance", "0,0,0.25", "1,0.5,0.5"]
