import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coe.decoder import DecoderParams, TokenSequence, sequence_logprob
from coe.grpo import (
    DivergedPolicy,
    GrpoConfig,
    PreferencePair,
    attach_reference,
    build_pair,
    grpo_loss,
    preference_loss,
)
from coe.numerics import Optimizer, Rng
from coe.reward import RewardBreakdown


def _policy(seed, vocab=6, d_c=3):
    return DecoderParams.init(Rng(seed), vocab, d_c, d_e=3, hidden=5, t_max=8, d_p=2)


def _pairs(seed, policy, ref, n=3):
    r = Rng(seed)
    out = []
    for j in range(n):
        w = TokenSequence(r.integers(0, policy.vocab_size, size=4).tolist())
        l = TokenSequence(r.integers(0, policy.vocab_size, size=5).tolist())
        out.append(attach_reference(PreferencePair(j, r.normal(policy.d_c), w, l, 0.5), ref))
    return out


def test_loss_is_ln2_at_reference():
    for seed in range(20):
        p = _policy(seed)
        loss, _, _ = grpo_loss(p, p.copy(), _pairs(seed, p, p), GrpoConfig())
        assert abs(loss - math.log(2)) <= 1e-12


def test_worked_margin_value():
    mpmath.mp.dps = 40
    want = float(-mpmath.log(1 / (1 + mpmath.exp(-mpmath.mpf("0.2")))))
    got = preference_loss(1.0 - (-1.0), 0.1)
    assert abs(got - want) <= 1e-15
    assert round(got, 6) == 0.598139


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-30, 30))
def test_only_the_margin_matters(dw, dl, shift):
    assert preference_loss((dw + shift) - (dl + shift), 0.1) == pytest.approx(preference_loss(dw - dl, 0.1), abs=1e-12)
    assert preference_loss(dw - dl, 0.1) >= 0


def test_build_pair_cases():
    cfg = GrpoConfig(tie_epsilon=0.01)
    a, b = TokenSequence([1]), TokenSequence([2])
    pair = build_pair((0, np.zeros(2)), (a, b), (0.9, 0.4), cfg)
    assert pair.chosen is a and pair.rejected is b and pair.reward_gap == pytest.approx(0.5)
    assert build_pair((0, np.zeros(2)), (a, b), (0.4, 0.9), cfg).chosen is b
    assert build_pair((0, None), (a, b), (0.5, 0.5), cfg) is None
    assert build_pair((0, None), (a, b), (0.505, 0.5), cfg) is None
    br = RewardBreakdown(1, 1, 1, 0.7), RewardBreakdown(0, 0, 0, 0.1)
    assert build_pair((0, None), (a, b), br, cfg).chosen is a
    with pytest.raises(ValueError):
        GrpoConfig(beta=0)


def test_single_step_descends_and_moves_logprobs():
    p, ref = _policy(1), _policy(1)
    pair = _pairs(1, p, ref, n=1)[0]
    lw0 = sequence_logprob(p, pair.condition, pair.chosen)
    ll0 = sequence_logprob(p, pair.condition, pair.rejected)
    loss0, grads, _ = grpo_loss(p, ref, [pair], GrpoConfig())
    Optimizer("sgd-momentum", 1e-2, momentum=0.0).step(p.arrays(), grads)
    loss1, _, _ = grpo_loss(p, ref, [pair], GrpoConfig())
    assert loss1 < loss0
    assert sequence_logprob(p, pair.condition, pair.chosen) > lw0
    assert sequence_logprob(p, pair.condition, pair.rejected) < ll0


def test_empty_batch_and_divergence():
    p = _policy(0)
    loss, grads, dcs = grpo_loss(p, p, [], GrpoConfig())
    assert loss == 0.0 and dcs == [] and all(not g.any() for g in grads.values())
    pair = _pairs(0, p, p, n=1)[0]
    pair.ref_chosen = math.inf
    with pytest.raises(DivergedPolicy):
        grpo_loss(p, p, [pair], GrpoConfig())


def test_reference_is_cached_on_the_pair():
    p, ref = _policy(2), _policy(3)
    pair = _pairs(2, p, ref, n=1)[0]
    assert pair.ref_chosen == sequence_logprob(ref, pair.condition, pair.chosen)
    assert pair.ref_rejected == sequence_logprob(ref, pair.condition, pair.rejected)
