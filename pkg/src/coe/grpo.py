"""Preference pairs from sampled responses and the DPO-form preference loss.

For a pair (chosen ``w``, rejected ``l``) with log-ratios
``D = log pi_theta(y|x) - log pi_ref(y|x)`` the per-pair loss is
``-log sigmoid(beta * (D_w - D_l))``; the batch loss is the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderParams, TokenSequence, reasoning_loss, sample_response, sequence_logprob
from .numerics import Optimizer, Rng, log_sigmoid, sigmoid
from .reward import RewardBreakdown, RewardWeights, score_text


class DivergedPolicy(ArithmeticError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    beta: float = 0.1
    tie_epsilon: float = 1e-3
    samples_per_prompt: int = 2

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.tie_epsilon < 0:
            raise ValueError("tie_epsilon must be nonnegative")


@dataclass
class PreferencePair:
    sample_id: int
    condition: np.ndarray  # policy condition vector
    chosen: TokenSequence
    rejected: TokenSequence
    reward_gap: float
    ref_condition: np.ndarray | None = None
    ref_chosen: float | None = None  # cached reference log-probabilities
    ref_rejected: float | None = None
    context: tuple | None = field(default=None, repr=False)  # (features, question, egm state)


def build_pair(x, responses, rewards, cfg: GrpoConfig) -> PreferencePair | None:
    """Order two scored responses by reward; ties within ``tie_epsilon`` give None.

    ``x`` is ``(sample_id, condition)``.
    """
    (y1, y2), (r1, r2) = responses, rewards
    t1 = r1.total if isinstance(r1, RewardBreakdown) else float(r1)
    t2 = r2.total if isinstance(r2, RewardBreakdown) else float(r2)
    gap = abs(t1 - t2)
    if t1 == t2 or gap < cfg.tie_epsilon:
        return None
    sample_id, condition = x
    chosen, rejected = (y1, y2) if t1 > t2 else (y2, y1)
    return PreferencePair(sample_id, condition, chosen, rejected, gap)


def attach_reference(
    pair: PreferencePair, ref: DecoderParams, ref_condition=None, bos: int = 0, grammar=None
) -> PreferencePair:
    c = pair.condition if ref_condition is None else ref_condition
    pair.ref_condition = c
    pair.ref_chosen = sequence_logprob(ref, c, pair.chosen, bos, grammar)
    pair.ref_rejected = sequence_logprob(ref, c, pair.rejected, bos, grammar)
    return pair


def preference_loss(margin: float, beta: float) -> float:
    """``-log sigmoid(beta * margin)`` for a log-ratio margin ``D_w - D_l``."""
    return -log_sigmoid(beta * margin)


def grpo_loss(
    policy: DecoderParams, ref: DecoderParams | None, pairs, cfg: GrpoConfig, bos: int = 0, grammar=None
) -> tuple[float, dict[str, np.ndarray], list]:
    """Mean preference loss over ``pairs`` with gradients for the policy decoder.

    Reference log-probabilities come from the pair cache when present, else
    from ``ref``. Returns ``(loss, grads, d_conditions)`` where the last item
    holds the gradient w.r.t. each pair's policy condition vector.
    """
    if not pairs:
        return 0.0, {k: np.zeros_like(v) for k, v in policy.arrays().items()}, []
    grads = {k: np.zeros_like(v) for k, v in policy.arrays().items()}
    d_conditions = []
    total = 0.0
    b = len(pairs)
    for p in pairs:
        if p.ref_chosen is None:
            attach_reference(p, ref, bos=bos, grammar=grammar)
        nll_w, g_w, dc_w = reasoning_loss(policy, p.condition, p.chosen, bos, grammar)
        nll_l, g_l, dc_l = reasoning_loss(policy, p.condition, p.rejected, bos, grammar)
        delta_w = -nll_w - p.ref_chosen
        delta_l = -nll_l - p.ref_rejected
        if not (math.isfinite(delta_w) and math.isfinite(delta_l)):
            raise DivergedPolicy(f"non-finite log-probability for sample {p.sample_id}")
        z = cfg.beta * (delta_w - delta_l)
        total += -log_sigmoid(z)
        # d loss / d nll_w = sigmoid(-z) * beta, d loss / d nll_l = -sigmoid(-z) * beta
        coef = sigmoid(-z) * cfg.beta / b
        for k in grads:
            grads[k] += coef * (g_w[k] - g_l[k])
        d_conditions.append(coef * (dc_w - dc_l))
    return total / b, grads, d_conditions


@dataclass
class RLState:
    policy: "object"  # CoEModel
    ref: "object"  # CoEModel, frozen
    optimizer: Optimizer
    grpo: GrpoConfig
    weights: RewardWeights
    ground_truth: dict  # sample_id -> TrainingSample with answers
    questions: "object"
    temperature: float = 0.8
    freeze_egm: bool = True
    skipped_steps: int = 0


def rl_step(state: RLState, prompts, rng: Rng) -> dict:
    """Sample two responses per prompt, build preference pairs, take one optimizer step."""
    policy, ref = state.policy, state.ref
    vocab = policy.vocab
    pairs, breakdowns = [], []
    for s in sorted(prompts, key=lambda s: s.sample_id):
        q = state.questions(s.question)
        egm_state, c = policy.ground(s.features, q)
        gt = state.ground_truth[s.sample_id].ground_truth()
        seqs, scored = [], []
        for _ in range(state.grpo.samples_per_prompt):
            seq = sample_response(
                policy.dec, c, state.temperature, rng, bos=vocab.bos, eos=vocab.eos, grammar=policy.grammar
            )
            br, _ = score_text(vocab.detokenize(seq.ids), gt, state.weights)
            seqs.append(seq)
            scored.append(br)
        breakdowns.extend(scored)
        pair = build_pair((s.sample_id, c), seqs[:2], scored[:2], state.grpo)
        if pair is None:
            continue
        ref_c = c if state.freeze_egm else ref.ground(s.features, q)[1]
        attach_reference(pair, ref.dec, ref_c, bos=vocab.bos, grammar=policy.grammar)
        pair.context = (s.features, q, egm_state)
        pairs.append(pair)

    metrics = {
        "mean_reward": float(np.mean([b.total for b in breakdowns])),
        "mean_f1": float(np.mean([b.f1_grounding for b in breakdowns])),
        "mean_iou": float(np.mean([b.iou_process for b in breakdowns])),
        "answer_acc": float(np.mean([b.answer_correct for b in breakdowns])),
        "pair_yield": len(pairs) / max(1, len(prompts)),
    }
    if not pairs:
        state.skipped_steps += 1
        metrics["grpo_loss"] = float("nan")
        return metrics
    loss, dec_grads, d_cs = grpo_loss(policy.dec, ref.dec, pairs, state.grpo, bos=vocab.bos, grammar=policy.grammar)
    grads = {f"dec.{k}": g for k, g in dec_grads.items()}
    if not state.freeze_egm:
        for p, d_c in zip(pairs, d_cs):
            v, q, egm_state = p.context
            for k, g in policy.condition_backward(v, q, egm_state, d_c).items():
                grads[k] = grads.get(k, 0.0) + g
    state.optimizer.step(policy.named(), grads)
    metrics["grpo_loss"] = loss
    return metrics
