"""Finite-difference checks of every hand-written backward pass.

Each check draws small random instances, computes the analytic gradient and
compares it coordinate by coordinate against central differences with
``numerics.grad_check``. The result of a check is the list of worst relative
errors, one per instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderParams, TokenSequence, condition_vector, condition_vector_backward, reasoning_loss
from .egm import EgmParams, FrameFeatures, QuestionEmbedding, egm_backward, egm_forward, grounding_loss_and_grads
from .grpo import GrpoConfig, PreferencePair, attach_reference, grpo_loss
from .numerics import Rng, grad_check

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    errors: list

    @property
    def worst(self) -> float:
        return max(self.errors)

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE

    def as_dict(self) -> dict:
        return {"check": self.name, "instances": len(self.errors), "max_rel_err": float(self.worst), "passed": bool(self.passed)}


def _egm_instance(rng: Rng):
    n = int(rng.integers(4, 10))
    d_v = int(rng.integers(3, 7))
    k = int(rng.integers(1, min(n, 4) + 1))
    v = FrameFeatures(rng.normal((n, d_v)), 1.0)
    q = QuestionEmbedding(rng.normal((int(rng.integers(1, 4)), 3)))
    p = EgmParams.init(rng, k, d_v, 3, num_layers=int(rng.integers(1, 4)), scale=0.5)
    y = np.zeros(n)
    y[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1.0
    return v, q, p, y


def check_grounding(instances: int = 20, seed: int = 0, mode: str = "literal") -> CheckResult:
    """BCE grounding loss through max-pooling, softmax and the query recurrence."""
    rng = Rng(seed).sub(f"grounding/{mode}")
    errors = []
    for i in range(instances):
        v, q, p, y = _egm_instance(rng.sub(str(i)))

        def f(arrays):
            loss, g, _ = grounding_loss_and_grads(v, q, p, y, mode)
            return loss, [g["base_queries"], g["question_proj"]]

        errors.append(grad_check(f, [p.base_queries, p.question_proj]))
    return CheckResult(f"grounding_loss[{mode}]", errors)


def check_reasoning(instances: int = 20, seed: int = 0) -> CheckResult:
    """Teacher-forced NLL back through the condition vector into the EGM."""
    rng = Rng(seed).sub("reasoning")
    errors = []
    for i in range(instances):
        r = rng.sub(str(i))
        v, q, p, _ = _egm_instance(r)
        vocab = int(r.integers(4, 9))
        dec = DecoderParams.init(r, vocab, v.features.shape[1] + 3, d_e=3, hidden=5, t_max=8, d_p=2)
        target = r.integers(0, vocab, size=int(r.integers(1, 8))).tolist()

        def f(arrays):
            state = egm_forward(v, q, p)
            loss, g, d_c = reasoning_loss(dec, condition_vector(state, q), target)
            d_e = condition_vector_backward(d_c, p.num_queries, v.features.shape[1])
            ge = egm_backward(v, q, p, state, d_grounded=d_e)
            return loss, [ge["base_queries"], ge["question_proj"], *g.values()]

        errors.append(grad_check(f, [p.base_queries, p.question_proj, *dec.arrays().values()]))
    return CheckResult("reasoning_loss", errors)


def check_grpo(instances: int = 20, seed: int = 0) -> CheckResult:
    """Preference loss over a small batch of pairs, policy decoder parameters only."""
    rng = Rng(seed).sub("grpo")
    errors = []
    for i in range(instances):
        r = rng.sub(str(i))
        vocab, d_c = int(r.integers(4, 8)), int(r.integers(2, 5))
        policy = DecoderParams.init(r, vocab, d_c, d_e=3, hidden=4, t_max=6, d_p=2)
        ref = policy.copy()
        for a in ref.arrays().values():
            a += r.normal(a.shape, 0.3)
        pairs = []
        for j in range(int(r.integers(1, 4))):
            seqs = [TokenSequence(r.integers(0, vocab, size=int(r.integers(1, 6))).tolist()) for _ in range(2)]
            pair = PreferencePair(j, r.normal(d_c), seqs[0], seqs[1], 1.0)
            pairs.append(attach_reference(pair, ref))
        cfg = GrpoConfig(beta=float(r.uniform(0.05, 2.0)))

        def f(arrays):
            loss, g, _ = grpo_loss(policy, ref, pairs, cfg)
            return loss, list(g.values())

        errors.append(grad_check(f, list(policy.arrays().values())))
    return CheckResult("grpo_loss", errors)


def run_suite(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    return [
        check_grounding(instances, seed, "literal"),
        check_grounding(instances, seed, "logit"),
        check_reasoning(instances, seed),
        check_grpo(instances, seed),
    ]
