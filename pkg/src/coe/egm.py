"""Evidence grounding: query-guided cross-attention over frame features.

The module maps frame features ``V`` (N x D_v) and a question embedding
``Q`` (L x D_l) to an attention matrix ``A`` (K x N), grounded evidence
``E = A V`` (K x D_v) and per-frame importance scores (column max of ``A``).
Several layers refine the queries residually: ``Q <- Q + E``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, Rng, log_sigmoid, sigmoid, softmax_rows, softmax_rows_backward


class ConfigurationError(ValueError):
    pass


@dataclass
class FrameFeatures:
    features: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError(f"frame features must be N x D_v with N >= 1, got {self.features.shape}")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class QuestionEmbedding:
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(f"question embedding must be L x D_l with L >= 1, got {self.tokens.shape}")


@dataclass
class EgmParams:
    base_queries: np.ndarray  # K x D_v
    question_proj: np.ndarray  # D_l x D_v
    num_layers: int = 2

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.base_queries.shape[0] < 1:
            raise ConfigurationError("need at least one evidence query")
        if self.base_queries.shape[1] != self.question_proj.shape[1]:
            raise DimensionError(
                f"base_queries {self.base_queries.shape} and question_proj {self.question_proj.shape} disagree on D_v"
            )

    @property
    def num_queries(self) -> int:
        return self.base_queries.shape[0]

    @classmethod
    def init(cls, rng: Rng, num_queries: int, d_v: int, d_l: int, num_layers: int = 2, scale: float = 0.1):
        return cls(
            base_queries=rng.normal((num_queries, d_v), scale),
            question_proj=rng.normal((d_l, d_v), scale),
            num_layers=num_layers,
        )


@dataclass
class AttentionState:
    attention: np.ndarray  # K x N, final layer
    grounded: np.ndarray  # K x D_v, final layer
    importance: np.ndarray  # N
    # per-layer (queries, attention, logits) kept for the backward pass
    trace: list = field(default_factory=list, repr=False)

    @property
    def logits(self) -> np.ndarray:
        """Scaled pre-softmax scores of the final layer."""
        return self.trace[-1][2]


def project_queries(q: QuestionEmbedding, p: EgmParams) -> np.ndarray:
    """Evidence queries: learned base queries plus the projected mean question token."""
    if q.tokens.shape[1] != p.question_proj.shape[0]:
        raise DimensionError(f"question tokens {q.tokens.shape} do not match question_proj {p.question_proj.shape}")
    pooled = q.tokens.mean(axis=0)
    return p.base_queries + (pooled @ p.question_proj)[None, :]


def frame_importance(a: np.ndarray) -> np.ndarray:
    return a.max(axis=0)


def frame_importance_backward(a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Route each frame's gradient to the query row holding its max (first on ties)."""
    out = np.zeros_like(a)
    rows = a.argmax(axis=0)
    out[rows, np.arange(a.shape[1])] = grad
    return out


def egm_forward(v: FrameFeatures, q: QuestionEmbedding, p: EgmParams) -> AttentionState:
    feats = v.features
    n, d_v = feats.shape
    if p.base_queries.shape[1] != d_v:
        raise DimensionError(f"frame features have D_v={d_v} but queries have D_v={p.base_queries.shape[1]}")
    if p.num_queries > n:
        raise ConfigurationError(f"cannot ground {p.num_queries} evidence pieces in {n} frames")
    scale = 1.0 / math.sqrt(d_v)
    queries = project_queries(q, p)
    trace = []
    for _ in range(p.num_layers):
        logits = (queries @ feats.T) * scale
        attn = softmax_rows(logits)
        grounded = attn @ feats
        trace.append((queries, attn, logits))
        queries = queries + grounded
    return AttentionState(attention=attn, grounded=grounded, importance=frame_importance(attn), trace=trace)


def egm_backward(
    v: FrameFeatures,
    q: QuestionEmbedding,
    p: EgmParams,
    state: AttentionState,
    d_attention: np.ndarray | None = None,
    d_grounded: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients w.r.t. ``base_queries`` and ``question_proj``.

    Upstream gradients may be given for the final-layer attention, grounded
    evidence and (scaled) logits; any of them may be omitted.
    """
    feats = v.features
    scale = 1.0 / math.sqrt(feats.shape[1])
    k = p.num_queries
    d_queries_next = np.zeros((k, feats.shape[1]))
    last = len(state.trace) - 1
    for m in range(last, -1, -1):
        queries, attn, _ = state.trace[m]
        d_e = d_queries_next.copy()
        d_a = np.zeros_like(attn)
        d_s_extra = None
        if m == last:
            if d_grounded is not None:
                d_e += d_grounded
            if d_attention is not None:
                d_a += d_attention
            d_s_extra = d_logits
        d_a += d_e @ feats.T
        d_s = softmax_rows_backward(attn, d_a)
        if d_s_extra is not None:
            d_s = d_s + d_s_extra
        d_queries_next = d_queries_next + (d_s @ feats) * scale
    pooled = q.tokens.mean(axis=0)
    return {
        "base_queries": d_queries_next,
        "question_proj": np.outer(pooled, d_queries_next.sum(axis=0)),
    }


def grounding_loss(scores: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy with a sigmoid applied to ``scores``.

    ``L = -(1/N) sum_i [y_i log s(a_i) + (1 - y_i) log(1 - s(a_i))]``.
    Fed with softmax-derived importance scores this is the literal form;
    fed with max-pooled logits it is an ordinary logit BCE.
    Returns the loss and its gradient ``(s(a) - y) / N``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if scores.shape != y.shape:
        raise DimensionError(f"scores {scores.shape} vs target {y.shape}")
    n = scores.size
    loss = -(y * log_sigmoid(scores) + (1.0 - y) * log_sigmoid(-scores)).sum() / n
    return float(loss), (sigmoid(scores) - y) / n


GROUNDING_MODES = ("literal", "logit")


def grounding_scores(state: AttentionState, mode: str = "literal") -> tuple[np.ndarray, np.ndarray]:
    """Scores fed to the BCE and the (K x N) matrix they were max-pooled from."""
    if mode == "literal":
        return state.importance, state.attention
    if mode == "logit":
        return state.logits.max(axis=0), state.logits
    raise ValueError(f"unknown grounding_loss_mode {mode!r}")


def grounding_loss_and_grads(
    v: FrameFeatures, q: QuestionEmbedding, p: EgmParams, y: np.ndarray, mode: str = "literal"
) -> tuple[float, dict[str, np.ndarray], AttentionState]:
    """End-to-end grounding loss with gradients into the EGM parameters."""
    state = egm_forward(v, q, p)
    scores, pooled_from = grounding_scores(state, mode)
    loss, d_scores = grounding_loss(scores, y)
    d_pooled = frame_importance_backward(pooled_from, d_scores)
    if mode == "literal":
        grads = egm_backward(v, q, p, state, d_attention=d_pooled)
    else:
        grads = egm_backward(v, q, p, state, d_logits=d_pooled)
    return loss, grads, state


def attention_curve_csv(importance: np.ndarray, fps: float) -> str:
    """Temporal attention curve as CSV (``frame_index,time_seconds,importance``)."""
    buf = io.StringIO()
    buf.write("frame_index,time_seconds,importance\n")
    for i, a in enumerate(np.asarray(importance, dtype=np.float64)):
        buf.write(f"{i},{i / fps:.6g},{a:.17g}\n")
    return buf.getvalue()
