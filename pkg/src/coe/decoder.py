"""Toy conditional autoregressive decoder.

One step maps the previous token, the position and a condition vector to
next-token logits::

    logits = W_out^T tanh(W_h^T [emb(prev); c; pos_enc(pos)])

The condition vector is the mean grounded-evidence row concatenated with
the mean question token, so its size depends on the number of evidence
queries, never on the number of frames.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .egm import AttentionState, QuestionEmbedding
from .numerics import Rng, log_softmax_rows, softmax_rows

BOS = "<bos>"
EOS = "<eos>"
TAGS = (
    "<Temporal Anchors>",
    "</Temporal Anchors>",
    "<Reasoning Draft>",
    "</Reasoning Draft>",
    "<Answer>",
    "</Answer>",
)
# a range end or list item is glued to its separator so that the token before
# it (the range start, the previous range end) stays visible to the decoder
_TOKEN = re.compile(r"</?(?:Temporal Anchors|Reasoning Draft|Answer)>|[-;]\s*\d{2}:\d{2}|\d{2}:\d{2}|[-;]|[^\s;-]+", re.ASCII)


def _normalise(tok: str) -> str:
    if tok[0] in "-;" and len(tok) > 1:
        return ("-" if tok[0] == "-" else "; ") + tok[1:].strip()
    return tok


class SequenceLengthError(ValueError):
    pass


class Vocab:
    """Ordered, duplicate-free token list."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if len(tokens) > 256:
            raise ValueError(f"vocabulary too large ({len(tokens)} > 256)")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @classmethod
    def build(cls, horizon_s: int, words=(), answers=()):
        """Protocol vocabulary for videos up to ``horizon_s`` seconds long."""
        tokens = [BOS, EOS, *TAGS, "-", ";"]
        times = [f"{s // 60:02d}:{s % 60:02d}" for s in range(horizon_s + 1)]
        tokens += times + [f"-{t}" for t in times] + [f"; {t}" for t in times]
        for tok in (*words, *answers):
            if tok not in tokens:
                tokens.append(tok)
        return cls(tokens)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for tok in map(_normalise, _TOKEN.findall(text)):
            if tok not in self.index:
                raise KeyError(f"token {tok!r} is not in the vocabulary")
            ids.append(self.index[tok])
        return ids

    def detokenize(self, ids) -> str:
        toks = [self.tokens[i] for i in ids if self.tokens[i] not in (BOS, EOS)]
        text = " ".join(toks)
        return text.replace(" -", "-").replace("- ", "-").replace(" ;", ";")


_OPEN_A, _CLOSE_A, _OPEN_D, _CLOSE_D, _OPEN_ANS, _CLOSE_ANS = TAGS


class ProtocolGrammar:
    """Token-level automaton for the three-section response format.

    It fixes the section order, keeps anchors sorted (each start at or after the
    previous end, each end after its start) and keeps draft timestamps strictly
    increasing. Only the sampler and the loss consult it; the network itself
    stays memoryless. A state is ``(phase, last_time)``.
    """

    # phases
    OPEN, FIRST, START, END, DRAFT_OPEN, DRAFT, ANSWER_OPEN, ANSWER, CLOSE, DONE = range(10)

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        n = len(vocab)
        self.time = np.full(n, np.nan)
        kind = np.zeros(n, dtype=np.int8)  # 0 other, 1 point, 2 range end, 3 list item, 4 structural
        for i, tok in enumerate(vocab.tokens):
            m = re.fullmatch(r"([-;]?)\s*(\d{2}):(\d{2})", tok, re.ASCII)
            if m:
                self.time[i] = int(m.group(2)) * 60 + int(m.group(3))
                kind[i] = {"": 1, "-": 2, ";": 3}[m.group(1)]
            elif tok in (BOS, EOS, "-", ";") or tok in TAGS:
                kind[i] = 4
        self._kind = kind
        # a range start needs some later end, or the automaton would dead-end
        self._opens = (kind == 1) & (self.time < np.nanmax(np.where(kind == 2, self.time, np.nan)))
        self._text = (kind == 0) | (kind == 1)
        self._tag = {t: vocab.index[t] for t in TAGS}

    def _only(self, tok: int) -> np.ndarray:
        m = np.zeros(len(self.vocab), dtype=bool)
        m[tok] = True
        return m

    def start(self):
        return (self.OPEN, None)

    def allowed(self, state) -> np.ndarray:
        phase, last = state
        k, t = self._kind, self.time
        if phase == self.OPEN:
            return self._only(self._tag[_OPEN_A])
        if phase == self.FIRST:
            m = self._opens.copy()
            m[self._tag[_CLOSE_A]] = True
            return m
        if phase == self.START:
            return (k == 2) & (t > last)
        if phase == self.END:
            m = (k == 3) & (t >= last) & (t < self.time[self._opens].max() + 1)
            m[self._tag[_CLOSE_A]] = True
            return m
        if phase == self.DRAFT_OPEN:
            return self._only(self._tag[_OPEN_D])
        if phase == self.DRAFT:
            m = (k == 0) | ((k == 1) & ~(t <= (-1 if last is None else last)))
            m[self._tag[_CLOSE_D]] = True
            return m
        if phase == self.ANSWER_OPEN:
            return self._only(self._tag[_OPEN_ANS])
        if phase == self.ANSWER:
            m = self._text.copy()
            m[self._tag[_CLOSE_ANS]] = True
            return m
        if phase == self.CLOSE:
            return self._only(self.vocab.eos)
        return np.zeros(len(self.vocab), dtype=bool)

    def advance(self, state, tok: int):
        phase, last = state
        tok_s = self.vocab.tokens[tok]
        k, t = self._kind[tok], self.time[tok]
        if phase == self.OPEN:
            return (self.FIRST, None)
        if phase in (self.FIRST, self.END):
            return (self.DRAFT_OPEN, None) if tok_s == _CLOSE_A else (self.START, t)
        if phase == self.START:
            return (self.END, t)
        if phase == self.DRAFT_OPEN:
            return (self.DRAFT, None)
        if phase == self.DRAFT:
            if tok_s == _CLOSE_D:
                return (self.ANSWER_OPEN, None)
            return (self.DRAFT, t if k == 1 else last)
        if phase == self.ANSWER_OPEN:
            return (self.ANSWER, None)
        if phase == self.ANSWER:
            return (self.CLOSE, None) if tok_s == _CLOSE_ANS else state
        return (self.DONE, None)

    def masks(self, ids) -> np.ndarray:
        """Allowed-token mask before each position of ``ids`` (teacher forcing)."""
        out = np.empty((len(ids), len(self.vocab)), dtype=bool)
        state = self.start()
        for i, tok in enumerate(ids):
            out[i] = self.allowed(state)
            state = self.advance(state, int(tok))
        return out


class GrammarViolation(ValueError):
    pass


@dataclass
class TokenSequence:
    ids: list
    logprob: float | None = None
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


PARAM_NAMES = ("token_emb", "W_h", "W_out", "pos_enc")


@dataclass
class DecoderParams:
    token_emb: np.ndarray  # |V| x D_e
    W_h: np.ndarray  # (D_e + D_c + D_p) x H
    W_out: np.ndarray  # H x |V|
    pos_enc: np.ndarray  # T_max x D_p

    def __post_init__(self):
        d_e, d_p = self.token_emb.shape[1], self.pos_enc.shape[1]
        if self.W_h.shape[0] <= d_e + d_p:
            raise ValueError("W_h leaves no room for the condition vector")
        if self.W_out.shape != (self.W_h.shape[1], self.token_emb.shape[0]):
            raise ValueError(f"W_out shape {self.W_out.shape} inconsistent with W_h/token_emb")

    @property
    def d_e(self) -> int:
        return self.token_emb.shape[1]

    @property
    def d_c(self) -> int:
        return self.W_h.shape[0] - self.d_e - self.pos_enc.shape[1]

    @property
    def t_max(self) -> int:
        return self.pos_enc.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.token_emb.shape[0]

    @classmethod
    def init(cls, rng: Rng, vocab_size: int, d_c: int, d_e: int = 32, hidden: int = 64, t_max: int = 64, d_p: int = 16):
        d_in = d_e + d_c + d_p
        return cls(
            token_emb=rng.normal((vocab_size, d_e), 0.5),
            W_h=rng.normal((d_in, hidden), 1.0 / np.sqrt(d_in)),
            W_out=rng.normal((hidden, vocab_size), 1.0 / np.sqrt(hidden)),
            pos_enc=rng.normal((t_max, d_p), 0.5),
        )

    @classmethod
    def zeros_like(cls, other: "DecoderParams") -> "DecoderParams":
        return cls(*(np.zeros_like(getattr(other, n)) for n in PARAM_NAMES))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "DecoderParams":
        return DecoderParams(*(getattr(self, n).copy() for n in PARAM_NAMES))


def condition_vector(e: AttentionState, q: QuestionEmbedding) -> np.ndarray:
    return np.concatenate([e.grounded.mean(axis=0), q.tokens.mean(axis=0)])


def condition_vector_backward(d_c: np.ndarray, num_queries: int, d_v: int) -> np.ndarray:
    """Gradient w.r.t. the grounded evidence rows."""
    return np.tile(d_c[:d_v] / num_queries, (num_queries, 1))


def _check_pos(params: DecoderParams, length: int):
    if length > params.t_max:
        raise SequenceLengthError(f"sequence of length {length} exceeds T_max={params.t_max}")


def step_logits(params: DecoderParams, prev_token: int, pos: int, c: np.ndarray) -> np.ndarray:
    if not 0 <= pos < params.t_max:
        raise SequenceLengthError(f"position {pos} outside [0, {params.t_max})")
    x = np.concatenate([params.token_emb[prev_token], c, params.pos_enc[pos]])
    return np.tanh(x @ params.W_h) @ params.W_out


def _teacher_forced(params: DecoderParams, c: np.ndarray, ids: np.ndarray, bos: int):
    t = len(ids)
    prev = np.concatenate([[bos], ids[:-1]]).astype(np.int64)
    x = np.concatenate(
        [params.token_emb[prev], np.broadcast_to(c, (t, c.size)), params.pos_enc[:t]],
        axis=1,
    )
    hidden = np.tanh(x @ params.W_h)
    logits = hidden @ params.W_out
    return prev, x, hidden, logits


def _masked(logits: np.ndarray, ids: np.ndarray, grammar) -> np.ndarray:
    if grammar is None:
        return logits
    mask = grammar.masks(ids)
    if not mask[np.arange(ids.size), ids].all():
        bad = int(np.flatnonzero(~mask[np.arange(ids.size), ids])[0])
        raise GrammarViolation(f"token {ids[bad]} at position {bad} is not allowed by the grammar")
    return np.where(mask, logits, -np.inf)


def reasoning_loss(
    params: DecoderParams, c: np.ndarray, target, bos: int = 0, grammar: ProtocolGrammar | None = None
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Summed teacher-forced negative log-likelihood of ``target``.

    Returns ``(loss, grads, d_c)`` where ``grads`` holds one array per
    decoder parameter and ``d_c`` is the gradient w.r.t. the condition vector.
    With a ``grammar`` the softmax runs over the allowed tokens only.
    """
    ids = np.asarray(target.ids if isinstance(target, TokenSequence) else target, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("target sequence is empty")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise IndexError("token id out of range")
    _check_pos(params, ids.size)
    t = ids.size
    prev, x, hidden, logits = _teacher_forced(params, c, ids, bos)
    logp = log_softmax_rows(_masked(logits, ids, grammar))
    loss = -logp[np.arange(t), ids].sum()

    d_logits = np.exp(logp)
    d_logits[np.arange(t), ids] -= 1.0
    d_w_out = hidden.T @ d_logits
    d_pre = (d_logits @ params.W_out.T) * (1.0 - hidden * hidden)
    d_w_h = x.T @ d_pre
    d_x = d_pre @ params.W_h.T
    d_e, d_c = params.d_e, c.size
    d_emb = np.zeros_like(params.token_emb)
    np.add.at(d_emb, prev, d_x[:, :d_e])
    d_pos = np.zeros_like(params.pos_enc)
    d_pos[:t] = d_x[:, d_e + d_c :]
    grads = {"token_emb": d_emb, "W_h": d_w_h, "W_out": d_w_out, "pos_enc": d_pos}
    return float(loss), grads, d_x[:, d_e : d_e + d_c].sum(axis=0)


def sequence_logprob(params: DecoderParams, c: np.ndarray, y, bos: int = 0, grammar: ProtocolGrammar | None = None) -> float:
    ids = np.asarray(y.ids if isinstance(y, TokenSequence) else y, dtype=np.int64)
    _check_pos(params, ids.size)
    _, _, _, logits = _teacher_forced(params, c, ids, bos)
    if grammar is not None and not grammar.masks(ids)[np.arange(ids.size), ids].all():
        return float("-inf")
    return float(log_softmax_rows(_masked(logits, ids, grammar))[np.arange(ids.size), ids].sum())


def sample_response(
    params: DecoderParams,
    c: np.ndarray,
    temperature: float,
    rng: Rng | None,
    max_len: int | None = None,
    bos: int = 0,
    eos: int = 1,
    grammar: ProtocolGrammar | None = None,
) -> TokenSequence:
    """Ancestral sampling; ``temperature == 0`` decodes greedily.

    The recorded ``logprob`` is under the temperature-1 policy (restricted to
    the grammar's allowed tokens when one is given).
    """
    if temperature < 0:
        raise ValueError("temperature must be positive (or 0 for greedy decoding)")
    max_len = min(max_len or params.t_max, params.t_max)
    d_e = params.d_e
    w_emb = params.token_emb @ params.W_h[:d_e]
    w_pos = params.pos_enc[:max_len] @ params.W_h[d_e + c.size :]
    base = c @ params.W_h[d_e : d_e + c.size]
    prev = bos
    ids: list[int] = []
    total = 0.0
    state = grammar.start() if grammar is not None else None
    for pos in range(max_len):
        logits = np.tanh(base + w_emb[prev] + w_pos[pos]) @ params.W_out
        if grammar is not None:
            logits = np.where(grammar.allowed(state), logits, -np.inf)
        logp = logits - logits.max()
        logp = logp - np.log(np.exp(logp).sum())
        if temperature == 0:
            tok = int(np.argmax(logits))
        else:
            probs = softmax_rows(logits / temperature)
            tok = int(np.searchsorted(np.cumsum(probs), rng.uniform() * probs.sum(), side="right"))
            if tok >= probs.size or probs[tok] == 0.0:
                tok = int(np.flatnonzero(probs)[-1])
        total += float(logp[tok])
        ids.append(tok)
        prev = tok
        if grammar is not None:
            state = grammar.advance(state, tok)
        if tok == eos:
            return TokenSequence(ids, total, truncated=False)
    return TokenSequence(ids, total, truncated=True)
