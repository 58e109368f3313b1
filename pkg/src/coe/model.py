"""Grounding module plus decoder, treated as one set of named parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .datagen import ANSWER_WORDS, DRAFT_WORDS, FeatureTable, WorldConfig
from .decoder import DecoderParams, ProtocolGrammar, Vocab, condition_vector, condition_vector_backward
from .egm import AttentionState, EgmParams, FrameFeatures, QuestionEmbedding, egm_backward, egm_forward
from .numerics import Rng


@dataclass
class CoEModel:
    egm: EgmParams
    dec: DecoderParams
    vocab: Vocab
    world: WorldConfig

    @classmethod
    def init(cls, world: WorldConfig, rng: Rng, num_queries=4, num_layers=2, d_e=32, hidden=64, d_p=16, t_max=64):
        vocab = build_vocab(world)
        egm = EgmParams.init(rng.sub("egm"), num_queries, world.d_v, world.d_question, num_layers)
        dec = DecoderParams.init(rng.sub("decoder"), len(vocab), world.d_v + world.d_question, d_e, hidden, t_max, d_p)
        return cls(egm, dec, vocab, world)

    @property
    def grammar(self) -> ProtocolGrammar:
        g = self.__dict__.get("_grammar")
        if g is None or g.vocab is not self.vocab:
            g = self.__dict__["_grammar"] = ProtocolGrammar(self.vocab)
        return g

    def named(self) -> dict[str, np.ndarray]:
        """Live views of every trainable array, keyed ``egm.*`` / ``dec.*``."""
        out = {"egm.base_queries": self.egm.base_queries, "egm.question_proj": self.egm.question_proj}
        out.update({f"dec.{k}": v for k, v in self.dec.arrays().items()})
        return out

    def copy(self) -> "CoEModel":
        egm = EgmParams(self.egm.base_queries.copy(), self.egm.question_proj.copy(), self.egm.num_layers)
        return CoEModel(egm, self.dec.copy(), self.vocab, self.world)

    def ground(self, v: FrameFeatures, q: QuestionEmbedding) -> tuple[AttentionState, np.ndarray]:
        state = egm_forward(v, q, self.egm)
        return state, condition_vector(state, q)

    def condition_backward(self, v, q, state, d_c) -> dict[str, np.ndarray]:
        d_e = condition_vector_backward(d_c, self.egm.num_queries, v.features.shape[1])
        g = egm_backward(v, q, self.egm, state, d_grounded=d_e)
        return {f"egm.{k}": val for k, val in g.items()}

    def config(self) -> dict:
        return {
            "world": self.world.__dict__,
            "vocab": self.vocab.tokens,
            "num_layers": self.egm.num_layers,
        }

    def save(self, path, extra: dict | None = None) -> None:
        cfg = self.config()
        if extra:
            cfg["extra"] = extra
        checkpoint.save(path, self.named(), cfg)

    @classmethod
    def load(cls, path) -> "CoEModel":
        arrays, cfg = checkpoint.load(path)
        try:
            egm = EgmParams(arrays["egm.base_queries"], arrays["egm.question_proj"], cfg["num_layers"])
            dec = DecoderParams(arrays["dec.token_emb"], arrays["dec.W_h"], arrays["dec.W_out"], arrays["dec.pos_enc"])
            world = WorldConfig(**cfg["world"])
            vocab = Vocab(cfg["vocab"])
        except KeyError as exc:
            raise checkpoint.CheckpointError(f"checkpoint lacks {exc.args[0]!r}") from None
        return cls(egm, dec, vocab, world)


def build_vocab(world: WorldConfig) -> Vocab:
    return Vocab.build(math.ceil(world.n_frames / world.fps), words=DRAFT_WORDS, answers=ANSWER_WORDS)


class QuestionCache:
    """Memoised question embeddings (the word table is fixed per dataset)."""

    def __init__(self, table: FeatureTable):
        self.table = table
        self._cache: dict[str, QuestionEmbedding] = {}

    def __call__(self, text: str) -> QuestionEmbedding:
        q = self._cache.get(text)
        if q is None:
            q = self._cache[text] = self.table.embed_question(text)
        return q
