"""Supervised and preference-based training, evaluation and the full pipeline."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import checkpoint
from .datagen import Dataset, TrainingSample, load_dataset
from .decoder import TokenSequence, condition_vector_backward, reasoning_loss, sample_response
from .egm import egm_backward, frame_importance_backward, grounding_loss, grounding_scores
from .grpo import GrpoConfig, RLState, rl_step
from .model import CoEModel, QuestionCache
from .numerics import Optimizer, Rng
from .reward import RewardWeights, score_text

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    lam: float = 1.0
    sft_steps: int = 2000
    rl_steps: int = 300
    batch_size: int = 16
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    rl_learning_rate: float = 1e-3
    grounding_loss_mode: str = "literal"
    eval_every: int = 0
    num_queries: int = 4
    num_layers: int = 2
    d_e: int = 32
    hidden: int = 64
    d_p: int = 16
    t_max: int = 64
    temperature: float = 0.8
    beta: float = 0.1
    tie_epsilon: float = 1e-3
    w_g: float = 0.3
    w_p: float = 0.3
    w_a: float = 0.4
    freeze_egm_in_rl: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        for name in ("sft_steps", "rl_steps", "batch_size", "num_queries", "num_layers"):
            if getattr(self, name) < 0 or (name not in ("sft_steps", "rl_steps") and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")

    @property
    def weights(self) -> RewardWeights:
        return RewardWeights(self.w_g, self.w_p, self.w_a)

    @property
    def grpo(self) -> GrpoConfig:
        return GrpoConfig(beta=self.beta, tie_epsilon=self.tie_epsilon)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read ``key = value`` pairs from the ``[train]`` section of an INI file."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"config file {path} not found")
        if not parser.has_section("train"):
            return cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in parser.items("train"):
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            t = types[key]
            if t in ("bool", bool):
                kw[key] = parser.getboolean("train", key)
            elif t in ("int", int):
                kw[key] = int(raw)
            elif t in ("float", float):
                kw[key] = float(raw)
            else:
                kw[key] = raw
        return cls(**kw)


def new_model(world, cfg: TrainConfig) -> CoEModel:
    return CoEModel.init(
        world,
        Rng(cfg.seed).sub("init"),
        num_queries=cfg.num_queries,
        num_layers=cfg.num_layers,
        d_e=cfg.d_e,
        hidden=cfg.hidden,
        d_p=cfg.d_p,
        t_max=cfg.t_max,
    )


def target_ids(model: CoEModel, s: TrainingSample) -> list[int]:
    return model.vocab.tokenize(s.target_text()) + [model.vocab.eos]


def sample_loss_and_grads(model: CoEModel, s: TrainingSample, questions: QuestionCache, cfg: TrainConfig):
    """Grounding and reasoning loss of one sample with gradients for all parameters."""
    v, q = s.features, questions(s.question)
    state, c = model.ground(v, q)
    scores, pooled_from = grounding_scores(state, cfg.grounding_loss_mode)
    l_g, d_scores = grounding_loss(scores, s.y_target())
    l_r, dec_grads, d_c = reasoning_loss(model.dec, c, target_ids(model, s), model.vocab.bos, model.grammar)
    d_pooled = frame_importance_backward(pooled_from, d_scores)
    d_grounded = condition_vector_backward(cfg.lam * d_c, model.egm.num_queries, v.features.shape[1])
    kw = {"d_attention": d_pooled} if cfg.grounding_loss_mode == "literal" else {"d_logits": d_pooled}
    egm_grads = egm_backward(v, q, model.egm, state, d_grounded=d_grounded, **kw)
    grads = {f"egm.{k}": g for k, g in egm_grads.items()}
    grads.update({f"dec.{k}": cfg.lam * g for k, g in dec_grads.items()})
    return l_g, l_r, grads


def sft_step(batch, model: CoEModel, opt: Optimizer, cfg: TrainConfig, questions: QuestionCache) -> dict:
    """One optimizer step on the mean of ``L_g + lam * L_r`` over ``batch``."""
    total = {name: np.zeros_like(p) for name, p in model.named().items()}
    lg_sum = lr_sum = 0.0
    for s in batch:
        if s.split == "rl" or s.answer is None:
            raise SchemaError(f"sample {s.sample_id} has no supervision (split {s.split!r})")
        l_g, l_r, grads = sample_loss_and_grads(model, s, questions, cfg)
        lg_sum += l_g
        lr_sum += l_r
        for name, g in grads.items():
            total[name] += g
    b = len(batch)
    opt.step(model.named(), {name: g / b for name, g in total.items()})
    l_g, l_r = lg_sum / b, lr_sum / b
    return {"loss_grounding": l_g, "loss_reasoning": l_r, "loss_total": l_g + cfg.lam * l_r}


def train_sft(model: CoEModel, data: list, cfg: TrainConfig, questions: QuestionCache, log_every: int = 100) -> list:
    opt = Optimizer(cfg.optimizer, cfg.learning_rate)
    rng = Rng(cfg.seed).sub("sft-batches")
    history = []
    for step in range(cfg.sft_steps):
        idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
        batch = [data[i] for i in sorted(idx)]
        metrics = sft_step(batch, model, opt, cfg, questions)
        history.append(metrics)
        if log_every and step % log_every == 0:
            log.info("sft step %d: %s", step, metrics)
    return history


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def topk_recall(scores, key_frames) -> float:
    k = len(key_frames)
    top = np.argsort(-np.asarray(scores), kind="stable")[:k]
    return len(set(top.tolist()) & set(key_frames)) / k


@dataclass
class EvalReport:
    auroc: float
    topk_recall: float
    answer_accuracy: float
    mean_reward: float
    mean_f1: float
    mean_iou: float
    mean_length: float
    validity_rate: float
    n_samples: int
    records: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("records")
        return d


def generate(model: CoEModel, s: TrainingSample, questions: QuestionCache, temperature=0.0, rng=None):
    state, c = model.ground(s.features, questions(s.question))
    seq = sample_response(
        model.dec, c, temperature, rng, bos=model.vocab.bos, eos=model.vocab.eos, grammar=model.grammar
    )
    return state, seq, model.vocab.detokenize(seq.ids)


def evaluate(model: CoEModel, samples: list, cfg: TrainConfig, questions: QuestionCache) -> EvalReport:
    """Greedy decoding on held-out samples; unparseable outputs count as invalid with reward 0."""
    weights = cfg.weights
    all_scores, all_labels, recalls, records = [], [], [], []
    valid = correct = 0
    rewards, f1s, ious, lengths = [], [], [], []
    for s in sorted(samples, key=lambda s: s.sample_id):
        state, seq, text = generate(model, s, questions)
        all_scores.append(state.importance)
        all_labels.append(s.y_target())
        recalls.append(topk_recall(state.importance, s.key_frame_indices.sorted()))
        br, ok = score_text(text, s.ground_truth(), weights)
        valid += ok
        correct += br.answer_correct
        rewards.append(br.total)
        f1s.append(br.f1_grounding)
        ious.append(br.iou_process)
        lengths.append(len(seq))
        records.append(
            {"sample_id": s.sample_id, "f1": br.f1_grounding, "iou": br.iou_process,
             "answer": br.answer_correct, "reward": br.total}
        )
    n = len(records)
    return EvalReport(
        auroc=auroc(np.concatenate(all_scores), np.concatenate(all_labels)),
        topk_recall=float(np.mean(recalls)),
        answer_accuracy=correct / n,
        mean_reward=float(np.mean(rewards)),
        mean_f1=float(np.mean(f1s)),
        mean_iou=float(np.mean(ious)),
        mean_length=float(np.mean(lengths)),
        validity_rate=valid / n,
        n_samples=n,
        records=records,
    )


RL_LOG_FIELDS = ("step", "mean_reward", "mean_f1", "mean_iou", "answer_acc", "grpo_loss", "pair_yield")


def train_rl(
    model: CoEModel, ref: CoEModel, prompts: list, ground_truth: dict, cfg: TrainConfig,
    questions: QuestionCache, log_path=None,
) -> list:
    """Preference refinement of ``model`` against the frozen ``ref`` policy."""
    state = RLState(
        policy=model,
        ref=ref,
        optimizer=Optimizer(cfg.optimizer, cfg.rl_learning_rate),
        grpo=cfg.grpo,
        weights=cfg.weights,
        ground_truth=ground_truth,
        questions=questions,
        temperature=cfg.temperature,
        freeze_egm=cfg.freeze_egm_in_rl,
    )
    rng = Rng(cfg.seed).sub("rl")
    batch_rng = Rng(cfg.seed).sub("rl-batches")
    history = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.DictWriter(fh, fieldnames=RL_LOG_FIELDS) if fh else None
    if writer:
        writer.writeheader()
    try:
        for step in range(cfg.rl_steps):
            idx = batch_rng.choice(len(prompts), size=min(cfg.batch_size, len(prompts)), replace=False)
            metrics = rl_step(state, [prompts[i] for i in idx], rng)
            metrics["step"] = step
            history.append(metrics)
            if writer:
                writer.writerow({k: metrics[k] for k in RL_LOG_FIELDS})
    finally:
        if fh:
            fh.close()
    return history


def run_pipeline(cfg: TrainConfig, dataset_dir, out_dir, dataset: Dataset | None = None) -> dict:
    """SFT, checkpoint, preference refinement against the SFT reference, checkpoint, evaluate both."""
    data = dataset or load_dataset(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    questions = QuestionCache(data.table)

    model = new_model(data.config, cfg)
    train_sft(model, data.sft, cfg, questions)
    model.save(out / "sft.ckpt", extra={"train": dataclasses.asdict(cfg), "phase": "sft"})
    sft_report = evaluate(model, data.eval, cfg, questions)

    ref = CoEModel.load(out / "sft.ckpt")
    ref_hash = checkpoint.digest(ref.named())
    train_rl(model, ref, data.rl, data.rl_ref, cfg, questions, log_path=out / "rl_log.csv")
    if checkpoint.digest(ref.named()) != ref_hash:
        raise RuntimeError("reference policy was modified during RL")
    model.save(out / "rl.ckpt", extra={"train": dataclasses.asdict(cfg), "phase": "rl"})
    rl_report = evaluate(model, data.eval, cfg, questions)

    with open(out / "reports.jsonl", "w") as fh:
        for phase, rep in (("sft", sft_report), ("rl", rl_report)):
            fh.write(json.dumps({"phase": phase, **rep.summary()}, sort_keys=True) + "\n")
    return {"sft": sft_report, "rl": rl_report, "sft_ckpt": out / "sft.ckpt", "rl_ckpt": out / "rl.ckpt"}
