"""``coe`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 data or file error, 3 numeric or training error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .datagen import DataError, WorldConfig, emit_dataset, load_dataset
from .decoder import GrammarViolation, SequenceLengthError
from .egm import ConfigurationError, attention_curve_csv
from .gradsuite import run_suite
from .grpo import DivergedPolicy
from .model import CoEModel, QuestionCache
from .numerics import DimensionError, ProbeError, TrainingDivergence
from .protocol import FrameSet
from .reward import GroundTruth, score_text
from .trainer import SchemaError, TrainConfig, evaluate, generate, new_model, train_rl, train_sft

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("coe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    return cfg.replace(seed=args.seed) if args.seed is not None else cfg


def _world_config(path) -> tuple[WorldConfig, dict]:
    """``[world]`` holds WorldConfig fields, ``[data]`` the split sizes."""
    counts = {"n_sft": 2000, "n_rl": 200, "n_eval": 400}
    if not path:
        return WorldConfig(), counts
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    kw = {}
    types = {f.name: f.default for f in dataclasses.fields(WorldConfig)}
    if parser.has_section("world"):
        for key, raw in parser.items("world"):
            if key not in types:
                raise UsageError(f"unknown [world] key {key!r}")
            default = types[key]
            if isinstance(default, tuple):
                kw[key] = tuple(float(x) for x in raw.replace(",", " ").split())
            else:
                kw[key] = type(default)(raw)
    if parser.has_section("data"):
        for key, raw in parser.items("data"):
            if key not in counts:
                raise UsageError(f"unknown [data] key {key!r}")
            counts[key] = int(raw)
    return WorldConfig(**kw), counts


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _emit(obj, pretty: bool, out=None):
    out = out or sys.stdout
    if pretty:
        for k, v in obj.items():
            out.write(f"{k:>16}: {v}\n")
    else:
        out.write(json.dumps(obj, sort_keys=True) + "\n")


def _sample(data, sample_id):
    found = data.by_id().get(sample_id)
    if found is None:
        raise DataError(f"sample {sample_id} is not in the dataset")
    return found


def cmd_datagen(args):
    _require(args, "out")
    world, counts = _world_config(args.config)
    seed = 0 if args.seed is None else args.seed
    paths = emit_dataset(counts["n_sft"], counts["n_rl"], seed, args.out, n_eval=counts["n_eval"], cfg=world)
    _emit({"seed": seed, **counts, **{k: str(p) for k, p in paths.items()}}, args.pretty)


def cmd_train_sft(args):
    _require(args, "dataset", "out")
    cfg = _train_config(args)
    data = load_dataset(args.dataset)
    questions = QuestionCache(data.table)
    model = new_model(data.config, cfg)
    history = train_sft(model, data.sft, cfg, questions, log_every=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sft_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss_grounding", "loss_reasoning", "loss_total"])
        writer.writeheader()
        for step, row in enumerate(history):
            writer.writerow({"step": step, **row})
    model.save(out / "sft.ckpt", extra={"train": dataclasses.asdict(cfg), "phase": "sft"})
    _emit({"checkpoint": str(out / "sft.ckpt"), "steps": len(history),
           "final_loss": history[-1]["loss_total"] if history else None}, args.pretty)


def cmd_train_rl(args):
    _require(args, "dataset", "checkpoint", "out")
    cfg = _train_config(args)
    data = load_dataset(args.dataset)
    questions = QuestionCache(data.table)
    model, ref = CoEModel.load(args.checkpoint), CoEModel.load(args.checkpoint)
    before = checkpoint.digest(ref.named())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = train_rl(model, ref, data.rl, data.rl_ref, cfg, questions, log_path=out / "rl_log.csv")
    if checkpoint.digest(ref.named()) != before:
        raise RuntimeError("reference policy was modified during RL")
    model.save(out / "rl.ckpt", extra={"train": dataclasses.asdict(cfg), "phase": "rl"})
    skipped = sum(1 for h in history if h["pair_yield"] == 0)
    _emit({"checkpoint": str(out / "rl.ckpt"), "steps": len(history), "skipped_steps": skipped}, args.pretty)


def cmd_eval(args):
    _require(args, "dataset", "checkpoint")
    cfg = _train_config(args)
    data = load_dataset(args.dataset)
    model = CoEModel.load(args.checkpoint)
    report = evaluate(model, data.eval, cfg, QuestionCache(data.table))
    if args.pretty:
        _emit(report.summary(), True)
    else:
        for rec in report.records:
            sys.stdout.write(json.dumps(rec, sort_keys=True) + "\n")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")


def cmd_infer(args):
    _require(args, "dataset", "checkpoint", "sample_id")
    data = load_dataset(args.dataset)
    model = CoEModel.load(args.checkpoint)
    _, _, text = generate(model, _sample(data, args.sample_id), QuestionCache(data.table))
    sys.stdout.write(text + "\n")


def cmd_inspect_attention(args):
    _require(args, "dataset", "checkpoint", "sample_id")
    data = load_dataset(args.dataset)
    model = CoEModel.load(args.checkpoint)
    s = _sample(data, args.sample_id)
    state, _ = model.ground(s.features, QuestionCache(data.table)(s.question))
    sys.stdout.write(attention_curve_csv(state.importance, s.features.fps))


def cmd_grad_check(args):
    results = run_suite(instances=args.instances, seed=0 if args.seed is None else args.seed)
    for r in results:
        _emit(r.as_dict(), args.pretty)
    if not all(r.passed for r in results):
        raise ProbeError("gradient check exceeded tolerance")


def _reference_truth(path) -> dict[int, GroundTruth]:
    out = {}
    for rec in _read_records(path):
        try:
            world = rec["world"]
            frames = FrameSet(frozenset(rec["key_frame_indices"]), world["n_frames"], world["fps"])
            out[rec["sample_id"]] = GroundTruth(frames, rec["answer"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: reference record lacks {exc}") from None
    return out


def _read_records(path) -> list[dict]:
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_reward_score(args):
    _require(args, "candidates", "reference")
    weights = _train_config(args).weights
    truth = _reference_truth(args.reference)
    totals = []
    for rec in _read_records(args.candidates):
        sid = rec.get("sample_id")
        if sid not in truth:
            raise DataError(f"no reference for sample {sid}")
        br, valid = score_text(str(rec.get("response", "")), truth[sid], weights)
        totals.append(br.total)
        if not args.pretty:
            row = {"sample_id": sid, "f1": br.f1_grounding, "iou": br.iou_process,
                   "answer": br.answer_correct, "reward": br.total, "valid": valid}
            sys.stdout.write(json.dumps(row, sort_keys=True) + "\n")
    if args.pretty:
        _emit({"n": len(totals), "mean_reward": sum(totals) / max(1, len(totals))}, True)


COMMANDS = {
    "datagen": (cmd_datagen, "generate a synthetic dataset directory"),
    "train-sft": (cmd_train_sft, "supervised training; writes sft.ckpt and sft_log.csv"),
    "train-rl": (cmd_train_rl, "preference refinement from an SFT checkpoint; writes rl.ckpt and rl_log.csv"),
    "eval": (cmd_eval, "greedy evaluation on the held-out split; JSONL per sample"),
    "infer": (cmd_infer, "print the response for one sample"),
    "inspect-attention": (cmd_inspect_attention, "CSV of per-frame importance for one sample"),
    "grad-check": (cmd_grad_check, "finite-difference check of every backward pass"),
    "reward-score": (cmd_reward_score, "score a JSONL file of responses against reference records"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file with [train], [world] and [data] sections")
    common.add_argument("--seed", type=int, metavar="N", help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--checkpoint", metavar="PATH", help="model checkpoint")
    common.add_argument("--dataset", metavar="DIR", help="dataset directory")
    common.add_argument("--sample-id", type=int, metavar="N", help="sample to run on")
    common.add_argument("--pretty", action="store_true", help="human-readable output instead of JSONL/CSV")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="coe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "grad-check":
            p.add_argument("--instances", type=int, default=20, metavar="N", help="random instances per check")
        if name == "reward-score":
            p.add_argument("--candidates", metavar="PATH", help="JSONL with sample_id and response")
            p.add_argument("--reference", metavar="PATH", help="JSONL with sample_id, key_frame_indices, answer, world")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"coe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError, checkpoint.CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"coe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, DivergedPolicy, ProbeError, DimensionError, ConfigurationError,
            GrammarViolation, SequenceLengthError, ArithmeticError, RuntimeError) as exc:
        print(f"coe: numeric error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"coe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
