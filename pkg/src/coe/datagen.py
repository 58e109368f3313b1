"""Synthetic event worlds, templated questions and dataset files.

A world is a short clip of ``n_frames`` frames in which a few coloured
objects appear, move, collide and disappear. Every question is instantiated
from the world's own event script, so key frames, reasoning drafts and
answers are exact by construction.

Dataset directory layout::

    meta.json       generation config, word lists, feature dimension
    sft.jsonl       full samples (question, key frames, anchors, guidance, answer, world)
    rl.jsonl        prompts only: sample_id, question, template, split
    rl_ref.jsonl    withheld ground truth for the RL prompts (read by the reward only)
    eval.jsonl      held-out full samples, never trained on
    features.bin    frame features keyed by sample_id (see ``write_features``)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .egm import FrameFeatures, QuestionEmbedding
from .numerics import Rng
from .protocol import CoEResponse, FrameSet, format_time, frames_to_intervals, serialize_response
from .reward import GroundTruth

COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")
SHAPES = ("cube", "sphere", "cylinder")
KINDS = ("appear", "disappear", "move", "collide")
MAX_COUNT = 3  # longest evidence list a count question may ask for
TEMPLATES = ("first_appear", "collide_pair", "count_kind", "after_appear")
QUESTION_WORDS = (
    "when", "does", "the", "first", "appear", "collide", "with", "how", "many",
    "events", "are", "there", "what", "do", "after", "it", "appears", "move", "disappear", "?",
) + COLORS + SHAPES
DRAFT_WORDS = ("appear", "disappear", "move", "collide", "at", "and", "then")
ANSWER_WORDS = ("yes", "no", "1", "2", "3", "4", "5", "6", "move", "collide", "disappear")

FEATURE_MAGIC = b"COEFEAT\x00"
FEATURE_VERSION = 1


class DataError(Exception):
    """Malformed or missing dataset files."""


@dataclass
class WorldConfig:
    n_frames: int = 32
    fps: float = 1.0
    min_objects: int = 3
    max_objects: int = 5
    min_events: int = 2
    max_events: int = 6
    d_content: int = 32
    noise: float = 0.1
    time_scale: float = 3.0
    d_question: int = 32
    table_seed: int = 1234
    template_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # relative frequency of each of TEMPLATES

    def __post_init__(self):
        w = tuple(float(x) for x in self.template_weights)
        if len(w) != len(TEMPLATES) or min(w) < 0 or sum(w) <= 0:
            raise ValueError(f"template_weights must be {len(TEMPLATES)} nonnegative numbers with a positive sum")
        object.__setattr__(self, "template_weights", w)

    @property
    def d_v(self) -> int:
        return self.d_content + self.n_frames


@dataclass(frozen=True)
class ObjectSpec:
    color: str
    shape: str

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Event:
    kind: str
    subject: int
    frame: int
    partner: int | None = None

    def involves(self, obj: int) -> bool:
        return self.subject == obj or self.partner == obj


@dataclass
class WorldSpec:
    n_frames: int
    fps: float
    objects: list
    events: list

    def to_json(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "fps": self.fps,
            "objects": [[o.color, o.shape] for o in self.objects],
            "events": [[e.kind, e.subject, e.frame, e.partner] for e in self.events],
        }

    @classmethod
    def from_json(cls, d: dict) -> "WorldSpec":
        return cls(
            n_frames=d["n_frames"],
            fps=d["fps"],
            objects=[ObjectSpec(c, s) for c, s in d["objects"]],
            events=[Event(k, s, f, p) for k, s, f, p in d["events"]],
        )

    def events_of(self, obj: int) -> list:
        return sorted((e for e in self.events if e.involves(obj)), key=lambda e: e.frame)


def world_violations(w: WorldSpec) -> list[str]:
    """Every broken world invariant, as human-readable strings."""
    bad = []
    seen = set()
    for e in w.events:
        if e.kind not in KINDS:
            bad.append(f"unknown kind {e.kind}")
        if not 0 <= e.frame < w.n_frames:
            bad.append(f"event frame {e.frame} outside [0, {w.n_frames})")
        if e.kind == "collide" and (e.partner is None or e.partner == e.subject):
            bad.append(f"collide at frame {e.frame} lacks a distinct partner")
        if e.kind != "collide" and e.partner is not None:
            bad.append(f"{e.kind} at frame {e.frame} has a partner")
        for obj in (e.subject, e.partner):
            if obj is None:
                continue
            if (obj, e.frame) in seen:
                bad.append(f"object {obj} has two events at frame {e.frame}")
            seen.add((obj, e.frame))
    for obj in range(len(w.objects)):
        evs = w.events_of(obj)
        appears = [e for e in evs if e.kind == "appear"]
        if len(appears) != 1:
            bad.append(f"object {obj} appears {len(appears)} times")
        elif evs[0] is not appears[0]:
            bad.append(f"object {obj} has an event before it appears")
    return bad


def generate_world(rng: Rng, cfg: WorldConfig | None = None) -> WorldSpec:
    """Random event script: one appear per object, then up to ``max_events`` more.

    All events land on distinct frames, every pair of objects collides at
    most once and nothing happens to an object after it disappears.
    """
    cfg = cfg or WorldConfig()
    n = cfg.n_frames
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    colors = rng.choice(len(COLORS), size=n_obj, replace=False)
    shapes = rng.integers(0, len(SHAPES), size=n_obj)
    objects = [ObjectSpec(COLORS[c], SHAPES[s]) for c, s in zip(colors, shapes)]

    n_events = int(rng.integers(cfg.min_events, cfg.max_events + 1)) if cfg.max_events > 0 else 0
    appear_frames = np.sort(rng.choice(n // 2, size=n_obj, replace=False))
    order = rng.permutation(n_obj)
    events = [Event("appear", int(o), int(f)) for o, f in zip(order, appear_frames)]
    appeared_at = {e.subject: e.frame for e in events}

    free = [f for f in range(int(appear_frames[0]) + 1, n) if f not in set(appear_frames.tolist())]
    n_events = min(n_events, len(free))
    frames = sorted(rng.choice(free, size=n_events, replace=False).tolist()) if n_events else []
    gone: set = set()
    collided: set = set()
    for f in frames:
        alive = [o for o in range(n_obj) if appeared_at[o] < f and o not in gone]
        kind_order = rng.permutation(["move", "move", "collide", "collide", "disappear"]).tolist()
        for kind in dict.fromkeys(kind_order):
            if kind == "collide":
                pairs = [(a, b) for a in alive for b in alive if a < b and (a, b) not in collided]
                if not pairs:
                    continue
                a, b = pairs[int(rng.integers(0, len(pairs)))]
                if rng.uniform() < 0.5:
                    a, b = b, a
                collided.add((min(a, b), max(a, b)))
                events.append(Event("collide", int(a), int(f), int(b)))
                break
            if len(alive) < (2 if kind == "disappear" else 1):
                continue
            subj = int(alive[int(rng.integers(0, len(alive)))])
            if kind == "disappear":
                gone.add(subj)
            events.append(Event(kind, subj, int(f)))
            break
    events.sort(key=lambda e: e.frame)
    return WorldSpec(n, cfg.fps, objects, events)


@dataclass
class FeatureTable:
    """Fixed random embeddings for event kinds, colours, shapes and the background."""

    kinds: dict
    colors: dict
    shapes: dict
    background: np.ndarray
    words: dict

    @classmethod
    def build(cls, cfg: WorldConfig | None = None) -> "FeatureTable":
        """Kinds, colours and shapes live in disjoint channel blocks of the content
        vector; kinds are mutually orthogonal. Every attribute vector has norm sqrt(d)."""
        cfg = cfg or WorldConfig()
        rng = Rng(cfg.table_seed).sub("feature-table")
        d = cfg.d_content
        if d < 16:
            raise ValueError("d_content must be at least 16")
        k_end, c_end = d // 4, d // 4 + (3 * d) // 8

        def block(n, lo, hi, orthogonal=False):
            out = np.zeros((n, d))
            raw = rng.normal((hi - lo, n))
            if orthogonal:
                raw = np.linalg.qr(raw)[0]
            out[:, lo:hi] = raw.T
            return out * (np.sqrt(d) / np.linalg.norm(out, axis=1, keepdims=True))

        kinds = block(len(KINDS), 0, k_end, orthogonal=True)
        if max_pairwise_cosine(kinds) >= 0.3:
            raise RuntimeError("event-kind embeddings are not well separated")
        colors = block(len(COLORS), k_end, c_end)
        shapes = block(len(SHAPES), c_end, d)
        background = rng.normal(d, 0.3)
        words = Rng(cfg.table_seed).sub("question-words").normal((len(QUESTION_WORDS), cfg.d_question))
        return cls(
            kinds=dict(zip(KINDS, kinds)),
            colors=dict(zip(COLORS, colors)),
            shapes=dict(zip(SHAPES, shapes)),
            background=background,
            words=dict(zip(QUESTION_WORDS, words)),
        )

    def object_embedding(self, obj: ObjectSpec) -> np.ndarray:
        return self.colors[obj.color] + self.shapes[obj.shape]

    def event_embedding(self, w: WorldSpec, e: Event) -> np.ndarray:
        out = self.kinds[e.kind] + self.object_embedding(w.objects[e.subject])
        if e.partner is not None:
            out = out + self.object_embedding(w.objects[e.partner])
        return out

    def embed_question(self, text: str) -> QuestionEmbedding:
        toks = question_words(text)
        try:
            return QuestionEmbedding(np.stack([self.words[t] for t in toks]))
        except KeyError as exc:
            raise DataError(f"question word {exc.args[0]!r} is not in the question vocabulary") from None


def max_pairwise_cosine(rows: np.ndarray) -> float:
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    cos = unit @ unit.T
    np.fill_diagonal(cos, -np.inf)
    return float(cos.max())


def question_words(text: str) -> list[str]:
    return text.lower().replace("?", " ?").split()


def render_content(w: WorldSpec, table: FeatureTable, rng: Rng | None = None) -> np.ndarray:
    """Noise-free content channels, each row scaled to norm ``sqrt(d_content)``.

    Event frames hold the sum of their event embeddings. Idle frames hold the
    background embedding plus per-frame clutter drawn from ``rng`` (the bare
    background when ``rng`` is None), so that no single direction dominates
    the frame average.
    """
    d = table.background.size
    content = np.zeros((w.n_frames, d))
    busy = np.zeros(w.n_frames, dtype=bool)
    for e in w.events:
        content[e.frame] += table.event_embedding(w, e)
        busy[e.frame] = True
    idle = np.flatnonzero(~busy)
    content[idle] = table.background
    if rng is not None:
        content[idle] += rng.normal((idle.size, d))
    return content * (np.sqrt(d) / np.linalg.norm(content, axis=1, keepdims=True))


def render_features(w: WorldSpec, rng: Rng, table: FeatureTable, cfg: WorldConfig | None = None) -> FrameFeatures:
    """Frame features ``[content | time_scale * onehot(frame)]`` plus noise, both blocks centred over frames.

    The one-hot block plays the part of a video encoder's temporal position
    embedding; without it grounded evidence could not be mapped back to times.
    """
    cfg = cfg or WorldConfig()
    content = render_content(w, table, rng.sub("clutter"))
    content -= content.mean(axis=0)
    time_code = cfg.time_scale * (np.eye(w.n_frames) - 1.0 / w.n_frames)
    clean = np.concatenate([content, time_code], axis=1)
    noise = rng.sub("noise").normal(clean.shape, cfg.noise) if cfg.noise > 0 else 0.0
    return FrameFeatures(clean + noise, w.fps)


@dataclass
class TrainingSample:
    sample_id: int
    question: str
    template: str
    split: str
    key_frame_indices: FrameSet | None = None
    reasoning_guidance: str | None = None
    answer: str | None = None
    features: FrameFeatures | None = field(default=None, repr=False, compare=False)
    world: WorldSpec | None = field(default=None, repr=False)

    @property
    def anchors(self):
        return frames_to_intervals(self.key_frame_indices, self.key_frame_indices.fps)

    def target_text(self) -> str:
        """Protocol-formatted supervision target: anchors, guidance, answer."""
        return serialize_response(CoEResponse(self.anchors, self.reasoning_guidance, self.answer))

    def ground_truth(self) -> GroundTruth:
        if self.answer is None:
            raise DataError(f"sample {self.sample_id} carries no ground truth")
        return GroundTruth(self.key_frame_indices, self.answer)

    def y_target(self) -> np.ndarray:
        return self.key_frame_indices.to_mask()


def _t(w: WorldSpec, frame: int) -> str:
    return format_time(frame / w.fps)


def _sample(w, sample_id, template, question, frames, guidance, answer, split, features):
    return TrainingSample(
        sample_id=sample_id,
        question=question,
        template=template,
        split=split,
        key_frame_indices=FrameSet(frozenset(frames), w.n_frames, w.fps),
        reasoning_guidance=guidance,
        answer=answer,
        features=features,
        world=w,
    )


def instantiate_question(
    w: WorldSpec, template_id: str, rng: Rng, sample_id: int = 0, split: str = "sft", features=None
) -> TrainingSample | None:
    """Fill one question template from ``w``; None when the template does not apply."""
    objs = w.objects
    if template_id == "first_appear":
        o = int(rng.integers(0, len(objs)))
        e = w.events_of(o)[0]
        return _sample(
            w, sample_id, template_id,
            f"when does the {objs[o].name} first appear ?",
            [e.frame], f"appear at {_t(w, e.frame)}", _t(w, e.frame), split, features,
        )
    if template_id == "collide_pair":
        collisions = [e for e in w.events if e.kind == "collide"]
        if not collisions:
            return None
        pairs = {frozenset((e.subject, e.partner)) for e in collisions}
        others = [(a, b) for a in range(len(objs)) for b in range(a + 1, len(objs)) if frozenset((a, b)) not in pairs]
        if others and rng.uniform() < 0.5:
            a, b = others[int(rng.integers(0, len(others)))]
            if rng.uniform() < 0.5:
                a, b = b, a
            fa, fb = sorted((w.events_of(a)[0].frame, w.events_of(b)[0].frame))
            guidance = f"appear at {_t(w, fa)} {_t(w, fb)}"
            frames, answer = [fa, fb], "no"
        else:
            e = collisions[int(rng.integers(0, len(collisions)))]
            a, b = (e.subject, e.partner) if rng.uniform() < 0.5 else (e.partner, e.subject)
            guidance = f"collide at {_t(w, e.frame)}"
            frames, answer = [e.frame], "yes"
        return _sample(
            w, sample_id, template_id,
            f"does the {objs[a].name} collide with the {objs[b].name} ?",
            frames, guidance, answer, split, features,
        )
    if template_id == "count_kind":
        counts = {k: sum(e.kind == k for e in w.events) for k in ("move", "collide", "disappear")}
        present = [k for k, n in counts.items() if 1 <= n <= MAX_COUNT]
        if not present:
            return None
        kind = present[int(rng.integers(0, len(present)))]
        frames = [e.frame for e in w.events if e.kind == kind]
        guidance = f"{kind} at " + " ".join(_t(w, f) for f in frames)
        return _sample(
            w, sample_id, template_id,
            f"how many {kind} events are there ?",
            frames, guidance, str(len(frames)), split, features,
        )
    if template_id == "after_appear":
        candidates = [o for o in range(len(objs)) if len(w.events_of(o)) == 2]
        if not candidates:
            return None
        o = candidates[int(rng.integers(0, len(candidates)))]
        first, nxt = w.events_of(o)
        guidance = f"appear then {nxt.kind} at {_t(w, first.frame)} {_t(w, nxt.frame)}"
        return _sample(
            w, sample_id, template_id,
            f"what does the {objs[o].name} do after it appears ?",
            [first.frame, nxt.frame], guidance, nxt.kind, split, features,
        )
    raise ValueError(f"unknown template {template_id!r}")


def make_sample(sample_id: int, seed: int, split: str, cfg: WorldConfig, table: FeatureTable) -> TrainingSample:
    """Deterministic sample ``sample_id`` of the dataset generated from ``seed``."""
    rng = Rng(seed).sub(f"sample/{sample_id}")
    for attempt in range(100):
        w = generate_world(rng.sub(f"world/{attempt}"), cfg)
        pick = rng.sub(f"template/{attempt}")
        p = np.asarray(cfg.template_weights) / sum(cfg.template_weights)
        order = pick.choice(len(TEMPLATES), size=int(np.count_nonzero(p)), replace=False, p=p)
        for template in (TEMPLATES[i] for i in order):
            s = instantiate_question(w, template, pick, sample_id, split)
            if s is not None:
                s.features = render_features(w, rng.sub(f"noise/{attempt}"), table, cfg)
                return s
    raise RuntimeError(f"no applicable template for sample {sample_id}")


def _record(s: TrainingSample, full: bool) -> dict:
    rec = {"sample_id": s.sample_id, "split": s.split, "template": s.template, "question": s.question}
    if full:
        rec.update(
            key_frame_indices=s.key_frame_indices.sorted(),
            anchors=[[iv.start_s, iv.end_s] for iv in s.anchors],
            reasoning_guidance=s.reasoning_guidance,
            answer=s.answer,
            world=s.world.to_json(),
        )
    return rec


def write_features(path: Path, items) -> None:
    """Sidecar layout (little-endian): magic[8], version u32, D_v u32, count u64,
    then per record: sample_id u64, N u32, N*D_v float64 row-major."""
    items = sorted(items, key=lambda kv: kv[0])
    d_v = items[0][1].shape[1] if items else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<IIQ", FEATURE_VERSION, d_v, len(items)))
        for sid, feats in items:
            fh.write(struct.pack("<QI", sid, feats.shape[0]))
            fh.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())


def read_features(path: Path) -> dict[int, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic")
    version, d_v, count = struct.unpack_from("<IIQ", raw, 8)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    off = 24
    out = {}
    for _ in range(count):
        sid, n = struct.unpack_from("<QI", raw, off)
        off += 12
        out[sid] = np.frombuffer(raw, dtype="<f8", count=n * d_v, offset=off).reshape(n, d_v).astype(np.float64)
        off += 8 * n * d_v
    return out


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def emit_dataset(
    n_sft: int, n_rl: int, seed: int, out_path, n_eval: int = 400, cfg: WorldConfig | None = None
) -> dict[str, Path]:
    """Generate and write a dataset; sample ids run over sft, then rl, then eval."""
    if min(n_sft, n_rl, n_eval) < 0:
        raise ValueError("sample counts must be nonnegative")
    cfg = cfg or WorldConfig()
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    table = FeatureTable.build(cfg)
    splits = ["sft"] * n_sft + ["rl"] * n_rl + ["eval"] * n_eval
    samples = [make_sample(i, seed, split, cfg, table) for i, split in enumerate(splits)]
    paths = {name: out / f"{name}.jsonl" for name in ("sft", "rl", "rl_ref", "eval")}
    paths["features"] = out / "features.bin"
    paths["meta"] = out / "meta.json"
    _write_jsonl(paths["sft"], (_record(s, True) for s in samples if s.split == "sft"))
    _write_jsonl(paths["rl"], (_record(s, False) for s in samples if s.split == "rl"))
    _write_jsonl(paths["rl_ref"], (_record(s, True) for s in samples if s.split == "rl"))
    _write_jsonl(paths["eval"], (_record(s, True) for s in samples if s.split == "eval"))
    write_features(paths["features"], [(s.sample_id, s.features.features) for s in samples])
    meta = {"seed": seed, "counts": {"sft": n_sft, "rl": n_rl, "eval": n_eval}, "world": asdict(cfg)}
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def _from_record(rec: dict, feats: dict, n_frames: int, fps: float) -> TrainingSample:
    sid = rec["sample_id"]
    if sid not in feats:
        raise DataError(f"no features stored for sample {sid}")
    s = TrainingSample(
        sample_id=sid,
        question=rec["question"],
        template=rec["template"],
        split=rec["split"],
        features=FrameFeatures(feats[sid], fps),
    )
    if "answer" in rec:
        s.key_frame_indices = FrameSet(frozenset(rec["key_frame_indices"]), n_frames, fps)
        s.reasoning_guidance = rec["reasoning_guidance"]
        s.answer = rec["answer"]
        s.world = WorldSpec.from_json(rec["world"])
    return s


def _read_jsonl(path: Path) -> list[dict]:
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc


@dataclass
class Dataset:
    config: WorldConfig
    sft: list
    rl: list
    eval: list
    rl_ref: dict  # sample_id -> TrainingSample with ground truth

    @property
    def table(self) -> FeatureTable:
        return FeatureTable.build(self.config)

    def by_id(self) -> dict[int, TrainingSample]:
        out = {s.sample_id: s for s in self.sft + self.eval}
        out.update({s.sample_id: s for s in self.rl})
        return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"missing dataset: {meta_path} not found")
    meta = json.loads(meta_path.read_text())
    cfg = WorldConfig(**meta["world"])
    feats = read_features(root / "features.bin")
    load = lambda name: [_from_record(r, feats, cfg.n_frames, cfg.fps) for r in _read_jsonl(root / f"{name}.jsonl")]
    ref = {s.sample_id: s for s in load("rl_ref")}
    return Dataset(cfg, load("sft"), load("rl"), load("eval"), ref)
