import json
import re

import numpy as np
import pytest

from coe.datagen import (
    KINDS,
    TEMPLATES,
    DataError,
    FeatureTable,
    ObjectSpec,
    Event,
    WorldConfig,
    WorldSpec,
    emit_dataset,
    generate_world,
    instantiate_question,
    load_dataset,
    make_sample,
    max_pairwise_cosine,
    read_features,
    render_content,
    render_features,
    world_violations,
)
from coe.numerics import Rng
from coe.protocol import extract_draft_timestamps, points_to_frames


def audit(w):
    """Independent check of the event-script rules."""
    problems = []
    per_frame = {}
    for e in w.events:
        if not 0 <= e.frame < w.n_frames:
            problems.append("frame range")
        if e.kind == "collide" and (e.partner is None or e.partner == e.subject):
            problems.append("partner")
        for o in {e.subject, e.partner} - {None}:
            if (o, e.frame) in per_frame:
                problems.append("two events")
            per_frame[(o, e.frame)] = e
    for o in range(len(w.objects)):
        frames = sorted(f for (obj, f), e in per_frame.items() if obj == o)
        if not frames or per_frame[(o, frames[0])].kind != "appear":
            problems.append("appear first")
    return problems


def test_world_scripts_hold_their_invariants():
    cfg = WorldConfig()
    for seed in range(10_000):
        w = generate_world(Rng(seed), cfg)
        assert audit(w) == [] and world_violations(w) == [], seed


def test_world_generation_is_deterministic():
    assert generate_world(Rng(3)) == generate_world(Rng(3))


def test_zero_events_gives_appears_only():
    w = generate_world(Rng(1), WorldConfig(min_events=0, max_events=0))
    assert {e.kind for e in w.events} == {"appear"}


def test_violations_are_reported():
    w = WorldSpec(4, 1.0, [ObjectSpec("red", "cube")], [Event("move", 0, 1), Event("appear", 0, 2)])
    assert any("before it appears" in v for v in world_violations(w))


def test_kind_embeddings_are_separated():
    t = FeatureTable.build(WorldConfig())
    assert max_pairwise_cosine(np.stack(list(t.kinds.values()))) < 0.3


def test_zero_noise_features_repeat_for_identical_content():
    cfg = WorldConfig(noise=0.0)
    table = FeatureTable.build(cfg)
    w = generate_world(Rng(2), cfg)
    a = render_features(w, Rng(5), table, cfg).features
    b = render_features(w, Rng(5), table, cfg).features
    assert np.array_equal(a, b)


def test_features_are_clean_render_plus_noise():
    cfg = WorldConfig()
    table = FeatureTable.build(cfg)
    w = generate_world(Rng(4), cfg)
    rng = Rng(8)
    noisy = render_features(w, rng, table, cfg).features
    clean = render_features(w, rng, table, WorldConfig(noise=0.0)).features
    noise = rng.sub("noise").normal(noisy.shape, cfg.noise)
    assert np.allclose(noisy - clean, noise, atol=1e-12)
    # each row sits inside the noise ball around its clean render
    assert np.all(np.linalg.norm(noisy - clean, axis=1) <= np.linalg.norm(noise, axis=1) + 1e-12)


def test_event_frames_carry_their_event_embedding():
    cfg = WorldConfig()
    table = FeatureTable.build(cfg)
    w = generate_world(Rng(6), cfg)
    content = render_content(w, table)
    for e in w.events:
        emb = table.event_embedding(w, e)
        cos = content[e.frame] @ emb / np.linalg.norm(content[e.frame]) / np.linalg.norm(emb)
        assert cos > 0.99


def _answer_from_script(question, w):
    """Re-derive the answer straight from the event list."""
    names = {o.name: i for i, o in enumerate(w.objects)}
    if m := re.fullmatch(r"when does the (\w+ \w+) first appear \?", question):
        o = names[m.group(1)]
        f = min(e.frame for e in w.events if e.kind == "appear" and e.subject == o)
        return f"{f // 60:02d}:{f % 60:02d}"
    if m := re.fullmatch(r"does the (\w+ \w+) collide with the (\w+ \w+) \?", question):
        pair = {names[m.group(1)], names[m.group(2)]}
        return "yes" if any(e.kind == "collide" and {e.subject, e.partner} == pair for e in w.events) else "no"
    if m := re.fullmatch(r"how many (\w+) events are there \?", question):
        return str(sum(e.kind == m.group(1) for e in w.events))
    if m := re.fullmatch(r"what does the (\w+ \w+) do after it appears \?", question):
        o = names[m.group(1)]
        evs = sorted((e for e in w.events if o in (e.subject, e.partner)), key=lambda e: e.frame)
        return evs[1].kind
    raise AssertionError(question)


def test_annotations_are_sound(small_dataset):
    _, data = small_dataset
    for s in data.sft + data.eval + list(data.rl_ref.values()):
        w = s.world
        assert _answer_from_script(s.question, w) == s.answer
        frames = set(s.key_frame_indices.indices)
        words = set(s.question.split())
        for f in frames:
            evs = [e for e in w.events if e.frame == f]
            assert evs
            named = {i for i, o in enumerate(w.objects) if o.color in words and o.shape in words}
            assert any(e.kind in words or {e.subject, e.partner} & named for e in evs)
        cited = points_to_frames(extract_draft_timestamps(s.reasoning_guidance), w.fps, w.n_frames)
        assert set(cited.indices) == frames


def test_template_examples():
    w = WorldSpec(
        32, 1.0,
        [ObjectSpec("red", "cube"), ObjectSpec("blue", "sphere")],
        [Event("appear", 0, 7), Event("appear", 1, 8), Event("move", 0, 10), Event("move", 1, 12), Event("move", 0, 20)],
    )
    s = instantiate_question(w, "first_appear", Rng(0))
    if s.question != "when does the red cube first appear ?":
        s = instantiate_question(w, "first_appear", Rng(1))
    assert s.question == "when does the red cube first appear ?"
    assert s.key_frame_indices.sorted() == [7] and "00:07" in s.reasoning_guidance and s.answer == "00:07"
    assert instantiate_question(w, "collide_pair", Rng(0)) is None
    c = instantiate_question(w, "count_kind", Rng(0))
    assert c.answer == "3" and c.key_frame_indices.sorted() == [10, 12, 20]
    with pytest.raises(ValueError):
        instantiate_question(w, "nope", Rng(0))


def test_every_template_occurs(small_dataset):
    _, data = small_dataset
    assert {s.template for s in data.sft} == set(TEMPLATES)


def test_emit_and_reload(tmp_path):
    cfg = WorldConfig()
    emit_dataset(6, 3, seed=11, out_path=tmp_path, n_eval=2, cfg=cfg)
    data = load_dataset(tmp_path)
    table = FeatureTable.build(cfg)
    for s in data.sft + data.eval:
        fresh = make_sample(s.sample_id, 11, s.split, cfg, table)
        assert s == fresh
        assert np.array_equal(s.features.features, fresh.features.features)
    for rec in map(json.loads, (tmp_path / "rl.jsonl").read_text().splitlines()):
        assert "answer" not in rec and "key_frame_indices" not in rec and "anchors" not in rec
    assert sorted(data.rl_ref) == [s.sample_id for s in data.rl]
    assert all(s.answer is None for s in data.rl)
    feats = read_features(tmp_path / "features.bin")
    assert sorted(feats) == list(range(11))


def test_generation_is_a_pure_function_of_seed(tmp_path):
    emit_dataset(5, 1, seed=3, out_path=tmp_path / "a", n_eval=1)
    emit_dataset(5, 1, seed=3, out_path=tmp_path / "b", n_eval=1)
    for name in ("sft.jsonl", "rl.jsonl", "rl_ref.jsonl", "eval.jsonl", "features.bin", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_data_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")
    emit_dataset(2, 1, seed=0, out_path=tmp_path, n_eval=1)
    (tmp_path / "features.bin").write_bytes(b"garbage")
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    with pytest.raises(ValueError):
        emit_dataset(-1, 0, 0, tmp_path)
    with pytest.raises(ValueError):
        WorldConfig(template_weights=(1, 1))


def test_default_scale_generation_is_fast(tmp_path):
    import time

    t = time.perf_counter()
    emit_dataset(2000, 200, seed=0, out_path=tmp_path, n_eval=0)
    assert time.perf_counter() - t < 30
