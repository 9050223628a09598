import json

import numpy as np
import pytest

from msgbart.data import (
    QUESTION_KINDS,
    CorpusFormatError,
    DialogueInstance,
    WorldConfig,
    frame_features,
    generate_world,
    kind_counts,
    load_corpus,
    read_instances,
    save_corpus,
    split,
)
from msgbart.gvp import coarsen
from msgbart.scenegraph import FrameGraph

SMALL = WorldConfig(num_videos=20, frames=4, window=2, seed=5)


@pytest.fixture(scope="module")
def corpus():
    return generate_world(SMALL)


def test_generation_is_deterministic(corpus):
    again = generate_world(SMALL)
    assert [i.to_json() for i in again.instances] == [i.to_json() for i in corpus.instances]
    assert again.graphs == corpus.graphs
    for vid in corpus.video_ids():
        assert again.features[vid].fine.tobytes() == corpus.features[vid].fine.tobytes()
    other = generate_world(WorldConfig(num_videos=20, frames=4, window=2, seed=6))
    assert [i.to_json() for i in other.instances] != [i.to_json() for i in corpus.instances]


def test_graph_answers_audit_against_the_scene_graph(corpus):
    labels = corpus.labels
    checked = 0
    for inst in corpus.instances:
        if inst.kind != "graph_dependent":
            continue
        _, _, subj, rel, _ = inst.question.split()
        facts = {
            (labels.objects[dict(f.objects)[s]], labels.relations[r], labels.objects[dict(f.objects)[d]])
            for f in corpus.graphs[inst.video_id].frames
            for s, r, d, _ in f.relations
        }
        answers = {d for s, r, d in facts if (s, r) == (subj, rel)}
        assert answers == {inst.answer}
        checked += 1
    assert checked > 0


def test_other_kinds_are_consistent(corpus):
    for inst in corpus.instances:
        present = {corpus.labels.objects[l] for f in corpus.graphs[inst.video_id].frames for _, l in f.objects}
        if inst.kind == "feature_dependent":
            obj = inst.question.split()[3]
            assert inst.answer == ("yes" if obj in present else "no")
        elif inst.kind == "history_dependent":
            assert inst.answer in {a for _, a in inst.history}
        assert inst.answer.strip()


def test_frame_shapes_follow_world_rules(corpus):
    for g in corpus.graphs.values():
        assert len(g.frames) == SMALL.frames
        for f in g.frames:
            assert 2 <= len(f.objects) <= 4
            assert 1 <= len(f.relations) <= 3
            for _, r, _, cls in f.relations:
                assert corpus.labels.relation_classes[r] == cls


def test_feature_tracks_coarsen_fine_windows(corpus):
    for track in corpus.features.values():
        assert track.fine.shape == (4, SMALL.feature_dim) and track.coarse.shape == (2, SMALL.feature_dim)
        np.testing.assert_allclose(track.coarse, coarsen(track.fine.astype(np.float64), 2), atol=1e-6)


def test_features_ignore_relations():
    vectors = np.random.default_rng(0).normal(size=(5, 4))
    a = FrameGraph(((0, 1), (1, 3)), ((0, 0, 1, "spatial"),))
    b = FrameGraph(((0, 1), (1, 3)), ((1, 2, 0, "contact"), (0, 3, 1, "attention")))
    np.testing.assert_array_equal(frame_features(a, vectors), frame_features(b, vectors))
    np.testing.assert_array_equal(frame_features(a, vectors), vectors[1] + vectors[3])


def test_zero_noise_gives_identical_features_for_identical_object_sets():
    c = generate_world(WorldConfig(num_videos=6, frames=4, window=2, noise=0.0, seed=1))
    rows = {}
    for vid, g in c.graphs.items():
        for f, row in zip(g.frames, c.features[vid].fine):
            key = tuple(sorted(l for _, l in f.objects))
            if key in rows:
                np.testing.assert_array_equal(rows[key], row)
            rows[key] = row


def test_kind_mix(corpus):
    counts = kind_counts(corpus.instances)
    assert set(counts) == set(QUESTION_KINDS)
    assert sum(counts.values()) == SMALL.num_videos * SMALL.turns
    assert all(inst.kind != "history_dependent" for inst in corpus.instances if not inst.history)


def test_world_config_validation():
    for bad in ({"frames": 6, "window": 4}, {"noise": -1.0}, {"feature_dim": 7}, {"objects_per_video": 1}, {"turns": 0}):
        with pytest.raises(ValueError):
            generate_world(WorldConfig(**bad))


def test_save_load_round_trip(corpus, tmp_path):
    save_corpus(tmp_path, corpus)
    back = load_corpus(tmp_path)
    assert back.labels == corpus.labels and back.world == corpus.world
    assert [i.to_json() for i in back.instances] == [i.to_json() for i in corpus.instances]
    assert back.graphs == corpus.graphs
    for vid in corpus.video_ids():
        np.testing.assert_array_equal(back.features[vid].fine, corpus.features[vid].fine)
        np.testing.assert_array_equal(back.features[vid].coarse, corpus.features[vid].coarse)


def test_truncated_feature_file_is_rejected(corpus, tmp_path):
    save_corpus(tmp_path, corpus)
    path = tmp_path / "assets" / f"{corpus.video_ids()[0]}.features.bin"
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CorpusFormatError, match="length mismatch"):
        load_corpus(tmp_path)


def test_malformed_instance_line_reports_line_number(tmp_path):
    good = json.dumps(DialogueInstance("v0", [], "is there a cup ?", "yes", "feature_dependent").to_json())
    (tmp_path / "i.jsonl").write_text(good + "\n" + good + "\n{not json\n")
    with pytest.raises(CorpusFormatError, match=r"i\.jsonl:3"):
        read_instances(tmp_path / "i.jsonl")
    (tmp_path / "i.jsonl").write_text(good.replace('"yes"', '""') + "\n")
    with pytest.raises(CorpusFormatError, match=r":1:"):
        read_instances(tmp_path / "i.jsonl")


def test_split_sizes_disjoint_and_seeded():
    c = generate_world(WorldConfig(num_videos=100, frames=2, window=1, seed=0))
    s = split(c)
    assert [len(s[k]) for k in ("train", "dev", "test")] == [80, 10, 10]
    assert not (set(s["train"]) & set(s["dev"])) and not (set(s["train"]) & set(s["test"])) and not (set(s["dev"]) & set(s["test"]))
    assert set(s["train"]) | set(s["dev"]) | set(s["test"]) == set(c.video_ids())
    assert split(c) == s and split(c, seed=1) != s
    with pytest.raises(ValueError):
        split(c, (0.5, 0.5, 0.5))
