import dataclasses
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msgbart import tensor as T
from msgbart.data import WorldConfig, generate_world
from msgbart.gvp import FeatureTrack
from msgbart.lm import BOS, EOS, LMConfig
from msgbart.model import (
    CheckpointError,
    Hypothesis,
    ModelConfig,
    MsgBart,
    beam_decode,
    beam_search,
    collate,
    collate_corpus,
    greedy_decode,
    greedy_search,
    label_token_ids,
    length_penalty,
    normalized_score,
    sequence_loss,
)
from msgbart.scenegraph import FrameGraph, SceneGraph

SMALL = ModelConfig(lm=LMConfig(d_model=16, heads=2, encoder_layers=1, decoder_layers=1, ffn_width=32), graph_heads=2)


@pytest.fixture(scope="module")
def world():
    corpus = generate_world(WorldConfig(num_videos=12, frames=4, window=2, seed=3))
    return corpus, corpus.vocab()


def make_model(world, **overrides):
    corpus, vocab = world
    cfg = dataclasses.replace(SMALL, **overrides)
    return MsgBart(cfg, len(vocab), len(corpus.labels.objects), len(corpus.labels.relations), label_token_ids(vocab, corpus.labels))


def assets(corpus, inst):
    return corpus.graphs[inst.video_id], corpus.features[inst.video_id]


def test_sequence_loss_examples():
    one_hot = T.Tensor(np.eye(4)[[1, 3]][None])
    assert sequence_loss(one_hot, np.array([[1, 3]])).item() == 0.0
    uniform = T.Tensor(np.full((2, 3, 10), 0.1))
    assert sequence_loss(uniform, np.zeros((2, 3), int)).item() == pytest.approx(2.302585, abs=1e-6)
    with pytest.raises(ValueError):
        sequence_loss(uniform, np.zeros((2, 4), int))


def test_sequence_loss_matches_loop_oracle(rng):
    dist = T.softmax(T.Tensor(rng.normal(size=(3, 4, 7))), axis=-1)
    targets = rng.integers(0, 7, size=(3, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], bool)
    total, n = 0.0, 0
    for b in range(3):
        for t in range(4):
            if mask[b, t]:
                total -= math.log(dist.data[b, t, targets[b, t]])
                n += 1
    assert sequence_loss(dist, targets, mask).item() == pytest.approx(total / n, abs=1e-12)


def test_forward_shapes_and_distributions(world):
    corpus, vocab = world
    model = make_model(world)
    batch = collate_corpus(corpus.instances[:4], corpus, vocab, 64)
    dist = model.forward(batch).data
    assert dist.shape == batch.dec_target.shape + (len(vocab),)
    assert np.all(np.abs(dist.sum(axis=-1) - 1) < 1e-6)
    np.testing.assert_array_equal(dist, model.forward(batch).data)


def test_untrained_loss_is_near_uniform(world):
    corpus, vocab = world
    batch = collate_corpus(corpus.instances[:6], corpus, vocab, 64)
    assert abs(make_model(world).loss(batch).item() / math.log(len(vocab)) - 1) < 0.2


def test_parameter_groups_partition_the_store(world):
    model = make_model(world)
    groups = model.params.groups()
    assert set(groups) == {"lm", "gvp"}
    flat = [n for names in groups.values() for n in names]
    assert sorted(flat) == model.params.names() and len(set(flat)) == len(flat)
    assert all(n.startswith("lm.") for n in groups["lm"])


@pytest.mark.parametrize("labels", ["shared", "separate"])
def test_every_parameter_receives_gradient(world, labels):
    corpus, vocab = world
    model = make_model(world, label_embeddings=labels)
    insts = corpus.instances[:3]
    bare = SceneGraph((FrameGraph(((0, 1),)), FrameGraph()) * 2)
    graphs = [corpus.graphs[i.video_id] for i in insts[:2]] + [bare]
    feats = [corpus.features[i.video_id] for i in insts]
    T.backward(model.loss(collate(insts, graphs, feats, vocab, 64)), model.params)
    dead = [n for n, p in model.params.items() if not np.any(p.grad)]
    assert dead == []


PROBE_SWITCHES = [
    {"use_graph_encoder": False},
    {"use_graph_decoder": False},
    {"use_video_encoder": False},
    {"use_video_decoder": False},
    {"use_gat": False},
    {"use_node_similarity": False},
    {"use_triplet_similarity": False},
    {"pointer_mode": "single"},
    {"pointer_mode": "none"},
    {"pointer_pairing": "aligned"},
]


@pytest.mark.parametrize("switch", PROBE_SWITCHES, ids=lambda s: "-".join(f"{k}={v}" for k, v in s.items()))
def test_no_dead_ablation_switches(world, switch):
    corpus, vocab = world
    probe = [i for i in corpus.instances if i.kind == "graph_dependent"][:2]
    batch = collate_corpus(probe, corpus, vocab, 64)
    model = make_model(world)
    base = model.forward(batch).data
    model.cfg = dataclasses.replace(model.cfg, **switch)
    assert not np.allclose(model.forward(batch).data, base, atol=1e-9)


def test_self_loop_option_changes_output(world):
    corpus, vocab = world
    batch = collate_corpus(corpus.instances[:2], corpus, vocab, 64)
    with_loops = make_model(world).forward(batch).data
    assert not np.allclose(make_model(world, self_loops=False).forward(batch).data, with_loops, atol=1e-9)


def test_zeroed_graph_and_video_inputs_give_finite_loss(world):
    corpus, vocab = world
    inst = corpus.instances[0]
    track = corpus.features[inst.video_id]
    zeros = FeatureTrack(np.zeros_like(track.coarse), np.zeros_like(track.fine))
    batch = collate([inst], [SceneGraph((FrameGraph(),) * 4)], [zeros], vocab, 64)
    for overrides in ({}, {"use_graph_encoder": False, "use_graph_decoder": False}):
        loss = make_model(world, **overrides).loss(batch).item()
        assert np.isfinite(loss)


def test_checkpoint_round_trip(world, tmp_path):
    corpus, vocab = world
    model = make_model(world)
    for _, p in model.params.items():
        p.data = p.data.astype(np.float32).astype(np.float64)
    model.save(tmp_path / "m.ckpt", vocab, {"note": 1})
    loaded, head = MsgBart.load(tmp_path / "m.ckpt")
    assert head["vocab"] == vocab.itos and head["extra"] == {"note": 1}
    assert loaded.cfg == model.cfg
    for (n, a), (m, b) in zip(model.params.items(), loaded.params.items()):
        assert n == m
        np.testing.assert_array_equal(a.data, b.data)
    batch = collate_corpus(corpus.instances[:2], corpus, vocab, 64)
    np.testing.assert_array_equal(loaded.forward(batch).data, model.forward(batch).data)


def test_checkpoint_errors(world, tmp_path):
    corpus, vocab = world
    path = tmp_path / "m.ckpt"
    make_model(world).save(path, vocab)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        MsgBart.load(path)
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        MsgBart.load(path)


def test_greedy_examples(world):
    corpus, vocab = world
    model = make_model(world)
    inst = corpus.instances[1]
    one = greedy_decode(model, inst, *assets(corpus, inst), vocab, max_len=1)
    assert len(one) == 1
    a = greedy_decode(model, inst, *assets(corpus, inst), vocab, max_len=5)
    assert a == greedy_decode(model, inst, *assets(corpus, inst), vocab, max_len=5)


def test_beam_one_equals_greedy_on_random_instances(world):
    corpus, vocab = world
    rng = np.random.default_rng(7)
    for seed in range(4):
        model = make_model(world, seed=seed)
        for k in rng.choice(len(corpus.instances), size=5, replace=False):
            inst = corpus.instances[int(k)]
            g = greedy_decode(model, inst, *assets(corpus, inst), vocab, max_len=4)
            b = beam_decode(model, inst, *assets(corpus, inst), vocab, beam_size=1, max_len=4)
            assert g == b


def test_batched_greedy_matches_single_instance(world):
    corpus, vocab = world
    model = make_model(world)
    insts = corpus.instances[:5]
    batched = model.greedy_batch(collate_corpus(insts, corpus, vocab, 64), max_len=4)
    for inst, out in zip(insts, batched):
        assert out == greedy_decode(model, inst, *assets(corpus, inst), vocab, max_len=4)


# -- toy tables ---------------------------------------------------------------


def table_step(table, vocab_size):
    def step(prefixes):
        return np.stack([table.get(tuple(p[1:]), np.full(vocab_size, 1.0 / vocab_size)) for p in prefixes])

    return step


def enumerate_best(table, vocab_size, max_len, penalty, style="plain"):
    """Brute force over every sequence that ends in EOS or reaches max_len."""
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(vocab_size), repeat=n):
            if EOS in seq[:-1] or (n < max_len and seq[-1] != EOS):
                continue
            lp = sum(math.log(max(table_step(table, vocab_size)([[BOS, *seq[:i]]])[0][t], T.PROB_FLOOR)) for i, t in enumerate(seq))
            score = lp / length_penalty(n, penalty, style)
            key = (-score, list(seq))
            if best is None or key < best[0]:
                best = (key, list(seq))
    return best[1]


def random_table(rng, vocab_size=4, depth=3):
    table = {}
    for n in range(depth):
        for prefix in itertools.product(range(vocab_size), repeat=n):
            table[prefix] = rng.dirichlet(np.full(vocab_size, 0.7))
    return table


def test_beam_finds_sequence_greedy_misses():
    v = 4
    table = {
        (): np.array([0.05, 0.05, 0.35, 0.55]),
        (3,): np.array([0.25, 0.25, 0.25, 0.25]),
        (0,): np.array([0.0, 0.0, 1.0, 0.0]),
        (1,): np.array([0.0, 0.0, 1.0, 0.0]),
    }
    step = table_step(table, v)
    assert greedy_search(step, 3).tokens[0] == 3
    best, _ = beam_search(step, beam_size=2, max_len=3, penalty=0.0)
    assert best.tokens == [EOS]
    assert best.tokens == enumerate_best(table, v, 3, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.6, 1.0]), st.sampled_from(["plain", "gnmt"]))
def test_exhaustive_beam_matches_enumeration(seed, penalty, style):
    table = random_table(np.random.default_rng(seed))
    best, finished = beam_search(table_step(table, 4), beam_size=64, max_len=3, penalty=penalty, style=style)
    assert best.tokens == enumerate_best(table, 4, 3, penalty, style)
    top = normalized_score(best, penalty, style)
    assert all(normalized_score(h, penalty, style) <= top + 1e-12 for h in finished)


def test_penalty_zero_ranks_by_log_prob():
    assert length_penalty(5, 0.0) == 1.0
    a, b = Hypothesis([1, 2], -1.0, True), Hypothesis([1, 2, 3, 4], -1.5, True)
    assert normalized_score(a, 0.0) > normalized_score(b, 0.0)
    assert normalized_score(b, 1.0) > normalized_score(a, 1.0)
    assert length_penalty(3, 0.6, "gnmt") == pytest.approx((8 / 6) ** 0.6)


def test_beam_log_probs_never_increase():
    table = random_table(np.random.default_rng(0))
    _, finished = beam_search(table_step(table, 4), beam_size=8, max_len=3, penalty=0.6)
    step = table_step(table, 4)
    for h in finished:
        running = [sum(math.log(step([[BOS, *h.tokens[:i]]])[0][t]) for i, t in enumerate(h.tokens[: k + 1])) for k in range(len(h.tokens))]
        assert all(x >= y - 1e-12 for x, y in zip(running, running[1:]))
        assert running[-1] == pytest.approx(h.logprob, abs=1e-12)


def test_beam_size_must_be_positive():
    with pytest.raises(ValueError):
        beam_search(table_step({}, 3), beam_size=0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(pointer_mode="triple")
    with pytest.raises(ValueError):
        ModelConfig(label_embeddings="borrowed")
    with pytest.raises(ValueError):
        ModelConfig(graph_heads=3)
