import math

import numpy as np
import pytest

from msgbart import tensor as T
from msgbart.config import RunConfig
from msgbart.data import generate_world, split
from msgbart.train import AdamW, NaNLossError, build_model, clip_grad_norm, train


def store(**groups):
    ps = T.ParamStore()
    for group, values in groups.items():
        ps.add(f"{group}.w", np.array(values, dtype=float), group)
    return ps


def test_adamw_first_step_oracle():
    # bias-corrected moments equal g and g^2 after one step, so the update is lr * sign(g)
    ps = store(lm=[[1.0, -2.0]], gvp=[[0.5, 0.5]])
    ps["lm.w"].grad = np.array([[0.3, -4.0]])
    ps["gvp.w"].grad = np.array([[-1.0, 2.0]])
    AdamW(ps, {"lm": 0.1, "gvp": 0.01}, eps=0.0, weight_decay=0.0).step()
    np.testing.assert_allclose(ps["lm.w"].data, [[0.9, -1.9]], atol=1e-12)
    np.testing.assert_allclose(ps["gvp.w"].data, [[0.51, 0.49]], atol=1e-12)


def test_adamw_decay_is_decoupled_and_skips_vectors():
    ps = T.ParamStore()
    ps.add("m", np.full((2, 2), 2.0), "lm")
    ps.add("b", np.full(2, 2.0), "lm")
    for _, p in ps.items():
        p.grad = np.zeros_like(p.data)
    AdamW(ps, {"lm": 0.1}, weight_decay=0.5).step()
    np.testing.assert_allclose(ps["m"].data, 2.0 * (1 - 0.05), atol=1e-12)
    np.testing.assert_array_equal(ps["b"].data, 2.0)


def test_clip_grad_norm():
    ps = store(lm=[3.0], gvp=[4.0])
    ps["lm.w"].grad, ps["gvp.w"].grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm(ps, 10.0) == pytest.approx(5.0)
    assert ps["lm.w"].grad[0] == 3.0
    clip_grad_norm(ps, 1.0)
    assert math.hypot(ps["lm.w"].grad[0], ps["gvp.w"].grad[0]) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def default_run():
    T.set_mode("f32")
    cfg = RunConfig()
    cfg.train.steps, cfg.train.log_every = 100, 1
    corpus = generate_world(cfg.world)
    train_c = corpus.subset(split(corpus, tuple(cfg.split.ratios), cfg.split.seed)["train"])
    vocab = train_c.vocab()
    model = build_model(cfg, train_c, vocab)
    first = train(cfg, model, train_c, None, vocab)
    again = train(cfg, build_model(cfg, train_c, vocab), train_c, None, vocab)
    T.set_mode("f64")
    return first.log, again.log, len(vocab)


def test_loss_falls_over_first_hundred_steps(default_run):
    log, _, vocab_size = default_run
    losses = [r["loss"] for r in log]
    assert len(losses) == 100
    assert abs(losses[0] - math.log(vocab_size)) <= 0.2 * math.log(vocab_size)
    # minibatch noise: compare window means
    assert np.mean(losses[80:]) < np.mean(losses[40:60]) < np.mean(losses[:20])


def test_logged_losses_are_bit_identical(default_run):
    first, again, _ = default_run
    assert first == again


def test_nan_loss_aborts_with_batch_ids(monkeypatch):
    cfg = RunConfig()
    cfg.world.num_videos, cfg.train.steps = 10, 3
    corpus = generate_world(cfg.world)
    vocab = corpus.vocab()
    model = build_model(cfg, corpus, vocab)
    monkeypatch.setattr(type(model), "loss", lambda self, batch: T.Tensor(np.array(float("nan"))))
    with pytest.raises(NaNLossError, match="batch instance ids"):
        train(cfg, model, corpus, None, vocab)
