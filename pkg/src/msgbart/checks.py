"""Finite-difference gradient checks at module level and end to end.

All checks run in 64-bit mode on a small fixture: one two-frame video and
an answer of two words, so the decoder predicts three tokens (two words and
EOS).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import DialogueInstance, WorldConfig, generate_world
from .gvp import FusionBlock
from .lm import LMConfig, MultiHeadAttention
from .model import ModelConfig, MsgBart, collate_corpus, label_token_ids, sequence_loss
from .pointer import PointerNetwork, mix, pointer_values
from .scenegraph import GraphAttention
from .tensor import ParamStore, Tensor

GRADCHECK_THRESHOLD = 1e-3
EPS_SWEEP = (1e-3, 1e-4, 1e-5)


@dataclass
class CheckResult:
    module: str
    eps: float
    per_param: Dict[str, float]

    @property
    def worst(self) -> Tuple[str, float]:
        name = max(self.per_param, key=lambda k: (self.per_param[k], k))
        return name, self.per_param[name]


def fixture(model_cfg: ModelConfig, seed: int = 0):
    """Tiny model plus a one-instance batch: 2 frames, 3 decoder targets."""
    world = WorldConfig(num_videos=1, frames=2, window=2, turns=2, feature_dim=model_cfg.feature_dim, seed=seed)
    corpus = generate_world(world)
    vocab = corpus.vocab()
    inst = corpus.instances[0]
    objects = corpus.labels.objects
    inst = dataclasses.replace(inst, answer=f"{objects[0]} {objects[1]}")
    model = MsgBart(model_cfg, len(vocab), len(objects), len(corpus.labels.relations), label_token_ids(vocab, corpus.labels))
    model.params.cast()
    batch = collate_corpus([inst], corpus, vocab, model_cfg.lm.max_len)
    assert batch.dec_target.shape == (1, 3)
    return model, batch


def _module_checks(d: int, heads: int, seed: int) -> List[Tuple[str, ParamStore, Callable[[], Tensor]]]:
    rng = np.random.default_rng(seed)
    out = []

    params = ParamStore()
    gat = GraphAttention(params, "gat", d, heads, rng)
    x = rng.normal(size=(5, d))
    q = rng.normal(size=d)
    adj = np.zeros((5, 5))
    adj[2, 0] = adj[1, 2] = adj[4, 3] = adj[1, 4] = 1.0
    mask = np.ones(5, dtype=bool)
    out.append(("graph_attention", params, lambda: T.sum_(gat(T.Tensor(x), T.Tensor(q), adj, mask) ** 2)))

    params = ParamStore()
    block = FusionBlock(params, "fusion", d, heads, rng, "pre", "gvp")
    xv = rng.normal(size=(1, 3, d))
    dm = rng.normal(size=(1, 4, d))
    out.append(("fusion_block", params, lambda: T.sum_(block(T.Tensor(xv), T.Tensor(dm), None) ** 2)))

    params = ParamStore()
    mha = MultiHeadAttention(params, "mha", d, heads, rng, "lm")
    qa = rng.normal(size=(1, 3, d))
    km = np.array([[True, True, True, False]])
    out.append(("attention", params, lambda: T.sum_(mha(T.Tensor(qa), T.Tensor(dm), T.Tensor(dm), km, causal=False) ** 2)))

    params = ParamStore()
    ptr = PointerNetwork(params, d, rng)
    ys = [rng.normal(size=(1, 3, d)) for _ in range(3)]
    lead = [rng.normal(size=(1, 1, d)) for _ in range(2)]
    v = 7
    dist_b = T.softmax(T.Tensor(rng.normal(size=(1, 3, v))), axis=-1)
    dist_g = T.softmax(T.Tensor(rng.normal(size=(1, 3, v))), axis=-1)
    targets = rng.integers(0, v, size=(1, 3))

    def pointer_loss():
        a, b = ptr.logits(*(T.Tensor(y) for y in ys), *(T.Tensor(y) for y in lead))
        p1, p2 = pointer_values(a, b, "multi")
        return sequence_loss(mix(p1, p2, dist_g, dist_b, "as_printed", validate=False), targets)

    out.append(("pointer", params, pointer_loss))
    return out


def run_gradcheck(model_cfg: ModelConfig, eps_values: Sequence[float] = EPS_SWEEP, seed: int = 0, max_coords: int = 8) -> List[CheckResult]:
    """Module-level checks plus the end-to-end loss, one result per (module, eps)."""
    if T.get_mode() != "f64":
        raise RuntimeError("gradient checks need 64-bit mode")
    model, batch = fixture(model_cfg, seed)
    results: List[CheckResult] = []
    d, heads = 8, 2
    for eps in eps_values:
        for name, params, f in _module_checks(d, heads, seed):
            results.append(CheckResult(name, eps, T.grad_check_report(f, params, eps, max_coords=max_coords, seed=seed)))
        report = T.grad_check_report(lambda: model.loss(batch), model.params, eps, max_coords=max_coords, seed=seed)
        by_group: Dict[str, Dict[str, float]] = {}
        for pname, err in report.items():
            by_group.setdefault(f"end_to_end.{pname.split('.')[0]}", {})[pname] = err
        results.extend(CheckResult(g, eps, errs) for g, errs in sorted(by_group.items()))
    return results


def small_model_config(cfg: ModelConfig) -> ModelConfig:
    """The same switches as ``cfg`` at a width that keeps finite differences fast."""
    lm = dataclasses.replace(cfg.lm, d_model=16, heads=2, encoder_layers=1, decoder_layers=1, ffn_width=32)
    return dataclasses.replace(cfg, lm=lm, graph_heads=2)
