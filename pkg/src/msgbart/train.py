"""Training and evaluation loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO

import numpy as np

from . import tensor as T
from .config import DecodeConfig, RunConfig, TrainConfig
from .data import Corpus, DialogueInstance
from .lm import Vocab
from .metrics import EvalReport, evaluate_predictions
from .model import Batch, MsgBart, label_token_ids, beam_search, collate_corpus, greedy_search, strip_eos
from .tensor import ParamStore

log = logging.getLogger(__name__)


class NaNLossError(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay; one learning rate per parameter group.

    Biases, gains and 1-D vectors are not decayed.
    """

    def __init__(
        self,
        params: ParamStore,
        lrs: Dict[str, float],
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps, self.weight_decay = eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            lr = self.lrs[self.params.group(name)] * scale
            if p.data.ndim > 1 and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for _, p in params.items()))
    if max_norm > 0 and total > max_norm:
        for _, p in params.items():
            p.grad *= max_norm / total
    return total


@dataclass
class TrainResult:
    log: List[dict] = field(default_factory=list)
    best_dev: float = -1.0
    best_step: int = 0


def build_model(cfg: RunConfig, corpus: Corpus, vocab: Vocab) -> MsgBart:
    labels = corpus.labels
    return MsgBart(cfg.model, len(vocab), len(labels.objects), len(labels.relations), label_token_ids(vocab, labels))


def train(
    cfg: RunConfig,
    model: MsgBart,
    train_corpus: Corpus,
    dev_corpus: Optional[Corpus],
    vocab: Vocab,
    checkpoint: Optional[str] = None,
    sink: Optional[TextIO] = None,
    meta: Optional[dict] = None,
) -> TrainResult:
    """Minibatch training with AdamW; logs JSON lines and keeps the best-dev checkpoint."""
    tc: TrainConfig = cfg.train
    opt = AdamW(
        model.params,
        {"lm": tc.lr_lm, "gvp": tc.lr_gvp},
        betas=(tc.beta1, tc.beta2),
        eps=tc.adam_eps,
        weight_decay=tc.weight_decay,
    )
    rng = np.random.default_rng(tc.seed)
    drop_rng = np.random.default_rng([tc.seed, 1])
    instances = train_corpus.instances
    order: List[int] = []
    result = TrainResult()
    for step in range(1, tc.steps + 1):
        if len(order) < tc.batch_size:
            order.extend(rng.permutation(len(instances)).tolist())
        idx, order = order[: tc.batch_size], order[tc.batch_size :]
        batch = collate_corpus([instances[i] for i in idx], train_corpus, vocab, cfg.model.lm.max_len)
        with T.dropout_enabled(drop_rng):
            loss = model.loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NaNLossError(f"non-finite loss {value} at step {step}; batch instance ids {idx}")
        T.backward(loss, model.params)
        gnorm = clip_grad_norm(model.params, tc.grad_clip)
        warm = min(1.0, step / tc.warmup_steps) if tc.warmup_steps else 1.0
        opt.step(warm)
        record = None
        if step == 1 or step % tc.log_every == 0:
            record = {"step": step, "loss": round(value, 6), "grad_norm": round(gnorm, 6)}
        if dev_corpus is not None and (step % tc.eval_every == 0 or step == tc.steps):
            report = evaluate(model, dev_corpus, vocab, DecodeConfig(max_len=cfg.decode.max_len))
            record = record or {"step": step, "loss": round(value, 6), "grad_norm": round(gnorm, 6)}
            record["dev_accuracy"] = round(report.answer_accuracy, 6)
            if report.answer_accuracy > result.best_dev:
                result.best_dev, result.best_step = report.answer_accuracy, step
                if checkpoint:
                    model.save(checkpoint, vocab, {**(meta or {}), "step": step, "dev_accuracy": report.answer_accuracy})
        if record is not None:
            result.log.append(record)
            if sink is not None:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
    if checkpoint and dev_corpus is None:
        model.save(checkpoint, vocab, {**(meta or {}), "step": tc.steps})
    return result


def predict(
    model: MsgBart,
    corpus: Corpus,
    vocab: Vocab,
    decode: DecodeConfig,
    instances: Optional[Sequence[DialogueInstance]] = None,
    batch_size: int = 64,
) -> List[str]:
    instances = list(corpus.instances if instances is None else instances)
    out: List[str] = []
    if decode.strategy == "greedy":
        for start in range(0, len(instances), batch_size):
            chunk = instances[start : start + batch_size]
            batch = collate_corpus(chunk, corpus, vocab, model.cfg.lm.max_len)
            out.extend(vocab.detokenize(strip_eos(toks)) for toks in model.greedy_batch(batch, decode.max_len))
        return out
    for inst in instances:
        batch = collate_corpus([inst], corpus, vocab, model.cfg.lm.max_len)
        step = model.step_fn(model.encode(batch))
        best, _ = beam_search(step, decode.beam_size, decode.max_len, decode.penalty, decode.penalty_style)
        out.append(vocab.detokenize(strip_eos(best.tokens)))
    return out


def evaluate(model: MsgBart, corpus: Corpus, vocab: Vocab, decode: DecodeConfig) -> EvalReport:
    predictions = predict(model, corpus, vocab, decode)
    return evaluate_predictions(predictions, corpus.instances)
