"""A small encoder-decoder transformer trained from scratch.

Stands in for a pretrained BART: whitespace tokenisation, sinusoidal
positions, pre-norm (or post-norm) layers and an output projection tied to
the input embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")


class LengthError(ValueError):
    pass


class Vocab:
    """Token <-> id map with a fixed reserved block at ids 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def tokenize(self, text: str) -> List[int]:
        return [self.stoi.get(tok, UNK) for tok in text.split()]

    def detokenize(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED) :]))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(line for line in Path(path).read_text().splitlines() if line)


@dataclass
class LMConfig:
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_width: Optional[int] = None
    max_len: int = 64
    norm_style: str = "pre"
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.norm_style not in ("pre", "post"):
            raise ValueError(f"norm_style must be 'pre' or 'post', got {self.norm_style!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def ffn(self) -> int:
        return self.ffn_width or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _init(rng, fan_in, shape):
    return rng.normal(0.0, fan_in**-0.5, size=shape)


class LayerNorm:
    def __init__(self, params: ParamStore, prefix: str, d: int, group: str):
        self.gain = params.add(f"{prefix}.gain", np.ones(d), group)
        self.bias = params.add(f"{prefix}.bias", np.zeros(d), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class FeedForward:
    def __init__(self, params: ParamStore, prefix: str, d: int, width: int, rng, group: str):
        self.w1 = params.add(f"{prefix}.w1", _init(rng, d, (d, width)), group)
        self.b1 = params.add(f"{prefix}.b1", np.zeros(width), group)
        self.w2 = params.add(f"{prefix}.w2", _init(rng, width, (width, d)), group)
        self.b2 = params.add(f"{prefix}.b2", np.zeros(d), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(T.relu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead = x.ndim - 2
    dh = x.shape[-1] // heads
    x = T.reshape(x, x.shape[:-1] + (heads, dh))
    return T.transpose(x, tuple(range(lead)) + (lead + 1, lead, lead + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.ndim - 3
    x = T.transpose(x, tuple(range(lead)) + (lead + 1, lead, lead + 2))
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def attention_bias(key_mask: Optional[np.ndarray], lq: int, lk: int, causal: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Additive score bias ``[..., 1, Lq, Lk]`` and a ``[..., Lq, 1]`` flag for queries with any visible key."""
    allowed = np.ones((lq, lk), dtype=bool)
    if causal:
        allowed = np.tril(allowed, k=lk - lq)
    if key_mask is not None:
        allowed = allowed & np.asarray(key_mask, dtype=bool)[..., None, :]
    bias = np.where(allowed, 0.0, T.MASK_VALUE)[..., None, :, :]
    return bias, allowed.any(axis=-1)[..., :, None]


class MultiHeadAttention:
    """Scaled dot-product attention with input and output projections.

    ``key_mask`` marks valid key positions (``True`` = attend).  Queries that
    see no valid key get an all-zero output.
    """

    def __init__(self, params: ParamStore, prefix: str, d: int, heads: int, rng, group: str):
        if d % heads:
            raise ValueError(f"heads ({heads}) must divide width ({d})")
        self.d, self.heads = d, heads
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w_{name}", params.add(f"{prefix}.w_{name}", _init(rng, d, (d, d)), group))
            setattr(self, f"b_{name}", params.add(f"{prefix}.b_{name}", np.zeros(d), group))

    def __call__(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_mask: Optional[np.ndarray] = None,
        causal: bool = False,
        return_weights: bool = False,
    ):
        if query.shape[-1] != self.d or key.shape[-1] != self.d or value.shape[-1] != self.d:
            raise ValueError(f"attention width mismatch: q {query.shape}, k {key.shape}, v {value.shape}, d={self.d}")
        if key.shape[-2] != value.shape[-2]:
            raise ValueError(f"key/value length mismatch: {key.shape} vs {value.shape}")
        lq, lk = query.shape[-2], key.shape[-2]
        q = _split_heads(T.linear(query, self.w_q, self.b_q), self.heads)
        k = _split_heads(T.linear(key, self.w_k, self.b_k), self.heads)
        v = _split_heads(T.linear(value, self.w_v, self.b_v), self.heads)
        scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.d // self.heads))
        bias, visible = attention_bias(key_mask, lq, lk, causal)
        weights = T.softmax(T.add(scores, bias), axis=-1)
        out = T.linear(_merge_heads(T.matmul(weights, v)), self.w_o, self.b_o)
        if not visible.all():
            out = T.mul(out, visible.astype(T.dtype()))
        return (out, weights) if return_weights else out


class EncoderLayer:
    def __init__(self, params, prefix, cfg: LMConfig, rng, group="lm"):
        self.norm_style, self.p = cfg.norm_style, cfg.dropout
        self.attn = MultiHeadAttention(params, f"{prefix}.self_attn", cfg.d_model, cfg.heads, rng, group)
        self.ffn = FeedForward(params, f"{prefix}.ffn", cfg.d_model, cfg.ffn, rng, group)
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", cfg.d_model, group)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", cfg.d_model, group)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        if self.norm_style == "pre":
            h = self.ln1(x)
            x = T.add(x, T.dropout(self.attn(h, h, h, mask), self.p))
            return T.add(x, T.dropout(self.ffn(self.ln2(x)), self.p))
        x = self.ln1(T.add(x, T.dropout(self.attn(x, x, x, mask), self.p)))
        return self.ln2(T.add(x, T.dropout(self.ffn(x), self.p)))


class DecoderLayer:
    def __init__(self, params, prefix, cfg: LMConfig, rng, group="lm"):
        self.norm_style, self.p = cfg.norm_style, cfg.dropout
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(params, f"{prefix}.self_attn", d, cfg.heads, rng, group)
        self.cross_attn = MultiHeadAttention(params, f"{prefix}.cross_attn", d, cfg.heads, rng, group)
        self.ffn = FeedForward(params, f"{prefix}.ffn", d, cfg.ffn, rng, group)
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", d, group)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", d, group)
        self.ln3 = LayerNorm(params, f"{prefix}.ln3", d, group)

    def __call__(self, x, memory, memory_mask, self_mask=None) -> Tensor:
        if self.norm_style == "pre":
            h = self.ln1(x)
            x = T.add(x, T.dropout(self.self_attn(h, h, h, self_mask, causal=True), self.p))
            x = T.add(x, T.dropout(self.cross_attn(self.ln2(x), memory, memory, memory_mask), self.p))
            return T.add(x, T.dropout(self.ffn(self.ln3(x)), self.p))
        x = self.ln1(T.add(x, T.dropout(self.self_attn(x, x, x, self_mask, causal=True), self.p)))
        x = self.ln2(T.add(x, T.dropout(self.cross_attn(x, memory, memory, memory_mask), self.p)))
        return self.ln3(T.add(x, T.dropout(self.ffn(x), self.p)))


@dataclass
class EncoderState:
    y_en: Tensor
    question_span: Tuple[int, int]

    def question_vector(self) -> Tensor:
        start, end = self.question_span
        return T.mean(self.y_en[start:end], axis=0)


def encoder_layout(history_ids: Sequence[int], question_ids: Sequence[int], max_len: int) -> Tuple[List[int], Tuple[int, int]]:
    """``[BOS, history..., SEP, question..., EOS]`` and the question's ``[start, end)`` span."""
    ids = [BOS, *history_ids, SEP, *question_ids, EOS]
    if len(ids) > max_len:
        raise LengthError(f"encoder input has {len(ids)} tokens, max_len is {max_len}")
    start = len(history_ids) + 2
    return ids, (start, start + len(question_ids))


class MiniBart:
    """Token embedding, encoder stack and decoder stack (group ``lm``)."""

    def __init__(self, params: ParamStore, cfg: LMConfig, vocab_size: int, rng, prefix: str = "lm"):
        self.cfg = cfg
        d = cfg.d_model
        self.embedding = params.add(f"{prefix}.embedding", rng.normal(0.0, 0.05, size=(vocab_size, d)), "lm")
        self.out_bias = params.add(f"{prefix}.out_bias", np.zeros(vocab_size), "lm")
        self.encoder = [EncoderLayer(params, f"{prefix}.enc{i}", cfg, rng) for i in range(cfg.encoder_layers)]
        self.decoder = [DecoderLayer(params, f"{prefix}.dec{i}", cfg, rng) for i in range(cfg.decoder_layers)]
        if cfg.norm_style == "pre":
            self.enc_norm = LayerNorm(params, f"{prefix}.enc_norm", d, "lm")
            self.dec_norm = LayerNorm(params, f"{prefix}.dec_norm", d, "lm")
        self._positions = sinusoidal(cfg.max_len, d)

    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[-1] > self.cfg.max_len:
            raise LengthError(f"sequence of {ids.shape[-1]} tokens exceeds max_len {self.cfg.max_len}")
        x = T.mul(T.embedding_lookup(self.embedding, ids), math.sqrt(self.cfg.d_model))
        return T.dropout(T.add(x, self._positions[: ids.shape[-1]]), self.cfg.dropout)

    def encode_ids(self, ids: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
        x = self.embed(ids)
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x) if self.cfg.norm_style == "pre" else x

    def encode(self, history_ids: Sequence[int], question_ids: Sequence[int]) -> EncoderState:
        ids, span = encoder_layout(history_ids, question_ids, self.cfg.max_len)
        return EncoderState(self.encode_ids(np.array(ids)), span)

    def decode_ids(self, prefix_ids: np.ndarray, memory: Tensor, memory_mask=None, self_mask=None) -> Tensor:
        prefix_ids = np.asarray(prefix_ids)
        if prefix_ids.shape[-1] == 0 or np.any(prefix_ids[..., 0] != BOS):
            raise ValueError("decoder prefix must start with BOS")
        x = self.embed(prefix_ids)
        for layer in self.decoder:
            x = layer(x, memory, memory_mask, self_mask)
        return self.dec_norm(x) if self.cfg.norm_style == "pre" else x

    def vocab_project(self, states: Tensor) -> Tensor:
        logits = T.add(T.matmul(states, T.transpose(self.embedding)), self.out_bias)
        return T.softmax(logits, axis=-1)
