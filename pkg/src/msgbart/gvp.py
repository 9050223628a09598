"""Graph-and-video processing: fusing features and graphs with the text stream.

Every fusion block has the same shape, ``FFN(X + MHA(X, D, D))`` with
residuals and layer norms, and is reused for the video/graph encoders, the
video/graph decoders and the final decoder fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .lm import FeedForward, LayerNorm, MultiHeadAttention
from .tensor import ParamStore, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class FeatureTrack:
    """Coarse and fine audio-visual features; each vector is ``[visual | audio]``."""

    coarse: np.ndarray  # [T_c, d_v]
    fine: np.ndarray  # [T_f, d_v]

    def __post_init__(self):
        self.coarse = np.asarray(self.coarse)
        self.fine = np.asarray(self.fine)
        self.validate()

    @property
    def window_ratio(self) -> int:
        return self.fine.shape[0] // self.coarse.shape[0]

    def validate(self) -> None:
        tc, tf = self.coarse.shape[0], self.fine.shape[0]
        if tc < 1 or tf < tc:
            raise ValueError(f"need T_f >= T_c >= 1, got T_c={tc}, T_f={tf}")
        if tf % tc:
            raise ValueError(f"T_f={tf} is not a whole multiple of T_c={tc}")
        if self.coarse.shape[1] != self.fine.shape[1]:
            raise ValueError(f"coarse width {self.coarse.shape[1]} != fine width {self.fine.shape[1]}")


def coarsen(fine: np.ndarray, window: int) -> np.ndarray:
    """Mean of consecutive ``window``-sized runs of fine vectors."""
    tf, dv = fine.shape
    if tf % window:
        raise ValueError(f"window {window} does not divide T_f={tf}")
    return fine.reshape(tf // window, window, dv).mean(axis=1)


class FusionBlock:
    """``X -> FFN(X + MHA(X, D, D))``; output length equals the query length."""

    def __init__(self, params: ParamStore, prefix: str, d: int, heads: int, rng, norm_style: str = "pre", group: str = "gvp", dropout: float = 0.0):
        self.d, self.norm_style, self.p = d, norm_style, dropout
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", d, heads, rng, group)
        self.ffn = FeedForward(params, f"{prefix}.ffn", d, 4 * d, rng, group)
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", d, group)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", d, group)

    def __call__(self, x: Tensor, context: Tensor, context_mask: Optional[np.ndarray] = None) -> Tensor:
        if x.shape[-1] != self.d or context.shape[-1] != self.d:
            raise ConfigError(f"fusion width mismatch: query {x.shape}, context {context.shape}, d={self.d}")
        if self.norm_style == "pre":
            h = T.add(x, T.dropout(self.attn(self.ln1(x), context, context, context_mask), self.p))
            return T.add(h, T.dropout(self.ffn(self.ln2(h)), self.p))
        h = self.ln1(T.add(x, T.dropout(self.attn(x, context, context, context_mask), self.p)))
        return self.ln2(T.add(h, T.dropout(self.ffn(h), self.p)))


@dataclass
class FusedMemory:
    memory: Tensor
    mask: Optional[np.ndarray]
    segments: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.memory.shape[-2]


def assemble_memory(
    blocks: List[Tuple[str, Tensor, Optional[np.ndarray]]],
) -> FusedMemory:
    """Concatenate ``(name, states, mask)`` blocks along the sequence axis, in order."""
    if not blocks:
        raise ValueError("no memory blocks")
    d = blocks[0][1].shape[-1]
    segments, masks, start = {}, [], 0
    for name, states, mask in blocks:
        if states.shape[-1] != d:
            raise ConfigError(f"block {name!r} width {states.shape[-1]} != {d}")
        length = states.shape[-2]
        segments[name] = (start, start + length)
        start += length
        masks.append(np.ones(states.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool))
    memory = T.concat([b[1] for b in blocks], axis=-2)
    mask = np.concatenate(masks, axis=-1)
    return FusedMemory(memory, None if mask.all() else mask, segments)


class GVP:
    """Video/graph encoders, video/graph decoders and the decoder-side fusion."""

    def __init__(self, params: ParamStore, d: int, d_v: int, heads: int, rng, norm_style: str = "pre", prefix: str = "gvp", dropout: float = 0.0):
        self.d, self.d_v = d, d_v
        self.feature_proj = params.add(f"{prefix}.feature_proj", rng.normal(0.0, d_v**-0.5, size=(d_v, d)), "gvp")
        self.feature_bias = params.add(f"{prefix}.feature_bias", np.zeros(d), "gvp")
        block = lambda name: FusionBlock(params, f"{prefix}.{name}", d, heads, rng, norm_style, "gvp", dropout)
        self.video_enc = block("video_enc")
        self.graph_enc = block("graph_enc")
        self.video_dec = block("video_dec")
        self.graph_dec = block("graph_dec")
        self.fuse = block("fuse")

    def project_features(self, raw: np.ndarray) -> Tensor:
        raw = np.asarray(raw)
        if raw.shape[-1] != self.d_v:
            raise ConfigError(f"feature width {raw.shape[-1]} != configured d_v {self.d_v}")
        return T.linear(T.Tensor(raw), self.feature_proj, self.feature_bias)

    def video_encoder(self, v_c: Tensor, d: Tensor, d_mask=None) -> Tensor:
        return self.video_enc(v_c, d, d_mask)

    def graph_encoder(self, g_r: Tensor, d: Tensor, d_mask=None) -> Tensor:
        return self.graph_enc(g_r, d, d_mask)

    def video_decoder(self, v_f: Tensor, d: Tensor, d_mask=None) -> Tensor:
        return self.video_dec(v_f, d, d_mask)

    def graph_decoder(self, g_t: Tensor, d: Tensor, d_mask=None) -> Tensor:
        return self.graph_dec(g_t, d, d_mask)

    def decoder_fuse(self, y_b: Tensor, y_v: Optional[Tensor], y_g: Optional[Tensor], v_mask=None, g_mask=None) -> Tensor:
        """``FFN(Y_B + MHA(Y_B, [Y_v, Y_g], [Y_v, Y_g]))``."""
        blocks = [(n, s, m) for n, s, m in (("video", y_v, v_mask), ("graph", y_g, g_mask)) if s is not None]
        if not blocks:
            return y_b
        mem = assemble_memory(blocks)
        return self.fuse(y_b, mem.memory, mem.mask)
