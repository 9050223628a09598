"""Multi-pointer mixing of the base-decoder and GVP-decoder vocabulary distributions."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

POINTER_MODES = ("multi", "single", "none")
POINTER_PAIRINGS = ("as_printed", "aligned")


class ContractError(ValueError):
    pass


def _dot(x: Tensor, w: Tensor) -> Tensor:
    return T.sum_(T.mul(x, w), -1)


class PointerNetwork:
    """Five learned projections to scalars.

    ``w_base`` and ``w_gvp`` read the two decoder states; ``w_prev``,
    ``w_enc`` and ``w_question`` are shared by both logits.
    """

    def __init__(self, params: ParamStore, d: int, rng, prefix: str = "pointer"):
        init = lambda: rng.normal(0.0, d**-0.5, size=d)
        self.w_base = params.add(f"{prefix}.w_base", init(), "gvp")
        self.w_prev = params.add(f"{prefix}.w_prev", init(), "gvp")
        self.w_enc = params.add(f"{prefix}.w_enc", init(), "gvp")
        self.w_question = params.add(f"{prefix}.w_question", init(), "gvp")
        self.w_gvp = params.add(f"{prefix}.w_gvp", init(), "gvp")

    def logits(self, y_b: Tensor, y_g: Tensor, y_prev: Tensor, y_enc: Tensor, q_vec: Tensor) -> Tuple[Tensor, Tensor]:
        return pointer_logits(y_b, y_g, y_prev, y_enc, q_vec, self.w_base, self.w_prev, self.w_enc, self.w_question, self.w_gvp)


def pointer_logits(y_b, y_g, y_prev, y_enc, q_vec, w4, w5, w6, w7, w8) -> Tuple[Tensor, Tensor]:
    """``p1' = w4.y_b + shared``, ``p2' = w8.y_g + shared`` with ``shared = w5.y_prev + w6.y_enc + w7.q``."""
    shared = T.add(T.add(_dot(y_prev, w5), _dot(y_enc, w6)), _dot(q_vec, w7))
    return T.add(_dot(y_b, w4), shared), T.add(_dot(y_g, w8), shared)


def pointer_values(p1_logit: Tensor, p2_logit: Tensor, mode: str) -> Tuple[Tensor, Tensor]:
    if mode == "multi":
        p = T.softmax(T.stack([p1_logit, p2_logit], axis=-1), axis=-1)
        return p[..., 0], p[..., 1]
    if mode == "single":
        p1 = T.sigmoid(p1_logit)
        return p1, T.sub(1.0, p1)
    if mode == "none":
        half = T.Tensor(np.full(p1_logit.shape, 0.5))
        return half, half
    raise ValueError(f"pointer mode must be one of {POINTER_MODES}, got {mode!r}")


def mix(p1: Tensor, p2: Tensor, dist_g: Tensor, dist_b: Tensor, pairing: str = "as_printed", validate: bool = True) -> Tensor:
    """``p1 * dist_g + p2 * dist_b`` (``as_printed``) or ``p1 * dist_b + p2 * dist_g`` (``aligned``)."""
    if validate:
        total = p1.data + p2.data
        if np.any(np.abs(total - 1.0) > 1e-9):
            raise ContractError(f"pointer values must sum to 1, got {total}")
        for name, dist in (("dist_g", dist_g), ("dist_b", dist_b)):
            if np.any(dist.data < 0) or np.any(np.abs(dist.data.sum(axis=-1) - 1.0) > 1e-6):
                raise ContractError(f"{name} is not a probability distribution")
    if pairing == "as_printed":
        first, second = dist_g, dist_b
    elif pairing == "aligned":
        first, second = dist_b, dist_g
    else:
        raise ValueError(f"pointer pairing must be one of {POINTER_PAIRINGS}, got {pairing!r}")
    expand = lambda p: T.reshape(p, p.shape + (1,))
    return T.add(T.mul(expand(p1), first), T.mul(expand(p2), second))
