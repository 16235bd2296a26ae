"""Positional embedding schemes: absolute (APE), relative-on-keys (RPE),
and pixel attention (PA).

APE adds a learned table to the stage input and rejects geometry mismatches
outright (no interpolation).  RPE adds height/width tables to the keys before
the logits, at the reduced key resolution.  PA is a sigmoid-gated depth-wise
3x3 convolution living inside each patch embedding; it accepts any input
size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

PE_KINDS = ("none", "ape", "rpe", "pa")


@dataclass
class PeConfig:
    """Which embedding scheme a model uses; tables are sized by the model plan."""

    kind: str = "pa"

    def __post_init__(self):
        if self.kind not in PE_KINDS:
            raise ConfigError(f"unknown positional embedding kind {self.kind!r}")


def ape_apply(x: Tensor, theta: Tensor) -> Tensor:
    """x + theta with theta of exactly (n, d); broadcast over batch only."""
    if theta.shape != x.shape[1:]:
        raise ShapeError(
            f"APE table {theta.shape} does not match input tokens {x.shape[1:]} "
            "(absolute embeddings are never resized)")
    return T.add(x, theta)


def rpe_apply(q: Tensor, keys: Tensor, p_h: Tensor, p_w: Tensor,
              reduced: tuple[int, int]) -> Tensor:
    """Attention logits Q(K+P)^T / sqrt(d_k) with P = P_h + P_w.

    q: (B, k, n, d_k); keys: (B, k, n', d_k); p_h: (k, h', 1, d_k);
    p_w: (k, 1, w', d_k); n' must equal h'*w'.
    """
    hp, wp = reduced
    b, k, n_k, dk = keys.shape
    if p_h.shape != (k, hp, 1, dk) or p_w.shape != (k, 1, wp, dk):
        raise ShapeError(
            f"RPE tables {p_h.shape}/{p_w.shape} do not match geometry "
            f"(k={k}, h'={hp}, w'={wp}, d_k={dk})")
    if n_k != hp * wp:
        raise ShapeError(f"key count {n_k} does not match reduced ({hp}, {wp})")
    p = T.reshape(T.add(p_h, p_w), (1, k, hp * wp, dk))
    shifted = T.add(keys, p)
    logits = T.matmul(q, T.transpose(shifted, (0, 1, 3, 2)))
    return T.scale(logits, 1.0 / math.sqrt(dk))


def pa_apply(x: Tensor, dw_w: Tensor, dw_b: Tensor | None = None) -> Tensor:
    """Pixel attention: x * sigmoid(DWConv3x3(x)) on image-form (B, C, H, W)."""
    c = x.shape[1]
    if dw_w.shape != (c, 1, 3, 3):
        raise ShapeError(f"PA kernel {dw_w.shape} does not match channels {c}")
    gate = T.sigmoid(T.conv2d(x, dw_w, dw_b, stride=1, padding=1, groups=c))
    return T.mul(x, gate)
