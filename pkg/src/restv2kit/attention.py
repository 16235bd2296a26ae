"""EMSA / EMSAv2 attention blocks, multi-head interaction, and window styles.

The attention term downsamples keys and values with a depth-wise convolution
(kernel r+1, stride r, padding r//2) followed by a layer norm, scales the
Q.K^T logits by 1/sqrt(d_k), and optionally mixes attention maps across heads
(a 1x1 conv over the head axis before softmax, norm re-weighting after).
EMSAv2 adds an upsample branch on the values: out_proj(attention) + Up(V).

Window machinery supports the four fine-tuning styles: global, win (all
blocks windowed), hwin (global in each stage's last block), and cwin (win
plus a stage-end 7x7 depth-wise conv applied by the model module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

UPSAMPLE_KINDS = ("none", "nearest", "bilinear", "pixel_shuffle")
WINDOW_STYLES = ("global", "win", "hwin", "cwin")
NORM_KINDS = ("instance", "layer")


@dataclass
class EmsaConfig:
    """Per-block attention hyper-parameters."""

    d_m: int
    k: int
    r: int = 1
    upsample: str = "pixel_shuffle"
    mhim: bool = False
    norm_kind: str = "instance"
    window: str = "global"
    window_size: int = 0

    def __post_init__(self):
        if self.d_m % self.k != 0:
            raise ConfigError(f"d_m={self.d_m} not divisible by heads k={self.k}")
        if self.r not in (1, 2, 4, 8):
            raise ConfigError(f"reduction ratio r={self.r} not in {{1, 2, 4, 8}}")
        if self.upsample not in UPSAMPLE_KINDS:
            raise ConfigError(f"unknown upsample strategy {self.upsample!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {self.norm_kind!r}")
        if self.window not in WINDOW_STYLES:
            raise ConfigError(f"unknown window style {self.window!r}")
        if self.window != "global" and self.window_size <= 0:
            raise ConfigError("window_size must be positive for windowed attention")

    @property
    def d_k(self) -> int:
        return self.d_m // self.k


@dataclass
class AttentionWeights:
    """Parameter bundle for one EMSA(v2) block."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    out_w: Tensor
    out_b: Tensor
    # downsample path, absent when r == 1
    down_w: Tensor | None = None
    down_b: Tensor | None = None
    down_gamma: Tensor | None = None
    down_beta: Tensor | None = None
    # pixel-shuffle upsample conv (3x3 depth-wise, d_m -> d_m*r^2)
    up_w: Tensor | None = None
    up_b: Tensor | None = None
    # multi-head interaction
    mhim_w: Tensor | None = None
    mhim_b: Tensor | None = None
    mhim_gamma: Tensor | None = None
    mhim_beta: Tensor | None = None
    # relative positional tables, when the host model uses RPE
    rpe_h: Tensor | None = None
    rpe_w: Tensor | None = None


@dataclass
class StyleContext:
    """Block placement info needed to route the fine-tuning styles."""

    style: str = "global"
    window_size: int = 0
    stage_index: int = 0
    block_index: int = 0
    is_last_block: bool = False


def reduced_extent(extent: int, r: int) -> int:
    """Output extent of the depth-wise downsample conv (kernel r+1, stride r, pad r//2)."""
    if r == 1:
        return extent
    return (extent + 2 * (r // 2) - (r + 1)) // r + 1


def _split_heads(x: Tensor, k: int) -> Tensor:
    """(B, n, d) -> (B, k, n, d_k)."""
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, k, d // k)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    """(B, k, n, d_k) -> (B, n, d)."""
    b, k, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, k * dk))


def _downsampled_tokens(x: Tensor, w: AttentionWeights, cfg: EmsaConfig,
                        spatial: tuple[int, int]) -> tuple[Tensor, tuple[int, int]]:
    """Produce x' (B, n', d) and its spatial extents from the input tokens."""
    h, wd = spatial
    if cfg.r == 1:
        return x, spatial
    img = T.tokens_to_image(x, h, wd)
    down = T.conv2d(img, w.down_w, w.down_b, stride=cfg.r,
                    padding=cfg.r // 2, groups=cfg.d_m)
    hp, wp = down.shape[2], down.shape[3]
    tokens = T.image_to_tokens(down)
    tokens = T.layer_norm(tokens, w.down_gamma, w.down_beta)
    return tokens, (hp, wp)


def _attention_logits(q: Tensor, keys: Tensor, cfg: EmsaConfig,
                      w: AttentionWeights, reduced: tuple[int, int]) -> Tensor:
    """Scaled Q.K^T logits, with relative position added to keys when present."""
    if w.rpe_h is not None and w.rpe_w is not None:
        from .positional import rpe_apply
        return rpe_apply(q, keys, w.rpe_h, w.rpe_w, reduced)
    kt = T.transpose(keys, (0, 1, 3, 2))
    return T.scale(T.matmul(q, kt), 1.0 / math.sqrt(cfg.d_k))


def mhim_apply(attn: Tensor, conv_w: Tensor, conv_b: Tensor | None,
               norm_kind: str = "instance",
               norm_gamma: Tensor | None = None, norm_beta: Tensor | None = None,
               identity_norm: bool = False) -> Tensor:
    """Multi-head interaction: 1x1 conv across the head axis, then norm re-weighting.

    attn is (B, k, n, n').  With ``identity_norm`` the norm stage is bypassed,
    which makes an identity-initialized conv an exact pass-through.
    """
    b, k, n, m = attn.shape
    if conv_w.shape != (k, k):
        raise ShapeError(f"mhim conv {conv_w.shape} does not match head count {k}")
    flat = T.reshape(T.transpose(attn, (0, 2, 3, 1)), (b, n * m, k))
    mixed = T.linear(flat, conv_w, conv_b)
    mixed = T.transpose(T.reshape(mixed, (b, n, m, k)), (0, 3, 1, 2))
    if identity_norm:
        return mixed
    if norm_kind == "instance":
        return T.instance_norm_map(mixed, norm_gamma, norm_beta)
    return T.layer_norm_map(mixed, norm_gamma, norm_beta)


def _attention_term(x: Tensor, w: AttentionWeights, cfg: EmsaConfig,
                    spatial: tuple[int, int],
                    mhim_identity_norm: bool = False) -> tuple[Tensor, Tensor, tuple[int, int]]:
    """Shared EMSA core: returns (out_proj(attention), v_tokens, reduced_spatial)."""
    b, n, d = x.shape
    h, wd = spatial
    if n != h * wd:
        raise ShapeError(f"token count {n} does not match spatial ({h}, {wd})")
    if d != cfg.d_m:
        raise ShapeError(f"channel dim {d} does not match config d_m={cfg.d_m}")

    q = _split_heads(T.linear(x, w.wq, w.bq), cfg.k)
    xr, reduced = _downsampled_tokens(x, w, cfg, spatial)
    keys = _split_heads(T.linear(xr, w.wk, w.bk), cfg.k)
    v_tokens = T.linear(xr, w.wv, w.bv)
    v = _split_heads(v_tokens, cfg.k)

    logits = _attention_logits(q, keys, cfg, w, reduced)
    if cfg.mhim:
        # head-mixing conv on scaled logits, softmax, then norm re-weighting
        logits = mhim_apply(logits, w.mhim_w, w.mhim_b, identity_norm=True)
        probs = T.softmax(logits, axis=-1)
        if not mhim_identity_norm:
            if cfg.norm_kind == "instance":
                probs = T.instance_norm_map(probs, w.mhim_gamma, w.mhim_beta)
            else:
                probs = T.layer_norm_map(probs, w.mhim_gamma, w.mhim_beta)
    else:
        probs = T.softmax(logits, axis=-1)

    ctx = _merge_heads(T.matmul(probs, v))
    out = T.linear(ctx, w.out_w, w.out_b)
    return out, v_tokens, reduced


def emsa_forward(x: Tensor, w: AttentionWeights, cfg: EmsaConfig,
                 spatial: tuple[int, int], mhim_identity_norm: bool = False) -> Tensor:
    """Downsampled multi-head self-attention without the upsample branch."""
    out, _, _ = _attention_term(x, w, cfg, spatial, mhim_identity_norm)
    return out


def upsample_branch(v: Tensor, w: AttentionWeights, cfg: EmsaConfig,
                    reduced: tuple[int, int], spatial: tuple[int, int]) -> Tensor:
    """Reconstruction branch on the value tokens, back to full resolution.

    v is (B, n', d_m) at the reduced extents; the result is (B, n, d_m) token
    form at the full extents.  Strategy "none" contributes an all-zero tensor.
    """
    b = v.shape[0]
    h, wd = spatial
    hp, wp = reduced
    if v.shape[1] != hp * wp:
        raise ShapeError(f"value token count {v.shape[1]} does not match reduced ({hp}, {wp})")
    if cfg.upsample == "none":
        return Tensor(np.zeros((b, h * wd, cfg.d_m), dtype=v.dtype))
    img = T.tokens_to_image(v, hp, wp)
    if cfg.upsample in ("nearest", "bilinear"):
        up = T.interpolate2d(img, (h, wd), cfg.upsample)
    elif cfg.upsample == "pixel_shuffle":
        conv = T.conv2d(img, w.up_w, w.up_b, stride=1, padding=1, groups=cfg.d_m)
        if cfg.r == 1:
            up = conv
        else:
            up = T.pixel_shuffle(conv, cfg.r)
        if up.shape[2] != h or up.shape[3] != wd:
            up = T.crop2d(up, h, wd)
    else:
        raise ConfigError(f"unknown upsample strategy {cfg.upsample!r}")
    return T.image_to_tokens(up)


def emsav2_forward(x: Tensor, w: AttentionWeights, cfg: EmsaConfig,
                   spatial: tuple[int, int], mhim_identity_norm: bool = False,
                   return_branches: bool = False):
    """EMSAv2: attention term plus Up(V), both branches sharing the V projection."""
    attn, v_tokens, reduced = _attention_term(x, w, cfg, spatial, mhim_identity_norm)
    if cfg.upsample == "none":
        out = attn
        up = None
    else:
        up = upsample_branch(v_tokens, w, cfg, reduced, spatial)
        out = T.add(attn, up)
    if return_branches:
        return out, attn, up
    return out


# ---------------------------------------------------------------------------
# Window partition / merge
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PadMeta:
    """Geometry bookkeeping for window partition, needed to invert it."""

    batch: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    window_size: int


def window_partition(x: Tensor, spatial: tuple[int, int], ws: int) -> tuple[Tensor, PadMeta]:
    """(B, n, d) tokens -> (B*nw, ws*ws, d) windows, zero-padding to multiples of ws.

    Windows are enumerated row-major over the padded grid.
    """
    if ws <= 0:
        raise ConfigError(f"window size must be positive, got {ws}")
    b, n, d = x.shape
    h, wd = spatial
    if n != h * wd:
        raise ShapeError(f"token count {n} does not match spatial ({h}, {wd})")
    hp = -(-h // ws) * ws
    wp = -(-wd // ws) * ws
    img = T.tokens_to_image(x, h, wd)
    if (hp, wp) != (h, wd):
        img = T.pad2d(img, (0, hp - h), (0, wp - wd))
    nh, nw = hp // ws, wp // ws
    y = T.reshape(img, (b, d, nh, ws, nw, ws))
    y = T.transpose(y, (0, 2, 4, 3, 5, 1))             # (b, nh, nw, ws, ws, d)
    windows = T.reshape(y, (b * nh * nw, ws * ws, d))
    return windows, PadMeta(b, h, wd, hp, wp, ws)


def window_merge(windows: Tensor, meta: PadMeta) -> Tensor:
    """Exact inverse of :func:`window_partition`, including the padding crop."""
    ws = meta.window_size
    nh, nw = meta.padded_height // ws, meta.padded_width // ws
    expect = (meta.batch * nh * nw, ws * ws, windows.shape[-1])
    if windows.shape != expect:
        raise ShapeError(f"window tensor {windows.shape} inconsistent with meta (expect {expect})")
    d = windows.shape[-1]
    y = T.reshape(windows, (meta.batch, nh, nw, ws, ws, d))
    y = T.transpose(y, (0, 5, 1, 3, 2, 4))             # (b, d, nh, ws, nw, ws)
    img = T.reshape(y, (meta.batch, d, meta.padded_height, meta.padded_width))
    if (meta.padded_height, meta.padded_width) != (meta.height, meta.width):
        img = T.crop2d(img, meta.height, meta.width)
    return T.image_to_tokens(img)


def styled_block_attention(x: Tensor, w: AttentionWeights, cfg: EmsaConfig,
                           spatial: tuple[int, int], ctx: StyleContext) -> Tensor:
    """Route a block's attention through the chosen fine-tuning style.

    win and cwin window every block; hwin windows all but the last block of a
    stage; global is plain EMSAv2.  The cwin stage-end 7x7 DWConv lives in the
    model module, after the last block.
    """
    style = ctx.style
    if style not in WINDOW_STYLES:
        raise ConfigError(f"unknown fine-tuning style {style!r}")
    windowed = style in ("win", "cwin") or (style == "hwin" and not ctx.is_last_block)
    if not windowed:
        return emsav2_forward(x, w, cfg, spatial)
    windows, meta = window_partition(x, spatial, ctx.window_size)
    out = emsav2_forward(windows, w, cfg, (ctx.window_size, ctx.window_size))
    return window_merge(out, meta)


def init_attention_weights(cfg: EmsaConfig, rng: np.random.Generator,
                           dtype=np.float32, use_rpe: bool = False,
                           reduced: tuple[int, int] | None = None) -> AttentionWeights:
    """Materialize a weight bundle for tests and standalone use.

    The model module builds its own named parameters; this helper mirrors the
    same shapes for direct attention-level experiments.
    """
    from .model import init_value  # shared init rules

    d, r = cfg.d_m, cfg.r
    def t(shape, kind):
        return Tensor(init_value(rng, shape, kind).astype(dtype), requires_grad=True)

    kw = {}
    if r > 1:
        kw.update(down_w=t((d, 1, r + 1, r + 1), "fan_out_normal"),
                  down_b=t((d,), "zeros"),
                  down_gamma=t((d,), "ones"), down_beta=t((d,), "zeros"))
    if cfg.upsample == "pixel_shuffle":
        cout = d * r * r if r > 1 else d
        kw.update(up_w=t((cout, 1, 3, 3), "fan_out_normal"), up_b=t((cout,), "zeros"))
    if cfg.mhim:
        kw.update(mhim_w=t((cfg.k, cfg.k), "trunc_normal"), mhim_b=t((cfg.k,), "zeros"),
                  mhim_gamma=t((cfg.k,), "ones"), mhim_beta=t((cfg.k,), "zeros"))
    if use_rpe:
        hp, wp = reduced
        kw.update(rpe_h=t((cfg.k, hp, 1, cfg.d_k), "trunc_normal"),
                  rpe_w=t((cfg.k, 1, wp, cfg.d_k), "trunc_normal"))
    return AttentionWeights(
        wq=t((d, d), "trunc_normal"), bq=t((d,), "zeros"),
        wk=t((d, d), "trunc_normal"), bk=t((d,), "zeros"),
        wv=t((d, d), "trunc_normal"), bv=t((d,), "zeros"),
        out_w=t((d, d), "trunc_normal"), out_b=t((d,), "zeros"),
        **kw)
