"""ResTv2 model assembly: stem, patch embeddings, EMSAv2 blocks, variants.

A model is a :class:`ModelConfig` plus an ordered name -> Tensor map.  The
parameter plan is a pure function of the config, so parameter counting never
needs materialized weights, and a weight file can be validated against the
plan before anything is loaded.

Four stages with channels C*[1,2,4,8], reduction ratios [8,4,2,1], pre-norm
residual blocks (x + Attn(LN(x)), x + MLP(LN(x))) with GELU and hidden 4C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import (AttentionWeights, EmsaConfig, StyleContext,
                        emsav2_forward, reduced_extent, styled_block_attention,
                        upsample_branch)
from .positional import ape_apply, pa_apply
from .tensor import ConfigError, ShapeError, Tensor

VARIANTS = ("emsav2", "emsa_only", "convnet_branch")
WINDOW_SIZES = (64, 32, 16, 8)
REDUCTIONS = (8, 4, 2, 1)


@dataclass(frozen=True)
class ModelConfig:
    """Full four-stage architecture description."""

    name: str = "custom"
    base_channels: int = 96
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    blocks: tuple[int, int, int, int] = (1, 2, 6, 2)
    reductions: tuple[int, int, int, int] = REDUCTIONS
    pe_kind: str = "pa"
    variant: str = "emsav2"
    upsample: str = "pixel_shuffle"
    mhim: bool = False
    mhim_norm: str = "instance"
    mlp_ratio: int = 4
    num_classes: int = 1000
    input_size: int = 224   # sizes APE/RPE tables; PA imposes no constraint
    style: str = "global"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.pe_kind not in ("none", "ape", "rpe", "pa"):
            raise ConfigError(f"unknown positional embedding {self.pe_kind!r}")
        if self.style not in ("global", "win", "hwin", "cwin"):
            raise ConfigError(f"unknown style {self.style!r}")
        if self.base_channels % 2:
            raise ConfigError("base_channels must be even (stem uses C/2)")
        for s in range(4):
            if self.stage_channels(s) % self.heads[s]:
                raise ConfigError(
                    f"stage {s} channels {self.stage_channels(s)} not divisible "
                    f"by heads {self.heads[s]}")

    def stage_channels(self, s: int) -> int:
        return self.base_channels * (1 << s)

    def effective_upsample(self) -> str:
        # emsa_only is exactly emsav2 with the branch switched off
        return "none" if self.variant == "emsa_only" else self.upsample

    def block_attention_config(self, s: int) -> EmsaConfig:
        return EmsaConfig(d_m=self.stage_channels(s), k=self.heads[s],
                          r=self.reductions[s], upsample=self.effective_upsample(),
                          mhim=self.mhim, norm_kind=self.mhim_norm)


PRESETS: dict[str, ModelConfig] = {
    "restv2-t": ModelConfig(name="restv2-t"),
    "restv2-s": ModelConfig(name="restv2-s", blocks=(1, 2, 12, 2)),
    "restv2-b": ModelConfig(name="restv2-b", blocks=(1, 3, 16, 3)),
    "restv2-l": ModelConfig(name="restv2-l", base_channels=128,
                            heads=(2, 4, 8, 16), blocks=(2, 3, 16, 2)),
    "restv2-lite": ModelConfig(name="restv2-lite", base_channels=64,
                               blocks=(2, 2, 2, 2)),
    "emsa-only": ModelConfig(name="emsa-only", variant="emsa_only"),
    "convnet": ModelConfig(name="convnet", variant="convnet_branch"),
    "convnetv2": ModelConfig(name="convnetv2", variant="convnet_branch",
                             blocks=(2, 3, 6, 2)),
}


def get_config(name: str, **overrides) -> ModelConfig:
    key = name.lower()
    if key not in PRESETS:
        raise ConfigError(f"unknown model {name!r}; known: {', '.join(sorted(PRESETS))}")
    cfg = PRESETS[key]
    return replace(cfg, **overrides) if overrides else cfg


def load_config_file(path: str) -> ModelConfig:
    """Plain-text ``key = value`` config; tuples are comma-separated."""
    values: dict = {}
    tuple_fields = {"heads", "blocks", "reductions"}
    int_fields = {"base_channels", "mlp_ratio", "num_classes", "input_size"}
    bool_fields = {"mhim"}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key in tuple_fields:
                values[key] = tuple(int(v) for v in val.split(","))
            elif key in int_fields:
                values[key] = int(val)
            elif key in bool_fields:
                values[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                values[key] = val
    return ModelConfig(**values)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _half(extent: int) -> int:
    # 3x3 stride-2 pad-1 conv output extent
    return (extent - 1) // 2 + 1


def stage_spatial(input_hw: tuple[int, int], s: int) -> tuple[int, int]:
    """Spatial extents of stage s input (stem quarters, each embed halves)."""
    h, w = input_hw
    for _ in range(2 + s):
        h, w = _half(h), _half(w)
    return h, w


# ---------------------------------------------------------------------------
# Parameter plan and initialization
# ---------------------------------------------------------------------------

def init_value(rng: np.random.Generator, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "trunc_normal":
        return np.clip(rng.standard_normal(shape) * 0.02, -0.04, 0.04)
    if kind == "fan_out_normal":
        fan_out = shape[0] * int(np.prod(shape[2:])) if len(shape) == 4 else shape[0]
        return rng.standard_normal(shape) * math.sqrt(2.0 / fan_out)
    raise ConfigError(f"unknown init kind {kind!r}")


def parameter_plan(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init_kind) for every parameter the config implies."""
    plan: list[tuple[str, tuple[int, ...], str]] = []
    add = plan.append
    c = cfg.base_channels
    hh, ww = cfg.input_size, cfg.input_size

    def pa(prefix: str, ch: int):
        if cfg.pe_kind == "pa":
            add((f"{prefix}.pa.w", (ch, 1, 3, 3), "fan_out_normal"))
            add((f"{prefix}.pa.b", (ch,), "zeros"))

    def norm(prefix: str, ch: int):
        add((f"{prefix}.gamma", (ch,), "ones"))
        add((f"{prefix}.beta", (ch,), "zeros"))

    def lin(prefix: str, din: int, dout: int):
        add((f"{prefix}.w", (din, dout), "trunc_normal"))
        add((f"{prefix}.b", (dout,), "zeros"))

    add(("stem.conv1.w", (c // 2, 3, 3, 3), "fan_out_normal"))
    add(("stem.conv1.b", (c // 2,), "zeros"))
    add(("stem.conv2.w", (c, c // 2, 3, 3), "fan_out_normal"))
    add(("stem.conv2.b", (c,), "zeros"))
    add(("stem.conv3.w", (c, c, 1, 1), "fan_out_normal"))
    add(("stem.conv3.b", (c,), "zeros"))
    pa("stem", c)

    for s in range(4):
        d = cfg.stage_channels(s)
        hs, ws = stage_spatial((hh, ww), s)
        if s > 0:
            add((f"stage{s}.embed.conv.w", (d, d // 2, 3, 3), "fan_out_normal"))
            add((f"stage{s}.embed.conv.b", (d,), "zeros"))
            pa(f"stage{s}.embed", d)
        if cfg.pe_kind == "ape":
            add((f"stage{s}.ape", (hs * ws, d), "trunc_normal"))
        ecfg = cfg.block_attention_config(s)
        for i in range(cfg.blocks[s]):
            p = f"stage{s}.block{i}"
            norm(f"{p}.norm1", d)
            if cfg.variant != "convnet_branch":
                lin(f"{p}.attn.q", d, d)
                lin(f"{p}.attn.k", d, d)
            lin(f"{p}.attn.v", d, d)
            if ecfg.r > 1:
                add((f"{p}.attn.down.w", (d, 1, ecfg.r + 1, ecfg.r + 1), "fan_out_normal"))
                add((f"{p}.attn.down.b", (d,), "zeros"))
                norm(f"{p}.attn.down_norm", d)
            if ecfg.upsample == "pixel_shuffle":
                cout = d * ecfg.r * ecfg.r if ecfg.r > 1 else d
                add((f"{p}.attn.up.w", (cout, 1, 3, 3), "fan_out_normal"))
                add((f"{p}.attn.up.b", (cout,), "zeros"))
            if cfg.mhim and cfg.variant != "convnet_branch":
                add((f"{p}.attn.mhim.w", (ecfg.k, ecfg.k), "trunc_normal"))
                add((f"{p}.attn.mhim.b", (ecfg.k,), "zeros"))
                add((f"{p}.attn.mhim.gamma", (ecfg.k,), "ones"))
                add((f"{p}.attn.mhim.beta", (ecfg.k,), "zeros"))
            if cfg.pe_kind == "rpe" and cfg.variant != "convnet_branch":
                hp, wp = reduced_extent(hs, ecfg.r), reduced_extent(ws, ecfg.r)
                add((f"{p}.attn.rpe.h", (ecfg.k, hp, 1, ecfg.d_k), "trunc_normal"))
                add((f"{p}.attn.rpe.w", (ecfg.k, 1, wp, ecfg.d_k), "trunc_normal"))
            lin(f"{p}.attn.out", d, d)
            norm(f"{p}.norm2", d)
            lin(f"{p}.mlp.fc1", d, cfg.mlp_ratio * d)
            lin(f"{p}.mlp.fc2", cfg.mlp_ratio * d, d)
        if cfg.style == "cwin":
            add((f"stage{s}.cwin.w", (d, 1, 7, 7), "fan_out_normal"))
            add((f"stage{s}.cwin.b", (d,), "zeros"))

    d4 = cfg.stage_channels(3)
    norm("norm", d4)
    lin("head", d4, cfg.num_classes)
    return plan


def planned_param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_plan(cfg))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class BranchCapture:
    """Per-block activations grabbed during an instrumented forward pass."""

    stage: int
    block: int
    attn: np.ndarray | None      # (B, n, d) attention-branch output
    up: np.ndarray | None        # (B, n, d) upsample-branch output
    combined: np.ndarray         # (B, n, d) block attention output (sum)
    block_output: np.ndarray     # (B, n, d) after the MLP residual


class Model:
    """Built ResTv2 variant: immutable weights plus forward passes."""

    def __init__(self, cfg: ModelConfig, weights: dict[str, Tensor]):
        self.cfg = cfg
        self.weights = weights

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def get(self, name: str) -> Tensor | None:
        return self.weights.get(name)

    def param_count(self) -> int:
        return sum(t.numel() for t in self.weights.values())

    def requires_grad_(self, flag: bool = True) -> "Model":
        for t in self.weights.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.weights.values():
            t.grad = None

    # -- forward pieces ----------------------------------------------------

    def _attention_weights(self, s: int, i: int) -> AttentionWeights:
        p = f"stage{s}.block{i}.attn"
        g = self.get
        return AttentionWeights(
            wq=g(f"{p}.q.w"), bq=g(f"{p}.q.b"),
            wk=g(f"{p}.k.w"), bk=g(f"{p}.k.b"),
            wv=g(f"{p}.v.w"), bv=g(f"{p}.v.b"),
            out_w=g(f"{p}.out.w"), out_b=g(f"{p}.out.b"),
            down_w=g(f"{p}.down.w"), down_b=g(f"{p}.down.b"),
            down_gamma=g(f"{p}.down_norm.gamma"), down_beta=g(f"{p}.down_norm.beta"),
            up_w=g(f"{p}.up.w"), up_b=g(f"{p}.up.b"),
            mhim_w=g(f"{p}.mhim.w"), mhim_b=g(f"{p}.mhim.b"),
            mhim_gamma=g(f"{p}.mhim.gamma"), mhim_beta=g(f"{p}.mhim.beta"),
            rpe_h=g(f"{p}.rpe.h"), rpe_w=g(f"{p}.rpe.w"))

    def stem_forward(self, x: Tensor) -> Tensor:
        w = self.weights
        y = T.conv2d(x, w["stem.conv1.w"], w["stem.conv1.b"], stride=2, padding=1)
        y = T.gelu(y)
        y = T.conv2d(y, w["stem.conv2.w"], w["stem.conv2.b"], stride=2, padding=1)
        y = T.gelu(y)
        y = T.conv2d(y, w["stem.conv3.w"], w["stem.conv3.b"], stride=1, padding=0)
        if self.cfg.pe_kind == "pa":
            y = pa_apply(y, w["stem.pa.w"], w["stem.pa.b"])
        return y

    def patch_embed_forward(self, x: Tensor, s: int) -> Tensor:
        w = self.weights
        y = T.conv2d(x, w[f"stage{s}.embed.conv.w"], w[f"stage{s}.embed.conv.b"],
                     stride=2, padding=1)
        if self.cfg.pe_kind == "pa":
            y = pa_apply(y, w[f"stage{s}.embed.pa.w"], w[f"stage{s}.embed.pa.b"])
        return y

    def _conv_branch(self, x: Tensor, s: int, i: int, ecfg: EmsaConfig,
                     spatial: tuple[int, int]) -> Tensor:
        """The convnet_branch block body: downsample, V, upsample, out proj."""
        aw = self._attention_weights(s, i)
        h, wd = spatial
        if ecfg.r > 1:
            img = T.tokens_to_image(x, h, wd)
            down = T.conv2d(img, aw.down_w, aw.down_b, stride=ecfg.r,
                            padding=ecfg.r // 2, groups=ecfg.d_m)
            reduced = (down.shape[2], down.shape[3])
            xr = T.layer_norm(T.image_to_tokens(down), aw.down_gamma, aw.down_beta)
        else:
            xr, reduced = x, spatial
        v = T.linear(xr, aw.wv, aw.bv)
        up = upsample_branch(v, aw, ecfg, reduced, spatial)
        return T.linear(up, aw.out_w, aw.out_b)

    def block_forward(self, x: Tensor, s: int, i: int, spatial: tuple[int, int],
                      ctx: StyleContext, capture: list | None = None) -> Tensor:
        w = self.weights
        p = f"stage{s}.block{i}"
        ecfg = self.cfg.block_attention_config(s)
        h = T.layer_norm(x, w[f"{p}.norm1.gamma"], w[f"{p}.norm1.beta"])
        attn_np = up_np = None
        if self.cfg.variant == "convnet_branch":
            a = self._conv_branch(h, s, i, ecfg, spatial)
            up_np = a.data if capture is not None else None
        elif capture is not None and ctx.style == "global":
            a, attn_t, up_t = emsav2_forward(h, self._attention_weights(s, i),
                                             ecfg, spatial, return_branches=True)
            attn_np = attn_t.data
            up_np = up_t.data if up_t is not None else None
        else:
            a = styled_block_attention(h, self._attention_weights(s, i), ecfg,
                                       spatial, ctx)
        x = T.add(x, a)
        h2 = T.layer_norm(x, w[f"{p}.norm2.gamma"], w[f"{p}.norm2.beta"])
        m = T.linear(h2, w[f"{p}.mlp.fc1.w"], w[f"{p}.mlp.fc1.b"])
        m = T.gelu(m)
        m = T.linear(m, w[f"{p}.mlp.fc2.w"], w[f"{p}.mlp.fc2.b"])
        x = T.add(x, m)
        if capture is not None:
            capture.append(BranchCapture(s, i, attn_np, up_np, a.data, x.data))
        return x

    def forward(self, x: Tensor, style: str | None = None,
                capture: list | None = None) -> Tensor:
        """(B, 3, H, W) image batch -> (B, num_classes) logits."""
        style = style or self.cfg.style
        if style == "cwin" and self.cfg.style != "cwin":
            raise ConfigError("cwin needs its stage-end DWConv weights; "
                              "build the model with style='cwin'")
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {x.shape}")
        if x.shape[2] < 32 or x.shape[3] < 32:
            raise ShapeError(f"input {x.shape} undersized; need at least 32x32")
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        w = self.weights
        img = self.stem_forward(x)
        for s in range(4):
            if s > 0:
                img = self.patch_embed_forward(img, s)
            hs, ws = img.shape[2], img.shape[3]
            tokens = T.image_to_tokens(img)
            if self.cfg.pe_kind == "ape":
                tokens = ape_apply(tokens, w[f"stage{s}.ape"])
            for i in range(self.cfg.blocks[s]):
                ctx = StyleContext(style=style, window_size=WINDOW_SIZES[s],
                                   stage_index=s, block_index=i,
                                   is_last_block=(i == self.cfg.blocks[s] - 1))
                tokens = self.block_forward(tokens, s, i, (hs, ws), ctx, capture)
            img = T.tokens_to_image(tokens, hs, ws)
            if style == "cwin":
                d = self.cfg.stage_channels(s)
                conv = T.conv2d(img, w[f"stage{s}.cwin.w"], w[f"stage{s}.cwin.b"],
                                stride=1, padding=3, groups=d)
                img = T.add(img, conv)
        tokens = T.image_to_tokens(img)
        tokens = T.layer_norm(tokens, w["norm.gamma"], w["norm.beta"])
        img = T.tokens_to_image(tokens, img.shape[2], img.shape[3])
        pooled = T.avg_pool_global(img)
        return T.linear(pooled, w["head.w"], w["head.b"])

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype


def build_model(cfg: ModelConfig | str, seed: int = 42, dtype=np.float32) -> Model:
    """Materialize deterministic weights for a config (or preset name)."""
    if isinstance(cfg, str):
        cfg = get_config(cfg)
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    for name, shape, kind in parameter_plan(cfg):
        weights[name] = Tensor(init_value(rng, shape, kind).astype(dtype),
                               requires_grad=False)
    return Model(cfg, weights)


def describe(cfg: ModelConfig, input_size: int | None = None) -> dict:
    """Stage table (channels / heads / blocks / reductions / spatial extents)."""
    size = input_size or cfg.input_size
    stages = []
    for s in range(4):
        hs, ws = stage_spatial((size, size), s)
        stages.append({
            "stage": s + 1,
            "channels": cfg.stage_channels(s),
            "heads": cfg.heads[s],
            "blocks": cfg.blocks[s],
            "reduction": cfg.reductions[s],
            "spatial": [hs, ws],
        })
    return {
        "name": cfg.name,
        "variant": cfg.variant,
        "base_channels": cfg.base_channels,
        "pe_kind": cfg.pe_kind,
        "upsample": cfg.effective_upsample(),
        "mlp_ratio": cfg.mlp_ratio,
        "num_classes": cfg.num_classes,
        "input_size": size,
        "stages": stages,
        "parameters": planned_param_count(cfg),
    }
