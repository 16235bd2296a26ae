"""Parameter counting and symbolic FLOPs accounting by operator category.

FLOPs are multiply-accumulate counts (1 MAC = 1 FLOP, the convention the
architecture tables in this family use), bucketed into Conv / Linear /
Matmul / Others.  The walker mirrors the executed forward pass op for op,
sharing the per-element "other" cost factors with the tensor engine's
instrumented recorder, so the two agree exactly on any geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import reduced_extent
from .model import (Model, ModelConfig, WINDOW_SIZES, _half, parameter_plan,
                    stage_spatial)
from .tensor import ConfigError, OTHER_COST


@dataclass
class FlopsReport:
    """Per-image MAC totals by category, plus the parameter count."""

    conv_flops: int = 0
    linear_flops: int = 0
    matmul_flops: int = 0
    other_flops: int = 0
    params: int = 0
    per_module: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.conv_flops + self.linear_flops + self.matmul_flops + self.other_flops

    def to_dict(self) -> dict:
        return {
            "conv_flops": self.conv_flops,
            "linear_flops": self.linear_flops,
            "matmul_flops": self.matmul_flops,
            "other_flops": self.other_flops,
            "total_flops": self.total,
            "params": self.params,
            "per_module": self.per_module,
        }


class _Acc:
    """Accumulates category counts, attributing them to a current module."""

    def __init__(self):
        self.report = FlopsReport()
        self._module = None
        self._bucket = None

    def module(self, name: str):
        self._module = name
        self._bucket = {"module": name, "conv": 0, "linear": 0, "matmul": 0, "other": 0}
        self.report.per_module.append(self._bucket)
        return self

    def add(self, category: str, macs: int, times: int = 1):
        macs = int(macs) * times
        key = f"{category}_flops"
        setattr(self.report, key, getattr(self.report, key) + macs)
        self._bucket[category] += macs


def _pa_cost(acc: _Acc, ch: int, h: int, w: int):
    acc.add("conv", 9 * 1 * ch * h * w)
    acc.add("other", OTHER_COST["sigmoid"] * ch * h * w)


def _attention_cost(acc: _Acc, cfg: ModelConfig, s: int, n_h: int, n_w: int,
                    windows: int = 1):
    """Cost of one EMSA(v2) call on an (n_h, n_w) token grid, times ``windows``."""
    ecfg = cfg.block_attention_config(s)
    d, k, r = ecfg.d_m, ecfg.k, ecfg.r
    n = n_h * n_w
    if r > 1:
        hp, wp = reduced_extent(n_h, r), reduced_extent(n_w, r)
    else:
        hp, wp = n_h, n_w
    np_ = hp * wp
    conv_branch = cfg.variant == "convnet_branch"

    if not conv_branch:
        acc.add("linear", n * d * d, windows)                      # Q
    if r > 1:
        acc.add("conv", (r + 1) * (r + 1) * 1 * d * hp * wp, windows)
        acc.add("other", OTHER_COST["norm"] * np_ * d, windows)
    if not conv_branch:
        acc.add("linear", np_ * d * d, windows)                    # K
    acc.add("linear", np_ * d * d, windows)                        # V
    if not conv_branch:
        acc.add("matmul", n * d * np_, windows)                    # Q.K^T
        if ecfg.mhim:
            acc.add("linear", n * np_ * k * k, windows)
        acc.add("other", OTHER_COST["softmax"] * k * n * np_, windows)
        if ecfg.mhim:
            acc.add("other", OTHER_COST["norm"] * k * n * np_, windows)
        acc.add("matmul", n * np_ * d, windows)                    # attn.V
    if ecfg.upsample == "nearest":
        acc.add("other", OTHER_COST["interp_nearest"] * n * d, windows)
    elif ecfg.upsample == "bilinear":
        acc.add("other", OTHER_COST["interp_bilinear"] * n * d, windows)
    elif ecfg.upsample == "pixel_shuffle":
        cout = d * r * r if r > 1 else d
        acc.add("conv", 9 * 1 * cout * hp * wp, windows)
    acc.add("linear", n * d * d, windows)                          # out proj


def _walk(cfg: ModelConfig, input_hw: tuple[int, int], style: str) -> FlopsReport:
    if style not in ("global", "win", "hwin", "cwin"):
        raise ConfigError(f"unknown style {style!r}")
    acc = _Acc()
    h, w = input_hw
    c = cfg.base_channels

    acc.module("stem")
    h1, w1 = _half(h), _half(w)
    h2, w2 = _half(h1), _half(w1)
    acc.add("conv", 9 * 3 * (c // 2) * h1 * w1)
    acc.add("other", OTHER_COST["gelu"] * (c // 2) * h1 * w1)
    acc.add("conv", 9 * (c // 2) * c * h2 * w2)
    acc.add("other", OTHER_COST["gelu"] * c * h2 * w2)
    acc.add("conv", 1 * c * c * h2 * w2)
    if cfg.pe_kind == "pa":
        _pa_cost(acc, c, h2, w2)

    hs, ws = h2, w2
    for s in range(4):
        d = cfg.stage_channels(s)
        if s > 0:
            hs, ws = _half(hs), _half(ws)
            acc.module(f"stage{s}.embed")
            acc.add("conv", 9 * (d // 2) * d * hs * ws)
            if cfg.pe_kind == "pa":
                _pa_cost(acc, d, hs, ws)
        n = hs * ws
        wsz = WINDOW_SIZES[s]
        for i in range(cfg.blocks[s]):
            acc.module(f"stage{s}.block{i}")
            acc.add("other", OTHER_COST["norm"] * n * d)            # norm1
            is_last = i == cfg.blocks[s] - 1
            windowed = style in ("win", "cwin") or (style == "hwin" and not is_last)
            if windowed and cfg.variant != "convnet_branch":
                nwin = -(-hs // wsz) * -(-ws // wsz)
                _attention_cost(acc, cfg, s, wsz, wsz, windows=nwin)
            else:
                _attention_cost(acc, cfg, s, hs, ws)
            acc.add("other", OTHER_COST["norm"] * n * d)            # norm2
            acc.add("linear", n * d * cfg.mlp_ratio * d)            # fc1
            acc.add("other", OTHER_COST["gelu"] * n * cfg.mlp_ratio * d)
            acc.add("linear", n * cfg.mlp_ratio * d * d)            # fc2
        if style == "cwin":
            acc.module(f"stage{s}.cwin")
            acc.add("conv", 49 * 1 * d * hs * ws)

    acc.module("head")
    d4 = cfg.stage_channels(3)
    acc.add("other", OTHER_COST["norm"] * hs * ws * d4)             # final norm
    acc.add("other", OTHER_COST["avg_pool"] * hs * ws * d4)
    acc.add("linear", d4 * cfg.num_classes)
    acc.report.params = sum(int(np.prod(shape)) for _, shape, _ in parameter_plan(cfg))
    return acc.report


def _resolve(model_or_cfg) -> ModelConfig:
    if isinstance(model_or_cfg, Model):
        return model_or_cfg.cfg
    return model_or_cfg


def _geometry(size) -> tuple[int, int]:
    if isinstance(size, int):
        return (size, size)
    h, w = size
    return (int(h), int(w))


def count_params(model_or_cfg) -> int:
    """Exact element count, from materialized weights or the pure plan."""
    if isinstance(model_or_cfg, Model):
        return model_or_cfg.param_count()
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_plan(model_or_cfg))


def param_breakdown(cfg_or_model) -> list[tuple[str, int]]:
    """Parameter counts itemized by component group, for reconciliation."""
    cfg = _resolve(cfg_or_model)
    groups: dict[str, int] = {}
    for name, shape, _ in parameter_plan(cfg):
        parts = name.split(".")
        if parts[0] == "stem":
            key = "stem"
        elif parts[0] in ("norm", "head"):
            key = "classifier"
        elif parts[1] == "embed":
            key = f"{parts[0]}.embed"
        elif parts[1] == "ape":
            key = f"{parts[0]}.ape"
        elif parts[1] == "cwin":
            key = f"{parts[0]}.cwin"
        else:
            rest = parts[2:]
            if rest[0] == "attn":
                sub = {"q": "attn_proj", "k": "attn_proj", "v": "attn_proj",
                       "out": "attn_proj", "down": "attn_down",
                       "down_norm": "attn_down", "up": "attn_up",
                       "mhim": "mhim", "rpe": "rpe"}[rest[1]]
            elif rest[0] == "mlp":
                sub = "mlp"
            else:
                sub = "norms"
            key = f"{parts[0]}.{sub}"
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return sorted(groups.items())


def param_reconciliation(cfg_or_model, target: float | None = None) -> dict:
    cfg = _resolve(cfg_or_model)
    total = count_params(cfg)
    out = {
        "model": cfg.name,
        "pe_kind": cfg.pe_kind,
        "total": total,
        "groups": [{"group": g, "params": n} for g, n in param_breakdown(cfg)],
    }
    if target is not None:
        out["target"] = target
        out["gap"] = total - target
        out["gap_pct"] = 100.0 * (total - target) / target
    return out


def count_flops(model_or_cfg, input_size=224) -> FlopsReport:
    """Symbolic per-image FLOPs decomposition at the given input geometry."""
    return _walk(_resolve(model_or_cfg), _geometry(input_size), "global")


def window_style_flops(model_or_cfg, style: str, input_size=224) -> FlopsReport:
    """FLOPs decomposition under a fine-tuning style, padding inflation included."""
    return _walk(_resolve(model_or_cfg), _geometry(input_size), style)


def cwin_conv_delta(model_or_cfg, input_size=224) -> int:
    """Closed-form cost of the four stage-end 7x7 DWConvs (cwin minus win, conv)."""
    cfg = _resolve(model_or_cfg)
    h, w = _geometry(input_size)
    total = 0
    for s in range(4):
        hs, ws = stage_spatial((h, w), s)
        total += 49 * cfg.stage_channels(s) * hs * ws
    return total
