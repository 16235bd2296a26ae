"""Command-line surface: model construction, profiling, analysis, benchmarks.

Exit codes: 0 success, 1 domain errors (bad geometry, corrupt files...),
2 usage errors.  Reports go to stdout as JSON unless --out is given, in
which case they are written atomically in the chosen format.
"""

from __future__ import annotations

import os

# Thread cap must land in the environment before numpy initializes its pools.
_threads = os.environ.get("EMSA2_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import functools
import json
import sys

import click
import numpy as np

from . import bench as bench_mod
from . import cka as cka_mod
from . import figures, gradcheck
from .flops import (count_flops, count_params, cwin_conv_delta,
                    param_reconciliation, window_style_flops)
from .model import (ModelConfig, build_model, describe, get_config,
                    load_config_file, parameter_plan, stage_spatial)
from .reports import (emit_profile_csv, emit_report, read_raw_tensor,
                      render_report, write_raw_tensor)
from .spectrum import delta_log_amplitude
from .tensor import ConfigError, ShapeError, Tensor, UsageError
from .weights_io import (WeightFormatError, check_against_plan, load_weights,
                         save_weights)

_DOMAIN_ERRORS = (ConfigError, ShapeError, UsageError, WeightFormatError,
                  OSError, ValueError)


def _domain_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _DOMAIN_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


def _parse_size(value: str) -> tuple[int, int]:
    parts = value.lower().replace("x", " ").split()
    dims = [int(p) for p in parts]
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) <= 0:
        raise ConfigError(f"bad geometry {value!r}; expected N or HxW")
    return dims[0], dims[1]


def _load_cfg(model: str | None, config: str | None, **overrides) -> ModelConfig:
    if (model is None) == (config is None):
        raise click.UsageError("give exactly one of --model or --config")
    if config is not None:
        cfg = load_config_file(config)
        if overrides:
            from dataclasses import replace
            cfg = replace(cfg, **overrides)
        return cfg
    return get_config(model, **overrides)


def _emit(report, out: str | None, fmt: str) -> None:
    if out:
        emit_report(report, fmt, out)
    else:
        sys.stdout.write(render_report(report, "json").decode("utf-8"))


_model_opts = [
    click.option("--model", default=None, help="preset name (restv2-t/s/b/l/lite, "
                 "emsa-only, convnet, convnetv2)"),
    click.option("--config", default=None, type=click.Path(exists=True),
                 help="plain-text key=value config file"),
]
_out_opts = [
    click.option("--out", default=None, type=click.Path(), help="report path "
                 "(stdout JSON if omitted)"),
    click.option("--format", "fmt", default="json",
                 type=click.Choice(["json", "csv"])),
]


def _opts(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


@click.group()
def main():
    """ResTv2 / EMSAv2 analysis kit."""


@main.command("describe")
@_opts(_model_opts)
@click.option("--size", default=None, help="input geometry, N or HxW")
@_opts(_out_opts)
@_domain_errors
def describe_cmd(model, config, size, out, fmt):
    """Stage table: channels, heads, blocks, reductions, spatial extents."""
    cfg = _load_cfg(model, config)
    input_size = _parse_size(size)[0] if size else None
    _emit(describe(cfg, input_size), out, fmt)


@main.command("params")
@_opts(_model_opts)
@click.option("--target", default=None, type=float,
              help="reference count to reconcile against")
@_opts(_out_opts)
@_domain_errors
def params_cmd(model, config, target, out, fmt):
    """Parameter count with per-group reconciliation breakdown."""
    cfg = _load_cfg(model, config)
    report = param_reconciliation(cfg, target)
    if out and fmt == "csv":
        _emit(report["groups"] + [{"group": "total", "params": report["total"]}], out, fmt)
    else:
        _emit(report, out, fmt)


@main.command("flops")
@_opts(_model_opts)
@click.option("--size", default="224", help="input geometry, N or HxW")
@click.option("--figure", default=None, type=click.Path(),
              help="also render the category decomposition as a bar chart")
@_opts(_out_opts)
@_domain_errors
def flops_cmd(model, config, size, figure, out, fmt):
    """Symbolic per-image FLOPs decomposition (MAC convention)."""
    cfg = _load_cfg(model, config)
    report = count_flops(cfg, _parse_size(size))
    if figure:
        figures.flops_figure({cfg.name: report}, figure)
    _emit(report.to_dict(), out, fmt)


@main.command("winflops")
@_opts(_model_opts)
@click.option("--size", default="800x1216", help="input geometry, N or HxW")
@click.option("--style", default="all",
              type=click.Choice(["all", "global", "win", "hwin", "cwin"]))
@click.option("--figure", default=None, type=click.Path())
@_opts(_out_opts)
@_domain_errors
def winflops_cmd(model, config, size, style, figure, out, fmt):
    """FLOPs decomposition under the downstream fine-tuning styles."""
    geometry = _parse_size(size)
    styles = ["global", "win", "hwin", "cwin"] if style == "all" else [style]
    reports = {}
    for st in styles:
        cfg = _load_cfg(model, config, style=st) if st == "cwin" \
            else _load_cfg(model, config)
        reports[st] = window_style_flops(cfg, st, geometry)
    rows = [{"style": st, **r.to_dict()} for st, r in reports.items()]
    for row in rows:
        row.pop("per_module")
    base_cfg = _load_cfg(model, config)
    result = {"geometry": list(geometry), "styles": rows,
              "cwin_dwconv_delta": cwin_conv_delta(base_cfg, geometry)}
    if figure:
        figures.flops_figure(reports, figure)
    if out and fmt == "csv":
        _emit(rows, out, fmt)
    else:
        _emit(result, out, fmt)


@main.command("forward")
@_opts(_model_opts)
@click.option("--size", default="224")
@click.option("--batch", default=1, type=int)
@click.option("--seed", default=42, type=int)
@click.option("--input", "input_path", default=None, type=click.Path(exists=True),
              help="raw f32 tensor blob (RTEN format); random if omitted")
@click.option("--style", default=None,
              type=click.Choice(["global", "win", "hwin", "cwin"]))
@click.option("--logits-out", default=None, type=click.Path(),
              help="write logits as a raw tensor blob")
@_opts(_out_opts)
@_domain_errors
def forward_cmd(model, config, size, batch, seed, input_path, style, logits_out,
                out, fmt):
    """Run a forward pass and summarize the logits."""
    cfg = _load_cfg(model, config, **({"style": style} if style == "cwin" else {}))
    m = build_model(cfg, seed=seed)
    if input_path:
        x = read_raw_tensor(input_path)
    else:
        h, w = _parse_size(size)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((batch, 3, h, w)).astype(np.float32))
    logits = m.forward(x, style=style)
    if logits_out:
        write_raw_tensor(logits, logits_out)
    arr = logits.data
    report = {
        "model": cfg.name,
        "style": style or cfg.style,
        "input_shape": list(x.shape),
        "logits_shape": list(arr.shape),
        "argmax": [int(i) for i in arr.argmax(axis=-1)],
        "logits_min": float(arr.min()),
        "logits_max": float(arr.max()),
        "all_finite": bool(np.isfinite(arr).all()),
    }
    _emit(report, out, fmt)


@main.command("gradcheck")
@click.option("--mini/--ops-only", default=True,
              help="--mini runs ops plus the miniature full model")
@click.option("--seed", default=0, type=int)
@_opts(_out_opts)
@_domain_errors
def gradcheck_cmd(mini, seed, out, fmt):
    """Finite-difference gradient suite; exit 0 iff max rel. err < 1e-4."""
    if mini:
        report = gradcheck.run_suite(seed)
    else:
        ops = gradcheck.op_gradcheck(seed)
        worst = max(r["max_rel_err"] for r in ops)
        report = {"tolerance": gradcheck.REL_TOL, "max_rel_err": worst,
                  "passed": worst < gradcheck.REL_TOL, "op_checks": ops}
    _emit(report, out, fmt)
    if not report["passed"]:
        sys.exit(1)


def _probe_model(model, config, seed, size, batch, style=None):
    cfg = _load_cfg(model, config)
    m = build_model(cfg, seed=seed)
    h, w = _parse_size(size)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((batch, 3, h, w)).astype(np.float32))
    return cfg, m, x


@main.command("spectrum")
@_opts(_model_opts)
@click.option("--size", default="224")
@click.option("--batch", default=1, type=int)
@click.option("--seed", default=42, type=int)
@click.option("--profiles-dir", default=None, type=click.Path(),
              help="write a two-column CSV per block (combined branch)")
@click.option("--figure", default=None, type=click.Path())
@_opts(_out_opts)
@_domain_errors
def spectrum_cmd(model, config, size, batch, seed, profiles_dir, figure, out, fmt):
    """Fourier delta-log-amplitude of per-block branch feature maps.

    On randomly initialized weights this is for inspection only; trained-model
    curves are out of reach at desk scale.
    """
    cfg, m, x = _probe_model(model, config, seed, size, batch)
    capture: list = []
    m.forward(x, capture=capture)
    rows, curve_profiles = [], {}
    for rec in capture:
        h, wdt = stage_spatial(x.shape[2:], rec.stage)
        for branch, arr in (("attention", rec.attn), ("upsample", rec.up),
                            ("combined", rec.combined)):
            if arr is None:
                continue
            fmap = arr[0].reshape(h, wdt, -1).transpose(2, 0, 1)
            prof = delta_log_amplitude(fmap)
            rows.append({"stage": rec.stage + 1, "block": rec.block,
                         "branch": branch,
                         "delta_log_amplitude": prof.delta_log_amplitude})
            if branch == "combined":
                name = f"s{rec.stage + 1}b{rec.block}"
                curve_profiles[name] = prof
                if profiles_dir:
                    os.makedirs(profiles_dir, exist_ok=True)
                    emit_profile_csv(prof, os.path.join(profiles_dir, f"{name}.csv"))
    if figure:
        figures.spectrum_figure(rows, figure, curve_profiles)
    _emit(rows, out, fmt)


@main.command("branches")
@_opts(_model_opts)
@click.option("--size", default="224")
@click.option("--batch", default=1, type=int)
@click.option("--seed", default=42, type=int)
@click.option("--figure", default=None, type=click.Path())
@_opts(_out_opts)
@_domain_errors
def branches_cmd(model, config, size, batch, seed, figure, out, fmt):
    """Per-block linear CKA between attention branch, upsample branch, sum."""
    cfg, m, x = _probe_model(model, config, seed, size, batch)
    rows = cka_mod.branch_similarity_report(m, x)
    if figure:
        figures.branch_cka_figure(rows, figure)
    _emit(rows, out, fmt)


@main.command("cka")
@_opts(_model_opts)
@click.option("--size", default="224")
@click.option("--batch", default=8, type=int)
@click.option("--seed", default=42, type=int)
@click.option("--figure", default=None, type=click.Path())
@_opts(_out_opts)
@_domain_errors
def cka_cmd(model, config, size, batch, seed, figure, out, fmt):
    """Pairwise linear CKA between all block output representations."""
    cfg, m, x = _probe_model(model, config, seed, size, batch)
    names, mat = cka_mod.block_output_cka_matrix(m, x)
    if figure:
        figures.cka_heatmap(names, mat, figure)
    rows = [{"block": a, "other": b, "cka": float(mat[i, j])}
            for i, a in enumerate(names) for j, b in enumerate(names) if j > i]
    _emit(rows, out, fmt)


@main.command("bench")
@_opts(_model_opts)
@click.option("--size", default="224")
@click.option("--batch", default=1, type=int)
@click.option("--warmup", default=1, type=int)
@click.option("--iters", default=3, type=int)
@click.option("--seed", default=42, type=int)
@click.option("--style", default=None,
              type=click.Choice(["global", "win", "hwin", "cwin"]))
@_opts(_out_opts)
@_domain_errors
def bench_cmd(model, config, size, batch, warmup, iters, seed, style, out, fmt):
    """Wall-clock throughput; timings are hardware-specific, reported not asserted."""
    cfg = _load_cfg(model, config, **({"style": style} if style == "cwin" else {}))
    m = build_model(cfg, seed=seed)
    report = bench_mod.bench_throughput(m, _parse_size(size), batch=batch,
                                        warmup_iters=warmup, timed_iters=iters,
                                        style=style, seed=seed)
    _emit(report, out, fmt)


@main.command("save-init")
@_opts(_model_opts)
@click.option("--seed", default=42, type=int)
@click.option("--out", required=True, type=click.Path())
@_domain_errors
def save_init_cmd(model, config, seed, out):
    """Build deterministic initial weights and write them to a weight file."""
    cfg = _load_cfg(model, config)
    m = build_model(cfg, seed=seed)
    save_weights(m.weights, out)
    click.echo(f"wrote {m.param_count()} parameters to {out}")


@main.command("load-check")
@_opts(_model_opts)
@click.option("--weights", "weights_path", required=True,
              type=click.Path(exists=True))
@_domain_errors
def load_check_cmd(model, config, weights_path):
    """Verify a weight file: magic, checksum, and shape plan for the config."""
    cfg = _load_cfg(model, config)
    loaded = load_weights(weights_path)
    check_against_plan(loaded, parameter_plan(cfg))
    total = sum(t.numel() for t in loaded.values())
    click.echo(f"{weights_path}: OK ({len(loaded)} tensors, {total} parameters)")


if __name__ == "__main__":
    main()
