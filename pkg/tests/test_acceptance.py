"""Acceptance criteria, one test per criterion.

Each test ends with a single PASS/FAIL line, echoed in the pytest terminal
summary (see conftest.py) so the verdicts are visible in any run.
"""

import numpy as np
import pytest

from conftest import record_verdict

from restv2kit.cka import linear_cka
from restv2kit.flops import (count_flops, count_params, cwin_conv_delta,
                             param_reconciliation, window_style_flops)
from restv2kit.gradcheck import MINI_CONFIG, REL_TOL, run_suite
from restv2kit.attention import (EmsaConfig, StyleContext, emsa_forward,
                                 emsav2_forward, init_attention_weights,
                                 styled_block_attention, window_merge,
                                 window_partition)
from restv2kit.model import ModelConfig, build_model, get_config
from restv2kit.spectrum import delta_log_amplitude
from restv2kit.tensor import FlopRecorder, Tensor


def verdict(ok: bool, label: str):
    line = record_verdict(ok, label)
    print(line)
    assert ok, label


def within(value, target, pct):
    return abs(value - target) <= pct / 100.0 * target


# -- criterion 1: parameter reconciliation ----------------------------------

def test_criterion_1_parameter_reconciliation():
    anchors = [
        (get_config("restv2-t"), 30.43e6),
        (get_config("restv2-t", upsample="none"), 30.26e6),
        (get_config("restv2-t", pe_kind="none"), 30.42e6),
        (get_config("restv2-t", pe_kind="ape"), 30.98e6),
        (get_config("restv2-t", pe_kind="rpe"), 30.48e6),
        (get_config("restv2-t", pe_kind="pa"), 30.43e6),
        (get_config("convnet"), 26.11e6),
        (get_config("convnetv2"), 26.67e6),
        (get_config("restv2-l"), 87.0e6),
    ]
    checks = []
    for cfg, target in anchors:
        rep = param_reconciliation(cfg, target)
        itemized = sum(g["params"] for g in rep["groups"])
        checks.append(within(rep["total"], target, 2.0) and itemized == rep["total"])
    verdict(all(checks),
            "criterion 1: parameter counts within 2% of all nine anchors, "
            "with per-group itemization summing exactly")


# -- criterion 2: FLOPs reconciliation --------------------------------------

def test_criterion_2_flops_reconciliation():
    anchors = [("restv2-t", 4.1e9), ("restv2-s", 6.0e9),
               ("restv2-b", 7.9e9), ("restv2-l", 13.8e9)]
    ok = all(within(count_flops(get_config(n), 224).total, t, 5.0)
             for n, t in anchors)
    with_up = count_flops(get_config("restv2-t"), 224).total
    without = count_flops(get_config("restv2-t", upsample="none"), 224).total
    ok = ok and with_up > without
    verdict(ok, "criterion 2: 224^2 FLOPs within 5% of the four scale anchors; "
                "pixel-shuffle branch adds FLOPs")


# -- criterion 3: window-style ordering at 800x1216 -------------------------

def test_criterion_3_window_style_ordering():
    cfg = get_config("restv2-t")
    geo = (800, 1216)
    reports = {st: window_style_flops(cfg, st, geo)
               for st in ("global", "win", "hwin")}
    ok = (reports["global"].matmul_flops > reports["hwin"].matmul_flops
          > reports["win"].matmul_flops)
    ok = ok and reports["win"].linear_flops >= reports["global"].linear_flops
    cwin = window_style_flops(get_config("restv2-t", style="cwin"), "cwin", geo)
    delta = cwin.conv_flops - reports["win"].conv_flops
    ok = ok and delta == cwin_conv_delta(cfg, geo)
    verdict(ok, "criterion 3: matmul Global > HWin > Win, linear Win >= Global, "
                "CWin conv delta equals the closed-form 7x7 DWConv cost")


# -- criterion 4: gradient suite --------------------------------------------

def test_criterion_4_gradient_suite():
    report = run_suite(seed=0)
    ok = report["passed"] and report["max_rel_err"] < REL_TOL
    ok = ok and all(r["passed"] for r in report["op_checks"])
    ok = ok and all(r["passed"] for r in report["model_param_checks"])
    verdict(ok, "criterion 4: all op and miniature-model gradient checks "
                f"below 1e-4 (worst {report['max_rel_err']:.2e})")


# -- criterion 5: structural equivalences -----------------------------------

def test_criterion_5_structural_equivalences():
    rng = np.random.default_rng(0)
    ok = True

    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample="none")
    w = init_attention_weights(cfg, np.random.default_rng(1), dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 36, 8)))
    ok &= np.array_equal(emsav2_forward(x, w, cfg, (6, 6)).data,
                         emsa_forward(x, w, cfg, (6, 6)).data)

    cfg2 = EmsaConfig(d_m=8, k=2, r=2, upsample="pixel_shuffle")
    w2 = init_attention_weights(cfg2, np.random.default_rng(2), dtype=np.float64)
    out, attn, up = emsav2_forward(x, w2, cfg2, (6, 6), return_branches=True)
    ok &= np.array_equal(out.data, attn.data + up.data)

    mcfg = EmsaConfig(d_m=8, k=4, r=2, upsample="none", mhim=True)
    wm = init_attention_weights(mcfg, np.random.default_rng(3), dtype=np.float64)
    wm.mhim_w.data[:] = np.eye(4)
    wm.mhim_b.data[:] = 0.0
    base = emsa_forward(x, wm, EmsaConfig(d_m=8, k=4, r=2, upsample="none"),
                        (6, 6)).data
    ident = emsa_forward(x, wm, mcfg, (6, 6), mhim_identity_norm=True).data
    ok &= np.allclose(ident, base, rtol=1e-12, atol=1e-14)

    tok = Tensor(rng.standard_normal((2, 35, 3)))
    windows, meta = window_partition(tok, (5, 7), 4)
    ok &= np.array_equal(window_merge(windows, meta).data, tok.data)

    ctx = StyleContext(style="win", window_size=6)
    ok &= np.allclose(styled_block_attention(x, w2, cfg2, (6, 6), ctx).data,
                      emsav2_forward(x, w2, cfg2, (6, 6)).data,
                      rtol=1e-10, atol=1e-12)

    m = build_model(MINI_CONFIG, seed=0)
    p = "stage2.block0"
    for suffix in ("attn.out.w", "attn.out.b", "attn.up.w", "attn.up.b",
                   "mlp.fc2.w", "mlp.fc2.b"):
        m.weights[f"{p}.{suffix}"].data[:] = 0.0
    xt = Tensor(rng.standard_normal((1, 64, 64)).astype(np.float32))
    ok &= np.array_equal(
        m.block_forward(xt, 2, 0, (8, 8), StyleContext(style="global")).data,
        xt.data)

    verdict(bool(ok), "criterion 5: upsample-none/EMSA equality, branch "
                      "additivity, identity MHIM, window round-trip, "
                      "win==global at window extent, residual-zero identity")


# -- criterion 6: analysis-tool properties ----------------------------------

def test_criterion_6_analysis_tool_properties():
    rng = np.random.default_rng(42)
    x = rng.standard_normal((1000, 50))
    q, _ = np.linalg.qr(rng.standard_normal((50, 50)))
    ok = abs(linear_cka(x, x @ q) - 1.0) < 1e-9
    ok = ok and linear_cka(x, rng.standard_normal((1000, 50))) < 0.1

    noise = rng.standard_normal((256, 64, 64))
    ok = ok and abs(delta_log_amplitude(noise).delta_log_amplitude) < 0.2
    ok = ok and delta_log_amplitude(np.full((64, 64), 2.0)).delta_log_amplitude < -5.0

    mini = MINI_CONFIG
    grid = [(mini, 32, "global"), (mini, 48, "global"),
            (ModelConfig(**{**mini.__dict__, "name": "g-mhim", "mhim": True,
                            "num_classes": mini.num_classes}), 32, "global"),
            (ModelConfig(**{**mini.__dict__, "name": "g-conv",
                            "variant": "convnet_branch"}), 32, "global"),
            (mini, 96, "win")]
    for cfg, size, style in grid:
        m = build_model(cfg, seed=0)
        probe = Tensor(rng.standard_normal((1, 3, size, size)).astype(np.float32))
        with FlopRecorder() as rec:
            m.forward(probe, style=style)
        rep = window_style_flops(cfg, style, size)
        ok = ok and (rec.conv, rec.linear, rec.matmul, rec.other) == \
            (rep.conv_flops, rep.linear_flops, rep.matmul_flops, rep.other_flops)

    verdict(ok, "criterion 6: CKA invariance/independence bounds, spectrum "
                "flat-vs-constant behavior, symbolic FLOPs == instrumented "
                "execution on the miniature grid")


# -- criterion 7: explicitly out of desk-scale reach ------------------------

def test_criterion_7_not_reproducible_statement(tmp_path):
    not_reproduced = [
        "ImageNet Top-1 accuracy (needs full training runs)",
        "COCO detection AP and ADE20K mIoU (downstream fine-tuning)",
        "V100 wall-clock throughput (hardware-specific)",
        "trained-weight CKA and spectrum curves (random init only here)",
    ]
    # the tools still emit their reports on randomly initialized weights
    m = build_model(MINI_CONFIG, seed=0)
    probe = Tensor(np.random.default_rng(1).standard_normal((2, 3, 64, 64))
                   .astype(np.float32))
    from restv2kit.cka import branch_similarity_report
    rows = branch_similarity_report(m, probe)
    ok = len(rows) == 4 and len(not_reproduced) == 4
    verdict(ok, "criterion 7: trained-model metrics declared not reproducible "
                "at desk scale; inspection reports still emitted: "
                + "; ".join(not_reproduced))
