"""CLI surface tests: output formats, determinism, exit codes."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from restv2kit.cli import main
from restv2kit.reports import read_raw_tensor, write_raw_tensor

runner = CliRunner()


def invoke(*args):
    return runner.invoke(main, list(args), catch_exceptions=False)


def test_describe_json():
    res = invoke("describe", "--model", "restv2-t")
    assert res.exit_code == 0
    d = json.loads(res.output)
    assert [s["heads"] for s in d["stages"]] == [1, 2, 4, 8]


def test_params_reports_total_and_groups():
    res = invoke("params", "--model", "restv2-t", "--target", "30.43e6")
    assert res.exit_code == 0
    d = json.loads(res.output)
    assert d["total"] == 30423112
    assert abs(d["gap_pct"]) < 2.0
    assert any(g["group"] == "stem" for g in d["groups"])


def test_flops_json_and_figure(tmp_path):
    fig = tmp_path / "f.png"
    out = tmp_path / "f.json"
    res = invoke("flops", "--model", "restv2-lite", "--size", "64",
                 "--figure", str(fig), "--out", str(out))
    assert res.exit_code == 0
    d = json.loads(out.read_text())
    assert d["total_flops"] == d["conv_flops"] + d["linear_flops"] \
        + d["matmul_flops"] + d["other_flops"]
    assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_emission_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        res = invoke("winflops", "--model", "restv2-lite", "--size", "128x96",
                     "--out", str(path), "--format", "csv")
        assert res.exit_code == 0
    assert a.read_bytes() == b.read_bytes()


def test_winflops_styles_and_delta():
    res = invoke("winflops", "--model", "restv2-lite", "--size", "256x128")
    d = json.loads(res.output)
    assert {r["style"] for r in d["styles"]} == {"global", "win", "hwin", "cwin"}
    assert d["cwin_dwconv_delta"] > 0


def test_forward_with_raw_input(tmp_path):
    blob = tmp_path / "x.rten"
    logits_path = tmp_path / "y.rten"
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    write_raw_tensor(x, str(blob))
    res = invoke("forward", "--model", "restv2-lite", "--input", str(blob),
                 "--logits-out", str(logits_path))
    assert res.exit_code == 0
    d = json.loads(res.output)
    assert d["logits_shape"] == [1, 1000] and d["all_finite"]
    logits = read_raw_tensor(str(logits_path))
    assert float(logits.data.max()) == pytest.approx(d["logits_max"], rel=1e-6)


def test_forward_deterministic_across_runs():
    outs = [json.loads(invoke("forward", "--model", "restv2-lite", "--size",
                              "32", "--seed", "3").output) for _ in range(2)]
    assert outs[0] == outs[1]


def test_save_init_load_check_roundtrip(tmp_path):
    path = tmp_path / "w.rsv2"
    res = invoke("save-init", "--model", "restv2-lite", "--out", str(path))
    assert res.exit_code == 0 and "10654824" in res.output
    res = invoke("load-check", "--model", "restv2-lite", "--weights", str(path))
    assert res.exit_code == 0 and "OK" in res.output
    # checking against the wrong architecture must fail cleanly
    res = runner.invoke(main, ["load-check", "--model", "restv2-t",
                               "--weights", str(path)])
    assert res.exit_code == 1


def test_corrupted_weight_file_exit_code(tmp_path):
    path = tmp_path / "w.rsv2"
    invoke("save-init", "--model", "restv2-lite", "--out", str(path))
    blob = bytearray(path.read_bytes())
    blob[50] ^= 0xFF
    path.write_bytes(bytes(blob))
    res = runner.invoke(main, ["load-check", "--model", "restv2-lite",
                               "--weights", str(path)])
    assert res.exit_code == 1
    assert "error:" in res.output or "error:" in (res.stderr or "")


def test_domain_error_exit_code_1():
    res = runner.invoke(main, ["describe", "--model", "restv3-xl"])
    assert res.exit_code == 1


def test_usage_error_exit_code_2():
    assert runner.invoke(main, ["flops"]).exit_code == 2
    assert runner.invoke(main, ["describe", "--model", "restv2-t",
                                "--config", "x"]).exit_code == 2
    assert runner.invoke(main, ["nonsense"]).exit_code == 2


def test_config_file_input(tmp_path):
    cfgfile = tmp_path / "m.cfg"
    cfgfile.write_text("name = custom\nbase_channels = 16\nblocks = 1,1,1,1\n"
                       "num_classes = 4\ninput_size = 32\n")
    res = invoke("params", "--config", str(cfgfile))
    assert res.exit_code == 0
    assert json.loads(res.output)["model"] == "custom"


def test_gradcheck_ops_only_passes():
    res = invoke("gradcheck", "--ops-only")
    assert res.exit_code == 0
    d = json.loads(res.output)
    assert d["passed"] and d["max_rel_err"] < 1e-4


def test_spectrum_and_cka_reports(tmp_path):
    res = invoke("spectrum", "--model", "restv2-lite", "--size", "128",
                 "--figure", str(tmp_path / "s.png"))
    assert res.exit_code == 0
    rows = json.loads(res.output)
    assert {r["branch"] for r in rows} == {"attention", "upsample", "combined"}
    res = invoke("branches", "--model", "restv2-lite", "--size", "128")
    assert res.exit_code == 0
    assert all(0.0 <= r["cka_up_combined"] <= 1.0 + 1e-9
               for r in json.loads(res.output))
