"""Attention block tests: dense loop oracle, structural equivalences, windows."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restv2kit import tensor as T
from restv2kit.attention import (EmsaConfig, StyleContext, emsa_forward,
                                 emsav2_forward, init_attention_weights,
                                 mhim_apply, reduced_extent,
                                 styled_block_attention, upsample_branch,
                                 window_merge, window_partition)
from restv2kit.tensor import ConfigError, ShapeError, Tensor

RNG = np.random.default_rng(11)


def rt(*shape):
    return Tensor(RNG.standard_normal(shape))


def make_weights(cfg, seed=0, **kw):
    return init_attention_weights(cfg, np.random.default_rng(seed),
                                  dtype=np.float64, **kw)


# ---------------------------------------------------------------------------
# dense loop oracle for the full attention term
# ---------------------------------------------------------------------------

def oracle_emsa(x, w, cfg, spatial):
    """Loop-level EMSA: dw-conv downsample, LN, per-head softmax attention."""
    b, n, d = x.shape
    h, wd = spatial
    k, dk, r = cfg.k, cfg.d_k, cfg.r

    q = x @ w.wq.data + w.bq.data
    if r > 1:
        img = x.reshape(b, h, wd, d).transpose(0, 3, 1, 2)
        pad = r // 2
        hp = (h + 2 * pad - (r + 1)) // r + 1
        wp = (wd + 2 * pad - (r + 1)) // r + 1
        xp = np.zeros((b, d, h + 2 * pad, wd + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + wd] = img
        down = np.zeros((b, d, hp, wp))
        for nb in range(b):
            for c in range(d):
                for i in range(hp):
                    for j in range(wp):
                        acc = float(w.down_b.data[c])
                        for p in range(r + 1):
                            for qq in range(r + 1):
                                acc += xp[nb, c, i * r + p, j * r + qq] \
                                    * w.down_w.data[c, 0, p, qq]
                        down[nb, c, i, j] = acc
        xr = down.transpose(0, 2, 3, 1).reshape(b, hp * wp, d)
        mu = xr.mean(-1, keepdims=True)
        var = xr.var(-1, keepdims=True)
        xr = (xr - mu) / np.sqrt(var + 1e-6) * w.down_gamma.data + w.down_beta.data
    else:
        xr = x
    keys = xr @ w.wk.data + w.bk.data
    vals = xr @ w.wv.data + w.bv.data

    m = xr.shape[1]
    ctx = np.zeros((b, n, d))
    for nb in range(b):
        for head in range(k):
            qh = q[nb, :, head * dk:(head + 1) * dk]
            kh = keys[nb, :, head * dk:(head + 1) * dk]
            vh = vals[nb, :, head * dk:(head + 1) * dk]
            logits = qh @ kh.T / np.sqrt(dk)
            e = np.exp(logits - logits.max(-1, keepdims=True))
            probs = e / e.sum(-1, keepdims=True)
            ctx[nb, :, head * dk:(head + 1) * dk] = probs @ vh
    return ctx @ w.out_w.data + w.out_b.data


def test_emsa_against_dense_loop_oracle():
    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample="none")
    w = make_weights(cfg)
    x = rt(2, 16, 8)
    got = emsa_forward(x, w, cfg, (4, 4)).data
    np.testing.assert_allclose(got, oracle_emsa(x.data, w, cfg, (4, 4)),
                               rtol=1e-10, atol=1e-12)


def test_emsa_r1_against_dense_loop_oracle():
    cfg = EmsaConfig(d_m=6, k=3, r=1, upsample="none")
    w = make_weights(cfg, seed=3)
    x = rt(1, 9, 6)
    got = emsa_forward(x, w, cfg, (3, 3)).data
    np.testing.assert_allclose(got, oracle_emsa(x.data, w, cfg, (3, 3)),
                               rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# structural equivalences
# ---------------------------------------------------------------------------

def test_emsav2_upsample_none_equals_emsa_bitwise():
    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample="none")
    w = make_weights(cfg, seed=1)
    x = rt(2, 36, 8)
    a = emsa_forward(x, w, cfg, (6, 6)).data
    b = emsav2_forward(x, w, cfg, (6, 6)).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("upsample", ["nearest", "bilinear", "pixel_shuffle"])
def test_branch_additivity(upsample):
    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample=upsample)
    w = make_weights(cfg, seed=2)
    x = rt(1, 25, 8)
    out, attn, up = emsav2_forward(x, w, cfg, (5, 5), return_branches=True)
    np.testing.assert_array_equal(out.data, attn.data + up.data)
    np.testing.assert_array_equal(attn.data,
                                  emsa_forward(x, w, cfg, (5, 5)).data)


def test_identity_mhim_is_noop():
    base = EmsaConfig(d_m=8, k=4, r=2, upsample="pixel_shuffle")
    with_mhim = EmsaConfig(d_m=8, k=4, r=2, upsample="pixel_shuffle", mhim=True)
    w = make_weights(with_mhim, seed=4)
    w.mhim_w.data[:] = np.eye(4)
    w.mhim_b.data[:] = 0.0
    x = rt(1, 16, 8)
    plain = emsav2_forward(x, w, base, (4, 4)).data
    mixed = emsav2_forward(x, w, with_mhim, (4, 4), mhim_identity_norm=True).data
    np.testing.assert_allclose(mixed, plain, rtol=1e-12, atol=1e-14)


def test_mhim_apply_identity_conv_passthrough():
    attn = rt(2, 3, 5, 4)
    out = mhim_apply(attn, Tensor(np.eye(3)), None, identity_norm=True)
    np.testing.assert_allclose(out.data, attn.data, rtol=1e-12)


def test_mhim_head_mixing_matches_einsum():
    attn = rt(1, 3, 4, 4)
    cw, cb = rt(3, 3), rt(3)
    got = mhim_apply(attn, cw, cb, identity_norm=True).data
    want = np.einsum("bknm,kj->bjnm", attn.data, cw.data) \
        + cb.data[None, :, None, None]
    np.testing.assert_allclose(got, want, rtol=1e-11)


def test_mhim_rejects_wrong_head_count():
    with pytest.raises(ShapeError):
        mhim_apply(rt(1, 4, 3, 3), Tensor(np.eye(3)), None, identity_norm=True)


# ---------------------------------------------------------------------------
# downsample / upsample geometry
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("extent,r,want", [
    (56, 8, 7), (28, 4, 7), (14, 2, 7), (7, 1, 7),
    (8, 8, 1), (9, 8, 2), (7, 2, 4), (5, 4, 2),
])
def test_reduced_extent(extent, r, want):
    assert reduced_extent(extent, r) == want


def test_reduced_extent_matches_actual_conv():
    for extent, r in [(13, 2), (14, 2), (10, 4), (17, 8)]:
        cfg = EmsaConfig(d_m=4, k=2, r=r, upsample="none")
        w = make_weights(cfg, seed=r)
        x = rt(1, extent * extent, 4)
        img = T.tokens_to_image(x, extent, extent)
        down = T.conv2d(img, w.down_w, w.down_b, stride=r, padding=r // 2, groups=4)
        assert down.shape[2] == reduced_extent(extent, r)


def test_upsample_none_is_zero():
    cfg = EmsaConfig(d_m=4, k=2, r=2, upsample="none")
    out = upsample_branch(rt(1, 4, 4), None, cfg, (2, 2), (4, 4))
    assert out.shape == (1, 16, 4)
    assert not out.data.any()


def test_pixel_shuffle_upsample_crops_non_divisible():
    cfg = EmsaConfig(d_m=4, k=2, r=2, upsample="pixel_shuffle")
    w = make_weights(cfg, seed=5)
    # 7x7 input downsamples to 4x4; the r=2 shuffle gives 8x8, cropped to 7x7
    out = upsample_branch(rt(1, 16, 4), w, cfg, (4, 4), (7, 7))
    assert out.shape == (1, 49, 4)


def test_upsample_r1_is_plain_dwconv():
    cfg = EmsaConfig(d_m=4, k=2, r=1, upsample="pixel_shuffle")
    w = make_weights(cfg, seed=6)
    v = rt(1, 9, 4)
    got = upsample_branch(v, w, cfg, (3, 3), (3, 3)).data
    img = T.tokens_to_image(v, 3, 3)
    want = T.image_to_tokens(
        T.conv2d(img, w.up_w, w.up_b, stride=1, padding=1, groups=4)).data
    np.testing.assert_array_equal(got, want)


# ---------------------------------------------------------------------------
# window machinery
# ---------------------------------------------------------------------------

@settings(deadline=None, max_examples=40)
@given(st.integers(1, 3), st.integers(1, 10), st.integers(1, 10),
       st.integers(1, 4), st.integers(1, 5))
def test_window_partition_merge_roundtrip(b, h, w, d, ws):
    x = Tensor(np.random.default_rng(b * 1000 + h * 100 + w * 10 + ws)
               .standard_normal((b, h * w, d)))
    windows, meta = window_partition(x, (h, w), ws)
    nh, nw = -(-h // ws), -(-w // ws)
    assert windows.shape == (b * nh * nw, ws * ws, d)
    back = window_merge(windows, meta)
    np.testing.assert_array_equal(back.data, x.data)


def test_window_enumeration_row_major():
    # 4x4 grid, ws=2: window 1 must hold the top-right 2x2 patch
    x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 16, 1))
    windows, _ = window_partition(x, (4, 4), 2)
    np.testing.assert_array_equal(windows.data[1, :, 0], [2, 3, 6, 7])


def test_window_partition_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        window_partition(rt(1, 15, 2), (4, 4), 2)
    with pytest.raises(ConfigError):
        window_partition(rt(1, 16, 2), (4, 4), 0)


def test_win_equals_global_when_window_covers_stage():
    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample="pixel_shuffle")
    w = make_weights(cfg, seed=7)
    x = rt(1, 36, 8)
    ctx = StyleContext(style="win", window_size=6)
    windowed = styled_block_attention(x, w, cfg, (6, 6), ctx).data
    glob = emsav2_forward(x, w, cfg, (6, 6)).data
    np.testing.assert_allclose(windowed, glob, rtol=1e-10, atol=1e-12)


def test_hwin_last_block_is_global():
    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample="pixel_shuffle")
    w = make_weights(cfg, seed=8)
    x = rt(1, 64, 8)
    last = StyleContext(style="hwin", window_size=4, is_last_block=True)
    np.testing.assert_array_equal(
        styled_block_attention(x, w, cfg, (8, 8), last).data,
        emsav2_forward(x, w, cfg, (8, 8)).data)
    inner = StyleContext(style="hwin", window_size=4, is_last_block=False)
    win = StyleContext(style="win", window_size=4)
    np.testing.assert_array_equal(
        styled_block_attention(x, w, cfg, (8, 8), inner).data,
        styled_block_attention(x, w, cfg, (8, 8), win).data)


def test_config_validation():
    with pytest.raises(ConfigError):
        EmsaConfig(d_m=8, k=3)
    with pytest.raises(ConfigError):
        EmsaConfig(d_m=8, k=2, r=3)
    with pytest.raises(ConfigError):
        EmsaConfig(d_m=8, k=2, upsample="cubic")


def test_rpe_tables_change_logits_only_through_keys():
    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample="none")
    w = make_weights(cfg, seed=9, use_rpe=True, reduced=(2, 2))
    x = rt(1, 16, 8)
    with_rpe = emsa_forward(x, w, cfg, (4, 4)).data
    w.rpe_h.data[:] = 0.0
    w.rpe_w.data[:] = 0.0
    zeroed = emsa_forward(x, w, cfg, (4, 4)).data
    plain_w = make_weights(cfg, seed=9, use_rpe=True, reduced=(2, 2))
    plain_w.rpe_h = plain_w.rpe_w = None
    plain = emsa_forward(x, plain_w, cfg, (4, 4)).data
    assert not np.allclose(with_rpe, plain)
    np.testing.assert_allclose(zeroed, plain, rtol=1e-12)
