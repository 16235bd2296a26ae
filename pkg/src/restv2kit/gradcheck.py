"""Analytic-vs-finite-difference gradient verification.

Two layers of checking: every differentiable op in isolation, and a
miniature full model (C=16, one block per stage, 2 classes, 32x32 input).
All checks run in f64; finite differences are central, with step scaled to
the parameter magnitude.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import EmsaConfig, emsav2_forward, init_attention_weights
from .model import ModelConfig, build_model
from .tensor import Tape, Tensor, finite_diff_grad, tsum

REL_TOL = 1e-4

MINI_CONFIG = ModelConfig(name="mini", base_channels=16, blocks=(1, 1, 1, 1),
                          num_classes=2, input_size=32)


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = 1e-3) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _check(fn, *xs: Tensor) -> float:
    """Max relative error between taped grads and central differences for fn(*xs).

    Differences are taken by perturbing each input element in place, so the
    check also covers parameters the closure captures by reference.
    """
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        loss = fn(*xs)
        tape.backward(loss)
    worst = 0.0
    for x in xs:
        flat = x.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = fn(*xs).item()
            flat[i] = orig - h
            fm = fn(*xs).item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
        grad = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(grad, fd.reshape(x.shape)))
    return worst


def op_gradcheck(seed: int = 0) -> list[dict]:
    """Per-op gradient checks on small random f64 tensors."""
    rng = np.random.default_rng(seed)

    def rt(*shape):
        return Tensor(rng.standard_normal(shape))

    # fixed mixing tensors break symmetry so no gradient is trivially zero
    def mixed_sum(y: Tensor) -> Tensor:
        c = Tensor(np.linspace(0.5, 1.5, y.numel()).reshape(y.shape))
        return tsum(T.mul(y, c))

    cases: list[tuple[str, float]] = []

    cases.append(("matmul", _check(lambda a, b: mixed_sum(T.matmul(a, b)),
                                   rt(3, 4), rt(4, 2))))
    cases.append(("matmul_batched", _check(lambda a, b: mixed_sum(T.matmul(a, b)),
                                           rt(2, 3, 4), rt(2, 4, 2))))
    cases.append(("linear", _check(lambda x, w, b: mixed_sum(T.linear(x, w, b)),
                                   rt(2, 5), rt(5, 3), rt(3))))
    cases.append(("softmax", _check(lambda x: mixed_sum(T.softmax(x, axis=-1)),
                                    rt(3, 6))))
    cases.append(("layer_norm", _check(lambda x, g, b: mixed_sum(T.layer_norm(x, g, b)),
                                       rt(2, 3, 5), rt(5), rt(5))))
    cases.append(("instance_norm_map",
                  _check(lambda x, g, b: mixed_sum(T.instance_norm_map(x, g, b)),
                         rt(2, 3, 4, 5), rt(3), rt(3))))
    cases.append(("gelu", _check(lambda x: mixed_sum(T.gelu(x)), rt(4, 4))))
    cases.append(("sigmoid", _check(lambda x: mixed_sum(T.sigmoid(x)), rt(4, 4))))
    cases.append(("conv2d", _check(lambda x, w, b: mixed_sum(T.conv2d(x, w, b, stride=1, padding=1)),
                                   rt(2, 3, 5, 5), rt(4, 3, 3, 3), rt(4))))
    cases.append(("conv2d_depthwise_s2",
                  _check(lambda x, w, b: mixed_sum(T.conv2d(x, w, b, stride=2, padding=1, groups=4)),
                         rt(1, 4, 6, 6), rt(4, 1, 3, 3), rt(4))))
    cases.append(("pixel_shuffle", _check(lambda x: mixed_sum(T.pixel_shuffle(x, 2)),
                                          rt(1, 8, 3, 3))))
    cases.append(("interp_nearest",
                  _check(lambda x: mixed_sum(T.interpolate2d(x, (6, 6), "nearest")),
                         rt(1, 2, 3, 3))))
    cases.append(("interp_bilinear",
                  _check(lambda x: mixed_sum(T.interpolate2d(x, (7, 5), "bilinear")),
                         rt(1, 2, 3, 3))))
    cases.append(("avg_pool_global", _check(lambda x: mixed_sum(T.avg_pool_global(x)),
                                            rt(2, 3, 4, 4))))
    cases.append(("mul_add", _check(lambda a, b: tsum(T.add(T.mul(a, b), a)),
                                    rt(3, 3), rt(3, 3))))

    # a full tiny EMSAv2 block, downsample + mhim + pixel-shuffle branch
    cfg = EmsaConfig(d_m=8, k=2, r=2, upsample="pixel_shuffle", mhim=True)
    w = init_attention_weights(cfg, np.random.default_rng(seed + 1), dtype=np.float64)
    ws = [w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.out_w, w.out_b, w.down_w,
          w.down_gamma, w.up_w, w.mhim_w, w.mhim_gamma]
    x = rt(1, 16, 8)

    def emsa_loss(xx, *params):
        return mixed_sum(emsav2_forward(xx, w, cfg, (4, 4)))

    cases.append(("emsav2_block", _check(emsa_loss, x, *ws)))
    return [{"op": name, "max_rel_err": err, "passed": err < REL_TOL}
            for name, err in cases]


def model_gradcheck(cfg: ModelConfig = MINI_CONFIG, input_size: int | None = None,
                    samples_per_param: int = 3, seed: int = 0) -> list[dict]:
    """Sampled per-parameter checks on a miniature full model in f64."""
    size = input_size or cfg.input_size
    model = build_model(cfg, seed=seed, dtype=np.float64).requires_grad_()
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((1, 3, size, size)))
    mix = np.linspace(0.5, 1.5, cfg.num_classes)

    def loss_value() -> float:
        logits = model.forward(x)
        return float((logits.data * mix).sum())

    model.zero_grad()
    with Tape() as tape:
        logits = model.forward(x)
        loss = tsum(T.mul(logits, Tensor(np.broadcast_to(mix, logits.shape).copy())))
        tape.backward(loss)

    results = []
    for name, t in model.weights.items():
        flat = t.data.reshape(-1)
        gflat = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        idxs = rng.choice(flat.size, size=min(samples_per_param, flat.size),
                          replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(np.array(gflat[i]), np.array(fd)))
        results.append({"param": name, "max_rel_err": worst, "passed": worst < REL_TOL})
    return results


def run_suite(seed: int = 0) -> dict:
    ops = op_gradcheck(seed)
    params = model_gradcheck(seed=seed)
    worst = max(r["max_rel_err"] for r in ops + params)
    return {
        "tolerance": REL_TOL,
        "max_rel_err": worst,
        "passed": worst < REL_TOL,
        "op_checks": ops,
        "model_param_checks": params,
    }
