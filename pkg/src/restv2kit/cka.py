"""Linear centered kernel alignment and the per-block branch similarity report."""

from __future__ import annotations

import warnings

import numpy as np

from .model import Model
from .tensor import ShapeError, Tensor


def linear_cka(x, y) -> float:
    """Linear CKA between (n, p1) and (n, p2) feature matrices.

    Feature-based formulation ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on
    column-centered features; equals the Gram-based form but avoids the n x n
    matrices.  Symmetric, bounded in [0, 1], invariant to orthogonal
    transforms and isotropic scaling.  Zero-variance input yields 0.0 with a
    warning.
    """
    xa = (x.data if isinstance(x, Tensor) else np.asarray(x)).astype(np.float64)
    ya = (y.data if isinstance(y, Tensor) else np.asarray(y)).astype(np.float64)
    if xa.ndim != 2 or ya.ndim != 2 or xa.shape[0] != ya.shape[0]:
        raise ShapeError(f"CKA expects (n, p) matrices with equal n, got {xa.shape} and {ya.shape}")
    if xa.shape[0] < 2:
        raise ShapeError("CKA needs at least 2 samples")
    xa = xa - xa.mean(axis=0)
    ya = ya - ya.mean(axis=0)
    cross = np.linalg.norm(ya.T @ xa) ** 2
    nx = np.linalg.norm(xa.T @ xa)
    ny = np.linalg.norm(ya.T @ ya)
    if nx == 0.0 or ny == 0.0:
        warnings.warn("zero-variance input to linear_cka; similarity defined as 0")
        return 0.0
    return float(cross / (nx * ny))


def _flatten_tokens(a: np.ndarray) -> np.ndarray:
    # (B, n, d) -> (B*n, d) sample-by-feature matrix
    return a.reshape(-1, a.shape[-1])


def branch_similarity_report(model: Model, probe: Tensor) -> list[dict]:
    """Per-block CKA between the attention branch, the upsample branch, and
    their sum, over flattened token features of a probe batch."""
    capture: list = []
    model.forward(probe, capture=capture)
    rows = []
    for rec in capture:
        combined = _flatten_tokens(rec.combined)
        attn = _flatten_tokens(rec.attn) if rec.attn is not None else None
        up = _flatten_tokens(rec.up) if rec.up is not None else None
        row = {
            "stage": rec.stage + 1,
            "block": rec.block,
            "cka_attn_up": linear_cka(attn, up) if attn is not None and up is not None else None,
            "cka_attn_combined": linear_cka(attn, combined) if attn is not None else None,
            "cka_up_combined": linear_cka(up, combined) if up is not None else None,
        }
        rows.append(row)
    return rows


def block_output_cka_matrix(model: Model, probe: Tensor) -> tuple[list[str], np.ndarray]:
    """Pairwise linear CKA between every block's output representation.

    Token counts differ across stages, so each block's output is pooled over
    its spatial grid to a (B, d) matrix before comparison.
    """
    capture: list = []
    model.forward(probe, capture=capture)
    names, feats = [], []
    for rec in capture:
        names.append(f"s{rec.stage + 1}b{rec.block}")
        feats.append(rec.block_output.mean(axis=1))     # (B, d)
    n = len(feats)
    mat = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = linear_cka(feats[i], feats[j])
    return names, mat
