"""Matplotlib renderings that accompany the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def spectrum_figure(rows: list[dict], path: str,
                    profiles: dict[str, object] | None = None) -> None:
    """Delta log-amplitude per block and branch; optional radial curves."""
    ncols = 2 if profiles else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4))
    ax = axes[0] if ncols > 1 else axes
    branches = sorted({r["branch"] for r in rows})
    labels = [f"s{r['stage']}b{r['block']}" for r in rows if r["branch"] == branches[0]]
    xs = np.arange(len(labels))
    for branch in branches:
        ys = [r["delta_log_amplitude"] for r in rows if r["branch"] == branch]
        ax.plot(xs, ys, marker="o", label=branch)
    ax.set_xticks(xs, labels, rotation=45)
    ax.set_ylabel(r"$\Delta$ log amplitude")
    ax.set_xlabel("block")
    ax.legend()
    ax.grid(alpha=0.3)
    if profiles:
        ax2 = axes[1]
        for name, prof in profiles.items():
            ax2.plot(prof.radial_bins, prof.log_amplitude, label=name)
        ax2.set_xlabel(r"normalized frequency ($\pi$)")
        ax2.set_ylabel("log amplitude")
        ax2.legend(fontsize=7)
        ax2.grid(alpha=0.3)
    _save(fig, path)


def branch_cka_figure(rows: list[dict], path: str) -> None:
    """Per-block linear CKA between attention branch, upsample branch, and sum."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"s{r['stage']}b{r['block']}" for r in rows]
    xs = np.arange(len(labels))
    for key, label in [("cka_attn_up", "attention vs upsample"),
                       ("cka_attn_combined", "attention vs combined"),
                       ("cka_up_combined", "upsample vs combined")]:
        ys = [r[key] for r in rows]
        if any(v is not None for v in ys):
            ax.plot(xs, [np.nan if v is None else v for v in ys], marker="o", label=label)
    ax.set_xticks(xs, labels, rotation=45)
    ax.set_ylabel("linear CKA")
    ax.set_xlabel("block")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def cka_heatmap(names: list[str], matrix: np.ndarray, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    fig.colorbar(im, ax=ax, label="linear CKA")
    _save(fig, path)


def flops_figure(reports: dict[str, "object"], path: str) -> None:
    """Stacked bars of the Conv/Linear/Matmul/Others decomposition per entry."""
    cats = ["conv_flops", "linear_flops", "matmul_flops", "other_flops"]
    labels = ["Conv", "Linear", "Matmul", "Others"]
    names = list(reports)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names), 4))
    bottom = np.zeros(len(names))
    for cat, label in zip(cats, labels):
        vals = np.array([getattr(reports[n], cat) for n in names]) / 1e9
        ax.bar(names, vals, bottom=bottom, label=label)
        bottom += vals
    ax.set_ylabel("GFLOPs (MACs)")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)
