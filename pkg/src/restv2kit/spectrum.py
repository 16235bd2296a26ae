"""Radially averaged Fourier log-amplitude profiles of feature maps.

The headline scalar is the difference between the log amplitude at the
spectrum boundary (normalized frequency 1.0 pi) and at the center (0.0 pi):
a summary of how much medium/high-frequency content a feature map carries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-12
DEFAULT_BINS = 32


@dataclass
class SpectrumProfile:
    """Radial log-amplitude curve; bins are normalized frequency in units of pi."""

    radial_bins: np.ndarray      # populated bin centers, increasing, 0..~1
    log_amplitude: np.ndarray    # same length
    delta_log_amplitude: float   # last bin minus first bin

    def rows(self) -> list[dict]:
        return [{"frequency": float(f), "log_amplitude": float(a)}
                for f, a in zip(self.radial_bins, self.log_amplitude)]


def delta_log_amplitude(feature, bins: int = DEFAULT_BINS) -> SpectrumProfile:
    """Profile of a (C, H, W) feature map (or (H, W), treated as one channel).

    Per-channel 2-D DFT amplitudes are averaged over channels, shifted so the
    DC term sits at the center, binned by normalized radius, and logged with
    a floor of 1e-12.  Empty radial bins are dropped, so the returned arrays
    always start at the center bin and end at the boundary bin.
    """
    arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (C, H, W) feature map, got shape {arr.shape}")
    c, h, w = arr.shape
    if h < 4 or w < 4:
        raise ShapeError(f"degenerate spatial extents ({h}, {w}); need >= 4")

    spec = np.fft.fftshift(np.fft.fft2(arr.astype(np.float64)), axes=(-2, -1))
    amp = np.abs(spec).mean(axis=0)

    fy = np.fft.fftshift(np.fft.fftfreq(h)) * 2.0   # units of pi: Nyquist = 1.0
    fx = np.fft.fftshift(np.fft.fftfreq(w)) * 2.0
    rho = np.hypot(fy[:, None], fx[None, :])
    idx = np.minimum((bins * rho).astype(np.int64), bins - 1)

    sums = np.bincount(idx.ravel(), weights=amp.ravel(), minlength=bins)
    counts = np.bincount(idx.ravel(), minlength=bins)
    populated = counts > 0
    mean_amp = sums[populated] / counts[populated]
    log_amp = np.log(np.maximum(mean_amp, LOG_FLOOR))
    centers = (np.nonzero(populated)[0] + 0.5) / bins
    return SpectrumProfile(radial_bins=centers, log_amplitude=log_amp,
                           delta_log_amplitude=float(log_amp[-1] - log_amp[0]))
