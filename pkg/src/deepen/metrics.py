"""PSNR and SSIM on magnitude images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

PSNR_CAP = 99.0


def psnr(ref: np.ndarray, rec: np.ndarray) -> float:
    """``20 log10(max|ref| / RMSE)`` of magnitudes, capped at 99 dB."""
    a, b = np.abs(np.asarray(ref)), np.abs(np.asarray(rec))
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    peak = a.max()
    if peak == 0:
        raise ValueError("reference image is identically zero")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 20.0 * np.log10(peak / np.sqrt(mse))))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(ref: np.ndarray, rec: np.ndarray, data_range: float | None = None) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03), valid windows only.

    ``data_range`` defaults to the reference peak magnitude.
    """
    a, b = np.abs(np.asarray(ref, dtype=np.complex128)), np.abs(np.asarray(rec, dtype=np.complex128))
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < 11:
        raise DimensionError("images must be at least 11x11 for SSIM")
    if data_range is None:
        data_range = a.max()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gauss_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    label: str = ""
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, ref: np.ndarray, rec: np.ndarray) -> None:
        self.psnr.append(psnr(ref, rec))
        self.ssim.append(ssim(ref, rec))

    def summary(self) -> dict:
        p, s = np.asarray(self.psnr), np.asarray(self.ssim)
        return {
            "label": self.label,
            "n": int(p.size),
            "psnr_mean": float(p.mean()), "psnr_std": float(p.std()), "psnr_median": float(np.median(p)),
            "ssim_mean": float(s.mean()), "ssim_std": float(s.std()),
        }
