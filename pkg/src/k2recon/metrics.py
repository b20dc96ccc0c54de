"""Image-quality metrics on magnitude images: PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; peak is the reference's magnitude max.

    Identical inputs return +inf.
    """
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.shape != ref.shape:
        raise ContractViolation(f"psnr: shape mismatch {x.shape} vs {ref.shape}")
    mx = np.abs(x)
    mref = np.abs(ref)
    mse = float(np.mean((mx - mref) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(mref.max())
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r**2) / (2 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    size = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(x: np.ndarray, ref: np.ndarray, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA, k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean local SSIM over magnitude images (Gaussian window, Wang constants).

    Both magnitudes are normalized by the joint peak so the measure is
    exactly symmetric in its arguments.
    """
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.shape != ref.shape:
        raise ContractViolation(f"ssim: shape mismatch {x.shape} vs {ref.shape}")
    if min(x.shape[-2:]) < window:
        raise ConfigurationError(
            f"ssim: spatial dims {x.shape[-2:]} smaller than the {window}-pixel window"
        )
    a = np.abs(x).astype(np.float64)
    b = np.abs(ref).astype(np.float64)
    peak = max(a.max(), b.max())
    if peak > 0:
        a = a / peak
        b = b / peak
    c1 = k1**2
    c2 = k2**2
    kern = _gaussian_kernel(window, sigma)
    mu_a = _windowed(a, kern)
    mu_b = _windowed(b, kern)
    var_a = _windowed(a * a, kern) - mu_a**2
    var_b = _windowed(b * b, kern) - mu_b**2
    cov = _windowed(a * b, kern) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    method: str
    acceleration: float
    psnr_db: float
    ssim: float
    per_sample: list = field(default_factory=list)
    seed_provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (-1.0 <= self.ssim <= 1.0):
            raise ContractViolation(f"ssim {self.ssim} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "acceleration": self.acceleration,
            "psnr_db": None if math.isinf(self.psnr_db) else self.psnr_db,
            "psnr_exact_match": math.isinf(self.psnr_db),
            "ssim": self.ssim,
            "per_sample": self.per_sample,
            "seed_provenance": self.seed_provenance,
        }

    @staticmethod
    def from_samples(method: str, acceleration: float, per_sample: list,
                     seed_provenance: dict | None = None) -> "MetricReport":
        finite = [p["psnr_db"] for p in per_sample if not math.isinf(p["psnr_db"])]
        mean_psnr = float(np.mean(finite)) if finite else math.inf
        mean_ssim = float(np.mean([p["ssim"] for p in per_sample]))
        return MetricReport(method, acceleration, mean_psnr, mean_ssim,
                            per_sample, seed_provenance or {})
