"""Undersampling masks, the input/supervision split, and calibration masks.

Masks are uint8 [H, W] grids over centered k-space.  Phase-encode lines run
along the width axis: a "line" is one full column.  All generators are pure
functions of their seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import complexops as cx
from .errors import ConfigurationError, ContractViolation
from .linops import CoilSensitivities, from_coil_kspace, to_coil_kspace

MASK_KINDS = ("random-1d", "uniform-1d")

# Spec'd defaults are stated for a 320-wide matrix; scale with width.
_ACS_REF_WIDTH = 320
_ACS_REF_LOW_R = 24
_ACS_REF_HIGH_R = 16


def default_acs_lines(width: int, acceleration: float) -> int:
    ref = _ACS_REF_LOW_R if acceleration < 8 else _ACS_REF_HIGH_R
    return max(2, int(round(width * ref / _ACS_REF_WIDTH)))


def acs_column_mask(h: int, w: int, acs_lines: int) -> np.ndarray:
    """uint8 grid marking the central fully sampled phase-encode block."""
    grid = np.zeros((h, w), dtype=np.uint8)
    start = (w - acs_lines) // 2
    grid[:, start : start + acs_lines] = 1
    return grid


@dataclass
class SamplingMask:
    grid: np.ndarray
    acceleration: float
    acs_lines: int
    seed: int

    @property
    def shape(self):
        return self.grid.shape

    def sampled_fraction(self) -> float:
        return float(self.grid.mean())


@dataclass
class SplitMasks:
    """Disjoint split of the acquired set: theta feeds the network and the
    DC units, lambda_ supervises the loss."""

    theta: np.ndarray
    lambda_: np.ndarray
    rho: float
    seed: int


@dataclass
class CalibrationSchedule:
    """Per-iteration Bernoulli calibration: measured locations are always
    kept, generated k-space survives with probability keep_prob, and only
    the first enabled_steps unrolled iterations are calibrated."""

    keep_prob: float = 0.5
    enabled_steps: int = 0
    resample_each_batch: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.keep_prob <= 1.0):
            raise ConfigurationError(
                f"keep_prob must be in [0,1], got {self.keep_prob}"
            )
        if self.enabled_steps < 0:
            raise ConfigurationError(
                f"enabled_steps must be >= 0, got {self.enabled_steps}"
            )


def make_mask(h: int, w: int, acceleration: float, acs_lines: int | None = None,
              kind: str = "random-1d", seed: int = 0) -> SamplingMask:
    """1-D Cartesian column mask: ACS block plus lines up to the 1/R budget."""
    if acceleration < 1:
        raise ConfigurationError(f"acceleration must be >= 1, got {acceleration}")
    if kind not in MASK_KINDS:
        raise ConfigurationError(f"unknown mask kind {kind!r}, expected one of {MASK_KINDS}")
    if acceleration == 1:
        return SamplingMask(np.ones((h, w), dtype=np.uint8), 1.0,
                            acs_lines if acs_lines is not None else w, seed)
    if acs_lines is None:
        acs_lines = default_acs_lines(w, acceleration)
    budget = int(round(w / acceleration))
    if acs_lines > budget:
        raise ConfigurationError(
            f"infeasible mask: {acs_lines} ACS lines exceed the line budget "
            f"{budget} (= round({w}/{acceleration}))"
        )
    grid = acs_column_mask(h, w, acs_lines)
    candidates = np.flatnonzero(grid[0] == 0)
    n_extra = budget - acs_lines
    if n_extra > 0:
        if kind == "random-1d":
            rng = np.random.default_rng(np.random.SeedSequence([seed]))
            chosen = rng.choice(candidates, size=n_extra, replace=False)
        else:
            step = len(candidates) / n_extra
            chosen = candidates[(np.arange(n_extra) * step).astype(int)]
        grid[:, chosen] = 1
    return SamplingMask(grid, float(acceleration), int(acs_lines), int(seed))


def split_mask(omega: SamplingMask, rho: float, seed: int) -> SplitMasks:
    """Assign each non-ACS sampled location to the loss set with prob rho."""
    if not (0.0 < rho < 1.0):
        raise ConfigurationError(f"rho must be in (0,1), got {rho}")
    h, w = omega.grid.shape
    acs = acs_column_mask(h, w, omega.acs_lines)
    sampled = omega.grid.astype(bool)
    eligible = sampled & ~acs.astype(bool)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    draw = rng.random((h, w)) < rho
    lam = (eligible & draw).astype(np.uint8)
    theta = (sampled & ~lam.astype(bool)).astype(np.uint8)
    return SplitMasks(theta, lam, float(rho), int(seed))


def calib_mask(theta: np.ndarray, schedule: CalibrationSchedule, step: int,
               batch_rng: np.random.Generator | None = None,
               training: bool = True) -> np.ndarray:
    """Calibration grid for one unrolled step.

    Outside the enabled window (or at evaluation) this is all ones, a full
    pass-through.  Inside it, measured theta locations are kept and every
    other location survives an independent Bernoulli(keep_prob) draw.
    """
    if step < 0:
        raise ContractViolation(f"calib_mask: step must be >= 0, got {step}")
    theta = np.asarray(theta)
    if not training or step >= schedule.enabled_steps:
        return np.ones(theta.shape, dtype=np.uint8)
    if schedule.resample_each_batch:
        if batch_rng is None:
            raise ConfigurationError(
                "calib_mask: resample_each_batch requires a batch RNG"
            )
        rng = batch_rng
    else:
        rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, step]))
    keep = rng.random(theta.shape) < schedule.keep_prob
    return ((theta.astype(bool)) | keep).astype(np.uint8)


def apply_kspace_mask(z: cx.ComplexTensor, mask: np.ndarray,
                      coils: CoilSensitivities) -> cx.ComplexTensor:
    """Zero the k-space content of an image outside the mask (differentiable).

    Works in unmasked coil k-space so measured and generated data mix at
    full resolution; the mask itself is a constant.
    """
    if mask.shape != z.shape:
        raise ContractViolation(
            f"apply_kspace_mask: mask shape {mask.shape} vs image {z.shape}"
        )
    m = mask.astype(np.float64)
    coil_k = [cx.mul_real(k, m) for k in cx.to_kspace(z, coils)]
    return cx.from_kspace(coil_k, coils)


def apply_kspace_mask_np(z: np.ndarray, mask: np.ndarray,
                         coils: CoilSensitivities) -> np.ndarray:
    """Plain-array twin of apply_kspace_mask."""
    return from_coil_kspace(mask.astype(np.float64) * to_coil_kspace(z, coils), coils)
