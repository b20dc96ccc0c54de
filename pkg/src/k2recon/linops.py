"""MRI linear operators on plain complex arrays.

Centered orthonormal 2-D FFT, coil sensitivities, the encoding operator
(coil weighting -> Fourier -> sampling) with its adjoint, and a conjugate
gradient solver.  Everything here is numpy-level and differentiation-free;
the tape-aware counterparts live in ``complexops``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericalBreakdownError

FFT_AXES = (-2, -1)


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D FFT over the trailing two axes."""
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=FFT_AXES), axes=FFT_AXES, norm="ortho"),
        axes=FFT_AXES,
    )


def ifft2c(x: np.ndarray) -> np.ndarray:
    """Inverse of fft2c; also its adjoint (the transform is unitary)."""
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(x, axes=FFT_AXES), axes=FFT_AXES, norm="ortho"),
        axes=FFT_AXES,
    )


@dataclass
class CoilSensitivities:
    """Complex coil maps [ncoil, H, W], pixelwise normalized."""

    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.complex128)
        if self.maps.ndim != 3:
            raise ContractViolation(
                f"coil maps must be [ncoil,H,W], got shape {self.maps.shape}"
            )

    @property
    def ncoil(self) -> int:
        return self.maps.shape[0]

    @property
    def spatial_shape(self):
        return self.maps.shape[1:]

    def normalization_error(self) -> float:
        power = np.sum(np.abs(self.maps) ** 2, axis=0)
        return float(np.max(np.abs(power - 1.0)))

    def validate(self, tol: float = 1e-6):
        err = self.normalization_error()
        if err > tol:
            raise ContractViolation(
                f"coil maps not normalized: max |sum|C|^2 - 1| = {err:.3e} > {tol}"
            )


@dataclass
class EncodingOperator:
    """A = S F C : image [H,W] -> sampled multi-coil k-space [ncoil,H,W]."""

    coils: CoilSensitivities
    mask: np.ndarray
    norm: str = "ortho-centered"

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.shape != self.coils.spatial_shape:
            raise ContractViolation(
                f"mask shape {self.mask.shape} does not match coil maps "
                f"{self.coils.spatial_shape}"
            )
        self._maskf = self.mask.astype(np.float64)

    @property
    def shape(self):
        return self.coils.spatial_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.shape:
            raise ContractViolation(
                f"encode: image shape {x.shape} does not match operator {self.shape}"
            )
        return self._maskf * fft2c(self.coils.maps * x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if y.shape != self.coils.maps.shape:
            raise ContractViolation(
                f"adjoint: k-space shape {y.shape} does not match operator "
                f"{self.coils.maps.shape}"
            )
        return np.sum(np.conj(self.coils.maps) * ifft2c(self._maskf * y), axis=0)

    def normal(self, x: np.ndarray, reg: float = 0.0) -> np.ndarray:
        """(A^H A + reg I) x, the system matrix of the DC solve."""
        out = self.adjoint(self.forward(x))
        if reg:
            out = out + reg * x
        return out


def to_coil_kspace(z: np.ndarray, coils: CoilSensitivities) -> np.ndarray:
    """Unmasked coil k-space of an image: per coil fft2c(C_i * z)."""
    if z.shape != coils.spatial_shape:
        raise ContractViolation(
            f"to_coil_kspace: image shape {z.shape} vs coil maps {coils.spatial_shape}"
        )
    return fft2c(coils.maps * z)


def from_coil_kspace(y: np.ndarray, coils: CoilSensitivities) -> np.ndarray:
    """Adjoint of to_coil_kspace: sum_i conj(C_i) * ifft2c(y_i)."""
    if y.shape != coils.maps.shape:
        raise ContractViolation(
            f"from_coil_kspace: k-space shape {y.shape} vs coil maps {coils.maps.shape}"
        )
    return np.sum(np.conj(coils.maps) * ifft2c(y), axis=0)


@dataclass
class CGInfo:
    iterations: int = 0
    residual: float = 0.0
    history: list = field(default_factory=list)


def cg_solve(apply, rhs: np.ndarray, tol: float = 1e-6, max_iter: int = 15):
    """Conjugate gradients for a Hermitian positive definite map.

    Returns (x, CGInfo).  The returned iterate is the one with the smallest
    relative residual seen so far, so the reported history is non-increasing.
    """
    if tol <= 0:
        raise ContractViolation(f"cg_solve: tol must be positive, got {tol}")
    rhs = np.asarray(rhs, dtype=np.complex128)
    rhs_norm = np.linalg.norm(rhs)
    info = CGInfo()
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), info

    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    best_x = x
    best_rel = 1.0
    for it in range(1, max_iter + 1):
        ap = apply(p)
        denom = np.vdot(p, ap).real
        if not np.isfinite(denom) or denom <= 0.0:
            raise NumericalBreakdownError(
                f"cg_solve: non-positive or non-finite curvature {denom!r} at iteration {it}"
            )
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = np.vdot(r, r).real
        if not np.isfinite(rs_new):
            raise NumericalBreakdownError(
                f"cg_solve: non-finite residual at iteration {it}"
            )
        rel = np.sqrt(rs_new) / rhs_norm
        if rel < best_rel:
            best_rel = rel
            best_x = x
        info.iterations = it
        info.history.append(best_rel)
        if best_rel <= tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    info.residual = best_rel
    return best_x, info


def dc_solve(op: EncodingOperator, y: np.ndarray, z: np.ndarray, lam: float,
             tol: float = 1e-6, max_iter: int = 15):
    """Regularized least-squares update: solve (A^H A + lam I) x = A^H y + lam z."""
    if lam <= 0:
        raise ContractViolation(f"dc_solve: lambda must be positive, got {lam}")
    rhs = op.adjoint(y) + lam * z
    return cg_solve(lambda v: op.normal(v, lam), rhs, tol=tol, max_iter=max_iter)
