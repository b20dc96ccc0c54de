"""Complex tensors on the autodiff tape.

A ComplexTensor is a pair of real ndgrad tensors (re, im); every operation
here decomposes into real tape ops or registers a custom backward, so the
whole reconstruction pipeline stays differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .errors import ContractViolation
from .linops import CoilSensitivities, EncodingOperator, cg_solve, fft2c, ifft2c

__all__ = [
    "ComplexTensor",
    "cadd",
    "csub",
    "cmul",
    "cmul_const",
    "mul_real",
    "fft2",
    "ifft2",
    "to_kspace",
    "from_kspace",
    "dc_layer",
    "abs2_sum",
]


@dataclass
class ComplexTensor:
    """Complex array stored as paired real/imaginary planes."""

    re: ndgrad.Tensor
    im: ndgrad.Tensor

    def __post_init__(self):
        if self.re.data.shape != self.im.data.shape:
            raise ContractViolation(
                f"ComplexTensor: re shape {self.re.data.shape} != im shape "
                f"{self.im.data.shape}"
            )

    @property
    def shape(self):
        return self.re.data.shape

    @staticmethod
    def from_numpy(z: np.ndarray, requires_grad: bool = False) -> "ComplexTensor":
        z = np.asarray(z, dtype=np.complex128)
        return ComplexTensor(
            ndgrad.Tensor(z.real.copy(), requires_grad=requires_grad),
            ndgrad.Tensor(z.imag.copy(), requires_grad=requires_grad),
        )

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def to_channels(self) -> ndgrad.Tensor:
        """Lossless 2-channel view [2, ...] for the real-valued network."""
        h = ndgrad.concat([self.re, self.im])
        return ndgrad.reshape(h, (2,) + self.shape)

    @staticmethod
    def from_channels(t: ndgrad.Tensor) -> "ComplexTensor":
        if t.data.ndim < 1 or t.data.shape[0] != 2:
            raise ContractViolation(
                f"from_channels: expected leading extent 2, got shape {t.data.shape}"
            )
        return ComplexTensor(ndgrad.channel(t, 0), ndgrad.channel(t, 1))


def cadd(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(ndgrad.add(a.re, b.re), ndgrad.add(a.im, b.im))


def csub(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(ndgrad.sub(a.re, b.re), ndgrad.sub(a.im, b.im))


def cmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    re = ndgrad.sub(ndgrad.mul(a.re, b.re), ndgrad.mul(a.im, b.im))
    im = ndgrad.add(ndgrad.mul(a.re, b.im), ndgrad.mul(a.im, b.re))
    return ComplexTensor(re, im)


def cmul_const(a: ComplexTensor, c: np.ndarray) -> ComplexTensor:
    """Multiply by a constant complex array of the same shape."""
    c = np.asarray(c, dtype=np.complex128)
    return cmul(a, ComplexTensor(ndgrad.tensor(c.real), ndgrad.tensor(c.imag)))


def mul_real(a: ComplexTensor, m: np.ndarray) -> ComplexTensor:
    """Multiply both planes by a constant real array (e.g. a mask)."""
    mt = ndgrad.tensor(np.asarray(m, dtype=np.float64))
    return ComplexTensor(ndgrad.mul(a.re, mt), ndgrad.mul(a.im, mt))


def scale(a: ComplexTensor, c: float) -> ComplexTensor:
    return ComplexTensor(ndgrad.smul(a.re, c), ndgrad.smul(a.im, c))


def _fft_pair(x: ComplexTensor, inverse: bool) -> ComplexTensor:
    """Centered orthonormal FFT as one tape op on the (re, im) pair.

    The transform is unitary, so the backward pass is the opposite-direction
    transform applied to the output gradient read as a complex plane.
    """
    z = x.re.data + 1j * x.im.data
    out = ifft2c(z) if inverse else fft2c(z)
    packed = np.stack([out.real, out.imag])
    need_re = x.re.requires_grad
    need_im = x.im.requires_grad

    def backward(g):
        gz = g[0] + 1j * g[1]
        h = fft2c(gz) if inverse else ifft2c(gz)
        return (h.real if need_re else None, h.imag if need_im else None)

    name = "ifft2" if inverse else "fft2"
    t = ndgrad.custom_op(name, (x.re, x.im), packed, backward)
    return ComplexTensor.from_channels(t)


def fft2(x: ComplexTensor) -> ComplexTensor:
    return _fft_pair(x, inverse=False)


def ifft2(x: ComplexTensor) -> ComplexTensor:
    return _fft_pair(x, inverse=True)


def to_kspace(z: ComplexTensor, coils: CoilSensitivities) -> list[ComplexTensor]:
    """Unmasked per-coil k-space of an image, one ComplexTensor per coil."""
    if z.shape != coils.spatial_shape:
        raise ContractViolation(
            f"to_kspace: image shape {z.shape} vs coil maps {coils.spatial_shape}"
        )
    return [fft2(cmul_const(z, coils.maps[i])) for i in range(coils.ncoil)]


def from_kspace(y: list[ComplexTensor], coils: CoilSensitivities) -> ComplexTensor:
    """Adjoint of to_kspace: coil-combine back to a single image."""
    if len(y) != coils.ncoil:
        raise ContractViolation(
            f"from_kspace: got {len(y)} coil planes for {coils.ncoil} coils"
        )
    acc = None
    for i in range(coils.ncoil):
        img = cmul_const(ifft2(y[i]), np.conj(coils.maps[i]))
        acc = img if acc is None else cadd(acc, img)
    return acc


def dc_layer(op: EncodingOperator, y: np.ndarray, z: ComplexTensor,
             lam: ndgrad.Tensor, tol: float = 1e-6, max_iter: int = 15):
    """Data-consistency update as a custom tape op with implicit gradient.

    Forward solves (A^H A + lam I) x = A^H y + lam z by CG.  Backward solves
    the same Hermitian system against the incoming gradient: with
    s = (A^H A + lam I)^{-1} g, the z gradient is lam * s and the lam
    gradient is Re<s, z - x*> (chain rule through the residual z - x*).

    Returns (x, CGInfo).  ``y`` is measured data and is treated as constant.
    """
    if lam.data.size != 1:
        raise ContractViolation(f"dc_layer: lambda must be scalar, got shape {lam.data.shape}")
    lam_val = lam.item()
    if lam_val <= 0:
        raise ContractViolation(f"dc_layer: lambda must be positive, got {lam_val}")

    z_arr = z.numpy()
    rhs = op.adjoint(np.asarray(y, dtype=np.complex128)) + lam_val * z_arr
    x_arr, info = cg_solve(lambda v: op.normal(v, lam_val), rhs, tol=tol, max_iter=max_iter)
    packed = np.stack([x_arr.real, x_arr.imag])
    need_z = z.re.requires_grad or z.im.requires_grad
    need_lam = lam.requires_grad

    def backward(g):
        gz = g[0] + 1j * g[1]
        s, _ = cg_solve(lambda v: op.normal(v, lam_val), gz, tol=tol, max_iter=max_iter)
        grad_re = lam_val * s.real if need_z else None
        grad_im = lam_val * s.imag if need_z else None
        grad_lam = None
        if need_lam:
            grad_lam = np.asarray(np.vdot(s, z_arr - x_arr).real).reshape(lam.data.shape)
        return (grad_re, grad_im, grad_lam)

    t = ndgrad.custom_op("dc_layer", (z.re, z.im, lam), packed, backward)
    return ComplexTensor.from_channels(t), info


def abs2_sum(x: ComplexTensor) -> ndgrad.Tensor:
    """Scalar sum of squared magnitudes, a convenient test loss."""
    return ndgrad.add(
        ndgrad.reduce(ndgrad.mul(x.re, x.re), "sum"),
        ndgrad.reduce(ndgrad.mul(x.im, x.im), "sum"),
    )
