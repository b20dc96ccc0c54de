"""Ground-truth-free conventional reconstructions: CG-SENSE and TV."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .linops import EncodingOperator, cg_solve

HIGH_ACCURACY_TOL = 1e-10
HIGH_ACCURACY_ITER = 200


def zero_filled(op: EncodingOperator, y: np.ndarray) -> np.ndarray:
    """A^H y, the standard aliased baseline."""
    return op.adjoint(y)


def cg_sense(op: EncodingOperator, y: np.ndarray, l2_reg: float = 0.0,
             tol: float = HIGH_ACCURACY_TOL, max_iter: int = HIGH_ACCURACY_ITER):
    """Solve (A^H A + reg I) x = A^H y with the high-accuracy CG profile."""
    if l2_reg < 0:
        raise ConfigurationError(f"l2_reg must be >= 0, got {l2_reg}")
    rhs = op.adjoint(y)
    x, info = cg_solve(lambda v: op.normal(v, l2_reg), rhs, tol=tol, max_iter=max_iter)
    return x, info


def _grad2d(x: np.ndarray):
    """Forward differences with Neumann boundary; returns (dy, dx)."""
    dy = np.zeros_like(x)
    dx = np.zeros_like(x)
    dy[:-1, :] = x[1:, :] - x[:-1, :]
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    return dy, dx


def _div2d(py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Negative adjoint of _grad2d."""
    div = np.zeros_like(py)
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] += -py[-2, :]
    div[:, 0] += px[:, 0]
    div[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    div[:, -1] += -px[:, -2]
    return div


def tv_value(x: np.ndarray) -> float:
    """Isotropic TV with real/imaginary channels coupled per pixel."""
    total = np.zeros(x.shape, dtype=np.float64)
    for plane in (x.real, x.imag):
        dy, dx = _grad2d(plane)
        total += dy**2 + dx**2
    return float(np.sqrt(total).sum())


def prox_tv(v: np.ndarray, weight: float, n_iter: int = 40) -> np.ndarray:
    """Proximal map of weight*TV via Chambolle's dual projection.

    Real and imaginary channels share one coupled dual field so the
    isotropic norm matches tv_value.
    """
    if weight <= 0:
        return v.copy()
    planes = [v.real.copy(), v.imag.copy()]
    p = [np.zeros(v.shape + (2,)) for _ in planes]  # (dy, dx) per channel
    tau = 0.25
    for _ in range(n_iter):
        mag2 = np.zeros(v.shape, dtype=np.float64)
        grads = []
        for c, plane in enumerate(planes):
            div = _div2d(p[c][..., 0], p[c][..., 1])
            dy, dx = _grad2d(div - plane / weight)
            grads.append((dy, dx))
            mag2 += dy**2 + dx**2
        denom = 1.0 + tau * np.sqrt(mag2)
        for c in range(len(planes)):
            p[c][..., 0] = (p[c][..., 0] + tau * grads[c][0]) / denom
            p[c][..., 1] = (p[c][..., 1] + tau * grads[c][1]) / denom
    out = [plane - weight * _div2d(p[c][..., 0], p[c][..., 1])
           for c, plane in enumerate(planes)]
    return out[0] + 1j * out[1]


def tv_reconstruct(op: EncodingOperator, y: np.ndarray, tv_weight: float,
                   iters: int = 100, prox_iter: int = 40):
    """Minimize ||Ax - y||^2 + tv_weight * TV(x) by monotone proximal gradient.

    The step starts at 1/(2 ||A||^2) (A is non-expansive under orthonormal
    FFT and normalized coils) and backtracks; a candidate that fails to
    decrease the objective is rejected, which keeps the objective
    non-increasing even though the TV prox is computed inexactly.
    Returns (x, objective_history).
    """
    if tv_weight <= 0:
        raise ConfigurationError(f"tv_weight must be positive, got {tv_weight}")
    y = np.asarray(y, dtype=np.complex128)
    x = op.adjoint(y)

    def f(v):
        r = op.forward(v) - y
        return float(np.vdot(r, r).real)

    def objective(v):
        return f(v) + tv_weight * tv_value(v)

    step = 0.5
    obj = objective(x)
    history = [obj]
    for _ in range(iters):
        grad = 2.0 * op.adjoint(op.forward(x) - y)
        fx = f(x)
        accepted = False
        t = step
        for _ in range(20):
            cand = prox_tv(x - t * grad, t * tv_weight, n_iter=prox_iter)
            diff = cand - x
            quad = fx + np.vdot(grad, diff).real + np.vdot(diff, diff).real / (2 * t)
            if f(cand) <= quad + 1e-12:
                cand_obj = objective(cand)
                if cand_obj <= obj:
                    x = cand
                    obj = cand_obj
                    accepted = True
                    step = t
                    break
            t *= 0.5
        history.append(obj)
        if not accepted:
            # No descent step found at any tried scale; iterate is stationary
            # to prox accuracy.
            break
    return x, history
