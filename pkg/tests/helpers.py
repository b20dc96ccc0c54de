"""Shared test oracles: finite differences, dense solves, direct DFT.

These stay independent of the code paths they check; everything here is
plain numpy.
"""

import numpy as np

from k2recon import ndgrad


def central_fd(f, x0: np.ndarray, coords=None, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function f(x) at x0.

    ``f`` takes a plain array and returns a float. With ``coords`` only those
    flat indices are probed (returned array is zero elsewhere).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros(x0.size)
    flat = x0.reshape(-1)
    idx = range(x0.size) if coords is None else coords
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * eps)
    return g.reshape(x0.shape)


def rel_err(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / denom)


def grad_of(f_build, leaf: ndgrad.Tensor) -> np.ndarray:
    """Run f_build() under a fresh tape and return d(loss)/d(leaf)."""
    with ndgrad.Tape() as tape:
        loss = f_build()
    grads = tape.backward(loss)
    return grads[leaf]


def check_grad_against_fd(make_loss, leaf: ndgrad.Tensor, coords=None,
                          eps: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare tape gradient of make_loss() wrt leaf against central FD.

    ``make_loss`` must rebuild the graph from current leaf data each call.
    Returns the relative error (and asserts it is below tol).
    """
    g_ad = grad_of(make_loss, leaf)
    base = leaf.data.copy()

    def f(arr):
        leaf.data = arr
        try:
            with ndgrad.Tape():
                out = make_loss()
            return float(out.data)
        finally:
            leaf.data = base

    g_fd = central_fd(f, base, coords=coords, eps=eps)
    if coords is not None:
        mask = np.zeros(base.size, dtype=bool)
        mask[list(coords)] = True
        err = rel_err(g_ad.reshape(-1)[mask], g_fd.reshape(-1)[mask])
    else:
        err = rel_err(g_ad, g_fd)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def dc_via_unrolled_cg(op, y, z, lam, n_iter=30):
    """DC layer rebuilt from basic tape ops with CG unrolled on the tape.

    Independent differentiation route used to check the implicit backward of
    dc_layer: every arithmetic step of CG is recorded, so plain chain rule
    produces the gradient.
    """
    from k2recon import complexops as cx

    shape = z.shape
    lam_plane = lambda: ndgrad.tile_scalar(lam, shape)

    def cscale(v, s):
        sp = ndgrad.tile_scalar(s, shape)
        return cx.ComplexTensor(ndgrad.mul(v.re, sp), ndgrad.mul(v.im, sp))

    def re_dot(a, b):
        return ndgrad.add(
            ndgrad.reduce(ndgrad.mul(a.re, b.re), "sum"),
            ndgrad.reduce(ndgrad.mul(a.im, b.im), "sum"),
        )

    def normal_t(v):
        acc = None
        for i in range(op.coils.ncoil):
            k = cx.fft2(cx.cmul_const(v, op.coils.maps[i]))
            k = cx.mul_real(k, op.mask.astype(np.float64))
            img = cx.cmul_const(cx.ifft2(k), np.conj(op.coils.maps[i]))
            acc = img if acc is None else cx.cadd(acc, img)
        lv = cx.ComplexTensor(
            ndgrad.mul(lam_plane(), v.re), ndgrad.mul(lam_plane(), v.im)
        )
        return cx.cadd(acc, lv)

    ahy = op.adjoint(np.asarray(y, dtype=np.complex128))
    ahy_t = cx.ComplexTensor(ndgrad.tensor(ahy.real), ndgrad.tensor(ahy.imag))
    rhs = cx.cadd(
        ahy_t,
        cx.ComplexTensor(ndgrad.mul(lam_plane(), z.re), ndgrad.mul(lam_plane(), z.im)),
    )

    x = cx.ComplexTensor(ndgrad.tensor(np.zeros(shape)), ndgrad.tensor(np.zeros(shape)))
    r = rhs
    p = r
    rs = re_dot(r, r)
    for _ in range(n_iter):
        ap = normal_t(p)
        alpha = ndgrad.div(rs, re_dot(p, ap))
        x = cx.cadd(x, cscale(p, alpha))
        r = cx.csub(r, cscale(ap, alpha))
        rs_new = re_dot(r, r)
        beta = ndgrad.div(rs_new, rs)
        p = cx.cadd(r, cscale(p, beta))
        rs = rs_new
    return x


def direct_dft2(x: np.ndarray) -> np.ndarray:
    """O(N^2) centered orthonormal 2-D DFT, the oracle for fft2c."""
    h, w = x.shape[-2:]
    ky = np.fft.fftshift(np.fft.fftfreq(h) * h).astype(np.int64)
    kx = np.fft.fftshift(np.fft.fftfreq(w) * w).astype(np.int64)
    ry = np.arange(h) - h // 2
    rx = np.arange(w) - w // 2
    ey = np.exp(-2j * np.pi * np.outer(ky, ry) / h)
    ex = np.exp(-2j * np.pi * np.outer(kx, rx) / w)
    return np.einsum("kr,rs,ls->kl", ey, x, ex) / np.sqrt(h * w)
