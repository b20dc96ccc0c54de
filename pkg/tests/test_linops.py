import numpy as np
import pytest

from k2recon.errors import ContractViolation, NumericalBreakdownError
from k2recon.linops import (
    CoilSensitivities,
    EncodingOperator,
    cg_solve,
    dc_solve,
    fft2c,
    from_coil_kspace,
    ifft2c,
    to_coil_kspace,
)

from helpers import direct_dft2, rel_err


def random_coils(ncoil, h, w, seed):
    rng = np.random.default_rng(seed)
    maps = rng.standard_normal((ncoil, h, w)) + 1j * rng.standard_normal((ncoil, h, w))
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSensitivities(maps)


def random_image(h, w, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))


def test_fft2c_constant_image_concentrates_at_center():
    c = 0.7 - 0.2j
    x = np.full((8, 6), c)
    k = fft2c(x)
    expected = np.zeros_like(k)
    expected[4, 3] = c * np.sqrt(8 * 6)
    assert np.max(np.abs(k - expected)) < 1e-12


def test_fft2c_roundtrip():
    x = random_image(16, 16, 1)
    assert np.max(np.abs(ifft2c(fft2c(x)) - x)) < 1e-12


def test_fft2c_matches_direct_dft_and_parseval():
    x = random_image(8, 8, 2)
    k = fft2c(x)
    k_direct = direct_dft2(x)
    assert np.max(np.abs(k - k_direct)) < 1e-12
    assert abs(np.linalg.norm(x) - np.linalg.norm(k)) < 1e-12


def test_fft2c_odd_sizes_unitary():
    x = random_image(9, 15, 3)
    assert np.max(np.abs(ifft2c(fft2c(x)) - x)) < 1e-12
    assert abs(np.linalg.norm(x) - np.linalg.norm(fft2c(x))) < 1e-12


def test_encode_single_uniform_coil_full_mask_is_fft():
    coils = CoilSensitivities(np.ones((1, 8, 8), dtype=np.complex128))
    op = EncodingOperator(coils, np.ones((8, 8), dtype=np.uint8))
    x = random_image(8, 8, 4)
    assert np.max(np.abs(op.forward(x)[0] - fft2c(x))) < 1e-12


def test_encode_zero_mask_gives_zero():
    coils = random_coils(2, 8, 8, 5)
    op = EncodingOperator(coils, np.zeros((8, 8), dtype=np.uint8))
    assert np.all(op.forward(random_image(8, 8, 6)) == 0)


def test_encode_shape_mismatch():
    coils = random_coils(2, 8, 8, 5)
    op = EncodingOperator(coils, np.ones((8, 8), dtype=np.uint8))
    with pytest.raises(ContractViolation):
        op.forward(random_image(4, 4, 0))
    with pytest.raises(ContractViolation):
        op.adjoint(np.zeros((3, 8, 8), dtype=np.complex128))


def test_adjoint_identity_many_random_configs():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        ncoil = int(rng.integers(1, 4))
        h = int(rng.integers(4, 10))
        w = int(rng.integers(4, 10))
        coils = random_coils(ncoil, h, w, 100 + trial)
        mask = (rng.random((h, w)) < rng.uniform(0.2, 1.0)).astype(np.uint8)
        op = EncodingOperator(coils, mask)
        x = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
        y = rng.standard_normal((ncoil, h, w)) + 1j * rng.standard_normal((ncoil, h, w))
        lhs = np.vdot(y, op.forward(x))
        rhs = np.vdot(op.adjoint(y), x)
        err = abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y))
        worst = max(worst, err)
    assert worst < 1e-10


def test_adjoint_of_encode_recovers_image_full_mask_single_coil():
    coils = CoilSensitivities(np.ones((1, 8, 8), dtype=np.complex128))
    op = EncodingOperator(coils, np.ones((8, 8), dtype=np.uint8))
    x = random_image(8, 8, 8)
    assert np.max(np.abs(op.adjoint(op.forward(x)) - x)) < 1e-12
    assert np.all(op.adjoint(np.zeros((1, 8, 8), dtype=np.complex128)) == 0)


def test_normal_operator_is_identity_under_full_sampling():
    for seed in range(5):
        coils = random_coils(3, 8, 8, 40 + seed)
        op = EncodingOperator(coils, np.ones((8, 8), dtype=np.uint8))
        x = random_image(8, 8, 50 + seed)
        assert np.max(np.abs(op.normal(x) - x)) < 1e-10


def test_cg_identity_converges_in_one_iteration():
    rhs = random_image(4, 4, 9)
    x, info = cg_solve(lambda v: v, rhs, tol=1e-12, max_iter=10)
    assert info.iterations == 1
    assert np.max(np.abs(x - rhs)) < 1e-12


def test_cg_2x2_closed_form():
    a = np.array([[2.0, 1.0], [1.0, 2.0]])
    x, info = cg_solve(lambda v: a @ v, np.array([3.0, 3.0], dtype=np.complex128),
                       tol=1e-12, max_iter=10)
    assert np.max(np.abs(x - np.array([1.0, 1.0]))) < 1e-12


def test_cg_matches_dense_solve_oracle():
    coils = CoilSensitivities(np.ones((1, 8, 8), dtype=np.complex128))
    rng = np.random.default_rng(11)
    mask = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    op = EncodingOperator(coils, mask)
    lam = 0.1

    n = 64
    dense = np.zeros((n, n), dtype=np.complex128)
    for j in range(n):
        e = np.zeros(n, dtype=np.complex128)
        e[j] = 1.0
        dense[:, j] = op.normal(e.reshape(8, 8), lam).reshape(-1)
    b = random_image(8, 8, 12)
    x_oracle = np.linalg.solve(dense, b.reshape(-1)).reshape(8, 8)

    x, info = cg_solve(lambda v: op.normal(v, lam), b, tol=1e-12, max_iter=300)
    assert rel_err(np.abs(x), np.abs(x_oracle)) < 1e-8
    assert np.max(np.abs(x - x_oracle)) / np.linalg.norm(x_oracle) < 1e-8


def test_cg_residual_history_non_increasing():
    rng = np.random.default_rng(13)
    for seed in range(10):
        coils = random_coils(2, 8, 8, 60 + seed)
        mask = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        op = EncodingOperator(coils, mask)
        b = random_image(8, 8, 70 + seed)
        _, info = cg_solve(lambda v: op.normal(v, 0.05), b, tol=1e-14, max_iter=60)
        hist = np.asarray(info.history)
        assert np.all(np.diff(hist) <= 0.0)


def test_cg_rejects_bad_tolerance_and_detects_breakdown():
    with pytest.raises(ContractViolation):
        cg_solve(lambda v: v, np.ones(2, dtype=np.complex128), tol=0.0)
    with pytest.raises(NumericalBreakdownError):
        cg_solve(lambda v: np.full_like(v, np.nan), np.ones(2, dtype=np.complex128))


def test_dc_solve_large_lambda_returns_z():
    coils = random_coils(2, 8, 8, 20)
    rng = np.random.default_rng(21)
    mask = (rng.random((8, 8)) < 0.4).astype(np.uint8)
    op = EncodingOperator(coils, mask)
    z = random_image(8, 8, 22)
    y = op.forward(random_image(8, 8, 23))
    x, _ = dc_solve(op, y, z, lam=1e8, tol=1e-12, max_iter=200)
    assert np.max(np.abs(x - z)) < 1e-6


def test_dc_solve_full_mask_uniform_coil_closed_form():
    coils = CoilSensitivities(np.ones((1, 8, 8), dtype=np.complex128))
    op = EncodingOperator(coils, np.ones((8, 8), dtype=np.uint8))
    y = fft2c(random_image(8, 8, 24))[None]
    z = random_image(8, 8, 25)
    x, _ = dc_solve(op, y, z, lam=1.0, tol=1e-12, max_iter=100)
    expected = (ifft2c(y[0]) + z) / 2.0
    assert np.max(np.abs(x - expected)) < 1e-10


def test_dc_fixed_point():
    coils = random_coils(2, 8, 8, 26)
    op = EncodingOperator(coils, np.ones((8, 8), dtype=np.uint8))
    x_true = random_image(8, 8, 27)
    y = op.forward(x_true)
    # Full sampling: A^H A z = A^H y holds at z = x_true, so the DC update
    # must return z itself.
    x, _ = dc_solve(op, y, x_true, lam=0.3, tol=1e-12, max_iter=100)
    assert np.max(np.abs(x - x_true)) < 1e-9


def test_coil_kspace_roundtrip_normalized_maps():
    coils = random_coils(3, 8, 8, 28)
    z = random_image(8, 8, 29)
    back = from_coil_kspace(to_coil_kspace(z, coils), coils)
    assert np.max(np.abs(back - z)) < 1e-10
    assert np.all(to_coil_kspace(np.zeros((8, 8), dtype=np.complex128), coils) == 0)


def test_coil_kspace_single_uniform_coil_is_fft():
    coils = CoilSensitivities(np.ones((1, 8, 8), dtype=np.complex128))
    z = random_image(8, 8, 30)
    assert np.max(np.abs(to_coil_kspace(z, coils)[0] - fft2c(z))) < 1e-12


def test_coil_normalization_validation():
    bad = CoilSensitivities(2.0 * np.ones((1, 4, 4), dtype=np.complex128))
    with pytest.raises(ContractViolation):
        bad.validate()
