import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepen.errors import InfeasibleError
from deepen.forward import (CoilSensitivities, ForwardOperator, SamplingMask, apply_A, apply_AH, gen_csm,
                            gen_mask, make_operator, sense_init, simulate_measurements)
from deepen.grid import RngStream, fft2, inner, norm
from deepen.metrics import psnr


def rand_grid(seed, *shape):
    r = np.random.default_rng(seed)
    return r.standard_normal(shape) + 1j * r.standard_normal(shape)


def full_single_coil(n=16, noise=0.0):
    mask = SamplingMask("2d", np.ones((n, n), bool))
    return ForwardOperator(mask, CoilSensitivities(np.ones((1, n, n), complex)), noise)


def dense_A(op):
    """Explicit matrix of the forward operator built column by column from numpy's FFT."""
    h, w = op.shape
    cols = []
    for k in range(h * w):
        e = np.zeros(h * w, complex)
        e[k] = 1
        coil_imgs = op.csm.maps * e.reshape(h, w)
        ks = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(coil_imgs, axes=(-2, -1))), axes=(-2, -1))
        cols.append((op.mask.pattern * ks / np.sqrt(h * w)).ravel())
    return np.stack(cols, axis=1)


class TestOperator:
    def test_single_unit_coil_full_mask_is_fft(self):
        op = full_single_coil()
        x = rand_grid(0, 16, 16)
        np.testing.assert_allclose(apply_A(op, x)[0], fft2(x), atol=1e-14)

    def test_zero_image(self):
        op = make_operator(16, 16, 3, "2d", 4, 4, 0.0, 1, 2)
        assert np.all(apply_A(op, np.zeros((16, 16), complex)) == 0)

    def test_normal_identity_full_single(self):
        op = full_single_coil()
        x = rand_grid(1, 16, 16)
        assert np.max(np.abs(apply_AH(op, apply_A(op, x)) - x)) < 1e-12

    def test_normal_identity_full_multicoil(self):
        op = make_operator(32, 32, 4, "2d", 1, 4, 0.0, 1, 2)
        x = rand_grid(2, 32, 32)
        assert np.max(np.abs(op.normal(x) - x)) < 1e-10

    @pytest.mark.parametrize("kind", ["1d", "2d"])
    def test_against_dense_matrix(self, kind):
        op = make_operator(8, 8, 2, kind, 2, 2, 0.0, 3, 4)
        M = dense_A(op)
        x = rand_grid(3, 8, 8)
        y = rand_grid(4, 2, 8, 8)
        np.testing.assert_allclose(op.A(x).ravel(), M @ x.ravel(), atol=1e-12)
        np.testing.assert_allclose(op.AH(y).ravel(), M.conj().T @ y.ravel(), atol=1e-12)

    def test_unmasked_entries_zero(self):
        op = make_operator(16, 16, 2, "2d", 4, 4, 0.0, 1, 2)
        k = op.A(rand_grid(5, 16, 16))
        assert np.all(k[:, ~op.mask.pattern] == 0)

    def test_batched_matches_loop(self):
        op = make_operator(16, 16, 2, "1d", 2, 4, 0.0, 1, 2)
        xs = rand_grid(6, 3, 16, 16)
        np.testing.assert_array_equal(op.A(xs), np.stack([op.A(x) for x in xs]))
        ys = op.A(xs)
        np.testing.assert_array_equal(op.AH(ys), np.stack([op.AH(y) for y in ys]))

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from([8, 16, 32]), st.integers(1, 4), st.sampled_from(["1d", "2d"]),
           st.sampled_from([1.0, 2.0, 4.0]), st.integers(0, 10_000))
    def test_adjoint_property(self, n, coils, kind, accel, seed):
        op = make_operator(n, n, coils, kind, accel, 2, 0.0, seed, seed + 1)
        x, y = rand_grid(seed, n, n), rand_grid(seed + 2, coils, n, n)
        lhs, rhs = inner(op.A(x), y), inner(x, op.AH(y))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs) + 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_normal_psd(self, seed):
        op = make_operator(16, 16, 2, "2d", 4, 4, 0.0, seed, seed)
        x = rand_grid(seed, 16, 16)
        q = inner(op.normal(x), x)
        assert q.real >= -1e-12 and abs(q.imag) < 1e-10 * max(1, abs(q))


class TestMeasurements:
    def test_noiseless(self):
        op = make_operator(16, 16, 2, "2d", 4, 4, 0.0, 1, 2)
        x = rand_grid(7, 16, 16)
        assert np.array_equal(simulate_measurements(op, x, RngStream(0)), op.A(x))

    def test_reproducible(self):
        op = make_operator(16, 16, 2, "2d", 4, 4, 0.05, 1, 2)
        x = rand_grid(8, 16, 16)
        assert np.array_equal(simulate_measurements(op, x, RngStream(3)), simulate_measurements(op, x, RngStream(3)))

    def test_noise_energy(self):
        sigma = 0.05
        op = make_operator(16, 16, 2, "2d", 4, 4, sigma, 1, 2)
        x = rand_grid(9, 16, 16)
        e = [norm(simulate_measurements(op, x, RngStream(s)) - op.A(x)) ** 2 for s in range(100)]
        expected = sigma ** 2 * 2 * op.mask.n_sampled * op.csm.num_coils
        assert abs(np.mean(e) / expected - 1) < 0.1

    def test_noise_only_on_sampled(self):
        op = make_operator(16, 16, 2, "2d", 4, 4, 0.1, 1, 2)
        b = simulate_measurements(op, rand_grid(1, 16, 16), RngStream(1))
        assert np.all(b[:, ~op.mask.pattern] == 0)


class TestSense:
    def test_full_mask_recovers(self):
        op = full_single_coil()
        x = rand_grid(10, 16, 16)
        rec = sense_init(op, op.A(x), lam=1e-8, tol=1e-14)
        assert psnr(x, rec) > 80

    def test_zero_measurements(self):
        op = make_operator(16, 16, 2, "2d", 4, 4, 0.0, 1, 2)
        assert np.all(sense_init(op, np.zeros((2, 16, 16), complex)) == 0)

    @pytest.mark.parametrize("lam", [1e-3, 1e-2, 1e-1])
    def test_normal_equation_residual(self, lam):
        op = make_operator(32, 32, 2, "2d", 4, 8, 0.01, 1, 2)
        b = simulate_measurements(op, rand_grid(11, 32, 32), RngStream(0))
        x = sense_init(op, b, lam)
        res = op.normal(x) + lam * x - op.AH(b)
        assert norm(res) / norm(op.AH(b)) < 1e-6

    def test_unique_minimizer_against_dense(self):
        op = make_operator(8, 8, 2, "2d", 2, 2, 0.0, 5, 6)
        M = dense_A(op)
        b = op.A(rand_grid(12, 8, 8))
        lam = 0.05
        ref = np.linalg.solve(M.conj().T @ M + lam * np.eye(64), M.conj().T @ b.ravel())
        np.testing.assert_allclose(sense_init(op, b, lam, tol=1e-13).ravel(), ref, atol=1e-9)


class TestMask:
    def test_acceleration_one(self):
        assert gen_mask("2d", 16, 16, 1.0, 4, RngStream(0)).pattern.all()
        assert gen_mask("1d", 16, 16, 1.0, 4, RngStream(0)).pattern.all()

    def test_counting_2d(self):
        m = gen_mask("2d", 64, 64, 4, 8, RngStream(0))
        assert abs(m.n_sampled - 1024) <= 0.05 * 1024
        assert m.pattern[28:36, 28:36].all()
        assert m.kind == "2d"

    def test_1d_whole_columns(self):
        m = gen_mask("1d", 32, 32, 2, 8, RngStream(0))
        assert np.all(m.pattern.all(axis=0) | ~m.pattern.any(axis=0))
        assert m.pattern[:, 12:20].all()
        assert m.acceleration == pytest.approx(2.0)

    def test_same_seed(self):
        a = gen_mask("2d", 32, 32, 4, 8, RngStream(7))
        b = gen_mask("2d", 32, 32, 4, 8, RngStream(7))
        assert np.array_equal(a.pattern, b.pattern)

    def test_variable_density(self):
        # center rows/cols are sampled more densely than the periphery
        m = np.mean([gen_mask("2d", 64, 64, 4, 8, RngStream(s)).pattern for s in range(10)], axis=0)
        assert m[24:40, 24:40].mean() > 2 * m[:8, :8].mean()

    @pytest.mark.parametrize("accel,kind", [(8, "1d"), (32, "2d")])
    def test_infeasible(self, accel, kind):
        with pytest.raises(InfeasibleError):
            gen_mask(kind, 32, 32, accel, 8, RngStream(0))

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([16, 32, 64]), st.sampled_from(["1d", "2d"]),
           st.floats(1.5, 4.0), st.integers(0, 1000))
    def test_acceleration_invariant(self, n, kind, accel, seed):
        m = gen_mask(kind, n, n, accel, 4, RngStream(seed))
        expected = round(n / accel) * n if kind == "1d" else round(n * n / accel)
        assert m.n_sampled == expected
        rows, cols = m.acs_region()
        assert m.pattern[rows, cols].all()


class TestCsm:
    def test_single_coil_unit(self):
        c = gen_csm(1, 32, 32, RngStream(0))
        np.testing.assert_allclose(np.abs(c.maps[0]), 1.0, atol=1e-14)

    @pytest.mark.parametrize("coils", [2, 4, 8])
    def test_sos_normalized(self, coils):
        assert gen_csm(coils, 32, 32, RngStream(coils)).sos_defect() < 1e-10

    def test_smoothness(self):
        for s in range(10):
            maps = np.abs(gen_csm(4, 64, 64, RngStream(s)).maps)
            gy, gx = np.diff(maps, axis=1), np.diff(maps, axis=2)
            assert max(np.abs(gy).max(), np.abs(gx).max()) < 0.2
