import numpy as np
import pytest

from deepen.experiments import (default_alpha_axis, generalization_run, grid_argmin, landscape_sweep,
                                measure, parse_acquisition, prior_weight_grid, tune_scalar,
                                variance_band_fraction)
from deepen.errors import DivergenceError
from deepen.forward import sense_init, simulate_measurements
from deepen.grid import RngStream
from deepen.nn import ZeroEnergy
from deepen.phantoms import AcquisitionSpec, Dataset
from deepen.solvers import MmConfig

ACQ = AcquisitionSpec(size=16, acs_lines=4)


@pytest.fixture(scope="module")
def problem():
    ds = Dataset.generate(3, ACQ, seed=1)
    fwd = ds.operator
    x = ds.images[0]
    return fwd, x, simulate_measurements(fwd, x, RngStream(0))


def test_default_axis_contains_zero_and_one():
    a = default_alpha_axis()
    assert a.size == 41 and a[0] == -0.5 and a[-1] == 1.5
    assert 0.0 in a and 1.0 in a


def test_argmin_tie_break():
    axis = np.array([-1.0, 0.0, 1.0])
    costs = np.ones((3, 3))
    costs[0, 0] = costs[2, 1] = costs[1, 2] = 0.0
    assert grid_argmin(costs, axis, axis) in [(2, 1), (1, 2)]
    costs[1, 1] = 0.0
    assert grid_argmin(costs, axis, axis) == (1, 1)


def test_origin_only_grid(problem):
    fwd, x, b = problem
    g = landscape_sweep(ZeroEnergy(), fwd, b, x, np.array([0.0]), np.array([0.0]))
    assert g.minimizer == (0.0, 0.0)
    assert np.array_equal(g.x_hat, x) and np.all(g.error == 0)


def test_zero_net_is_data_consistency_argmin(problem):
    fwd, x, b = problem
    axis = default_alpha_axis(9)
    g = landscape_sweep(ZeroEnergy(), fwd, b, x, axis, axis, RngStream(5))
    s = sense_init(fwd, b) - x
    z = RngStream(5).normal_complex(x.shape)
    dc = np.array([[0.5 * np.sum(np.abs(fwd.A(x + p * s + q * z) - b) ** 2) for q in axis] for p in axis])
    np.testing.assert_allclose(g.costs, dc, rtol=1e-12)
    i, j = np.unravel_index(np.argmin(dc), dc.shape)
    assert g.minimizer == (axis[i], axis[j])
    np.testing.assert_allclose(g.x_hat, x + axis[i] * s + axis[j] * z)


def test_grid_minimizer_is_exhaustive(problem):
    fwd, x, b = problem
    g = landscape_sweep(ZeroEnergy(), fwd, b, x)
    assert g.costs.shape == (41, 41)
    i = list(g.alpha_s).index(g.minimizer[0])
    j = list(g.alpha_z).index(g.minimizer[1])
    assert g.costs[i, j] == g.costs.min()


def test_measure_uses_substreams():
    ds = Dataset.generate(2, ACQ, seed=1)
    fwd = ds.operator
    k = measure(fwd, ds.images, 9)
    assert np.array_equal(k[1], simulate_measurements(fwd, ds.images[1], RngStream(9).spawn(1)))


def test_generalization_matched_setting_is_baseline():
    ds = Dataset.generate(2, ACQ, seed=2)
    tests = [ACQ, parse_acquisition("1d:2", ACQ)]
    rows = generalization_run(ZeroEnergy(), ACQ, tests, ds.images, MmConfig(max_outer=5))
    assert len(rows) == 2
    assert rows[0].psnr_delta == 0.0 and rows[0].ssim_delta == 0.0
    # same seeds give the same numbers when run again
    again = generalization_run(ZeroEnergy(), ACQ, [ACQ], ds.images, MmConfig(max_outer=5))
    assert again[0].report.psnr == rows[0].report.psnr


def test_parse_acquisition():
    a = parse_acquisition("1D:2")
    assert a.mask == "1d" and a.acceleration == 2.0
    with pytest.raises(ValueError):
        parse_acquisition("2d")


def test_tune_scalar_skips_divergent():
    def objective(c):
        if c > 1:
            raise DivergenceError("boom")
        return [c, c]
    best, scores = tune_scalar(objective, [0.1, 0.5, 2.0])
    assert best == 0.5 and scores[-1] == -np.inf


def test_variance_band_fraction_parseval():
    samples = RngStream(3).normal_complex((50, 16, 16))
    band = np.zeros((16, 16), bool)
    assert variance_band_fraction(samples, band) == 0.0
    assert variance_band_fraction(samples, ~band) == pytest.approx(1.0)
    band[6:10, 6:10] = True
    frac = variance_band_fraction(samples, band)
    # white fluctuations spread evenly over frequencies, bar the removed mean
    assert abs(frac - band.mean()) < 0.05
    # constant samples carry no variance
    assert variance_band_fraction(np.ones((4, 16, 16), complex), band) == 0.0


def test_prior_weight_grid_is_centered_on_eta_squared():
    grid = prior_weight_grid(0.02)
    assert 4e-4 in grid and grid == tuple(sorted(grid))
