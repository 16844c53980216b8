"""Evaluation experiments: landscape sweeps, method comparisons, cross-mask generalization."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError
from .forward import ForwardOperator, sense_init, simulate_measurements
from .grid import RngStream, fft2
from .metrics import MetricsReport, psnr
from .phantoms import AcquisitionSpec
from .solvers import MmConfig, ScaledEnergy, elder_infer, map_reconstruct, pnp_ista_reconstruct

LANDSCAPE_Z_SEED = 20_240_901


def default_alpha_axis(n: int = 41, lo: float = -0.5, hi: float = 1.5) -> np.ndarray:
    """Evenly spaced coefficients; with the defaults the step is 0.05 and 0 and 1 are grid points."""
    return np.linspace(lo, hi, n)


@dataclass
class LandscapeGrid:
    alpha_s: np.ndarray
    alpha_z: np.ndarray
    costs: np.ndarray  # (len(alpha_s), len(alpha_z))
    minimizer: tuple[float, float]
    x_hat: np.ndarray
    error: np.ndarray

    @property
    def minimizer_norm(self) -> float:
        return float(np.hypot(*self.minimizer))


def grid_argmin(costs: np.ndarray, alpha_s: np.ndarray, alpha_z: np.ndarray) -> tuple[int, int]:
    """Exhaustive argmin; ties go to the smaller ``|a_s| + |a_z|``, then to the lower flat index."""
    costs = np.asarray(costs)
    best = costs.min()
    cand = np.argwhere(costs == best)
    l1 = np.abs(alpha_s[cand[:, 0]]) + np.abs(alpha_z[cand[:, 1]])
    i, j = cand[np.argmin(l1)]
    return int(i), int(j)


def landscape_sweep(net, fwd: ForwardOperator, b: np.ndarray, x_ref: np.ndarray,
                    alpha_s: np.ndarray | None = None, alpha_z: np.ndarray | None = None,
                    rng: RngStream | None = None, sense_lambda: float = 1e-2) -> LandscapeGrid:
    """Evaluate ``C(x_ref + a_s s + a_z z)`` on a grid of coefficients.

    ``s`` is the SENSE artifact ``sense_init(b) - x_ref`` and ``z`` a unit
    variance complex Gaussian image drawn from ``rng``.
    """
    alpha_s = default_alpha_axis() if alpha_s is None else np.asarray(alpha_s, dtype=float)
    alpha_z = default_alpha_axis() if alpha_z is None else np.asarray(alpha_z, dtype=float)
    rng = RngStream(LANDSCAPE_Z_SEED) if rng is None else rng
    x_ref = np.asarray(x_ref, dtype=np.complex128)
    s = sense_init(fwd, b, sense_lambda) - x_ref
    z = rng.normal_complex(x_ref.shape)
    costs = np.empty((alpha_s.size, alpha_z.size))
    for i, a in enumerate(alpha_s):
        xs = x_ref + a * s + alpha_z[:, None, None] * z
        r = fwd.A(xs) - b
        costs[i] = 0.5 * np.sum(r.real ** 2 + r.imag ** 2, axis=(-3, -2, -1)) + net.energy(xs)
    i, j = grid_argmin(costs, alpha_s, alpha_z)
    x_hat = x_ref + alpha_s[i] * s + alpha_z[j] * z
    return LandscapeGrid(alpha_s, alpha_z, costs, (float(alpha_s[i]), float(alpha_z[j])), x_hat, x_hat - x_ref)


# --------------------------------------------------------------------------
# test-set measurements and method runners

def measure(fwd: ForwardOperator, images: np.ndarray, seed: int) -> np.ndarray:
    """Noisy k-space for each image; image ``i`` uses sub-stream ``i`` of ``seed``."""
    root = RngStream(seed)
    return np.stack([simulate_measurements(fwd, x, root.spawn(i)) for i, x in enumerate(images)])


def variance_band_fraction(samples: np.ndarray, band: np.ndarray) -> float:
    """Share of the pixelwise magnitude variance carried by the k-space ``band``.

    Each sample's magnitude deviation from the sample mean is transformed with
    the orthonormal FFT; by Parseval the spectral energies sum to the total
    variance, so the band's share is a fraction of the variance mass.
    """
    mags = np.abs(samples)
    dev = mags - mags.mean(axis=0)
    power = np.sum(np.abs(fft2(dev.astype(np.complex128))) ** 2, axis=0)
    total = power.sum()
    return float(power[band].sum() / total) if total > 0 else 0.0


def run_method(method: str, model, fwd: ForwardOperator, b: np.ndarray, mm: MmConfig = MmConfig(),
               alpha: float = 1.0, eta: float = 0.01, with_trace: bool = False):
    """Reconstruct one measurement with ``method`` in {sense, map, pnp, elder}.

    With ``with_trace`` the iterative solvers also return their cost trace
    (``(image, trace)``; the trace is empty for the direct methods).
    """
    trace: list = []
    if method == "sense":
        x = sense_init(fwd, b, mm.sense_lambda)
    elif method == "map":
        r = map_reconstruct(model, fwd, b, mm)
        x, trace = r.image, r.cost_trace
    elif method == "pnp":
        r = pnp_ista_reconstruct(model, fwd, b, alpha, eta, mm)
        x, trace = r.image, r.cost_trace
    elif method == "elder":
        x = elder_infer(model, fwd, b, alpha, sense_lambda=mm.sense_lambda)
    else:
        raise ValueError(f"unknown method {method!r}")
    return (x, trace) if with_trace else x


def evaluate(method: str, model, fwd: ForwardOperator, images: np.ndarray, kspace: np.ndarray,
             label: str = "", **kw) -> tuple[MetricsReport, np.ndarray]:
    """Per-image PSNR/SSIM of ``method``; returns the report and the reconstructions."""
    rep = MetricsReport(label or method)
    recs = []
    for x, b in zip(images, kspace):
        r = run_method(method, model, fwd, b, **kw)
        rep.add(x, r)
        recs.append(r)
    return rep, np.stack(recs)


def tune_scalar(objective, candidates) -> tuple[float, list]:
    """Pick the candidate with the highest median validation PSNR; divergent candidates score ``-inf``."""
    scores = []
    for c in candidates:
        try:
            scores.append(float(np.median(objective(c))))
        except DivergenceError:
            scores.append(-np.inf)
    best = int(np.argmax(scores))
    return float(candidates[best]), scores


# multiples of eta^2: a score-matched energy approximates -log p, while the data
# term has eta^2 absorbed, so the calibrated weight is eta^2
PRIOR_WEIGHT_FACTORS = (0.1, 0.3, 1.0, 3.0, 10.0)


def prior_weight_grid(eta: float, factors=PRIOR_WEIGHT_FACTORS) -> tuple:
    return tuple(round(f * eta ** 2, 12) for f in factors)


def tune_prior_weight(net, fwd: ForwardOperator, images: np.ndarray, kspace: np.ndarray,
                      weights=None, mm: MmConfig = MmConfig()):
    """Regularization weight for a pre-trained energy, chosen on validation data.

    ``weights`` defaults to :func:`prior_weight_grid` at the operator's noise level.
    """
    if weights is None:
        weights = prior_weight_grid(fwd.noise_std)

    def objective(w):
        return [psnr(x, map_reconstruct(ScaledEnergy(net, w), fwd, b, mm).image) for x, b in zip(images, kspace)]
    return tune_scalar(objective, list(weights))


def tune_elder_alpha(net, fwd: ForwardOperator, images: np.ndarray, kspace: np.ndarray,
                     alphas=(0.1, 0.2, 0.5, 1.0), sense_lambda: float = 1e-2):
    def objective(a):
        return [psnr(x, elder_infer(net, fwd, b, a, sense_lambda=sense_lambda)) for x, b in zip(images, kspace)]
    return tune_scalar(objective, list(alphas))


# --------------------------------------------------------------------------
# generalization

@dataclass
class GeneralizationRow:
    acquisition: AcquisitionSpec
    report: MetricsReport
    psnr_delta: float  # median PSNR minus the matched-setting median
    ssim_delta: float


def generalization_run(net, train_acq: AcquisitionSpec, test_acqs: list, images: np.ndarray,
                       mm: MmConfig = MmConfig(), noise_seed: int = 0) -> list:
    """MAP under each test acquisition, with deltas against the matched ``train_acq`` run.

    Measurement noise uses the same seed for every setting so a test
    setting equal to ``train_acq`` reproduces the baseline exactly.
    """
    def run(acq):
        fwd = acq.operator()
        rep, _ = evaluate("map", net, fwd, images, measure(fwd, images, noise_seed), label=_acq_label(acq), mm=mm)
        return rep

    base = run(train_acq)
    base_p, base_s = np.median(base.psnr), np.median(base.ssim)
    rows = []
    for acq in test_acqs:
        rep = base if acq == train_acq else run(acq)
        rows.append(GeneralizationRow(acq, rep, float(np.median(rep.psnr) - base_p),
                                      float(np.median(rep.ssim) - base_s)))
    return rows


def _acq_label(acq: AcquisitionSpec) -> str:
    return f"{acq.mask}-{acq.acceleration:g}x"


def parse_acquisition(text: str, base: AcquisitionSpec = AcquisitionSpec()) -> AcquisitionSpec:
    """``"1d:2"`` -> 1D mask at 2x acceleration, other fields from ``base``."""
    try:
        kind, acc = text.split(":")
        return replace(base, mask=kind.strip().lower(), acceleration=float(acc))
    except ValueError as err:
        raise ValueError(f"bad acquisition {text!r}; expected KIND:ACCEL, e.g. 2d:4") from err
