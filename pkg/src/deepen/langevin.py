"""Langevin sampling of the posterior ``p(x | b) ~ exp(-C(x))`` with ``C = 0.5||Ax - b||^2 + E(x)``."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError
from .forward import ForwardOperator
from .grid import RngStream, norm

DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class LangevinConfig:
    """Sampler settings.

    ``scaled=True`` uses the unit-step update on the posterior scaled by
    ``eps**2 / 2``: ``x - grad C(x) + eps z``.  ``scaled=False`` is the plain
    form ``x - (eps**2 / 2) grad C(x) + eps z``.
    """

    epsilon: float = 0.01
    n_iter: int = 100
    init_std: float = 0.1
    seed: int = 0
    scaled: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.init_std > 0:
            raise ValueError("init_std must be positive")
        if self.n_iter < 0:
            raise ValueError("n_iter must be non-negative")

    @property
    def step(self) -> float:
        return 1.0 if self.scaled else 0.5 * self.epsilon ** 2


@dataclass
class SampleStats:
    mean: np.ndarray  # complex MMSE estimate
    variance: np.ndarray  # per-pixel variance of magnitudes
    n_samples: int


def posterior_gradient(net, fwd: ForwardOperator, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``A^H (A x - b) + grad E(x)``."""
    return fwd.data_gradient(x, b) + net.score(x)


def _draw(rngs, shape) -> np.ndarray:
    """One complex standard normal grid per chain, each from its own stream."""
    if isinstance(rngs, RngStream):
        return rngs.normal_complex(shape)
    return np.stack([r.normal_complex(shape[1:]) for r in rngs])


def langevin_step(net, fwd: ForwardOperator, b: np.ndarray, x: np.ndarray, rng, cfg: LangevinConfig,
                  noise: bool = True) -> np.ndarray:
    """One update ``x - step * grad C(x) + eps z``.

    ``rng`` is a single stream or a sequence of per-chain streams (one per
    leading index of ``x``).  ``noise=False`` drops the ``eps z`` term.
    """
    x_next = x - cfg.step * posterior_gradient(net, fwd, b, x)
    if noise:
        x_next = x_next + cfg.epsilon * _draw(rng, x.shape)
    return x_next


def _chain_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=(-2, -1)))


def run_chain(net, fwd: ForwardOperator, b: np.ndarray, x0: np.ndarray, rng, cfg: LangevinConfig,
              noise: bool = True) -> np.ndarray:
    """Iterate :func:`langevin_step` ``cfg.n_iter`` times from ``x0``.

    Raises
    ------
    DivergenceError
        If any chain becomes non-finite or its norm exceeds
        ``1e3 * ||x0||``; ``iteration`` is the offending step and
        ``trace`` the mean posterior cost so far.
    """
    x = x0
    limit = DIVERGENCE_FACTOR * np.maximum(_chain_norms(x0), 1e-12)
    trace = []
    for n in range(cfg.n_iter):
        x = langevin_step(net, fwd, b, x, rng, cfg, noise=noise)
        norms = _chain_norms(x)
        bad = ~np.isfinite(norms) | (norms > limit)
        if np.any(bad):
            err = DivergenceError(f"Langevin chain diverged at iteration {n + 1}", iteration=n + 1, trace=trace)
            err.chains = np.flatnonzero(np.atleast_1d(bad)).tolist()
            raise err
        if n % 10 == 9:
            trace.append(float(np.mean(_cost(net, fwd, b, x))))
    return x


def _cost(net, fwd, b, x):
    r = fwd.A(x) - b
    return 0.5 * np.sum(np.abs(r) ** 2, axis=(-3, -2, -1)) + net.energy(x)


def generate_fake(net, fwd: ForwardOperator, b: np.ndarray, cfg: LangevinConfig, rng) -> np.ndarray:
    """Fake posterior sample(s): ``cfg.n_iter`` Langevin steps from a Gaussian start.

    ``b`` may carry a leading batch axis; then ``rng`` may be a list of
    per-chain streams.
    """
    b = np.asarray(b, dtype=np.complex128)
    shape = b.shape[:-3] + fwd.shape
    x0 = cfg.init_std * _draw(rng, shape)
    return run_chain(net, fwd, b, x0, rng, cfg)


def magnitude_stats(samples: np.ndarray) -> SampleStats:
    """Mean (complex) and variance of magnitudes over the leading axis."""
    samples = np.asarray(samples)
    mean = samples.mean(axis=0)
    mag = np.abs(samples)
    var = np.mean((mag - mag.mean(axis=0)) ** 2, axis=0)
    return SampleStats(mean, var, samples.shape[0])


def sample_posterior(net, fwd: ForwardOperator, b: np.ndarray, cfg: LangevinConfig, n_samples: int,
                     chunk: int = 50):
    """Run ``n_samples`` independent chains (sub-streams ``0..n-1`` of ``cfg.seed``).

    Returns ``(SampleStats, samples)``.  A diverging chain raises
    :class:`DivergenceError` naming the chain indices.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    root = RngStream(cfg.seed)
    out = []
    for start in range(0, n_samples, chunk):
        idx = range(start, min(start + chunk, n_samples))
        rngs = [root.spawn(k) for k in idx]
        bb = np.broadcast_to(b, (len(rngs),) + b.shape)
        try:
            out.append(generate_fake(net, fwd, bb, cfg, rngs))
        except DivergenceError as err:
            err.chains = [start + c for c in getattr(err, "chains", [])]
            raise
    samples = np.concatenate(out, axis=0)
    return magnitude_stats(samples), samples


def with_seed(cfg: LangevinConfig, seed: int) -> LangevinConfig:
    return replace(cfg, seed=seed)
