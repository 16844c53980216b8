"""MAP reconstruction by majorization-minimization, plus PnP-ISTA and unrolled-descent baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .forward import ForwardOperator, sense_init
from .grid import RngStream, cg_solve, norm

LIPSCHITZ_MODES = ("power_iteration", "backtracking", "fixed")
L_MIN = 1e-3


@dataclass(frozen=True)
class MmConfig:
    rel_tol: float = 1e-6
    max_outer: int = 500
    cg_tol: float = 1e-8
    cg_max: int = 50
    lipschitz_mode: str = "backtracking"  # start at `lipschitz`, double on a failed step, never shrink
    accelerate: bool = True  # monotone FISTA extrapolation of the MM anchor
    lipschitz: float = 1.0  # starting / fixed L
    n_power: int = 10
    reestimate_every: int = 10
    sense_lambda: float = 1e-2
    max_doublings: int = 40
    slack: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.lipschitz_mode not in LIPSCHITZ_MODES:
            raise ValueError(f"unknown lipschitz_mode {self.lipschitz_mode!r}")
        if min(self.rel_tol, self.cg_tol, self.lipschitz) <= 0:
            raise ValueError("tolerances and lipschitz must be positive")


@dataclass
class ReconResult:
    image: np.ndarray
    cost_trace: list
    converged: bool
    outer_iterations: int
    lipschitz_trace: list = field(default_factory=list)


def posterior_cost(net, fwd: ForwardOperator, b: np.ndarray, x: np.ndarray):
    """``0.5 ||A x - b||^2 + E(x)`` (the log-partition constant is omitted)."""
    x = np.asarray(x, dtype=np.complex128)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite image")
    r = fwd.A(x) - b
    dc = 0.5 * np.sum(r.real ** 2 + r.imag ** 2, axis=(-3, -2, -1))
    return dc + net.energy(x)


def posterior_gradient(net, fwd: ForwardOperator, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return fwd.data_gradient(x, b) + net.score(x)


def gradient_descent(net, fwd: ForwardOperator, b: np.ndarray, x0: np.ndarray, step: float,
                     n_steps: int) -> list:
    """Plain descent on the posterior cost; returns the trajectory ``[x0, x1, ...]``."""
    traj = [np.asarray(x0, dtype=np.complex128)]
    x = traj[0]
    for _ in range(n_steps):
        x = x - step * posterior_gradient(net, fwd, b, x)
        traj.append(x)
    return traj


def surrogate(net, fwd: ForwardOperator, b: np.ndarray, x: np.ndarray, x_n: np.ndarray, L: float) -> float:
    """Quadratic majorizer ``g(x | x_n)`` of the posterior cost."""
    e_n, h_n = net.energy_and_score(x_n)
    r = fwd.A(x) - b
    d = x - x_n
    return float(0.5 * norm(r) ** 2 + e_n + 0.5 * L * norm(d) ** 2 + np.real(np.vdot(h_n, d)))


def estimate_lipschitz(net, x: np.ndarray, n_power: int, rng: RngStream | None = None,
                       fd_step: float = 1e-4, safety: float = 1.1, floor: float = L_MIN) -> float:
    """Power iteration on central-difference Hessian-vector products of the energy.

    Returns ``safety`` times the spectral-norm estimate, or ``floor`` when the
    iterate collapses to zero (e.g. a vanishing Hessian).
    """
    if n_power < 1:
        raise ValueError("n_power must be >= 1")
    rng = RngStream(0) if rng is None else rng
    x = np.asarray(x, dtype=np.complex128)
    v = rng.normal_complex(x.shape)
    v /= norm(v)
    est = 0.0
    for _ in range(n_power):
        hv = (net.score(x + fd_step * v) - net.score(x - fd_step * v)) / (2 * fd_step)
        est = norm(hv)
        if not np.isfinite(est) or est <= 1e-12:
            return floor
        v = hv / est
    return max(safety * est, floor)


def mm_step(net, fwd: ForwardOperator, b: np.ndarray, x_n: np.ndarray, L: float,
            cg_tol: float = 1e-8, cg_max: int = 50, aHb: np.ndarray | None = None,
            score: np.ndarray | None = None) -> np.ndarray:
    """Minimizer of the surrogate: ``(A^H A + L I)^{-1} (A^H b + L x_n - grad E(x_n))``."""
    if L <= 0:
        raise ValueError("L must be positive")
    if aHb is None:
        aHb = fwd.AH(b)
    if score is None:
        score = net.score(x_n)
    rhs = aHb + L * x_n - score
    res = cg_solve(lambda v: fwd.normal(v) + L * v, rhs, tol=cg_tol, max_iter=cg_max, x0=x_n)
    return res.x


def _data_cost(fwd: ForwardOperator, b: np.ndarray, x: np.ndarray) -> float:
    r = fwd.A(x) - b
    return 0.5 * float(np.sum(r.real ** 2 + r.imag ** 2))


def map_reconstruct(net, fwd: ForwardOperator, b: np.ndarray, cfg: MmConfig = MmConfig(),
                    x0: np.ndarray | None = None) -> ReconResult:
    """MAP estimate by MM iterations started from SENSE.

    Each iteration minimizes the quadratic majorizer ``g(. | y)`` at an anchor
    ``y``. Without acceleration ``y`` is the current iterate and a step that
    raises the cost by more than ``cfg.slack`` is retried with doubled ``L``.
    With ``cfg.accelerate`` the anchor is the monotone FISTA extrapolation of
    the last iterates, ``L`` doubles until ``g(. | y)`` bounds the cost at the
    trial point, and the trial point replaces the iterate only if it does not
    raise the cost. Either way the cost trace is non-increasing. The run stops
    when an accepted step changes the cost by at most ``rel_tol`` relative.
    """
    rng = RngStream(cfg.seed)
    x = sense_init(fwd, b, cfg.sense_lambda) if x0 is None else np.asarray(x0, dtype=np.complex128)
    aHb = fwd.AH(b)
    cost = float(posterior_cost(net, fwd, b, x))
    trace, ltrace = [cost], []
    L = cfg.lipschitz
    y, t = x, 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_outer + 1):
        anchor = y if cfg.accelerate else x
        if cfg.lipschitz_mode == "power_iteration" and (it - 1) % cfg.reestimate_every == 0:
            L = estimate_lipschitz(net, anchor, cfg.n_power, rng.spawn(it))
        e_a, score = net.energy_and_score(anchor)
        for _ in range(cfg.max_doublings + 1):
            z = mm_step(net, fwd, b, anchor, L, cfg.cg_tol, cfg.cg_max, aHb=aHb, score=score)
            dc = _data_cost(fwd, b, z)
            z_cost = dc + float(net.energy(z))
            if cfg.accelerate:
                d = z - anchor
                bound = dc + float(e_a) + float(np.real(np.vdot(score, d))) + 0.5 * L * norm(d) ** 2
            else:
                bound = cost
            if np.isfinite(z_cost) and z_cost <= bound + cfg.slack:
                break
            if cfg.lipschitz_mode == "fixed":
                raise DivergenceError(f"step failed at iteration {it} with fixed L={L}", iteration=it, trace=trace)
            L *= 2.0
        else:
            raise DivergenceError(
                f"backtracking exceeded {cfg.max_doublings} doublings at iteration {it}", iteration=it, trace=trace
            )
        ltrace.append(L)
        # a rejected extrapolated trial says nothing about convergence
        change = abs(z_cost - cost) / max(abs(cost), 1e-300) if z_cost <= cost + cfg.slack else np.inf
        if cfg.accelerate and z_cost > cost:
            # function-value restart: drop the momentum and re-anchor at the iterate
            x_new, new_cost, y, t = x, cost, x, 1.0
        elif cfg.accelerate:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            x_new, new_cost = z, z_cost
            y = z + ((t - 1.0) / t_next) * (z - x)
            t = t_next
        else:
            x_new, new_cost = z, z_cost
        x, cost = x_new, new_cost
        trace.append(cost)
        if change <= cfg.rel_tol:
            converged = True
            break
    return ReconResult(x, trace, converged, it, ltrace)


def _divergence_limit(fwd: ForwardOperator, b: np.ndarray, x0: np.ndarray) -> float:
    # relative to the start, or to the back-projected data when starting from zero
    return 1e3 * max(norm(x0), norm(fwd.AH(b)), 1e-12)


def pnp_ista_reconstruct(denoiser, fwd: ForwardOperator, b: np.ndarray, alpha: float, eta: float,
                         cfg: MmConfig = MmConfig(), x0: np.ndarray | None = None) -> ReconResult:
    """``q = x - alpha A^H(Ax - b) / eta^2``, ``x = D(q)`` until the relative change is below ``rel_tol``.

    ``cost_trace`` holds the relative iterate changes.
    """
    if alpha <= 0 or eta <= 0:
        raise ValueError("alpha and eta must be positive")
    x = sense_init(fwd, b, cfg.sense_lambda) if x0 is None else np.asarray(x0, dtype=np.complex128)
    limit = _divergence_limit(fwd, b, x)
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_outer + 1):
        q = x - (alpha / eta ** 2) * fwd.data_gradient(x, b)
        x_new = denoiser(q)
        nx = norm(x_new)
        if not np.isfinite(nx) or nx > limit:
            raise DivergenceError(f"PnP-ISTA diverged at iteration {it}", iteration=it, trace=trace)
        change = norm(x_new - x) / max(norm(x), 1e-300)
        trace.append(change)
        x = x_new
        if change <= cfg.rel_tol:
            converged = True
            break
    return ReconResult(x, trace, converged, it)


def elder_infer(net, fwd: ForwardOperator, b: np.ndarray, alpha: float, K: int = 30,
                x0: np.ndarray | None = None, sense_lambda: float = 1e-2) -> np.ndarray:
    """``K`` steps ``x <- x - alpha (A^H(Ax - b) + grad E(x))`` from SENSE."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = sense_init(fwd, b, sense_lambda) if x0 is None else np.asarray(x0, dtype=np.complex128)
    limit = _divergence_limit(fwd, b, x)
    if alpha == 0:
        return x
    for k in range(K):
        x = x - alpha * posterior_gradient(net, fwd, b, x)
        nx = norm(x)
        if not np.isfinite(nx) or nx > limit:
            raise DivergenceError(f"descent diverged at step {k + 1}", iteration=k + 1)
    return x


class ScaledEnergy:
    """``weight * E(x)``; used to set the regularization strength of a pre-trained prior."""

    def __init__(self, net, weight: float):
        self.net = net
        self.weight = float(weight)
        self.kind = getattr(net, "kind", "scaled")

    def energy(self, x):
        return self.weight * self.net.energy(x)

    def score(self, x):
        return self.weight * self.net.score(x)

    def energy_and_score(self, x):
        e, s = self.net.energy_and_score(x)
        return self.weight * e, self.weight * s
