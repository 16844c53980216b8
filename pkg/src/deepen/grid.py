"""Complex grid arithmetic: centered orthonormal FFT, conjugate gradient, seeded RNG.

Grids are plain ``numpy`` complex128 arrays of shape ``(..., H, W)``; leading
axes are treated as a batch.  All transforms act on the last two axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import DimensionError, DivergenceError

LinearOp = Callable[[np.ndarray], np.ndarray]


def is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def as_grid(x, name: str = "grid") -> np.ndarray:
    """Return ``x`` as a finite complex128 array with at least two axes."""
    g = np.asarray(x, dtype=np.complex128)
    if g.ndim < 2:
        raise DimensionError(f"{name} must have at least 2 dimensions, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"{name} contains non-finite values")
    return g


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Complex inner product <a, b> = sum(conj(a) * b)."""
    return complex(np.vdot(a, b))


def norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a.real**2 + a.imag**2)))


# --------------------------------------------------------------------------
# radix-2 FFT

@lru_cache(maxsize=None)
def _fft_plan(n: int):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    stages = []
    size = 2
    while size <= n:
        half = size // 2
        stages.append((size, np.exp(-2j * np.pi * np.arange(half) / size)))
        size *= 2
    return rev, stages


def _fft_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized iterative decimation-in-time FFT along the last axis."""
    n = x.shape[-1]
    rev, stages = _fft_plan(n)
    lead = x.shape[:-1]
    y = x[..., rev]
    for size, tw in stages:
        half = size // 2
        if inverse:
            tw = tw.conj()
        y = y.reshape(*lead, n // size, size)
        even = y[..., :half]
        odd = y[..., half:] * tw
        y = np.concatenate((even + odd, even - odd), axis=-1)
    return y.reshape(*lead, n)


def _check_dims(g: np.ndarray) -> None:
    h, w = g.shape[-2:]
    if not (is_pow2(h) and is_pow2(w)):
        raise DimensionError(f"FFT dimensions must be powers of two, got {h}x{w}")


def fft2(g: np.ndarray) -> np.ndarray:
    """Centered, orthonormal 2D DFT over the last two axes (DC at ``(H//2, W//2)``)."""
    g = np.asarray(g, dtype=np.complex128)
    _check_dims(g)
    h, w = g.shape[-2:]
    y = np.fft.ifftshift(g, axes=(-2, -1))
    y = _fft_last(y, inverse=False)
    y = _fft_last(np.swapaxes(y, -1, -2), inverse=False)
    y = np.swapaxes(y, -1, -2)
    return np.fft.fftshift(y, axes=(-2, -1)) / np.sqrt(h * w)


def ifft2(g: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2` (also its adjoint)."""
    g = np.asarray(g, dtype=np.complex128)
    _check_dims(g)
    h, w = g.shape[-2:]
    y = np.fft.ifftshift(g, axes=(-2, -1))
    y = _fft_last(y, inverse=True)
    y = _fft_last(np.swapaxes(y, -1, -2), inverse=True)
    y = np.swapaxes(y, -1, -2)
    return np.fft.fftshift(y, axes=(-2, -1)) / np.sqrt(h * w)


# --------------------------------------------------------------------------
# conjugate gradient

@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float  # final ||op(x) - rhs|| / ||rhs||


def cg_solve(
    op: LinearOp,
    rhs: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 200,
    x0: np.ndarray | None = None,
) -> CGResult:
    """Solve ``op(x) = rhs`` for a Hermitian positive definite ``op``.

    Returns the best iterate (smallest residual) when ``max_iter`` is hit
    before the relative residual drops below ``tol``.

    Raises
    ------
    DivergenceError
        If a residual becomes non-finite or a search direction has
        non-positive curvature, i.e. ``op`` is not positive definite.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rhs = np.asarray(rhs, dtype=np.complex128)
    rhs_norm = norm(rhs)
    if rhs_norm == 0.0:
        return CGResult(np.zeros_like(rhs), True, 0, 0.0)

    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=np.complex128)
    r = rhs - op(x) if x0 is not None else rhs.copy()
    p = r.copy()
    rr = float(np.vdot(r, r).real)
    rel = np.sqrt(rr) / rhs_norm
    best_x, best_rel = x.copy(), rel
    if rel <= tol:
        return CGResult(x, True, 0, rel)

    for it in range(1, max_iter + 1):
        ap = op(p)
        pap = float(np.vdot(p, ap).real)
        if not np.isfinite(pap) or pap <= 0.0:
            raise DivergenceError(f"CG lost positive curvature at iteration {it} (p^H A p = {pap})")
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(np.vdot(r, r).real)
        if not np.isfinite(rr_new):
            raise DivergenceError(f"CG residual became non-finite at iteration {it}")
        rel = np.sqrt(rr_new) / rhs_norm
        if rel < best_rel:
            best_x, best_rel = x, rel
        if rel <= tol:
            return CGResult(x, True, it, rel)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(best_x, False, max_iter, best_rel)


def hermitian_defect(op: LinearOp, shape: tuple[int, ...], rng: "RngStream", n_probes: int = 5) -> float:
    """Largest relative mismatch |<Mx, y> - <x, My>| over random probes."""
    worst = 0.0
    for _ in range(n_probes):
        x = rng.normal_complex(shape)
        y = rng.normal_complex(shape)
        lhs = inner(op(x), y)
        rhs = inner(x, op(y))
        scale = max(abs(lhs), abs(rhs), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


# --------------------------------------------------------------------------
# random streams

class RngStream:
    """Counter-based (Philox) 64-bit stream with Box-Muller normals.

    Identical seeds give bit-identical sequences.  ``spawn(i)`` yields an
    independent sub-stream keyed by ``(seed, i)``.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] | None = None):
        self.seed = int(seed)
        self._key = (self.seed,) if _key is None else _key
        ss = np.random.SeedSequence(list(self._key))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, index: int) -> "RngStream":
        return RngStream(self.seed, _key=self._key + (int(index),))

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def normal(self, size) -> np.ndarray:
        """Standard normal reals via Box-Muller on pairs of uniforms."""
        size = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = rad * np.cos(ang)
        z[1::2] = rad * np.sin(ang)
        return z[:n].reshape(size)

    def normal_complex(self, shape, std: float = 1.0) -> np.ndarray:
        """Complex normals; real and imaginary parts each have variance ``std**2``."""
        shape = tuple(shape)
        z = self.normal(shape + (2,))
        return std * (z[..., 0] + 1j * z[..., 1])

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def gaussian_grid(rng: RngStream, h: int, w: int, std: float) -> np.ndarray:
    """Complex ``h x w`` grid of i.i.d. Gaussian entries (per-part variance ``std**2``)."""
    if std < 0:
        raise ValueError("std must be non-negative")
    return rng.normal_complex((h, w), std)
