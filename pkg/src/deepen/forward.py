"""Multicoil Cartesian forward model ``A = S F C`` and synthetic acquisition setups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InfeasibleError
from .grid import RngStream, cg_solve, fft2, ifft2, is_pow2

MASK_KINDS = ("1d", "2d")


@dataclass(frozen=True)
class SamplingMask:
    """Binary k-space sampling pattern with a fully sampled center block."""

    kind: str
    pattern: np.ndarray  # bool, (H, W); DC at (H//2, W//2)
    acs_lines: int = 0

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        pat = np.asarray(self.pattern, dtype=bool)
        if pat.ndim != 2 or not pat.any():
            raise ValueError("mask pattern must be a non-empty 2D array")
        object.__setattr__(self, "pattern", pat)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pattern.shape

    @property
    def acceleration(self) -> float:
        return self.pattern.size / float(self.pattern.sum())

    @property
    def n_sampled(self) -> int:
        return int(self.pattern.sum())

    def acs_region(self) -> tuple[slice, slice]:
        """Index slices of the autocalibration block."""
        h, w = self.shape
        a = self.acs_lines
        rows = slice(h // 2 - a // 2, h // 2 - a // 2 + a) if self.kind == "2d" else slice(0, h)
        cols = slice(w // 2 - a // 2, w // 2 - a // 2 + a)
        return rows, cols

    def acs_band(self) -> np.ndarray:
        """Boolean map of the ACS-supported low-frequency band (a centered a x a block)."""
        h, w = self.shape
        a = self.acs_lines
        band = np.zeros((h, w), dtype=bool)
        band[h // 2 - a // 2: h // 2 - a // 2 + a, w // 2 - a // 2: w // 2 - a // 2 + a] = True
        return band


@dataclass(frozen=True)
class CoilSensitivities:
    maps: np.ndarray  # complex, (coils, H, W)

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.complex128)
        if maps.ndim != 3:
            raise DimensionError("coil maps must have shape (coils, H, W)")
        object.__setattr__(self, "maps", maps)

    @property
    def num_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]

    def sos_defect(self) -> float:
        return float(np.max(np.abs(np.sum(np.abs(self.maps) ** 2, axis=0) - 1.0)))


@dataclass(frozen=True)
class ForwardOperator:
    """``A x = [mask * fft2(C_i * x)]_i`` with measurement noise level ``noise_std``."""

    mask: SamplingMask
    csm: CoilSensitivities
    noise_std: float = 0.0

    def __post_init__(self):
        if self.mask.shape != self.csm.shape:
            raise DimensionError(f"mask {self.mask.shape} and coil maps {self.csm.shape} disagree")
        if not (self.noise_std >= 0 and np.isfinite(self.noise_std)):
            raise ValueError("noise_std must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def _check_image(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128)
        if x.shape[-2:] != self.shape:
            raise DimensionError(f"image shape {x.shape[-2:]} does not match operator {self.shape}")
        return x

    def _check_kspace(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.complex128)
        if y.ndim < 3 or y.shape[-3:] != (self.csm.num_coils,) + self.shape:
            raise DimensionError(
                f"k-space shape {y.shape} does not match ({self.csm.num_coils}, {self.shape})"
            )
        return y

    def A(self, x: np.ndarray) -> np.ndarray:
        x = self._check_image(x)
        coil_images = self.csm.maps * x[..., None, :, :]
        return self.mask.pattern * fft2(coil_images)

    def AH(self, y: np.ndarray) -> np.ndarray:
        y = self._check_kspace(y)
        return np.sum(np.conj(self.csm.maps) * ifft2(self.mask.pattern * y), axis=-3)

    def normal(self, x: np.ndarray) -> np.ndarray:
        """``A^H A x``."""
        return self.AH(self.A(x))

    def data_gradient(self, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        """``A^H (A x - b)``, the gradient of ``0.5 ||A x - b||^2``."""
        return self.AH(self.A(x) - b)

    def with_mask(self, mask: SamplingMask) -> "ForwardOperator":
        return ForwardOperator(mask, self.csm, self.noise_std)


def apply_A(op: ForwardOperator, x: np.ndarray) -> np.ndarray:
    return op.A(x)


def apply_AH(op: ForwardOperator, y: np.ndarray) -> np.ndarray:
    return op.AH(y)


def simulate_measurements(op: ForwardOperator, x: np.ndarray, rng: RngStream) -> np.ndarray:
    """``b = A x + n`` with complex Gaussian noise on sampled entries only."""
    b = op.A(x)
    if op.noise_std > 0:
        b = b + op.mask.pattern * rng.normal_complex(b.shape, op.noise_std)
    return b


def sense_init(op: ForwardOperator, b: np.ndarray, lam: float = 1e-2,
               tol: float = 1e-8, max_iter: int = 200) -> np.ndarray:
    """Regularized least squares ``(A^H A + lam I)^{-1} A^H b`` via CG."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    rhs = op.AH(b)
    return cg_solve(lambda v: op.normal(v) + lam * v, rhs, tol=tol, max_iter=max_iter).x


def _weighted_choice(rng: RngStream, weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of ``k`` draws without replacement (Gumbel top-k)."""
    if k <= 0:
        return np.zeros(0, dtype=np.intp)
    u = rng.uniform(weights.shape)
    keys = np.log(weights) - np.log(-np.log1p(-u))
    return np.argsort(-keys, kind="stable")[:k]


def gen_mask(kind: str, h: int, w: int, acceleration: float, acs_lines: int,
             rng: RngStream) -> SamplingMask:
    """Variable-density random mask with a fully sampled ACS block.

    ``1d`` masks sample whole k-space columns with Gaussian density over the
    column index; ``2d`` masks sample individual points with a density that
    decays with radius.  The number of samples is fixed to
    ``round(h * w / acceleration)`` so the achieved acceleration matches up
    to rounding.
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    if acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    if not 0 <= acs_lines < min(h, w) / 2:
        raise ValueError("acs_lines must satisfy 0 <= acs_lines < min(h, w) / 2")
    if acceleration == 1:
        return SamplingMask(kind, np.ones((h, w), dtype=bool), acs_lines)

    pattern = np.zeros((h, w), dtype=bool)
    c0 = w // 2 - acs_lines // 2
    if kind == "1d":
        target = int(round(w / acceleration))
        if target < acs_lines or target < 1:
            raise InfeasibleError(f"acceleration {acceleration} leaves {target} columns; ACS needs {acs_lines}")
        cols = np.zeros(w, dtype=bool)
        cols[c0:c0 + acs_lines] = True
        free = np.flatnonzero(~cols)
        dist = free - w / 2
        weights = np.exp(-0.5 * (dist / (w / 4.0)) ** 2)
        cols[free[_weighted_choice(rng, weights, target - acs_lines)]] = True
        pattern[:, cols] = True
    else:
        target = int(round(h * w / acceleration))
        if target < acs_lines ** 2 or target < 1:
            raise InfeasibleError(f"acceleration {acceleration} leaves {target} samples; ACS needs {acs_lines ** 2}")
        r0 = h // 2 - acs_lines // 2
        pattern[r0:r0 + acs_lines, c0:c0 + acs_lines] = True
        free = np.flatnonzero(~pattern.ravel())
        ky, kx = np.divmod(free, w)
        rad = np.hypot((ky - h / 2) / h, (kx - w / 2) / w)
        weights = 1.0 / (1.0 + (rad / 0.1) ** 2)
        pattern.ravel()[free[_weighted_choice(rng, weights, target - acs_lines ** 2)]] = True
    return SamplingMask(kind, pattern, acs_lines)


def gen_csm(num_coils: int, h: int, w: int, rng: RngStream) -> CoilSensitivities:
    """Smooth synthetic coil profiles, sum-of-squares normalized per pixel.

    Coil ``i`` is a broad Gaussian bump centered on a ring around the field
    of view with a slowly varying linear phase.
    """
    if num_coils < 1:
        raise ValueError("num_coils must be >= 1")
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    offset = rng.uniform() * 2 * np.pi
    maps = np.empty((num_coils, h, w), dtype=np.complex128)
    for i in range(num_coils):
        ang = offset + 2 * np.pi * i / num_coils
        cy, cx = 1.2 * np.sin(ang), 1.2 * np.cos(ang)
        width = 1.0 + 0.3 * rng.uniform()
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        py, px, p0 = rng.uniform(3) * np.array([1.0, 1.0, 2 * np.pi]) - np.array([0.5, 0.5, 0.0])
        maps[i] = mag * np.exp(1j * (p0 + py * yy + px * xx))
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSensitivities(maps / sos)


def make_operator(h: int, w: int, coils: int, mask_kind: str, acceleration: float,
                  acs_lines: int, noise_std: float, mask_seed: int, csm_seed: int) -> ForwardOperator:
    """Build a forward operator from seeds (the dataset descriptor form)."""
    if not (is_pow2(h) and is_pow2(w)):
        raise DimensionError("image dimensions must be powers of two")
    mask = gen_mask(mask_kind, h, w, acceleration, acs_lines, RngStream(mask_seed))
    csm = gen_csm(coils, h, w, RngStream(csm_seed))
    return ForwardOperator(mask, csm, noise_std)
