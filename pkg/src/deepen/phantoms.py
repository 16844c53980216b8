"""Synthetic complex-valued phantoms and training sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .forward import ForwardOperator, make_operator
from .grid import RngStream, is_pow2


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    n_ellipses: int = 6
    intensity: tuple[float, float] = (0.2, 1.0)
    phase_amplitude: float = 0.5
    seed: int = 0


def gen_phantom(spec: PhantomSpec) -> np.ndarray:
    """Overlapping random ellipses with a smooth phase; magnitudes in ``[0, 1]``.

    The first ellipse is a large "body" whose intensity is drawn from the
    upper half of the intensity range; the rest are smaller inserts that add
    or remove signal.
    """
    if not is_pow2(spec.size):
        raise DimensionError("phantom size must be a power of two")
    n = spec.size
    if spec.n_ellipses == 0:
        return np.zeros((n, n), dtype=np.complex128)
    rng = RngStream(spec.seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")
    lo, hi = spec.intensity
    mag = np.zeros((n, n))
    for k in range(spec.n_ellipses):
        u = rng.uniform(6)
        if k == 0:
            cy, cx = 0.1 * (u[0] - 0.5), 0.1 * (u[1] - 0.5)
            ry, rx = 0.7 + 0.2 * u[2], 0.6 + 0.2 * u[3]
            val = max(0.5, 0.5 * (lo + hi)) + (hi - max(0.5, 0.5 * (lo + hi))) * u[4]
        else:
            cy, cx = 1.0 * (u[0] - 0.5), 1.0 * (u[1] - 0.5)
            ry, rx = 0.08 + 0.25 * u[2], 0.08 + 0.25 * u[3]
            val = (lo + (hi - lo) * u[4]) * (1.0 if u[5] > 0.35 else -0.5)
        th = np.pi * rng.uniform()
        c, s = np.cos(th), np.sin(th)
        dy, dx = yy - cy, xx - cx
        inside = ((c * dx + s * dy) / rx) ** 2 + ((-s * dx + c * dy) / ry) ** 2 <= 1.0
        mag[inside] += val
    mag = np.clip(mag, 0.0, 1.0)
    a, bcoef, ccoef = spec.phase_amplitude * (2 * rng.uniform(3) - 1)
    phase = a * yy + bcoef * xx + ccoef * (xx ** 2 + yy ** 2)
    return mag * np.exp(1j * phase)


@dataclass(frozen=True)
class AcquisitionSpec:
    """Seeds and settings that regenerate a forward operator bit-exactly."""

    size: int = 32
    coils: int = 2
    mask: str = "2d"
    acceleration: float = 4.0
    acs_lines: int = 8
    noise_std: float = 0.01
    mask_seed: int = 1
    csm_seed: int = 2

    def operator(self) -> ForwardOperator:
        return make_operator(self.size, self.size, self.coils, self.mask, self.acceleration,
                             self.acs_lines, self.noise_std, self.mask_seed, self.csm_seed)


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) complex ground truth
    acquisition: AcquisitionSpec
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def operator(self) -> ForwardOperator:
        return self.acquisition.operator()

    @classmethod
    def generate(cls, n_images: int, acquisition: AcquisitionSpec = AcquisitionSpec(), seed: int = 0,
                 n_ellipses: int = 6) -> "Dataset":
        imgs = np.stack([
            gen_phantom(PhantomSpec(acquisition.size, n_ellipses, seed=seed * 1_000_003 + i))
            for i in range(n_images)
        ])
        return cls(imgs, acquisition, seed)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.images[:n_first], self.acquisition, self.seed),
                Dataset(self.images[n_first:], self.acquisition, self.seed))
