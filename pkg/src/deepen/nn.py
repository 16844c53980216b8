"""Small fixed-architecture convolutional networks with hand-written backprop.

Images enter as complex ``(..., H, W)`` grids and are split into two real
channels (real, imaginary).  Activations are held as ``(C, L)`` float64
arrays over a zero-bordered ``(B, H+2, W+2)`` raster flattened into ``L``;
a 3x3 tap is then a constant offset along ``L``, so each convolution is
one matrix product followed by nine shifted row additions.

Three models share the :class:`ConvNet` trunk:

* :class:`EnergyNet` -- the learned energy ``E(x) = |sum_p head . trunk(x)_p|``,
* :class:`MuseEnergy` -- the DSM baseline ``E(x) = 0.5 ||x - psi(x)||^2``,
* :class:`Denoiser` -- the residual Gaussian denoiser used by PnP-ISTA.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionError
from .grid import RngStream

DEFAULT_WIDTH = 64
DEFAULT_DEPTH = 5


# --------------------------------------------------------------------------
# padded raster geometry and conv primitives

@dataclass(frozen=True)
class Geom:
    batch: int
    height: int
    width: int

    @property
    def wp(self) -> int:
        return self.width + 2

    @property
    def length(self) -> int:
        return self.batch * (self.height + 2) * (self.width + 2)

    @property
    def span(self) -> tuple[int, int]:
        # every interior index q satisfies span[0] <= q < span[1]
        return self.wp + 1, self.length - self.wp - 1

    def offsets(self) -> list[int]:
        return [(i - 1) * self.wp + (j - 1) for i in range(3) for j in range(3)]

    @property
    def interior(self) -> np.ndarray:
        return _interior(self.batch, self.height, self.width)


@lru_cache(maxsize=64)
def _interior(b: int, h: int, w: int) -> np.ndarray:
    m = np.zeros((b, h + 2, w + 2))
    m[:, 1:-1, 1:-1] = 1.0
    m = m.reshape(1, -1)
    m.flags.writeable = False
    return m


def _zero_border(a: np.ndarray, geom: Geom) -> None:
    v = a.reshape(a.shape[0], geom.batch, geom.height + 2, geom.wp)
    v[:, :, 0] = 0.0
    v[:, :, -1] = 0.0
    v[:, :, :, 0] = 0.0
    v[:, :, :, -1] = 0.0


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, geom: Geom) -> np.ndarray:
    """3x3 zero-padded convolution (cross-correlation) of padded activations.

    ``x`` is ``(C_in, L)``, ``w`` is ``(3, 3, C_in, C_out)``; the result is
    ``(C_out, L)`` with a zero border.
    """
    cin, cout = w.shape[2], w.shape[3]
    s, e = geom.span
    y = (w.transpose(0, 1, 3, 2).reshape(9 * cout, cin) @ x).reshape(9, cout, -1)
    out = np.zeros((cout, x.shape[1]))
    acc = out[:, s:e]
    for k, off in enumerate(geom.offsets()):
        acc += y[k, :, s + off:e + off]
    if b is not None:
        acc += b[:, None]
    _zero_border(out, geom)
    return out


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, geom: Geom) -> np.ndarray:
    """Adjoint of ``x -> conv2d(x, w, None)`` applied to a zero-bordered cotangent."""
    cin, cout = w.shape[2], w.shape[3]
    s, e = geom.span
    z = (w.reshape(9 * cin, cout) @ g).reshape(9, cin, -1)
    out = np.zeros((cin, g.shape[1]))
    acc = out[:, s:e]
    for k, off in enumerate(geom.offsets()):
        acc += z[k, :, s - off:e - off]
    _zero_border(out, geom)
    return out


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, geom: Geom) -> np.ndarray:
    """Gradient of ``<g, conv2d(x, w)>`` w.r.t. ``w``."""
    s, e = geom.span
    gs = g[:, s:e]
    out = np.empty((9, x.shape[0], g.shape[0]))
    for k, off in enumerate(geom.offsets()):
        out[k] = x[:, s + off:e + off] @ gs.T
    return out.reshape(3, 3, x.shape[0], g.shape[0])


def to_channels(x: np.ndarray) -> tuple[np.ndarray, Geom]:
    """Complex ``(..., H, W)`` -> padded real ``(2, L)`` activations and their geometry."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise DimensionError("expected an image of shape (..., H, W)")
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise DimensionError("image too small for 3x3 convolutions")
    x = x.reshape(-1, h, w)
    geom = Geom(x.shape[0], h, w)
    a = np.zeros((2, x.shape[0], h + 2, w + 2))
    a[0, :, 1:-1, 1:-1] = x.real
    a[1, :, 1:-1, 1:-1] = x.imag
    return a.reshape(2, -1), geom


def from_channels(a: np.ndarray, geom: Geom, lead: tuple[int, ...]) -> np.ndarray:
    a = a.reshape(2, geom.batch, geom.height + 2, geom.width + 2)[:, :, 1:-1, 1:-1]
    return (a[0] + 1j * a[1]).reshape(lead + (geom.height, geom.width))


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")


# --------------------------------------------------------------------------
# trunk

@dataclass
class Tape:
    """Cached activations of one forward pass."""

    geom: Geom
    inputs: list  # padded input of each layer
    masks: list  # ReLU masks of hidden layers
    out: np.ndarray
    pre_head: np.ndarray | None = None
    lead: tuple = ()

    @property
    def x(self) -> np.ndarray:
        return self.inputs[0]


@dataclass
class ConvNet:
    """Stack of 3x3 convolutions with ReLU between layers (none after the last)."""

    weights: list
    biases: list

    @classmethod
    def init(cls, channels: list[int], rng: RngStream, last_scale: float = 1.0) -> "ConvNet":
        weights, biases = [], []
        n = len(channels) - 1
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            std = np.sqrt(2.0 / (9 * cin))
            if i == n - 1:
                std *= last_scale
            weights.append(std * rng.normal((3, 3, cin, cout)))
            biases.append(np.zeros(cout))
        return cls(weights, biases)

    @property
    def channels(self) -> list[int]:
        return [self.weights[0].shape[2]] + [w.shape[3] for w in self.weights]

    def forward(self, x: np.ndarray, geom: Geom) -> Tape:
        inputs, masks = [], []
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = conv2d(h, w, b, geom)
            if i < n - 1:
                m = a > 0
                masks.append(m)
                h = a * m
            else:
                h = a
        return Tape(geom, inputs, masks, h)

    def backward(self, tape: Tape, g_out: np.ndarray, param_grads: bool = True):
        """Reverse pass. Returns ``(grad_input, [gW...], [gb...])``."""
        n = len(self.weights)
        gws, gbs = [None] * n, [None] * n
        g = g_out
        for i in range(n - 1, -1, -1):
            if param_grads:
                gws[i] = conv2d_weight_grad(tape.inputs[i], g, tape.geom)
                gbs[i] = g.sum(axis=1)
            g = conv2d_input_grad(g, self.weights[i], tape.geom)
            if i > 0:
                g = g * tape.masks[i - 1]
        return g, gws, gbs

    def vjp_chain(self, tape: Tape, g_out: np.ndarray) -> list:
        """Intermediate cotangents of :meth:`backward` (no parameter grads).

        Element ``i < n`` is the cotangent w.r.t. the pre-activation of layer
        ``i``; element ``n`` is the input cotangent.
        """
        n = len(self.weights)
        gs = [None] * (n + 1)
        g = g_out
        gs[n - 1] = g
        for i in range(n - 1, -1, -1):
            g = conv2d_input_grad(g, self.weights[i], tape.geom)
            if i > 0:
                g = g * tape.masks[i - 1]
                gs[i - 1] = g
        gs[n] = g
        return gs

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ConvNet":
        return ConvNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])


# --------------------------------------------------------------------------
# models

def _prep(x):
    x = np.asarray(x, dtype=np.complex128)
    _check_finite(x)
    a, geom = to_channels(x)
    return x.shape[:-2], a, geom


def _out(vals: np.ndarray, lead: tuple[int, ...]):
    vals = vals.reshape(lead)
    return float(vals) if lead == () else vals


def _per_image_sum(a: np.ndarray, geom: Geom) -> np.ndarray:
    """``(C, L)`` -> ``(C, B)`` spatial sums (borders are zero)."""
    return a.reshape(a.shape[0], geom.batch, -1).sum(axis=2)


def _spread(v: np.ndarray, geom: Geom) -> np.ndarray:
    """Per-image values ``(B,)`` -> ``(1, L)`` over interior pixels."""
    return np.repeat(v, geom.length // geom.batch)[None, :] * geom.interior


def _pack(gws: list, gbs: list) -> list:
    grads = []
    for gw, gb in zip(gws, gbs):
        grads += [gw, gb]
    return grads


@dataclass
class EnergyNet:
    """Learned energy ``E(x) = |sum_{p,c} head_c * trunk(x)[c, p]|``.

    The 1x1 head followed by a global spatial sum keeps the model fully
    convolutional. ``E >= 0`` by construction.
    """

    trunk: ConvNet
    head: np.ndarray
    kind: str = field(default="deepen", init=False)

    @classmethod
    def init(cls, rng: RngStream, width: int = DEFAULT_WIDTH, depth: int = DEFAULT_DEPTH,
             head_std: float = 1e-2) -> "EnergyNet":
        trunk = ConvNet.init([2] + [width] * depth, rng)
        return cls(trunk, head_std * rng.normal(width))

    @classmethod
    def zeros(cls, width: int = 4, depth: int = DEFAULT_DEPTH) -> "EnergyNet":
        chans = [2] + [width] * depth
        trunk = ConvNet([np.zeros((3, 3, a, b)) for a, b in zip(chans[:-1], chans[1:])],
                        [np.zeros(b) for b in chans[1:]])
        return cls(trunk, np.zeros(width))

    @property
    def width(self) -> int:
        return self.head.shape[0]

    def params(self) -> list:
        return self.trunk.params() + [self.head]

    def set_params(self, params: list) -> None:
        n = len(self.trunk.weights)
        self.trunk.weights = list(params[0:2 * n:2])
        self.trunk.biases = list(params[1:2 * n:2])
        self.head = params[2 * n]

    def copy(self) -> "EnergyNet":
        return EnergyNet(self.trunk.copy(), self.head.copy())

    def forward(self, x):
        """Energy per image and the tape needed for gradients."""
        lead, a, geom = _prep(x)
        tape = self.trunk.forward(a, geom)
        tape.pre_head = self.head @ _per_image_sum(tape.out, geom)
        tape.lead = lead
        return _out(np.abs(tape.pre_head), lead), tape

    def energy(self, x):
        return self.forward(x)[0]

    def _out_cotangent(self, tape: Tape, weights) -> np.ndarray:
        ds = np.sign(tape.pre_head) * weights
        return self.head[:, None] * _spread(ds, tape.geom)

    def energy_and_score(self, x):
        e, tape = self.forward(x)
        g = self._out_cotangent(tape, 1.0)
        gin, _, _ = self.trunk.backward(tape, g, param_grads=False)
        return e, from_channels(gin, tape.geom, tape.lead)

    def score(self, x) -> np.ndarray:
        """Gradient of the energy w.r.t. the image, as a complex grid.

        The absolute value differentiates as ``sign(s)`` with ``sign(0) = 0``.
        """
        return self.energy_and_score(x)[1]

    def param_grad_from_tape(self, tape: Tape, weights) -> list:
        """``sum_b weights[b] * grad_theta E(x_b)`` for the batch recorded in ``tape``."""
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), tape.pre_head.shape)
        ds = np.sign(tape.pre_head) * w
        g_out = self.head[:, None] * _spread(ds, tape.geom)
        g_head = _per_image_sum(tape.out, tape.geom) @ ds
        _, gws, gbs = self.trunk.backward(tape, g_out, param_grads=True)
        return _pack(gws, gbs) + [g_head]


@dataclass
class MuseEnergy:
    """DSM-trained baseline energy ``E(x) = 0.5 ||x - psi(x)||^2``.

    ``psi(x) = x - f(x)`` with ``f`` a plain conv stack, so ``E = 0.5 ||f(x)||^2``
    and the score is ``J_f(x)^T f(x)``.
    """

    f: ConvNet
    kind: str = field(default="muse", init=False)

    @classmethod
    def init(cls, rng: RngStream, width: int = DEFAULT_WIDTH, depth: int = DEFAULT_DEPTH) -> "MuseEnergy":
        return cls(ConvNet.init([2] + [width] * (depth - 1) + [2], rng, last_scale=0.1))

    @property
    def width(self) -> int:
        return self.f.channels[1]

    def params(self) -> list:
        return self.f.params()

    def set_params(self, params: list) -> None:
        self.f.weights = list(params[0::2])
        self.f.biases = list(params[1::2])

    def copy(self) -> "MuseEnergy":
        return MuseEnergy(self.f.copy())

    def energy(self, x):
        lead, a, geom = _prep(x)
        r = self.f.forward(a, geom).out
        return _out(0.5 * _per_image_sum(r * r, geom).sum(axis=0), lead)

    def energy_and_score(self, x):
        lead, a, geom = _prep(x)
        tape = self.f.forward(a, geom)
        r = tape.out
        gin, _, _ = self.f.backward(tape, r, param_grads=False)
        e = 0.5 * _per_image_sum(r * r, geom).sum(axis=0)
        return _out(e, lead), from_channels(gin, geom, lead)

    def score(self, x) -> np.ndarray:
        return self.energy_and_score(x)[1]

    def dsm_loss_and_grad(self, x_noisy: np.ndarray, noise: np.ndarray, sigma):
        """Batch mean of ``||sigma * score(x_noisy) - noise||^2`` and its parameter gradient.

        The score is itself a reverse pass, so the parameter gradient runs a
        second reverse sweep over that pass with the ReLU masks held fixed.
        """
        _, a, geom = _prep(x_noisy)
        nz, _ = to_channels(np.asarray(noise, dtype=np.complex128))
        sig = _spread(np.broadcast_to(np.asarray(sigma, dtype=np.float64), (geom.batch,)), geom)
        net = self.f
        n = len(net.weights)
        tape = net.forward(a, geom)
        gs = net.vjp_chain(tape, tape.out)
        resid = sig * gs[n] - nz
        loss = float(np.sum(resid * resid)) / geom.batch
        delta = 2.0 * sig * resid / geom.batch

        gws = [None] * n
        # score = W_0^T m_0 W_1^T ... W_{n-1}^T f: sweep it forward in layer order
        gbar_h = delta
        for i in range(n):
            gws[i] = conv2d_weight_grad(gbar_h, gs[i], geom)
            gbar = conv2d(gbar_h, net.weights[i], None, geom)
            if i < n - 1:
                gbar_h = gbar * tape.masks[i]
        # gbar now holds the cotangent on f(x)
        _, fw, fb = net.backward(tape, gbar, param_grads=True)
        return loss, _pack([gw + f for gw, f in zip(gws, fw)], fb)


@dataclass
class Denoiser:
    """Residual denoiser ``D(x) = x - f(x)``; identity when the last layer is zero."""

    f: ConvNet
    kind: str = field(default="denoiser", init=False)

    @classmethod
    def init(cls, rng: RngStream, width: int = DEFAULT_WIDTH, depth: int = DEFAULT_DEPTH) -> "Denoiser":
        net = ConvNet.init([2] + [width] * (depth - 1) + [2], rng)
        net.weights[-1] = np.zeros_like(net.weights[-1])
        return cls(net)

    @property
    def width(self) -> int:
        return self.f.channels[1]

    def params(self) -> list:
        return self.f.params()

    def set_params(self, params: list) -> None:
        self.f.weights = list(params[0::2])
        self.f.biases = list(params[1::2])

    def copy(self) -> "Denoiser":
        return Denoiser(self.f.copy())

    def __call__(self, x) -> np.ndarray:
        lead, a, geom = _prep(x)
        return np.asarray(x, dtype=np.complex128) - from_channels(self.f.forward(a, geom).out, geom, lead)

    def loss_and_grad(self, x_noisy: np.ndarray, x_clean: np.ndarray):
        """Batch mean of ``||D(x_noisy) - x_clean||^2`` and its gradient."""
        _, a, geom = _prep(x_noisy)
        c, _ = to_channels(np.asarray(x_clean, dtype=np.complex128))
        tape = self.f.forward(a, geom)
        resid = a - tape.out - c
        loss = float(np.sum(resid * resid)) / geom.batch
        _, gws, gbs = self.f.backward(tape, -2.0 * resid / geom.batch, param_grads=True)
        return loss, _pack(gws, gbs)


class QuadraticEnergy:
    """``E(x) = c ||x||^2``; an analytic stand-in for solver tests."""

    kind = "quadratic"

    def __init__(self, c: float):
        self.c = float(c)

    def energy(self, x):
        x = np.asarray(x, dtype=np.complex128)
        v = self.c * np.sum(np.abs(x) ** 2, axis=(-2, -1))
        return float(v) if np.ndim(v) == 0 else v

    def score(self, x):
        return 2.0 * self.c * np.asarray(x, dtype=np.complex128)

    def energy_and_score(self, x):
        return self.energy(x), self.score(x)


class ZeroEnergy(QuadraticEnergy):
    kind = "zero"

    def __init__(self):
        super().__init__(0.0)


# --------------------------------------------------------------------------
# functional surface

def energy(net, x, return_tape: bool = False):
    """Energy of ``x`` under ``net``; optionally also the forward tape."""
    if return_tape:
        if not isinstance(net, EnergyNet):
            raise TypeError("tapes are only recorded for EnergyNet")
        return net.forward(x)
    return net.energy(x)


def score(net, x) -> np.ndarray:
    return net.score(x)


def zero_grads(net) -> list:
    return [np.zeros_like(p) for p in net.params()]


def param_grad(net: EnergyNet, x, sign: float, accumulator: list, tape: Tape | None = None) -> list:
    """Accumulate ``sign * grad_theta E(x)`` into ``accumulator`` (in place) and return it."""
    x = np.asarray(x, dtype=np.complex128)
    a, _ = to_channels(x)
    if tape is None:
        _, tape = net.forward(x)
    elif tape.x.shape != a.shape or not np.array_equal(tape.x, a):
        raise ValueError("tape does not match the given input")
    grads = net.param_grad_from_tape(tape, sign)
    for acc, g in zip(accumulator, grads):
        acc += g
    return accumulator


def n_params(net) -> int:
    return int(sum(p.size for p in net.params()))
