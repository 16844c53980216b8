"""Maximum-likelihood training of the posterior energy, and the DSM / denoiser baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError
from .forward import ForwardOperator, simulate_measurements
from .grid import RngStream, norm
from .langevin import LangevinConfig, generate_fake
from .nn import Denoiser, EnergyNet, MuseEnergy
from .phantoms import Dataset

log = logging.getLogger(__name__)


class TrainingAborted(DivergenceError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    epochs: int = 30
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    langevin: LangevinConfig = LangevinConfig()
    seed: int = 0
    width: int = 64
    depth: int = 5
    energy_reg: float = 0.0  # weight of mean(E(x+)^2 + E(x-)^2) in the DEEPEN loss
    lr_milestones: tuple[int, ...] = ()  # epochs at which the learning rate is multiplied by lr_gamma
    lr_gamma: float = 0.1
    sigma_range: tuple[float, float] = (0.0, 0.1)  # DSM noise levels
    denoiser_sigma: float = 0.01

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.energy_reg < 0:
            raise ValueError("energy_reg must be non-negative")
        if not self.lr_gamma > 0 or any(m < 0 for m in self.lr_milestones):
            raise ValueError("lr_gamma must be positive and lr_milestones non-negative")

    def learning_rate_at(self, epoch: int) -> float:
        """Step schedule: ``learning_rate * lr_gamma ** (milestones passed)``."""
        return self.learning_rate * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)

    @property
    def data_noise_std(self) -> float:
        """Std of the Gaussian perturbation of true samples: ``2 eps^2``."""
        return 2.0 * self.langevin.epsilon ** 2


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros(cls, params: list) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def copy(self) -> "AdamState":
        return AdamState(self.step, [a.copy() for a in self.m], [a.copy() for a in self.v])


def adam_update(params: list, grads: list, state: AdamState, cfg: TrainConfig, lr: float | None = None):
    """One bias-corrected adaptive-moment step; returns new ``(params, state)``.

    ``lr`` overrides ``cfg.learning_rate`` (used by the epoch schedule).
    """
    lr = cfg.learning_rate if lr is None else lr
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


def grad_norm(grads: list) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads)))


# --------------------------------------------------------------------------
# DEEPEN

@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    fields: tuple = ("step", "epoch", "e_true", "e_fake", "gap", "grad_norm", "skipped")

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        keys = list(self.fields)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in keys})


def _costs(net, fwd: ForwardOperator, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    r = fwd.A(x) - b
    return 0.5 * np.sum(r.real ** 2 + r.imag ** 2, axis=(-3, -2, -1)) + net.energy(x)


def ml_gradient(net: EnergyNet, x_pos: np.ndarray, x_neg: np.ndarray, energy_reg: float = 0.0) -> list:
    """``mean grad E(x_pos) - mean grad E(x_neg)`` with the fakes treated as constants.

    The two means are formed separately so identical inputs cancel exactly.
    ``energy_reg > 0`` adds the gradient of ``energy_reg * mean(E(x_pos)^2 + E(x_neg)^2)``.
    """
    e_pos, tp = net.forward(x_pos)
    e_neg, tn = net.forward(x_neg)
    n_pos, n_neg = x_pos.shape[0], x_neg.shape[0]
    gp = net.param_grad_from_tape(tp, np.full(n_pos, 1.0 / n_pos))
    gn = net.param_grad_from_tape(tn, np.full(n_neg, 1.0 / n_neg))
    grads = [a - b for a, b in zip(gp, gn)]
    if energy_reg > 0:
        rp = net.param_grad_from_tape(tp, 2 * energy_reg * np.asarray(e_pos) / n_pos)
        rn = net.param_grad_from_tape(tn, 2 * energy_reg * np.asarray(e_neg) / n_neg)
        grads = [g + a + b for g, a, b in zip(grads, rp, rn)]
    return grads


def deepen_train_step(net: EnergyNet, state: AdamState, batch: np.ndarray, fwd: ForwardOperator,
                      cfg: TrainConfig, rng: RngStream, x_fake: np.ndarray | None = None,
                      lr: float | None = None):
    """One ML update from true images ``batch`` (``(B, H, W)``).

    Returns ``(net, state, record)``.  A diverging fake chain skips the
    update and leaves ``net`` and ``state`` untouched.  ``x_fake`` replaces
    the Langevin chains (testing hook).
    """
    bsz = batch.shape[0]
    rngs = [rng.spawn(i) for i in range(bsz)]
    x_pos = np.stack([x + r.normal_complex(x.shape, cfg.data_noise_std) for x, r in zip(batch, rngs)])
    b = np.stack([simulate_measurements(fwd, x, r) for x, r in zip(batch, rngs)])
    rec = {"step": state.step, "skipped": 0}
    if x_fake is None:
        try:
            x_fake = generate_fake(net, fwd, b, cfg.langevin, rngs)
        except DivergenceError as err:
            log.warning("step %d skipped: %s", state.step, err)
            rec.update(e_true=float(np.mean(_costs(net, fwd, b, x_pos))), e_fake=float("nan"),
                       gap=float("nan"), grad_norm=float("nan"), skipped=1)
            return net, state, rec
    grads = ml_gradient(net, x_pos, x_fake, cfg.energy_reg)
    e_true = float(np.mean(_costs(net, fwd, b, x_pos)))
    e_fake = float(np.mean(_costs(net, fwd, b, x_fake)))
    params, state = adam_update(net.params(), grads, state, cfg, lr)
    net.set_params(params)
    rec.update(e_true=e_true, e_fake=e_fake, gap=e_true - e_fake, grad_norm=grad_norm(grads))
    return net, state, rec


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.argsort(RngStream(seed).spawn(1_000_000 + epoch).uniform(n), kind="stable")


def _run_epochs(n_items: int, cfg: TrainConfig, start_step: int, step_fn, on_epoch=None):
    """Shared epoch/batch loop; ``step_fn(indices, step, rng, lr) -> record``."""
    spe = n_items // cfg.batch_size
    if spe == 0:
        raise ValueError("dataset smaller than batch_size")
    root = RngStream(cfg.seed)
    for epoch in range(cfg.epochs):
        if (epoch + 1) * spe <= start_step:
            continue
        order = _epoch_order(cfg.seed, epoch, n_items)
        lr = cfg.learning_rate_at(epoch)
        skipped = 0
        for k in range(spe):
            step = epoch * spe + k
            if step < start_step:
                continue
            rec = step_fn(order[k * cfg.batch_size:(k + 1) * cfg.batch_size], step, root.spawn(step), lr)
            rec["epoch"] = epoch
            skipped += rec.get("skipped", 0)
        if skipped > spe / 2:
            raise TrainingAborted(f"{skipped}/{spe} steps skipped in epoch {epoch}", iteration=epoch)
        if on_epoch is not None:
            on_epoch(epoch)


def train_deepen(dataset: Dataset, cfg: TrainConfig, net: EnergyNet | None = None,
                 state: AdamState | None = None, checkpoint: str | None = None,
                 log_csv: str | None = None, fwd: ForwardOperator | None = None):
    """End-to-end ML training; returns ``(net, state, TrainLog)``.

    Passing the ``net`` and ``state`` from a checkpoint resumes at
    ``state.step``; per-step randomness derives from ``(cfg.seed, step)`` so
    a resumed run reproduces the uninterrupted one.
    """
    fwd = dataset.operator if fwd is None else fwd
    if net is None:
        net = EnergyNet.init(RngStream(cfg.seed).spawn(7), cfg.width, cfg.depth)
    state = AdamState.zeros(net.params()) if state is None else state
    tlog = TrainLog()
    box = {"net": net, "state": state}

    def step_fn(idx, step, rng, lr):
        n, s, rec = deepen_train_step(box["net"], box["state"], dataset.images[idx], fwd, cfg, rng, lr=lr)
        box["net"], box["state"] = n, s
        rec["step"] = step
        tlog.append(rec)
        return rec

    def on_epoch(epoch):
        recs = [r for r in tlog.records if r["epoch"] == epoch and not r["skipped"]]
        if recs:
            log.info("epoch %d: gap %.4g (true %.4g, fake %.4g)", epoch,
                     np.mean([r["gap"] for r in recs]), np.mean([r["e_true"] for r in recs]),
                     np.mean([r["e_fake"] for r in recs]))
        if checkpoint:
            from .io import save_checkpoint
            save_checkpoint(checkpoint, box["net"], meta=checkpoint_meta(cfg, "deepen", epoch), opt=box["state"])

    _run_epochs(len(dataset), cfg, state.step, step_fn, on_epoch)
    if log_csv:
        tlog.to_csv(log_csv)
    return box["net"], box["state"], tlog


def checkpoint_meta(cfg: TrainConfig, mode: str, epoch: int | None = None) -> dict:
    lg = cfg.langevin
    meta = {
        "mode": mode, "epsilon": lg.epsilon, "n_iter": lg.n_iter, "init_std": lg.init_std,
        "learning_rate": cfg.learning_rate, "beta1": cfg.beta1, "beta2": cfg.beta2, "adam_eps": cfg.adam_eps,
        "batch_size": cfg.batch_size, "epochs": cfg.epochs, "seed": cfg.seed, "energy_reg": cfg.energy_reg,
        "lr_milestones": list(cfg.lr_milestones), "lr_gamma": cfg.lr_gamma,
    }
    if epoch is not None:
        meta["epoch"] = epoch
    return meta


# --------------------------------------------------------------------------
# baselines

def dsm_train_step(net: MuseEnergy, state: AdamState, batch: np.ndarray, sigma_range, cfg: TrainConfig,
                   rng: RngStream, lr: float | None = None):
    """One denoising-score-matching update; returns ``(net, state, loss)``.

    ``sigma ~ U(sigma_range)`` per image, clamped below at ``1e-4``.
    """
    lo, hi = sigma_range
    if not 0 <= lo < hi:
        raise ValueError("sigma_range must satisfy 0 <= lo < hi")
    bsz = batch.shape[0]
    sigma = np.maximum(lo + (hi - lo) * rng.uniform(bsz), 1e-4)
    noise = rng.normal_complex(batch.shape)
    x_noisy = batch + sigma[:, None, None] * noise
    loss, grads = net.dsm_loss_and_grad(x_noisy, noise, sigma)
    params, state = adam_update(net.params(), grads, state, cfg, lr)
    net.set_params(params)
    return net, state, loss


def train_dsm(dataset: Dataset, cfg: TrainConfig, net: MuseEnergy | None = None):
    """Train the DSM baseline energy on clean images; returns ``(net, state, TrainLog)``."""
    if net is None:
        net = MuseEnergy.init(RngStream(cfg.seed).spawn(8), cfg.width, cfg.depth)
    box = {"net": net, "state": AdamState.zeros(net.params())}
    tlog = TrainLog(fields=("step", "epoch", "loss"))

    def step_fn(idx, step, rng, lr):
        n, s, loss = dsm_train_step(box["net"], box["state"], dataset.images[idx], cfg.sigma_range, cfg, rng, lr)
        box["net"], box["state"] = n, s
        rec = {"step": step, "loss": float(loss)}
        tlog.append(rec)
        return rec

    _run_epochs(len(dataset), cfg, 0, step_fn)
    return box["net"], box["state"], tlog


def denoiser_train_step(den: Denoiser, state: AdamState, batch: np.ndarray, sigma: float, cfg: TrainConfig,
                        rng: RngStream, lr: float | None = None):
    """One squared-error denoising update at noise level ``sigma``; returns ``(den, state, loss)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x_noisy = batch + rng.normal_complex(batch.shape, sigma)
    loss, grads = den.loss_and_grad(x_noisy, batch)
    params, state = adam_update(den.params(), grads, state, cfg, lr)
    den.set_params(params)
    return den, state, loss


def train_denoiser(dataset: Dataset, cfg: TrainConfig, den: Denoiser | None = None):
    if den is None:
        den = Denoiser.init(RngStream(cfg.seed).spawn(9), cfg.width, cfg.depth)
    box = {"net": den, "state": AdamState.zeros(den.params())}
    tlog = TrainLog(fields=("step", "epoch", "loss"))

    def step_fn(idx, step, rng, lr):
        n, s, loss = denoiser_train_step(box["net"], box["state"], dataset.images[idx], cfg.denoiser_sigma, cfg, rng,
                                         lr)
        box["net"], box["state"] = n, s
        rec = {"step": step, "loss": float(loss)}
        tlog.append(rec)
        return rec

    _run_epochs(len(dataset), cfg, 0, step_fn)
    return box["net"], box["state"], tlog


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale settings used by the acceptance runs."""
    base = TrainConfig(batch_size=10, epochs=30, learning_rate=1e-4, width=16, lr_milestones=(10,), lr_gamma=0.1,
                       langevin=LangevinConfig(epsilon=0.01, n_iter=100, init_std=0.1))
    return replace(base, **overrides)
