from dataclasses import replace

import numpy as np
import pytest

from deepen import io
from deepen.grid import RngStream
from deepen.langevin import LangevinConfig
from deepen.nn import Denoiser, EnergyNet, MuseEnergy
from deepen.phantoms import AcquisitionSpec, Dataset
from oracles import kink_margin
from deepen.train import (AdamState, TrainConfig, TrainingAborted, adam_update, deepen_train_step,
                          denoiser_train_step, dsm_train_step, ml_gradient, toy_config, train_deepen,
                          train_denoiser, train_dsm)

ACQ = AcquisitionSpec(size=16, acs_lines=4)
TINY = TrainConfig(batch_size=2, epochs=2, learning_rate=1e-3, width=4,
                   langevin=LangevinConfig(n_iter=3))


@pytest.fixture(scope="module")
def data():
    return Dataset.generate(4, ACQ, seed=5)


def params_equal(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


class TestAdam:
    def test_pure(self):
        p = [np.ones(3)]
        g = [np.array([1.0, -2.0, 0.0])]
        s = AdamState.zeros(p)
        p1, s1 = adam_update(p, g, s, TINY)
        p2, s2 = adam_update(p, g, s, TINY)
        assert np.array_equal(p1[0], p2[0]) and s.step == 0 and s1.step == 1
        assert np.all(p[0] == 1)

    def test_first_step_is_signed_lr(self):
        p, g = [np.zeros(3)], [np.array([0.5, -3.0, 0.0])]
        p1, _ = adam_update(p, g, AdamState.zeros(p), TINY)
        np.testing.assert_allclose(p1[0], [-1e-3, 1e-3, 0.0], atol=1e-10)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.beta1, cfg.beta2, cfg.learning_rate) == (0.9, 0.999, 1e-4)
        assert cfg.data_noise_std == pytest.approx(2 * 0.01 ** 2)


class TestDeepenStep:
    def test_zero_learning_rate(self, data):
        net = EnergyNet.init(RngStream(0), width=4)
        before = net.copy()
        cfg = replace(TINY, learning_rate=0.0)
        net, _, rec = deepen_train_step(net, AdamState.zeros(net.params()), data.images[:2], data.operator,
                                        cfg, RngStream(1))
        assert params_equal(net, before) and rec["skipped"] == 0

    def test_identical_fakes_cancel(self, data):
        net = EnergyNet.init(RngStream(0), width=4, head_std=0.1)
        x = data.images[:2]
        g = ml_gradient(net, x, x.copy())
        assert all(np.all(a == 0) for a in g)

    @pytest.mark.parametrize("reg", [0.0, 0.3])
    def test_frozen_fake_finite_differences(self, data, reg):
        # probe points are re-drawn until every ReLU and the head sum sit away from their kinks
        for t in range(50):
            rng = RngStream(3).spawn(t)
            net = EnergyNet.init(rng, width=4, head_std=0.3)
            x_pos = data.images[:2, :8, :8] + rng.normal_complex((2, 8, 8), 0.05)
            x_neg = rng.normal_complex((3, 8, 8), 0.3)
            if min(kink_margin(net, x) for x in np.concatenate([x_pos, x_neg])) > 1e-4:
                break
        g = ml_gradient(net, x_pos, x_neg, energy_reg=reg)

        def objective():
            ep, en = net.energy(x_pos), net.energy(x_neg)
            return np.mean(ep) - np.mean(en) + reg * (np.mean(ep ** 2) + np.mean(en ** 2))

        params = net.params()
        for _ in range(20):
            k = int(rng.integers(0, len(params)))
            idx = tuple(int(rng.integers(0, n)) for n in params[k].shape)
            old = params[k][idx]
            params[k][idx] = old + 1e-5
            fp = objective()
            params[k][idx] = old - 1e-5
            fm = objective()
            params[k][idx] = old
            fd = (fp - fm) / 2e-5
            assert abs(fd - g[k][idx]) / max(abs(fd), 1e-5) < 1e-4

    def test_divergent_chain_skips(self, data):
        net = EnergyNet.init(RngStream(0), width=4, head_std=1e3)
        state = AdamState.zeros(net.params())
        before = net.copy()
        cfg = replace(TINY, langevin=LangevinConfig(n_iter=20))
        net, state2, rec = deepen_train_step(net, state, data.images[:2], data.operator, cfg, RngStream(1))
        assert rec["skipped"] == 1 and params_equal(net, before) and state2 is state

    def test_abort_when_most_steps_skip(self, data):
        net = EnergyNet.init(RngStream(0), width=4, head_std=1e3)
        with pytest.raises(TrainingAborted):
            train_deepen(data, replace(TINY, langevin=LangevinConfig(n_iter=20)), net=net)

    def test_injected_fakes(self, data):
        net = EnergyNet.init(RngStream(0), width=4, head_std=0.1)
        fakes = RngStream(9).normal_complex((2, 16, 16), 0.1)
        _, _, rec = deepen_train_step(net, AdamState.zeros(net.params()), data.images[:2], data.operator,
                                      TINY, RngStream(1), x_fake=fakes)
        assert np.isfinite(rec["gap"]) and rec["grad_norm"] > 0


class TestSchedule:
    def test_learning_rate_at(self):
        cfg = TrainConfig(learning_rate=1e-3, lr_milestones=(2, 5), lr_gamma=0.5)
        assert [cfg.learning_rate_at(e) for e in range(7)] == pytest.approx(
            [1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 2.5e-4, 2.5e-4], rel=1e-15)
        assert TrainConfig(learning_rate=1e-3).learning_rate_at(100) == 1e-3

    def test_explicit_lr_overrides_config(self):
        p = [np.ones(3)]
        g = [np.full(3, 0.5)]
        a, _ = adam_update(p, g, AdamState.zeros(p), replace(TINY, learning_rate=2e-3))
        b, _ = adam_update(p, g, AdamState.zeros(p), TINY, lr=2e-3)
        assert np.array_equal(a[0], b[0])

    @pytest.mark.parametrize("kw", [dict(lr_gamma=0.0), dict(lr_milestones=(-1,))])
    def test_rejects_bad_schedule(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_meta_records_schedule(self):
        from deepen.train import checkpoint_meta
        meta = checkpoint_meta(toy_config(), "deepen")
        assert meta["lr_milestones"] == [10] and meta["lr_gamma"] == 0.1


class TestTrainDeepen:
    def test_deterministic(self, data):
        a, _, la = train_deepen(data, TINY)
        b, _, lb = train_deepen(data, TINY)
        assert params_equal(a, b)
        assert np.array_equal(la.column("gap"), lb.column("gap"))

    def test_resume_from_checkpoint(self, data, tmp_path):
        full, _, _ = train_deepen(data, TINY)
        ckpt = tmp_path / "c.dpen"
        train_deepen(data, replace(TINY, epochs=1), checkpoint=str(ckpt))
        net, _, state = io.load_checkpoint(ckpt)
        assert state.step == 2
        resumed, _, log = train_deepen(data, TINY, net=net, state=state)
        assert params_equal(full, resumed)
        assert [r["step"] for r in log.records] == [2, 3]

    def test_resume_across_lr_milestone(self, data, tmp_path):
        cfg = replace(TINY, lr_milestones=(1,), lr_gamma=0.1)
        full, _, _ = train_deepen(data, cfg)
        ckpt = tmp_path / "c.dpen"
        train_deepen(data, replace(cfg, epochs=1), checkpoint=str(ckpt))
        net, _, state = io.load_checkpoint(ckpt)
        resumed, _, _ = train_deepen(data, cfg, net=net, state=state)
        assert params_equal(full, resumed)
        assert not params_equal(full, train_deepen(data, TINY)[0])

    def test_log_csv(self, data, tmp_path):
        _, _, log = train_deepen(data, TINY, log_csv=str(tmp_path / "log.csv"))
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,e_true,e_fake,gap,grad_norm,skipped"
        assert len(lines) == 1 + 4

    def test_toy_profile(self):
        cfg = toy_config()
        assert cfg.epochs == 30 and cfg.batch_size == 10
        assert cfg.langevin.n_iter == 100 and cfg.langevin.scaled


class TestBaselines:
    def test_dsm_zero_lr(self, data):
        net = MuseEnergy.init(RngStream(0), width=4)
        before = net.copy()
        cfg = replace(TINY, learning_rate=0.0)
        dsm_train_step(net, AdamState.zeros(net.params()), data.images[:2], (0.0, 0.1), cfg, RngStream(0))
        assert params_equal(net, before)

    def test_dsm_sigma_range_validated(self, data):
        net = MuseEnergy.init(RngStream(0), width=4)
        with pytest.raises(ValueError):
            dsm_train_step(net, AdamState.zeros(net.params()), data.images[:2], (0.1, 0.1), TINY, RngStream(0))

    def test_dsm_loss_decreases(self, data):
        cfg = replace(TINY, epochs=15, learning_rate=3e-3)
        _, _, log = train_dsm(data, cfg)
        loss = log.column("loss")
        assert loss[-4:].mean() < loss[:4].mean()

    def test_denoiser_identity_zero_noise(self, data):
        den = Denoiser.init(RngStream(0), width=4)
        loss, _ = den.loss_and_grad(data.images[:2], data.images[:2])
        assert loss == 0.0
        d2, _, loss2 = denoiser_train_step(den, AdamState.zeros(den.params()), data.images[:2], 0.0, TINY,
                                           RngStream(0))
        assert loss2 == 0.0

    def test_denoiser_deterministic(self, data):
        a, _, _ = train_denoiser(data, TINY)
        b, _, _ = train_denoiser(data, TINY)
        assert params_equal(a, b)
