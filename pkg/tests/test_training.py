import numpy as np
import pytest

from ibnseg.data import SceneSpec, gen_dataset, stack
from ibnseg.losses import LossConfig
from ibnseg.nn import build_toynet
from ibnseg.training import (OptimConfig, RunLog, TrainingDiverged, batch_order, cross_modality_eval, lr_at,
                             sgd_step, train)

FULL = OptimConfig(warmup_iters=1000, constant_iters=7000, poly_iters=17000)
SHORT = OptimConfig(warmup_iters=3, constant_iters=4, poly_iters=5)


def small_data(n=8, size=16, seed=0):
    samples = list(gen_dataset(SceneSpec(size=(size, size)), n, seed=seed))
    a, y = stack(samples, "A")
    return a, stack(samples, "B")[0], y


class TestSchedule:
    def test_phase_boundaries(self):
        for cfg in (FULL, OptimConfig()):
            w, k = cfg.warmup_iters, cfg.constant_iters
            assert lr_at(cfg, w - 1) == cfg.base_lr
            assert lr_at(cfg, w + k) == cfg.base_lr

    def test_poly_midpoint(self):
        assert lr_at(FULL, 16500) == pytest.approx(0.01 * 0.5 ** 0.9, abs=1e-12)
        assert lr_at(FULL, 16500) == pytest.approx(0.005359, abs=1e-6)

    def test_monotone_phases(self):
        lrs = np.array([lr_at(OptimConfig(), i) for i in range(OptimConfig().total_iters)])
        w, k = 80, 560
        assert np.all(np.diff(lrs[:w]) > 0)
        assert np.all(lrs[w : w + k] == 0.01)
        assert np.all(np.diff(lrs[w + k :]) < 0) and lrs[-1] > 0

    def test_out_of_range(self):
        for it in (-1, SHORT.total_iters):
            with pytest.raises(ValueError):
                lr_at(SHORT, it)

    def test_config_validation(self):
        for bad in ({"base_lr": 0}, {"poly_power": 0}, {"warmup_iters": -1}, {"batch_size": 0}):
            with pytest.raises(ValueError):
                OptimConfig(**bad)


class TestSGD:
    def test_zero_grad_zero_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(p, {"w": np.zeros(2)}, {}, 0.1, OptimConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_momentum_recursion(self):
        p, v = {"w": np.array(0.0)}, {}
        cfg = OptimConfig(weight_decay=0.0, momentum=0.9)
        sgd_step(p, {"w": np.array(1.0)}, v, 0.1, cfg)
        assert p["w"] == pytest.approx(-0.1, abs=1e-15)
        sgd_step(p, {"w": np.array(1.0)}, v, 0.1, cfg)
        assert p["w"] == pytest.approx(-0.29, abs=1e-15)

    def test_decay_only(self):
        p = {"w": np.array(1.0)}
        sgd_step(p, {"w": np.array(0.0)}, {}, 0.1, OptimConfig(momentum=0.0, weight_decay=5e-4))
        assert p["w"] == pytest.approx(0.99995, abs=1e-15)

    def test_vanilla_when_no_momentum_or_decay(self, rng):
        w, g = rng.normal(size=4), rng.normal(size=4)
        p = {"w": w.copy()}
        sgd_step(p, {"w": g}, {}, 0.05, OptimConfig(momentum=0.0, weight_decay=0.0))
        np.testing.assert_array_equal(p["w"], w - 0.05 * g)

    def test_norm_exemption(self):
        p = {"a.gamma": np.array(1.0), "conv.weight": np.array(1.0)}
        g = {k: np.array(0.0) for k in p}
        sgd_step(p, g, {}, 0.1, OptimConfig(momentum=0.0, decay_norm=False))
        assert p["a.gamma"] == 1.0 and p["conv.weight"] < 1.0

    def test_non_finite_names_parameter(self):
        with pytest.raises(TrainingDiverged, match="conv.weight"):
            sgd_step({"conv.weight": np.zeros(2)}, {"conv.weight": np.array([0.0, np.nan])}, {}, 0.1, OptimConfig())


class TestTrain:
    def test_zero_iterations(self):
        a, _, y = small_data(4)
        net = build_toynet("PLAIN_BN", [4], 7, seed=0)
        before = {k: v.copy() for k, v in net.params.items()}
        _, log = train(net, a, y, optim_cfg=OptimConfig(warmup_iters=0, constant_iters=0, poly_iters=0))
        assert log.steps == [] and all(np.array_equal(before[k], net.params[k]) for k in before)

    def test_determinism(self):
        a, _, y = small_data(6)
        runs = []
        for _ in range(2):
            net = build_toynet("IBN_S", [4, 8], 7, seed=3)
            net, log = train(net, a, y, LossConfig(1, 1), SHORT, seed=3)
            runs.append((net, log))
        (n1, l1), (n2, l2) = runs
        assert all(n1.params[k].tobytes() == n2.params[k].tobytes() for k in n1.params)
        assert all(n1.buffers[k].tobytes() == n2.buffers[k].tobytes() for k in n1.buffers)
        assert l1.steps_csv() == l2.steps_csv()

    def test_log_iterations_increase_and_csv_round_trip(self):
        a, b, y = small_data(6)
        net = build_toynet("PLAIN_BN", [4], 7, seed=0)
        _, log = train(net, a, y, optim_cfg=SHORT, val=(b, y), eval_every=4)
        its = [s[0] for s in log.steps]
        assert its == list(range(SHORT.total_iters))
        assert [e[0] for e in log.evals] == [3, 7, 11]
        assert RunLog.read_steps_csv(log.steps_csv()) == log.steps
        assert log.evals_csv().splitlines()[0] == "iter,class,iou"

    def test_divergence_aborts_with_iteration(self):
        a, _, y = small_data(4)
        net = build_toynet("PLAIN_BN", [4], 7, seed=0)
        with pytest.raises(TrainingDiverged) as info:
            train(net, a, y, optim_cfg=OptimConfig(base_lr=1e150, warmup_iters=1, constant_iters=5, poly_iters=0))
        assert info.value.iteration is not None

    def test_batch_order_is_seeded_epoch_permutation(self):
        order = batch_order(10, 5, 4, seed=1)
        assert all(np.array_equal(x, z) for x, z in zip(order, batch_order(10, 5, 4, seed=1)))
        first_epoch = np.concatenate(order[:2])
        assert len(set(first_epoch.tolist())) == 8

    def test_length_mismatch(self):
        a, _, y = small_data(4)
        with pytest.raises(ValueError):
            train(build_toynet("PLAIN_BN", [4], 7), a, y[:3], optim_cfg=SHORT)


class TestCrossModality:
    def test_same_modality_twice(self):
        a, _, y = small_data(6)
        net = build_toynet("PLAIN_BN", [4], 7, seed=0)
        res = cross_modality_eval(net, a, a, y, "A")
        assert res.decay == 0.0 and res.same == res.cross

    def test_untrained_net_reports(self):
        a, b, y = small_data(6)
        res = cross_modality_eval(build_toynet("PLAIN_BN", [4], 7, seed=0), a, b, y, "B")
        assert 0.0 <= res.miou["A"] <= 1.0 and 0.0 <= res.miou["B"] <= 1.0
        assert res.decay == res.miou["B"] - res.miou["A"]

    def test_bad_modality(self):
        a, _, y = small_data(2)
        with pytest.raises(ValueError):
            cross_modality_eval(build_toynet("PLAIN_BN", [4], 7), a, a, y, "C")


def ema(values, window=100):
    alpha = 2.0 / (window + 1)
    out = np.empty_like(values)
    acc = values[0]
    for i, v in enumerate(values):
        acc = alpha * v + (1 - alpha) * acc
        out[i] = acc
    return out


@pytest.fixture(scope="module")
def default_runs():
    samples = list(gen_dataset(SceneSpec(), 200, seed=0))
    a, y = stack(samples, "A")
    logs = []
    for seed in range(5):
        _, log = train(build_toynet("PLAIN_BN", [8, 16], 7, seed=seed), a, y, LossConfig(), OptimConfig(), seed=seed)
        logs.append(log.losses)
    return logs


def test_default_config_loss_decreases(default_runs):
    end = np.median([l[-1] for l in default_runs])
    start = np.median([l[10] for l in default_runs])
    assert end < start


def test_default_config_loss_ema_trend(default_runs):
    for losses in default_runs:
        smooth = ema(losses)
        assert smooth[-1] < smooth[0]
