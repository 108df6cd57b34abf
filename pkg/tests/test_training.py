"""Training loop, early stopping and checkpoints."""

import math

import numpy as np
import pytest

from step2heart.errors import CohortIOError, ConfigError, InputError, ShapeError
from step2heart.neuralcore.checkpoint import load_checkpoint, save_checkpoint
from step2heart.neuralcore.models import ModelParams, ModelSpec, build_model
from step2heart.neuralcore.training import TrainConfig, fit, predict, train
from step2heart.preprocess import WindowSet


class QuadraticNet:
    """One scalar parameter with loss mean((theta - y)^2).

    Training targets sit at ``a`` and validation targets at ``b``; starting
    at ``theta = b`` every optimiser step toward ``a`` raises the validation
    loss, so the best epoch is the first one.
    """

    def __init__(self, theta0):
        self.theta = np.array([float(theta0)])
        self.params = ModelParams({"theta": self.theta})
        self.nan_after = None
        self.calls = 0

    def loss(self, x, m, y):
        return float(np.mean((self.theta[0] - y) ** 2))

    def loss_and_grads(self, x, m, y):
        self.calls += 1
        g = np.array([2.0 * np.mean(self.theta[0] - y)])
        if self.nan_after is not None and self.calls > self.nan_after:
            g[0] = np.nan
        return self.loss(x, m, y), {"theta": g}


def constant_windows(value, n=8):
    return WindowSet(np.zeros(n), np.zeros((n, 2, 1)), np.zeros((n, 4)), np.full(n, float(value)))


TOY = ModelSpec(window_len=16, conv_filters=4, gru_units=3, metadata_mlp_dim=5, head_hidden_dim=6,
                ae_bottleneck=4, ae_channels=3)


def toy_windows(n, seed, M=4, T=16):
    rng = np.random.default_rng(seed)
    x = rng.random((n, T, 3))
    y = 60.0 + 30.0 * x[:, -4:, :].mean(axis=(1, 2)) + rng.normal(0, 1, n)
    return WindowSet(np.arange(n) % 5, x, rng.random((n, M)), y)


class TestEarlyStopping:
    def test_val_rising_from_epoch_one(self):
        """Patience 5: epochs 2..6 fail to improve, so training stops after epoch 6."""
        net = QuadraticNet(0.0)
        log = fit(net, constant_windows(10.0), constant_windows(0.0),
                  TrainConfig(lr=0.1, batch_size=64, patience=5, max_epochs=300))
        assert log.epochs_run == 6
        assert log.best_epoch == 1
        assert "early stop" in log.stop_reason
        vals = [r.val_loss for r in log.records]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        # one Adam step of size lr from theta = 0
        assert net.theta[0] == pytest.approx(0.1, rel=1e-6)
        assert log.best_val_loss == pytest.approx(0.01, rel=1e-5)

    def test_max_epochs_one(self):
        net = QuadraticNet(0.0)
        log = fit(net, constant_windows(10.0), constant_windows(10.0),
                  TrainConfig(lr=0.1, max_epochs=1, patience=5))
        assert log.epochs_run == 1 and log.best_epoch == 1
        assert "max_epochs" in log.stop_reason

    def test_improving_run_keeps_last_epoch(self):
        net = QuadraticNet(0.0)
        log = fit(net, constant_windows(10.0), constant_windows(10.0),
                  TrainConfig(lr=0.1, max_epochs=20, patience=5))
        assert log.best_epoch == 20
        # twenty Adam steps of at most lr each, all toward the target
        assert 1.9 < net.theta[0] <= 2.0 + 1e-9

    def test_divergence_restores_best(self):
        net = QuadraticNet(0.0)
        net.nan_after = 3
        log = fit(net, constant_windows(10.0), constant_windows(10.0),
                  TrainConfig(lr=0.1, max_epochs=20))
        assert log.stop_reason.startswith("diverged")
        assert log.best_epoch == 3 and log.epochs_run == 3
        assert math.isfinite(net.theta[0])

    def test_empty_sets(self):
        with pytest.raises(InputError):
            fit(QuadraticNet(0.0), constant_windows(1.0, n=0), constant_windows(1.0),
                TrainConfig())

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"batch_size": 0}, {"max_epochs": 0},
                                    {"patience": 1.5}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_log_csv(self, tmp_path):
        net = QuadraticNet(0.0)
        log = fit(net, constant_windows(10.0), constant_windows(0.0), TrainConfig(lr=0.1))
        path = str(tmp_path / "log.csv")
        log.write_csv(path)
        lines = open(path).read().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,wall_seconds"
        assert len(lines) == 1 + log.epochs_run


class TestTrainToy:
    def test_deterministic(self):
        tr, va = toy_windows(40, 0), toy_windows(12, 1)
        cfg = TrainConfig(max_epochs=3, batch_size=16, seed=5)
        a, la = train("step2heart", tr, va, TOY, cfg)
        b, lb = train("step2heart", tr, va, TOY, cfg)
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())
        assert la.losses() == lb.losses()

    def test_loss_falls_and_heads_start_calibrated(self):
        tr, va = toy_windows(64, 2), toy_windows(16, 3)
        net, log = train("step2heart", tr, va, TOY, TrainConfig(max_epochs=15, batch_size=16))
        assert log.records[-1].train_loss < log.records[0].train_loss
        pred = predict(net, va)
        assert pred.shape == (16, 5)
        assert np.all(np.abs(pred - va.y.mean()[None]) < 40)

    def test_autoencoder_trains(self):
        tr, va = toy_windows(32, 4), toy_windows(8, 5)
        net, log = train("autoencoder", tr, va, TOY, TrainConfig(max_epochs=5, batch_size=8))
        assert log.records[-1].train_loss < log.records[0].train_loss

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            train("transformer", toy_windows(4, 0), toy_windows(4, 1), TOY, TrainConfig())


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["step2heart", "autoencoder"])
    def test_round_trip(self, tmp_path, kind):
        spec = ModelSpec(**{**TOY.to_dict(), "use_rhr_input": True})
        net = build_model(kind, spec, seed=3)
        path = str(tmp_path / "ck")
        save_checkpoint(net, path)
        back = load_checkpoint(path, expect_kind=kind)
        assert back.spec == net.spec
        for (n1, a1), (n2, a2) in zip(net.params.items(), back.params.items()):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)
        w = toy_windows(3, 0, M=5)
        np.testing.assert_array_equal(net.embed(w.x, w.m), back.embed(w.x, w.m))

    def test_wrong_kind(self, tmp_path):
        path = str(tmp_path / "ck")
        save_checkpoint(build_model("step2heart", TOY, 0), path)
        with pytest.raises(ShapeError):
            load_checkpoint(path, expect_kind="autoencoder")

    def test_truncated_blob(self, tmp_path):
        path = str(tmp_path / "ck")
        save_checkpoint(build_model("step2heart", TOY, 0), path)
        with open(path + ".bin", "r+b") as fh:
            fh.truncate(64)
        with pytest.raises(CohortIOError, match="truncated"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CohortIOError):
            load_checkpoint(str(tmp_path / "none"))

    def test_little_endian_float64_layout(self, tmp_path):
        net = build_model("step2heart", TOY, 0)
        path = str(tmp_path / "ck")
        save_checkpoint(net, path)
        raw = np.fromfile(path + ".bin", dtype="<f8")
        np.testing.assert_array_equal(raw, net.params.flat())
