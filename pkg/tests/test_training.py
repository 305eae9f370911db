import math

import numpy as np
import pytest

from petnet.data import Dataset, generate_phantoms, make_dataset
from petnet.errors import ConfigError, ShapeError
from petnet.network import backward, build_toy_cnn, forward
from petnet.rng import Stream
from petnet.training import (
    TrainConfig, compute_loss, dataset_loss, dice, evaluate, fused_head, metrics_from_outputs,
    sgd_step, threshold, train,
)

from conftest import randn


def toy_data(n=16, seed=0, head="sigmoid"):
    samples = generate_phantoms(n, 16, 16, seed=seed, balanced=True)
    return make_dataset(samples, "classification", head=head, classes=2)


class TestLosses:
    def test_mse_examples(self):
        assert compute_loss("mse", np.array([2.0]), np.array([0.0]))[0] == 4.0
        p = randn((3, 4))
        value, grad = compute_loss("mse", p, p.copy())
        assert value == 0.0 and not grad.any()

    def test_mse_gradient(self):
        p, t = randn((2, 3)), randn((2, 3), 1)
        assert np.allclose(compute_loss("mse", p, t)[1], 2 * (p - t) / 6, rtol=0, atol=1e-15)

    def test_cross_entropy_uniform(self):
        t = np.eye(4)[[0, 3, 1]]
        value, grad = compute_loss("cross_entropy", np.full((3, 4), 0.25), t)
        assert math.isclose(value, math.log(4), rel_tol=0, abs_tol=1e-15)
        assert np.allclose(grad, (0.25 - t) / 3)

    def test_cross_entropy_rejects_non_onehot(self):
        with pytest.raises(ShapeError):
            compute_loss("cross_entropy", np.full((1, 2), 0.5), np.array([[0.5, 0.6]]))

    def test_entropy_at_optimum(self):
        t = np.eye(3)[[0, 2]]
        value, grad = compute_loss("cross_entropy", t.copy(), t)
        assert value <= 1e-11 and not grad.any()
        t = np.array([[1.0], [0.0]])
        value, grad = compute_loss("binary_cross_entropy", t.copy(), t)
        assert value <= 1e-11 and not grad.any()

    def test_bce_value(self):
        value, _ = compute_loss("binary_cross_entropy", np.array([[0.8], [0.3]]), np.array([[1.0], [0.0]]))
        assert math.isclose(value, -(math.log(0.8) + math.log(0.7)) / 2, rel_tol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_loss("mse", np.zeros(3), np.zeros(4))

    def test_head_loss_pairing(self):
        with pytest.raises(ConfigError):
            train(build_toy_cnn(16, 16, head="softmax", classes=2), toy_data(head="softmax"),
                  toy_data(head="softmax"), TrainConfig(loss_kind="binary_cross_entropy"))
        assert fused_head("softmax", "cross_entropy") and not fused_head("linear", "mse")


class TestSgd:
    def test_arithmetic(self):
        w = {"w": np.array([1.0])}
        sgd_step(w, {"w": np.array([2.0])}, 0.5)
        assert w["w"][0] == 0.0

    def test_zero_grad_fixed_point(self):
        w0 = randn((3, 3))
        w = {"w": w0.copy()}
        sgd_step(w, {"w": np.zeros((3, 3))}, 0.1)
        assert np.array_equal(w["w"], w0)

    def test_linearity(self):
        g = np.full(4, 0.25)  # exact in binary, so both paths agree bit for bit
        a, b = {"w": np.ones(4)}, {"w": np.ones(4)}
        sgd_step(a, {"w": g}, 0.5)
        sgd_step(a, {"w": g}, 0.5)
        sgd_step(b, {"w": g}, 1.0)
        assert np.array_equal(a["w"], b["w"])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step({"w": np.ones(3)}, {"w": np.ones(4)}, 0.1)

    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_decreases_loss(self, seed):
        m = build_toy_cnn(8, 8, filters=2, fc_width=4, seed=seed)
        x, t = randn((1, 1, 8, 8), seed + 10), np.array([[float(seed % 2)]])
        out, trace = forward(m, x, mode="train")
        before, grad = compute_loss("binary_cross_entropy", out, t)
        sgd_step(m.parameters(), backward(m, trace, grad, skip_head=True), 1e-4)
        after = compute_loss("binary_cross_entropy", forward(m, x)[0], t)[0]
        assert after < before


class TestTrain:
    def test_iterations_per_epoch(self, monkeypatch):
        import petnet.training as T

        calls = []
        real = T.sgd_step
        monkeypatch.setattr(T, "sgd_step", lambda *a: calls.append(1) or real(*a))
        data = toy_data(16)
        _, report = train(build_toy_cnn(16, 16), data, data, TrainConfig(batch_size=4, max_epochs=2, patience=5))
        assert len(calls) == 8 and report.stopped_epoch == 2

    def test_partial_last_batch(self, monkeypatch):
        import petnet.training as T

        sizes = []
        real = T.compute_loss
        monkeypatch.setattr(T, "compute_loss", lambda k, p, t: sizes.append(len(p)) or real(k, p, t))
        data = toy_data(10)
        train(build_toy_cnn(16, 16), data, data.subset([0]), TrainConfig(batch_size=4, max_epochs=1))
        assert sorted(sizes[:3]) == [2, 4, 4]

    def test_deterministic(self):
        data = toy_data(12)
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=4, seed=3)
        _, a = train(build_toy_cnn(16, 16), data.subset(range(8)), data.subset(range(8, 12)), cfg)
        _, b = train(build_toy_cnn(16, 16), data.subset(range(8)), data.subset(range(8, 12)), cfg)
        assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
        assert a.to_csv() == b.to_csv()

    def test_patience_zero_stops_at_first_non_improvement(self):
        data = toy_data(12)
        _, report = train(build_toy_cnn(16, 16), data.subset(range(8)), data.subset(range(8, 12)),
                          TrainConfig(learning_rate=0.5, batch_size=4, max_epochs=50, patience=0))
        first_bad = next(i for i in range(1, len(report.val_loss))
                         if report.val_loss[i] >= min(report.val_loss[:i]))
        assert report.stopped_epoch == first_bad + 1

    def test_returns_best_epoch_weights(self):
        data = toy_data(24, seed=3)
        best, report = train(build_toy_cnn(16, 16), data.subset(range(8)), data.subset(range(8, 24)),
                             TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=60, patience=3))
        assert report.best_epoch <= report.stopped_epoch
        assert report.best_validation_loss == min(report.val_loss)
        assert dataset_loss(best, data.subset(range(8, 24)), "binary_cross_entropy") == report.best_validation_loss

    def test_batch_larger_than_set(self):
        data = toy_data(4)
        with pytest.raises(ConfigError):
            train(build_toy_cnn(16, 16), data, data, TrainConfig(batch_size=8))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(patience=-1)


class TestMetrics:
    def test_threshold_tie_is_zero(self):
        assert np.array_equal(threshold(np.array([0.5, 0.5000001, 0.4999])), [0.0, 1.0, 0.0])

    def test_dice(self):
        a = np.zeros((4, 4))
        assert dice(a, a) == 1.0
        b = a.copy()
        b[0, :2] = 1
        c = a.copy()
        c[0, 1:3] = 1
        assert dice(b, b) == 1.0
        assert dice(b, c) == 0.5
        assert dice(b, a) == 0.0

    def test_perfect_predictions(self):
        t = np.eye(3)[[0, 1, 2, 1]]
        assert metrics_from_outputs("classification", "softmax", t, t) == {"accuracy": 1.0}
        masks = (randn((2, 1, 4, 4)) > 0).astype(float)
        assert metrics_from_outputs("segmentation", "sigmoid", masks, masks)["dice"] == 1.0
        assert metrics_from_outputs("synthesis", "linear", masks, masks)["mse"] == 0.0

    def test_random_predictor_accuracy(self):
        # Monte-Carlo: seeded coin flips against a balanced label vector
        n = 20000
        labels = np.tile([0.0, 1.0], n // 2)[:, None]
        guesses = Stream(5).uniform(n)[:, None]
        acc = metrics_from_outputs("classification", "sigmoid", guesses, labels)["accuracy"]
        assert abs(acc - 0.5) < 4 * math.sqrt(0.25 / n)

    def test_empty(self):
        with pytest.raises(ConfigError):
            evaluate(build_toy_cnn(16, 16), Dataset(np.zeros((0, 1, 16, 16)), np.zeros((0, 1))))
