import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salcnn import data as D
from salcnn import model as M
from salcnn import train as T
from salcnn.dsp import ConfigurationError
from salcnn.numerics import DimensionError

SMALL = M.ModelConfig(lstm_hidden=6, frames=5, bins=8, sequence_window=3)


class TestLoss:
    def test_examples(self):
        assert T.l1_loss(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
        assert T.l1_loss(np.array([2.0, 4.0]), np.array([1.0, 1.0])) == 2.0

    def test_backward_signs(self):
        g = T.l1_loss_backward(np.array([2.0, 0.0, 5.0, 1.0]), np.array([1.0, 1.0, 5.0, 3.0]))
        np.testing.assert_array_equal(g, [0.25, -0.25, 0.0, -0.25])

    def test_backward_matches_difference_quotient(self, rng):
        p, t = rng.standard_normal(6), rng.standard_normal(6)
        g = T.l1_loss_backward(p, t)
        for i in range(6):
            d = np.zeros(6)
            d[i] = 1e-6
            fd = (T.l1_loss(p + d, t) - T.l1_loss(p - d, t)) / 2e-6
            assert fd == pytest.approx(g[i], abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.l1_loss(np.zeros(2), np.zeros(3))


class TestMae:
    def test_worked_example(self):
        assert T.mae([10.0, 20.0], [12.0, 18.0]) == 2.0

    def test_errors(self):
        with pytest.raises(DimensionError, match="2 actual vs 3 predicted"):
            T.mae([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            T.mae([], [])

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=20))
    def test_symmetric_nonnegative(self, pairs):
        a = [x for x, _ in pairs]
        p = [y for _, y in pairs]
        m = T.mae(a, p)
        assert m >= 0.0
        assert m == T.mae(p, a)
        assert T.mae(a, a) == 0.0


def _scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return theta


class TestAdam:
    def test_matches_scalar_recurrence(self, rng):
        p = M.build(SMALL, seed=1)
        start = p.head.b[0]
        cfg = T.TrainConfig(learning_rate=0.01)
        state = T.AdamState.zeros_like(p)
        seq = [0.3, -1.2, 2.0, 0.05]
        for g in seq:
            grads = {n: np.zeros_like(a) for n, a in p.named_arrays()}
            grads["head.b"][0] = g
            T.adam_step(p, grads, state, cfg)
        assert p.head.b[0] == pytest.approx(_scalar_adam(start, seq, 0.01), abs=1e-14)
        assert state.t == 4

    def test_first_step_moves_by_lr(self):
        p = M.build(SMALL)
        w0 = p.head.w.copy()
        grads = {n: np.ones_like(a) for n, a in p.named_arrays()}
        T.adam_step(p, grads, T.AdamState.zeros_like(p), T.TrainConfig(learning_rate=1e-3))
        np.testing.assert_allclose(p.head.w, w0 - 1e-3, atol=1e-10)

    def test_zero_lr_is_identity(self, rng):
        p = M.build(SMALL)
        before = [a.copy() for _, a in p.named_arrays()]
        grads = {n: rng.standard_normal(a.shape) for n, a in p.named_arrays()}
        T.adam_step(p, grads, T.AdamState.zeros_like(p), T.TrainConfig(learning_rate=0.0))
        for (_, a), b in zip(p.named_arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_nan_gradient_rejected(self):
        p = M.build(SMALL)
        grads = {n: np.zeros_like(a) for n, a in p.named_arrays()}
        grads["cbam.mlp_w1"][0, 0] = np.nan
        with pytest.raises(T.TrainingDivergedError, match="cbam.mlp_w1"):
            T.adam_step(p, grads, T.AdamState.zeros_like(p), T.TrainConfig())


class TestConfig:
    def test_validation(self):
        for bad in ({"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1}, {"precision": "f16"}, {"dropout": 1.0}):
            with pytest.raises(ConfigurationError):
                T.TrainConfig(**bad)

    def test_dtype(self):
        assert T.TrainConfig(precision="f32").dtype == np.float32


def _toy(rng, n=24):
    x = rng.random((n, 3, 5, 8))
    y = 100 * x.mean(axis=(1, 2, 3))
    return x, y


class TestTrain:
    def test_loss_decreases(self, rng):
        x, y = _toy(rng)
        p = M.build(SMALL, seed=0)
        res = T.train(p, (x, y), T.TrainConfig(epochs=40, batch_size=8, learning_rate=1e-2, dropout=0.0))
        assert len(res.loss_history) == 40
        assert res.loss_history[-1] < 0.5 * res.loss_history[0]

    def test_deterministic(self, rng):
        x, y = _toy(rng)
        cfg = T.TrainConfig(epochs=3, batch_size=5)
        a = T.train(M.build(SMALL, seed=2), (x, y), cfg)
        b = T.train(M.build(SMALL, seed=2), (x, y), cfg)
        assert a.loss_history == b.loss_history
        for (_, u), (_, v) in zip(a.params.named_arrays(), b.params.named_arrays()):
            np.testing.assert_array_equal(u, v)

    def test_epoch_callback(self, rng):
        seen = []
        T.train(M.build(SMALL), _toy(rng, 4), T.TrainConfig(epochs=2), on_epoch=lambda e, l: seen.append(e))
        assert seen == [1, 2]

    def test_divergence(self, rng):
        x, y = _toy(rng, 4)
        y[0] = np.inf
        with pytest.raises(T.TrainingDivergedError, match="epoch 1"):
            T.train(M.build(SMALL), (x, y), T.TrainConfig(epochs=1))

    def test_empty(self):
        with pytest.raises(ValueError):
            T.train(M.build(SMALL), [], T.TrainConfig(epochs=1))

    def test_predict_batches(self, rng):
        p = M.build(SMALL)
        x, _ = _toy(rng, 10)
        np.testing.assert_allclose(T.predict(p, x, batch_size=3), M.forward(p, x), atol=1e-12)


def _fleet(n_runs=3, life=8):
    return D.synth_fleet(per_condition=(n_runs,), life_n=life)


def _perfect(train_samples, test_samples):
    return lambda samples: [s.label_rul_pct for s in samples]


class TestLoocv:
    def test_perfect_predictor(self):
        rep = T.evaluate_loocv(_fleet(), fit=_perfect)
        assert list(rep.per_bearing) == ["Bearing1_1", "Bearing1_2", "Bearing1_3"]
        assert all(v == 0.0 for v in rep.per_bearing.values())
        assert rep.mean_mae == 0.0

    def test_constant_predictor_mae(self):
        rep = T.evaluate_loocv(_fleet(life=9), fit=lambda tr, te: (lambda s: [50.0] * len(s)))
        # labels for W=5 over 9 recordings: 50, 37.5, 25, 12.5, 0
        assert rep.per_bearing["Bearing1_1"] == pytest.approx(np.mean([0, 12.5, 25, 37.5, 50]))

    def test_held_out_bearing_never_seen(self):
        seen = []

        def fit(train_samples, test_samples):
            seen.append(({s.bearing_id for s in train_samples}, {s.bearing_id for s in test_samples}))
            return _perfect(train_samples, test_samples)

        T.evaluate_loocv(_fleet(), fit=fit)
        for train_ids, test_ids in seen:
            assert len(test_ids) == 1 and not (train_ids & test_ids)

    def test_stats_from_training_split(self):
        runs = _fleet()
        # a loud held-out bearing must not stretch the training range
        loud = D.BearingRun("Bearing1_3", runs[2].condition, [D.Recording(r.samples * 1000, r.timestamp) for r in runs[2].recordings])
        runs[2] = loud
        maxima = {}

        def fit(train_samples, test_samples):
            held = test_samples[0].bearing_id
            maxima[held] = (max(s.window.max() for s in train_samples), max(s.window.max() for s in test_samples))
            return _perfect(train_samples, test_samples)

        T.evaluate_loocv(runs, fit=fit)
        assert maxima["Bearing1_3"][0] == 1.0 and maxima["Bearing1_3"][1] > 100

    def test_csv_report(self, tmp_path):
        rep = T.evaluate_loocv(_fleet(), fit=_perfect)
        rep.to_csv(tmp_path / "mae.csv")
        lines = (tmp_path / "mae.csv").read_text().splitlines()
        assert lines[0] == "bearing,mae" and len(lines) == 1 + 3 + 1
        assert lines[-1] == "mean,0.0"
        rep.series_to_csv("Bearing1_2", tmp_path / "s.csv")
        rows = (tmp_path / "s.csv").read_text().splitlines()
        assert rows[0] == "timestamp_s,actual_rul_pct,predicted_rul_pct" and len(rows) == 1 + 4

    def test_short_bearing_skipped(self):
        runs = _fleet()
        runs[1] = D.BearingRun("Bearing1_2", runs[1].condition, runs[1].recordings[:3])
        rep = T.evaluate_loocv(runs, fit=_perfect)
        assert rep.skipped == ["Bearing1_2"] and len(rep.per_bearing) == 2

    def test_needs_two_bearings(self):
        with pytest.raises(ValueError, match="at least 2"):
            T.evaluate_loocv(_fleet(n_runs=1), fit=_perfect)

    def test_real_training_fold(self):
        runs = _fleet(n_runs=2, life=7)
        rep = T.evaluate_loocv(runs, T.TrainConfig(epochs=2), M.ModelConfig(lstm_hidden=4, lstm_layers=1))
        assert set(rep.loss_histories) == {"Bearing1_1", "Bearing1_2"}
        assert all(len(h) == 2 for h in rep.loss_histories.values())
        assert all(np.isfinite(v) for v in rep.per_bearing.values())
