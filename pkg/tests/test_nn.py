import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_gradient_rel_error, planted_windows
from icu_lstm import nn
from icu_lstm.preprocess import ChannelGrid, ChannelStats, LabeledWindow


def zero_grid(frame=6, fill=0.0):
    return ChannelGrid("z", frame, np.full((frame, 11), fill), np.ones((frame, 11), bool))


def zero_model(task=nn.BINARY, hidden=4, frame=6):
    head = nn.HeadParams.zeros(nn.TASK_CLASSES[task], hidden)
    return nn.TrainedModel(nn.LstmParams.zeros(hidden), head,
                           ChannelStats(np.zeros(11), np.ones(11)), task, frame, [],
                           nn.ModelConfig(hidden_units=hidden, epochs=1))


class TestCell:
    def test_all_zero(self):
        p = nn.LstmParams.zeros(3, 2)
        h, c, _ = nn.lstm_cell_forward(np.zeros(2), np.zeros(3), np.zeros(3), p)
        assert (h == 0).all() and (c == 0).all()

    def test_scalar_oracle(self):
        p = nn.LstmParams(np.full((4, 1), 0.5), np.full((4, 1), 0.5), np.full(4, 0.5))
        h, c, _ = nn.lstm_cell_forward(np.ones(1), np.zeros(1), np.zeros(1), p)
        # every gate sees 0.5*1 + 0.5*0 + 0.5 = 1
        sig = 1.0 / (1.0 + math.exp(-1.0))
        c_ref = sig * math.tanh(1.0)
        h_ref = sig * math.tanh(c_ref)
        assert abs(c[0] - c_ref) < 1e-12 and abs(h[0] - h_ref) < 1e-12

    def test_forget_saturation(self):
        H = 5
        p = nn.LstmParams.zeros(H, 3)
        p.b[H:2 * H] = 20.0
        c0 = np.linspace(-2, 2, H)
        h, c, _ = nn.lstm_cell_forward(np.zeros(3), np.zeros(H), c0, p)
        assert np.all(np.abs(c - c0) <= 1e-6 * np.abs(c0) + 1e-300)

    def test_saturation_over_sequence(self):
        H = 4
        p = nn.LstmParams.zeros(H, 2)
        p.b[H:2 * H] = 20.0
        c = c0 = np.full(H, 1.5)
        h = np.zeros(H)
        for _ in range(24):
            h, c, _ = nn.lstm_cell_forward(np.zeros(2), h, c, p)
        assert np.max(np.abs(c - c0)) < 1e-6

    @pytest.mark.parametrize("x, h, c", [((3,), (4,), (4,)), ((2,), (5,), (5,)),
                                         ((2,), (4,), (3,))])
    def test_shape_mismatch(self, x, h, c):
        with pytest.raises(ValueError):
            nn.lstm_cell_forward(np.zeros(x), np.zeros(h), np.zeros(c), nn.LstmParams.zeros(4, 2))

    def test_inconsistent_params(self):
        with pytest.raises(ValueError):
            nn.LstmParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))

    def test_gate_views(self):
        p = nn.LstmParams(np.arange(8.0).reshape(8, 1), np.zeros((8, 2)), np.arange(8.0))
        assert p.gate("f")[2].tolist() == [2.0, 3.0]
        assert p.gate("g")[0].ravel().tolist() == [6.0, 7.0]


class TestForward:
    def test_zero_binary(self):
        p, _ = nn.forward_sequence(zero_grid(), nn.LstmParams.zeros(4), nn.HeadParams.zeros(1, 4))
        assert p == 0.5

    def test_zero_multiclass(self):
        p, _ = nn.forward_sequence(zero_grid(), nn.LstmParams.zeros(4), nn.HeadParams.zeros(4, 4))
        assert p.tolist() == [0.25] * 4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([6, 12]))
    def test_probability_ranges(self, seed, frame):
        rng = np.random.default_rng(seed)
        X = rng.normal(0, 3, (5, frame, 11))
        lstm, head4 = nn.init_params(6, 4, rng)
        _, head1 = nn.init_params(6, 1, rng)
        P, _ = nn.forward_batch(X, lstm, head4)
        assert np.all(np.abs(P.sum(axis=1) - 1.0) < 1e-12)
        p, _ = nn.forward_batch(X, lstm, head1)
        assert np.all((p > 0) & (p < 1))

    def test_sequence_matches_batch(self, rng):
        lstm, head = nn.init_params(5, 1, rng)
        X = rng.normal(size=(3, 6, 11))
        batch, _ = nn.forward_batch(X, lstm, head)
        for k in range(3):
            single, _ = nn.forward_sequence(ChannelGrid("s", 6, X[k], np.ones((6, 11), bool)),
                                            lstm, head)
            assert abs(single - batch[k]) < 1e-14

    def test_non_finite_input_diverges(self):
        grid = zero_grid()
        X = grid.values.copy()[None]
        X[0, 0, 0] = np.nan
        lstm, head = nn.init_params(3, 1, np.random.default_rng(0))
        with pytest.raises(nn.TrainingDiverged):
            nn.forward_batch(X, lstm, head)


class TestLoss:
    def test_examples(self):
        assert nn.loss(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
        assert nn.loss(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-12)
        assert nn.loss(1.0, 1) <= 1e-11
        assert nn.loss(0.0, 1) == pytest.approx(-math.log(1e-12))

    def test_batch_mean(self):
        assert nn.loss(np.array([0.5, 0.5]), np.array([1, 0])) == pytest.approx(math.log(2))
        P = np.array([[0.7, 0.1, 0.1, 0.1], [0.25] * 4])
        assert nn.loss(P, np.array([0, 3])) == pytest.approx((-math.log(0.7) + math.log(4)) / 2)

    def test_rank_mismatch(self):
        with pytest.raises(ValueError):
            nn.loss(np.zeros((2, 2, 2)), 1)


class TestBackward:
    def test_finite_differences_seed42(self):
        assert max_gradient_rel_error(42, 8, 6) < 1e-4

    def test_finite_differences_multiclass(self):
        assert max_gradient_rel_error(7, 4, 6, n_out=4) < 1e-4

    def test_dropout_mask_gradient(self, rng):
        lstm, head = nn.init_params(4, 1, rng, inputs=3)
        X = rng.normal(size=(2, 5, 3))
        y = np.array([1.0, 0.0])
        mask = nn.dropout_mask(rng, (2, 4), 0.5)
        _, cache = nn.forward_batch(X, lstm, head, mask)
        _, gh = nn.backward_bptt(cache, y)
        eps = 1e-6
        for idx in np.ndindex(head.V.shape):
            keep = head.V[idx]
            head.V[idx] = keep + eps
            up = nn.loss(nn.forward_batch(X, lstm, head, mask)[0], y)
            head.V[idx] = keep - eps
            down = nn.loss(nn.forward_batch(X, lstm, head, mask)[0], y)
            head.V[idx] = keep
            assert gh.V[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-10)

    def test_zero_upstream_error(self):
        # zero weights make p = sigmoid(0) = 0.5 exactly; a label of 0.5 leaves no error
        lstm, head = nn.LstmParams.zeros(3, 2), nn.HeadParams.zeros(1, 3)
        _, cache = nn.forward_batch(np.ones((1, 4, 2)), lstm, head)
        _, gh = nn.backward_bptt(cache, np.array([0.5]))
        assert gh.c[0] == 0.0

    def test_loss_scale_doubles(self, rng):
        lstm, head = nn.init_params(5, 4, rng, inputs=3)
        X = rng.normal(size=(4, 6, 3))
        y = np.array([0, 1, 3, 2])
        _, cache = nn.forward_batch(X, lstm, head)
        one = nn.param_dict(*nn.backward_bptt(cache, y))
        two = nn.param_dict(*nn.backward_bptt(cache, y, loss_scale=2.0))
        for k in one:
            assert np.array_equal(two[k], 2.0 * one[k])

    def test_gradient_shapes(self, rng):
        lstm, head = nn.init_params(3, 1, rng)
        _, cache = nn.forward_batch(rng.normal(size=(2, 6, 11)), lstm, head)
        g_lstm, g_head = nn.backward_bptt(cache, np.array([0.0, 1.0]))
        for k, v in nn.param_dict(g_lstm, g_head).items():
            assert v.shape == nn.param_dict(lstm, head)[k].shape


class TestAdam:
    def params(self):
        return {"w": np.array([1.0, -2.0, 3.0]), "b": np.array([0.5])}

    def test_zero_gradient(self):
        params = self.params()
        state = nn.AdamState.zeros_like(params)
        new, state = nn.adam_step(params, {k: np.zeros_like(v) for k, v in params.items()},
                                  state, 1e-3)
        assert all(np.array_equal(new[k], params[k]) for k in params)
        assert state.step == 1

    @pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 100.0])
    def test_first_step_magnitude(self, g):
        params = self.params()
        grads = {k: np.full_like(v, g) for k, v in params.items()}
        new, _ = nn.adam_step(params, grads, nn.AdamState.zeros_like(params), 1e-3)
        # bias-corrected first step is lr * |g| / (|g| + eps)
        expected = 1e-3 * abs(g) / (abs(g) + 1e-8)
        for k in params:
            step = np.abs(new[k] - params[k])
            assert np.all(np.abs(step - expected) <= 1e-9 * expected)
            assert np.all(np.sign(params[k] - new[k]) == np.sign(g))
            if abs(g) >= 1e-2:
                assert np.all(np.abs(step - 1e-3) <= 1e-6 * 1e-3)

    def test_deterministic(self):
        params = self.params()
        grads = {k: np.full_like(v, 0.3) for k, v in params.items()}
        a = nn.adam_step(params, grads, nn.AdamState.zeros_like(params), 1e-2)
        b = nn.adam_step(params, grads, nn.AdamState.zeros_like(params), 1e-2)
        assert all(np.array_equal(a[0][k], b[0][k]) for k in params)

    def test_shape_mismatch(self):
        params = self.params()
        with pytest.raises(ValueError):
            nn.adam_step(params, {"w": np.zeros(2), "b": np.zeros(1)},
                         nn.AdamState.zeros_like(params), 1e-3)


class TestClipAndDropout:
    def test_clip_below_threshold_untouched(self):
        grads = {"a": np.array([3.0, 0.0])}
        out, norm = nn.clip_global_norm(grads, 5.0)
        assert out is grads and norm == 3.0

    def test_clip_scales_to_norm(self):
        out, norm = nn.clip_global_norm({"a": np.array([6.0, 8.0]), "b": np.zeros(3)}, 5.0)
        assert norm == 10.0
        assert out["a"].tolist() == [3.0, 4.0]

    def test_clip_non_finite(self):
        with pytest.raises(nn.TrainingDiverged):
            nn.clip_global_norm({"a": np.array([np.inf])})

    def test_dropout_statistics(self):
        mask = nn.dropout_mask(np.random.default_rng(2024), 100_000, 0.2)
        kept = float(np.mean(mask > 0))
        assert 0.795 <= kept <= 0.805
        assert abs(mask.mean() - 1.0) < 0.01
        assert set(np.unique(mask)) == {0.0, 1.25}

    def test_rate_zero_identity(self):
        assert (nn.dropout_mask(np.random.default_rng(0), (3, 4), 0.0) == 1.0).all()


class TestConfig:
    @pytest.mark.parametrize("kw", [{"dropout_rate": 1.0}, {"dropout_rate": -0.1},
                                    {"epochs": 0}, {"hidden_units": 0}, {"batch_size": 0},
                                    {"folds": 0}, {"learning_rate": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            nn.ModelConfig(**kw)

    def test_defaults(self):
        cfg = nn.ModelConfig()
        assert (cfg.hidden_units, cfg.dropout_rate, cfg.learning_rate, cfg.epochs,
                cfg.batch_size, cfg.folds) == (64, 0.2, 1e-3, 60, 100, 3)

    def test_init(self):
        lstm, head = nn.init_params(16, 1, np.random.default_rng(0))
        assert np.abs(lstm.W).max() <= 0.25 and np.abs(lstm.U).max() <= 0.25
        assert (lstm.gate("f")[2] == 1.0).all()
        assert (lstm.gate("i")[2] == 0.0).all() and (head.c == 0).all()


class TestTrain:
    def test_overfit_small_set(self, planted20):
        windows, stats = planted20
        model = nn.train(windows, nn.BINARY, nn.ModelConfig(hidden_units=16, epochs=200,
                                                            batch_size=10, seed=1), stats)
        assert model.training_log[-1] < 0.05
        assert len(model.training_log) == 200

    def test_deterministic(self, planted20):
        windows, stats = planted20
        cfg = nn.ModelConfig(hidden_units=8, epochs=3, batch_size=7, seed=4)
        assert nn.train(windows, nn.BINARY, cfg, stats) == nn.train(windows, nn.BINARY, cfg, stats)

    def test_seed_matters(self, planted20):
        windows, stats = planted20
        a = nn.train(windows, nn.BINARY, nn.ModelConfig(hidden_units=8, epochs=2, seed=0), stats)
        b = nn.train(windows, nn.BINARY, nn.ModelConfig(hidden_units=8, epochs=2, seed=1), stats)
        assert a != b

    def test_single_epoch_log(self, planted20):
        windows, stats = planted20
        model = nn.train(windows, nn.BINARY, nn.ModelConfig(hidden_units=4, epochs=1), stats)
        assert len(model.training_log) == 1 and model.stats == stats

    def test_loss_decreases_over_default_epochs(self):
        windows, stats = planted_windows(200, seed=11)
        model = nn.train(windows, nn.BINARY, nn.ModelConfig(hidden_units=16, seed=2), stats)
        assert model.training_log[59] < model.training_log[0]

    def test_multiclass(self, planted20):
        windows, _ = planted20
        los = [LabeledWindow(w.grid, 1, k % 4) for k, w in enumerate(windows)]
        model = nn.train(los, nn.MULTICLASS, nn.ModelConfig(hidden_units=8, epochs=2))
        assert model.head.n_out == 4
        assert nn.predict(model, los[0].grid).shape == (4,)

    def test_multiclass_needs_los(self, planted20):
        windows, _ = planted20
        with pytest.raises(ValueError):
            nn.train(windows, nn.MULTICLASS, nn.ModelConfig(epochs=1))

    def test_empty(self):
        with pytest.raises(ValueError):
            nn.train([], nn.BINARY, nn.ModelConfig())

    def test_mixed_frames(self):
        ws = [LabeledWindow(zero_grid(6), 0), LabeledWindow(zero_grid(12), 1)]
        with pytest.raises(ValueError):
            nn.train(ws, nn.BINARY, nn.ModelConfig(epochs=1))


class TestPredict:
    def test_zero_model_binary(self):
        model = zero_model()
        p = nn.predict(model, zero_grid())
        assert p == 0.5 and nn.decide(p) == 1

    def test_zero_model_multiclass(self):
        p = nn.predict(zero_model(nn.MULTICLASS), zero_grid())
        assert p.tolist() == [0.25] * 4 and nn.decide(p) == 0

    def test_repeatable(self, rng):
        lstm, head = nn.init_params(4, 1, rng)
        model = zero_model()
        model.lstm, model.head = lstm, head
        grid = ChannelGrid("g", 6, rng.normal(size=(6, 11)), np.ones((6, 11), bool))
        assert nn.predict(model, grid) == nn.predict(model, grid)

    def test_frame_mismatch(self):
        with pytest.raises(ValueError, match="frame"):
            nn.predict(zero_model(frame=6), zero_grid(12))

    @pytest.mark.parametrize("probs, task, expected", [
        ([0.5, 0.49, 0.9], nn.BINARY, [1, 0, 1]),
        ([[0.25] * 4, [0.1, 0.2, 0.3, 0.4], [0.4, 0.4, 0.1, 0.1]], nn.MULTICLASS, [0, 3, 0]),
    ])
    def test_decide_batch(self, probs, task, expected):
        assert nn.decide_batch(probs, task).tolist() == expected


class TestSerialization:
    def test_round_trip_exact(self, planted20, tmp_path):
        windows, stats = planted20
        model = nn.train(windows, nn.BINARY, nn.ModelConfig(hidden_units=6, epochs=2), stats)
        nn.save_model(model, tmp_path / "m.json")
        back = nn.load_model(tmp_path / "m.json")
        assert back == model
        g = windows[3].grid
        assert nn.predict(back, g) == nn.predict(model, g)

    def test_bad_format(self):
        with pytest.raises(ValueError):
            nn.model_from_dict({"format": "other/1"})
