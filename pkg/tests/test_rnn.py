import math
import warnings

import numpy as np
import pytest

from cryptocorr import rnn
from cryptocorr.errors import DataError, ModelFileError, NumericalError
from cryptocorr.rnn import AdamState, Cell, RnnConfig, RnnModel

from oracles import gradient_relative_errors


def sig(a):
    return 1.0 / (1.0 + math.exp(-a))


def small_model(cell, depth=2, width=4, input_dim=3, seed=0):
    return RnnModel.initialize(RnnConfig(cell, depth, width, input_dim, seed=seed))


class TestShapesAndInit:
    def test_param_shapes(self):
        shapes = rnn.param_shapes(RnnConfig("lstm", depth=2, width=5, input_dim=3))
        assert shapes["l0.Wx"] == (3, 20) and shapes["l1.Wx"] == (5, 20)
        assert shapes["l1.Wh"] == (5, 20) and shapes["out.w"] == (5,)
        assert rnn.param_shapes(RnnConfig("gru", width=5))["l0.b"] == (15,)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RnnConfig("lstm", depth=0)
        with pytest.raises(ValueError):
            RnnConfig("gru", bptt_window=1)
        with pytest.raises(ValueError):
            RnnConfig("rnn")

    def test_initialization(self):
        m = small_model("lstm", width=8, input_dim=2, seed=3)
        assert np.all(np.abs(m.params["l0.Wx"]) <= 1 / math.sqrt(2))
        assert np.all(np.abs(m.params["l1.Wx"]) <= 1 / math.sqrt(8))
        assert not m.params["l0.b"].any()
        again = small_model("lstm", width=8, input_dim=2, seed=3)
        for k in m.params:
            np.testing.assert_array_equal(m.params[k], again.params[k])

    def test_wrong_shapes_rejected(self):
        m = small_model("gru")
        params = dict(m.params, **{"out.w": np.zeros(3)})
        with pytest.raises(ValueError):
            RnnModel(m.config, params)


class TestForward:
    @pytest.mark.parametrize("cell", ["lstm", "gru"])
    def test_zero_parameters_give_zero_output(self, cell):
        model = RnnModel.zeros(RnnConfig(cell, depth=2, width=3, input_dim=2))
        out, cache = rnn.rnn_forward(model, np.random.default_rng(0).normal(size=(5, 2)))
        assert not out.any() and not cache.top_hidden.any()

    def test_hand_traced_lstm(self):
        cfg = RnnConfig("lstm", depth=1, width=1, input_dim=1)
        # gate order: input, forget, output, candidate
        params = {"l0.Wx": np.array([[0.5, -0.3, 0.8, 1.1]]),
                  "l0.Wh": np.array([[0.2, 0.4, -0.6, 0.7]]),
                  "l0.b": np.array([0.1, 0.2, -0.1, 0.05]),
                  "out.w": np.array([1.5]), "out.b": np.array(-0.25)}
        xs = [0.7, -1.2]
        h = c = 0.0
        expected = []
        for x in xs:
            a = [params["l0.Wx"][0, j] * x + params["l0.Wh"][0, j] * h + params["l0.b"][j]
                 for j in range(4)]
            i, f, o, g = sig(a[0]), sig(a[1]), sig(a[2]), math.tanh(a[3])
            c = f * c + i * g
            h = o * math.tanh(c)
            expected.append(1.5 * h - 0.25)
        out, _ = rnn.rnn_forward(RnnModel(cfg, params), np.array(xs)[:, None])
        np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-12)

    def test_hand_traced_gru(self):
        cfg = RnnConfig("gru", depth=1, width=1, input_dim=1)
        params = {"l0.Wx": np.array([[0.5, -0.3, 0.8]]), "l0.Wh": np.array([[0.2, 0.4, -0.6]]),
                  "l0.b": np.array([0.1, 0.2, -0.1]), "out.w": np.array([2.0]),
                  "out.b": np.array(0.5)}
        h, expected = 0.3, []
        for x in (1.0, -0.5):
            z = sig(0.5 * x + 0.2 * h + 0.1)
            r = sig(-0.3 * x + 0.4 * h + 0.2)
            n = math.tanh(0.8 * x + (-0.6) * (r * h) - 0.1)
            h = (1 - z) * h + z * n
            expected.append(2.0 * h + 0.5)
        out, _ = rnn.rnn_forward(RnnModel(cfg, params), np.array([[1.0], [-0.5]]),
                                 initial_state=[np.array([[0.3]])])
        np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("cell", ["lstm", "gru"])
    def test_deterministic_and_batched(self, cell):
        model = small_model(cell)
        x = np.random.default_rng(1).normal(size=(3, 7, 3))
        a, _ = rnn.rnn_forward(model, x)
        b, _ = rnn.rnn_forward(model, x)
        np.testing.assert_array_equal(a, b)
        single, _ = rnn.rnn_forward(model, x[1])
        np.testing.assert_allclose(single[0], a[1], rtol=1e-13)

    def test_hidden_state_bounds(self):
        x = 50 * np.random.default_rng(2).normal(size=(1, 40, 3))
        lstm = small_model("lstm", depth=1, width=6, seed=5)
        lstm.params["l0.Wx"] *= 20
        _, cache = rnn.rnn_forward(lstm, x)
        assert np.all(np.abs(cache.top_hidden) <= 1.0)
        gru = small_model("gru", depth=1, width=6, seed=5)
        gru.params["l0.Wx"] *= 20
        h0 = np.full((1, 6), 3.0)
        _, cache = rnn.rnn_forward(gru, x, initial_state=[h0])
        assert np.all(np.abs(cache.top_hidden) <= 3.0)

    def test_dimension_and_state_errors(self):
        model = small_model("lstm")
        with pytest.raises(ValueError):
            rnn.rnn_forward(model, np.zeros((4, 2)))
        with pytest.raises(DataError):
            rnn.rnn_forward(model, np.zeros((0, 3)))
        with pytest.raises(ValueError):
            rnn.rnn_forward(model, np.zeros((4, 3)), initial_state=[np.zeros((1, 4))])

    def test_non_finite_names_step(self):
        model = small_model("gru", depth=1)
        x = np.zeros((5, 3))
        x[3, 0] = np.nan
        with pytest.raises(NumericalError, match="step 3"):
            rnn.rnn_forward(model, x)


class TestBackward:
    @pytest.mark.parametrize("cell", ["lstm", "gru"])
    @pytest.mark.parametrize("depth", [1, 2])
    def test_finite_differences(self, cell, depth):
        model = small_model(cell, depth=depth, width=4, input_dim=3, seed=depth)
        for k in model.params:  # non-zero biases so every gradient path is exercised
            if k.endswith(".b"):
                model.params[k] = np.random.default_rng(7).uniform(-0.5, 0.5, model.params[k].shape)
        rng = np.random.default_rng(11)
        x, y = rng.normal(size=(2, 8, 3)), rng.normal(size=(2, 8))
        errors = gradient_relative_errors(model, x, y)
        assert max(errors.values()) < 1e-5, errors

    @pytest.mark.parametrize("cell", ["lstm", "gru"])
    def test_zero_output_gradient(self, cell):
        model = small_model(cell)
        _, cache = rnn.rnn_forward(model, np.ones((6, 3)))
        grads = rnn.rnn_backward(model, cache, np.zeros((1, 6)))
        assert all(not g.any() for g in grads.values())

    def test_zero_gradient_direction_is_flat(self):
        model = small_model("lstm", depth=1)
        x, y = np.ones((1, 5, 3)), np.zeros((1, 5))
        model.params["l0.Wx"][:] = 0.0  # constant inputs along a dead feature
        x[..., 2] = 0.0
        loss, grads, _ = rnn.mse_loss_and_grads(model, x, y)
        assert not grads["l0.Wx"][2].any()
        model.params["l0.Wx"][2, 0] += 1e-9
        moved, _, _ = rnn.mse_loss_and_grads(model, x, y)
        assert abs(moved - loss) < 1e-12

    def test_cache_mismatch(self):
        lstm, gru = small_model("lstm"), small_model("gru")
        _, cache = rnn.rnn_forward(lstm, np.ones((4, 3)))
        with pytest.raises(ValueError):
            rnn.rnn_backward(gru, cache, np.ones((1, 4)))
        _, nocache = rnn.rnn_forward(lstm, np.ones((4, 3)), keep_cache=False)
        with pytest.raises(ValueError):
            rnn.rnn_backward(lstm, nocache, np.ones((1, 4)))


class TestAdam:
    def test_first_step(self):
        params, state = rnn.adam_step(AdamState(learning_rate=1e-3), {"w": np.array([2.0])},
                                      {"w": np.array([1.0])})
        assert params["w"][0] == pytest.approx(2.0 - 1e-3, abs=1e-10)
        assert state.t == 1

    def test_zero_gradient(self):
        params, _ = rnn.adam_step(AdamState(), {"w": np.array([1.5, -2.0])},
                                  {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.5, -2.0])

    def test_matches_reference_over_steps(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=4)
        state, params = AdamState(learning_rate=0.01), {"w": w.copy()}
        m = v = np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=4)
            params, state = rnn.adam_step(state, params, {"w": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params["w"], w, rtol=1e-12)

    def test_identical_histories_identical_updates(self):
        params = {"a": np.array([1.0]), "b": np.array([1.0])}
        state = AdamState()
        for g in (0.3, -1.2, 0.7):
            params, state = rnn.adam_step(state, params, {"a": np.array([g]), "b": np.array([g])})
        assert params["a"][0] == params["b"][0]

    def test_inputs_untouched_and_shape_check(self):
        w = np.array([1.0])
        rnn.adam_step(AdamState(), {"w": w}, {"w": np.array([5.0])})
        assert w[0] == 1.0
        with pytest.raises(ValueError):
            rnn.adam_step(AdamState(), {"w": w}, {"w": np.ones(2)})

    def test_clipping(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped = rnn.clip_by_global_norm(g, 1.0)
        assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)
        assert rnn.clip_by_global_norm(g, 10.0) is g


def quadratic_problem():
    """Loss 0.5 * ||w - 1||^2 per batch; plain gradient descent diverges above rate 2."""
    def loss_and_grads(params, _batch):
        d = params["w"] - 1.0
        return float(0.5 * d @ d), {"w": d}
    return (lambda: {"w": np.full(3, 5.0)}), loss_and_grads


class TestRangeTest:
    def test_quadratic_suggestion(self):
        factory, fn = quadratic_problem()
        trace = []
        rate = rnn.lr_range_test(factory, range(200), fn, start_rate=1e-6, growth=1.3,
                                 optimizer="sgd", trace=trace)
        # loss is lowest near rate 1 (the inverse curvature); suggestion sits a decade below
        assert 1e-2 <= rate <= 1.0
        assert trace[0][0] == 1e-6
        assert all(b[0] == pytest.approx(a[0] * 1.3) for a, b in zip(trace, trace[1:]))

    def test_convex_toy_where_large_rates_diverge(self):
        # gradient scaled so that rate 0.1 diverges while 1e-3 still converges
        def fn(params, _):
            d = params["w"] - 1.0
            return float(50 * d @ d), {"w": 100 * d}
        rate = rnn.lr_range_test(lambda: {"w": np.full(2, 3.0)}, range(300), fn,
                                 start_rate=1e-6, growth=1.1, optimizer="sgd")
        assert 1e-4 <= rate <= 1e-2

    def test_immediate_divergence(self):
        def fn(params, _):
            params["w"] = params["w"] * 100  # every batch explodes
            return float(params["w"] @ params["w"]), {"w": params["w"]}
        with pytest.raises(NumericalError, match="smaller start_rate"):
            rnn.lr_range_test(lambda: {"w": np.ones(1)}, range(10), fn, optimizer="sgd")

    def test_single_batch_warns(self):
        factory, fn = quadratic_problem()
        with pytest.warns(RuntimeWarning):
            assert rnn.lr_range_test(factory, range(1), fn, start_rate=3e-5) == 3e-5

    def test_bad_arguments(self):
        factory, fn = quadratic_problem()
        with pytest.raises(ValueError):
            rnn.lr_range_test(factory, range(5), fn, growth=1.0)
        with pytest.raises(DataError):
            rnn.lr_range_test(factory, [], fn)


def sine_data(n=1200):
    t = np.arange(n) * 0.1
    return np.sin(t)[:, None], np.sin(t + 0.1)


class TestFit:
    def test_streams_and_segments(self):
        xs, ys = rnn.make_streams(np.arange(20.0)[:, None], np.arange(20.0), 3)
        assert xs.shape == (3, 6, 1) and ys[1, 0] == 6.0
        assert rnn.segments(10, 4) == [slice(0, 4), slice(4, 8), slice(8, 10)]

    @pytest.mark.parametrize("cell", ["lstm", "gru"])
    def test_sine_next_step(self, cell):
        x, y = sine_data()
        cfg = RnnConfig(cell, depth=2, width=16, input_dim=1, bptt_window=32, batch_size=8,
                        seed=1)
        model, hist = rnn.fit_rnn(cfg, (x[:900], y[:900]), (x[900:1050], y[900:1050]),
                                  learning_rate=0.01, max_epochs=60, patience=10)
        pred = rnn.rnn_predict(model, x[1050:], warmup=x[900:1050])
        assert math.sqrt(np.mean((pred - y[1050:]) ** 2)) < 0.1
        assert hist.best_val_loss == min(hist.val_loss)
        assert hist.iterations == list(range(1, len(hist.iterations) + 1))

    def test_checkpoint_and_determinism(self):
        x, y = sine_data(600)
        cfg = RnnConfig("gru", depth=1, width=8, input_dim=1, bptt_window=16, batch_size=4)
        a, ha = rnn.fit_rnn(cfg, (x[:400], y[:400]), (x[400:], y[400:]), 0.02, max_epochs=12,
                            patience=3)
        b, hb = rnn.fit_rnn(cfg, (x[:400], y[:400]), (x[400:], y[400:]), 0.02, max_epochs=12,
                            patience=3)
        assert ha == hb
        val = float(np.mean((rnn.rnn_predict(a, x[400:]) - y[400:]) ** 2))
        assert val == ha.best_val_loss
        assert all(val <= v for v in ha.val_loss)

    def test_patience_zero_trains_one_epoch(self):
        x, y = sine_data(200)
        cfg = RnnConfig("lstm", depth=1, width=4, input_dim=1, bptt_window=16, batch_size=4)
        _, hist = rnn.fit_rnn(cfg, (x[:150], y[:150]), (x[150:], y[150:]), patience=0)
        assert hist.iterations == [1]

    def test_divergence_names_epoch(self):
        x, y = sine_data(200)
        y = y * 1e300
        cfg = RnnConfig("lstm", depth=1, width=4, input_dim=1, bptt_window=16, batch_size=4)
        with pytest.raises(NumericalError, match="epoch 1"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rnn.fit_rnn(cfg, (x[:150], y[:150]), (x[150:], y[150:]), learning_rate=1.0)

    def test_empty_inputs(self):
        cfg = RnnConfig("gru", depth=1, width=2, input_dim=1)
        with pytest.raises(DataError):
            rnn.fit_rnn(cfg, (np.zeros((10, 1)), np.zeros(10)), (np.zeros((0, 1)), np.zeros(0)))

    def test_range_test_on_rnn(self):
        x, y = sine_data(600)
        cfg = RnnConfig("gru", depth=1, width=8, input_dim=1, bptt_window=16, batch_size=4)
        rate = rnn.rnn_lr_range_test(cfg, (x, y), max_batches=60)
        assert 1e-7 <= rate <= 1.0

    def test_save_load(self, tmp_path):
        model = small_model("lstm")
        model.save(tmp_path / "m.json")
        back = RnnModel.load(tmp_path / "m.json")
        assert back.config == model.config
        x = np.random.default_rng(4).normal(size=(9, 3))
        np.testing.assert_array_equal(back.predict(x), model.predict(x))
        with pytest.raises(ModelFileError):
            RnnModel.load(tmp_path / "none.json")
