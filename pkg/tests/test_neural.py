import numpy as np
import pytest

from trackloop import neural
from trackloop.errors import ShapeError, TrainingError
from trackloop.neural import (
    Node,
    ParamStore,
    Tape,
    adam_step,
    bilinear_interp,
    constant,
    grad_check,
    init_lstm,
    init_mlp,
    load_checkpoint,
    lstm_apply,
    lstm_step,
    mlp_forward,
    nmean,
    nsum,
    save_checkpoint,
    smooth_l1,
)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_lstm_step(w, b, x, h, c):
    """Straight-line LSTM math, independent of the tape engine."""
    z = np.concatenate([x, h]) @ w + b
    n = h.shape[0]
    i = _sigmoid(z[:n])
    f = _sigmoid(z[n:2 * n])
    o = _sigmoid(z[2 * n:3 * n])
    g = np.tanh(z[3 * n:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


class TestMlp:
    def test_zero_weights_zero_output(self):
        store = ParamStore()
        init_mlp(store, "net", [5, 8, 3], seed=1)
        for name in store.names():
            store.values[name][...] = 0.0
        out = mlp_forward(Tape(store), "net", constant(np.ones(5)))
        assert np.all(out.value == 0.0)

    def test_single_linear_layer_identity(self):
        store = ParamStore()
        init_mlp(store, "lin", [4, 4], seed=2)
        store.values["lin.w0"][...] = np.eye(4)
        store.values["lin.b0"][...] = 0.0
        x = np.array([0.3, -1.2, 2.5, 0.0])
        out = mlp_forward(Tape(store), "lin", constant(x))
        assert out.value == pytest.approx(x, abs=0.0)
        # gradient of sum(out) wrt weights is exact for a linear map
        report = grad_check(lambda t: nsum(mlp_forward(t, "lin", constant(x))), store)
        assert max(report.values()) < 1e-10

    def test_width_mismatch_raises(self):
        store = ParamStore()
        init_mlp(store, "net", [5, 8, 3], seed=3)
        with pytest.raises(ShapeError):
            mlp_forward(Tape(store), "net", constant(np.ones(6)))

    def test_batched_matches_single(self):
        store = ParamStore()
        init_mlp(store, "net", [6, 10, 4], seed=4)
        rng = np.random.default_rng(0)
        xs = rng.standard_normal((7, 6))
        batch = mlp_forward(Tape(store), "net", constant(xs)).value
        for i in range(7):
            single = mlp_forward(Tape(store), "net", constant(xs[i])).value
            assert batch[i] == pytest.approx(single, abs=1e-12)

    def test_init_deterministic(self):
        a, b = ParamStore(), ParamStore()
        init_mlp(a, "net", [5, 8, 3], seed=9)
        init_mlp(b, "net", [5, 8, 3], seed=9)
        for name in a.names():
            assert np.array_equal(a.values[name], b.values[name])
        c = ParamStore()
        init_mlp(c, "net", [5, 8, 3], seed=10)
        assert not np.array_equal(a.values["net.w0"], c.values["net.w0"])


class TestLstm:
    def test_zero_everything_zero_hidden(self):
        store = ParamStore()
        init_lstm(store, "rnn", 4, 6, seed=5)
        for name in store.names():
            store.values[name][...] = 0.0
        tape = Tape(store)
        h, c = lstm_step(tape, "rnn", constant(np.zeros(4)),
                         constant(np.zeros(6)), constant(np.zeros(6)))
        assert np.all(h.value == 0.0)
        assert np.all(c.value == 0.0)

    def test_matches_reference(self):
        store = ParamStore()
        init_lstm(store, "rnn", 5, 7, seed=6)
        rng = np.random.default_rng(1)
        x = rng.standard_normal(5)
        h0 = rng.standard_normal(7)
        c0 = rng.standard_normal(7)
        h, c = lstm_step(Tape(store), "rnn", constant(x), constant(h0), constant(c0))
        h_ref, c_ref = reference_lstm_step(store.values["rnn.w"], store.values["rnn.b"],
                                           x, h0, c0)
        assert h.value == pytest.approx(h_ref, abs=1e-12)
        assert c.value == pytest.approx(c_ref, abs=1e-12)

    def test_batched_matches_single(self):
        store = ParamStore()
        init_lstm(store, "rnn", 3, 5, seed=7)
        rng = np.random.default_rng(2)
        xs = rng.standard_normal((4, 3))
        hs = rng.standard_normal((4, 5))
        cs = rng.standard_normal((4, 5))
        hb, cb = lstm_step(Tape(store), "rnn", constant(xs), constant(hs), constant(cs))
        for i in range(4):
            h1, c1 = lstm_step(Tape(store), "rnn", constant(xs[i]),
                               constant(hs[i]), constant(cs[i]))
            assert hb.value[i] == pytest.approx(h1.value, abs=1e-12)
            assert cb.value[i] == pytest.approx(c1.value, abs=1e-12)

    def test_numpy_rollout_matches_graph_chain(self):
        store = ParamStore()
        init_lstm(store, "rnn", 3, 5, seed=8)
        rng = np.random.default_rng(4)
        xs = [rng.standard_normal(3) for _ in range(6)]
        h = constant(np.zeros(5))
        c = constant(np.zeros(5))
        for x in xs:
            h, c = lstm_step(Tape(store), "rnn", constant(x), h, c)
        state = lstm_apply(store, "rnn", xs)
        assert state.hidden == pytest.approx(h.value, abs=1e-12)
        assert state.cell == pytest.approx(c.value, abs=1e-12)

    def test_numpy_rollout_empty_sequence(self):
        store = ParamStore()
        init_lstm(store, "rnn", 3, 5, seed=8)
        state = lstm_apply(store, "rnn", [])
        assert np.all(state.hidden == 0.0) and np.all(state.cell == 0.0)


class TestBilinear:
    def test_cell_center_exact(self):
        rng = np.random.default_rng(3)
        grid = constant(rng.standard_normal((4, 5, 3)))
        out = bilinear_interp(grid, np.array([[2.0, 3.0]]))
        assert out.value[0] == pytest.approx(grid.value[2, 3], abs=0.0)

    def test_midpoint_average(self):
        grid = constant(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None])
        out = bilinear_interp(grid, np.array([[0.5, 0.5]]))
        assert out.value[0, 0] == pytest.approx(1.5, abs=1e-12)

    def test_outside_clamps_to_border(self):
        grid = constant(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None])
        out = bilinear_interp(grid, np.array([[-5.0, -5.0], [10.0, 10.0], [-3.0, 0.5]]))
        assert out.value[0, 0] == pytest.approx(0.0)
        assert out.value[1, 0] == pytest.approx(3.0)
        assert out.value[2, 0] == pytest.approx(0.5)  # clamped row 0, interp cols

    def test_affine_grid_exact(self):
        # bilinear interpolation reproduces affine functions exactly
        h, w = 6, 7
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        grid = constant((1.5 * rows - 0.7 * cols + 2.0)[:, :, None])
        rng = np.random.default_rng(4)
        pts = np.stack([rng.uniform(0, h - 1, 20), rng.uniform(0, w - 1, 20)], axis=1)
        out = bilinear_interp(grid, pts)
        expect = 1.5 * pts[:, 0] - 0.7 * pts[:, 1] + 2.0
        assert out.value[:, 0] == pytest.approx(expect, abs=1e-12)

    def test_grid_gradient(self):
        rng = np.random.default_rng(5)
        values = rng.standard_normal((3, 3, 2))
        pts = np.array([[0.3, 1.7], [2.0, 0.5], [1.1, 1.1]])

        store = ParamStore()
        store.add("grid", values.shape, init="zeros")
        store.values["grid"][...] = values

        def fn(tape):
            return nsum(smooth_l1(bilinear_interp(tape.param("grid"), pts)))

        report = grad_check(fn, store)
        assert max(report.values()) < 1e-6


class TestAdam:
    def test_first_step_magnitude(self):
        store = ParamStore()
        store.add("p", (3,), init="zeros")
        store.grads["p"][...] = np.array([0.5, -2.0, 10.0])
        adam_step(store, lr=1e-3)
        # bias-corrected first step is lr * g / (|g| + eps) ~= lr * sign(g)
        assert store.values["p"] == pytest.approx([-1e-3, 1e-3, -1e-3], rel=1e-4)
        assert np.all(store.grads["p"] == 0.0)
        assert store.step_count == 1

    def test_nonfinite_gradient_raises(self):
        store = ParamStore()
        store.add("p", (2,), init="zeros")
        store.grads["p"][...] = np.array([1.0, np.nan])
        with pytest.raises(TrainingError, match="p"):
            adam_step(store, lr=1e-3)

    def test_descends_quadratic(self):
        store = ParamStore()
        store.add("p", (2,), init="zeros")
        store.values["p"][...] = np.array([3.0, -2.0])
        for _ in range(2000):
            store.grads["p"][...] = 2.0 * store.values["p"]
            adam_step(store, lr=1e-2)
        assert np.abs(store.values["p"]).max() < 1e-4


class TestGradCheck:
    def test_mlp_configs(self):
        # the full 20-configuration gate lives in the acceptance suite
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            sizes = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 5)))]
            store = ParamStore()
            init_mlp(store, "net", sizes, seed=seed)
            x = rng.standard_normal(sizes[0])

            def fn(tape):
                return nmean(smooth_l1(mlp_forward(tape, "net", constant(x))))

            assert max(grad_check(fn, store).values()) < 1e-4

    def test_lstm_config(self):
        rng = np.random.default_rng(200)
        store = ParamStore()
        init_lstm(store, "rnn", 4, 5, seed=11)
        x, h0, c0 = rng.standard_normal(4), rng.standard_normal(5), rng.standard_normal(5)

        def fn(tape):
            h, c = lstm_step(tape, "rnn", constant(x), constant(h0), constant(c0))
            return nsum(neural.mul(h, h)) + nsum(neural.mul(c, c))

        assert max(grad_check(fn, store).values()) < 1e-4

    def test_composite_graph(self):
        # concat + narrow + gather + margin-style hinge through two nets
        rng = np.random.default_rng(300)
        store = ParamStore()
        init_mlp(store, "a", [4, 6, 3], seed=12)
        init_mlp(store, "b", [6, 5, 1], seed=13)
        x1, x2 = rng.standard_normal(4), rng.standard_normal((5, 3))

        def fn(tape):
            fa = mlp_forward(tape, "a", constant(x1))
            rows = neural.concat([neural.reshape(fa, (1, 3))] * 5, axis=0)
            joint = neural.concat([rows, constant(x2)], axis=-1)
            scores = mlp_forward(tape, "b", joint)
            pos = neural.gather_rows(scores, np.array([0, 2]))
            neg = neural.gather_rows(scores, np.array([1, 3, 4]))
            diff = neural.sub(neural.reshape(pos, (2, 1, 1)), neural.reshape(neg, (1, 3, 1)))
            hinge = neural.relu(neural.sub(constant(0.2), diff))
            return nmean(hinge)

        assert max(grad_check(fn, store).values()) < 1e-4


class TestCheckpoint:
    def test_round_trip_lossless(self, tmp_path):
        store = ParamStore()
        init_mlp(store, "net", [7, 9, 2], seed=21)
        init_lstm(store, "rnn", 3, 4, seed=22)
        # realistic adam state
        rng = np.random.default_rng(6)
        for name in store.names():
            store.grads[name][...] = rng.standard_normal(store.values[name].shape)
        adam_step(store, lr=1e-3)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(store, path)
        loaded = load_checkpoint(path)
        assert loaded.names() == store.names()
        assert loaded.step_count == store.step_count
        for name in store.names():
            assert np.array_equal(loaded.values[name], store.values[name])
            assert np.array_equal(loaded.adam_m[name], store.adam_m[name])
            assert np.array_equal(loaded.adam_v[name], store.adam_v[name])

    def test_save_load_save_identical_bytes(self, tmp_path):
        store = ParamStore()
        init_mlp(store, "net", [3, 4, 1], seed=23)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(store, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(TrainingError):
            load_checkpoint(str(path))
