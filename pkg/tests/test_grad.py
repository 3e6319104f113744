import numpy as np
import pytest

from dmle2e.errors import InvalidArgumentError, NumericError
from dmle2e.grad import Tape, TapeUsageError, check_gradient, ops, run_primitive_checks


class TestTapeBasics:
    def test_square_gradient(self):
        t = Tape()
        x = t.param("x", 3.0)
        y = ops.square(x)
        grads = t.backward(y)
        assert grads["x"] == pytest.approx(6.0)

    def test_product_plus_linear(self):
        # f(x, y) = x*y + y at (2, 5) -> df/dx = 5, df/dy = 3
        t = Tape()
        x = t.param("x", 2.0)
        y = t.param("y", 5.0)
        f = ops.add(ops.multiply(x, y), y)
        grads = t.backward(f)
        assert grads["x"] == pytest.approx(5.0)
        assert grads["y"] == pytest.approx(3.0)

    def test_unused_parameter_gets_exact_zero(self):
        t = Tape()
        x = t.param("x", np.array([1.0, 2.0]))
        unused = t.param("unused", np.array([3.0, 4.0]))
        grads = t.backward(ops.mean(ops.square(x)))
        assert np.array_equal(grads["unused"], np.zeros(2))

    def test_fanout_accumulates(self):
        t = Tape()
        x = t.param("x", 3.0)
        y = ops.add(ops.square(x), ops.square(x))
        grads = t.backward(y)
        assert grads["x"] == pytest.approx(12.0)

    def test_duplicate_param_rejected(self):
        t = Tape()
        t.param("x", 1.0)
        with pytest.raises(TapeUsageError):
            t.param("x", 2.0)

    def test_nonscalar_loss_rejected(self):
        t = Tape()
        x = t.param("x", np.array([1.0, 2.0]))
        with pytest.raises(InvalidArgumentError):
            t.backward(ops.square(x))

    def test_double_backward_rejected(self):
        t = Tape()
        x = t.param("x", 2.0)
        loss = ops.square(x)
        t.backward(loss)
        with pytest.raises(TapeUsageError):
            t.backward(loss)

    def test_backward_after_reset_rejected(self):
        t = Tape()
        x = t.param("x", 2.0)
        loss = ops.square(x)
        t.reset()
        with pytest.raises(TapeUsageError):
            t.backward(loss)

    def test_nan_in_backward_names_node(self):
        t = Tape()
        x = t.param("x", np.array([0.0]))
        # forward is finite (0), but d(sqrt)/dx at 0 produces 0/0 = nan
        loss = ops.mean(ops.multiply(ops.sqrt(x), ops.sqrt(x)))
        with pytest.raises(NumericError, match="x"):
            t.backward(loss)

    def test_cross_tape_nodes_rejected(self):
        t1, t2 = Tape(), Tape()
        x = t1.param("x", 1.0)
        y = t2.param("y", 1.0)
        with pytest.raises(TapeUsageError):
            ops.add(x, y)

    def test_dump_lists_nodes(self):
        t = Tape()
        x = t.param("x", 1.0)
        ops.square(x)
        text = t.dump()
        assert "param:x" in text and "square" in text


class TestPrimitiveGradients:
    def test_all_primitives_under_1e5(self):
        results = run_primitive_checks()
        assert len(results) >= 24
        for name, err in results.items():
            assert err < 1e-5, f"{name}: {err:.3e}"

    def test_linear_function_near_exact(self):
        def build(tape, p):
            return ops.mean(ops.add(ops.multiply(p["x"], 3.0), 1.0))

        err = check_gradient(build, {"x": np.array([0.3, -0.7, 2.0])})
        assert err < 1e-10

    def test_lstm_cell_fd(self, rng):
        params = {
            "wi": rng.normal(size=(3, 8)) * 0.4,
            "wh": rng.normal(size=(2, 8)) * 0.4,
            "b": rng.normal(size=8) * 0.2,
        }
        x = rng.normal(size=(1, 1, 3))

        def build(tape, p):
            return ops.mean(ops.square(ops.lstm(tape.constant(x), p["wi"], p["wh"], p["b"])))

        assert check_gradient(build, params) < 1e-5

    def test_softmax_xent_fd(self, rng):
        logits = rng.normal(size=(4, 6, 4))
        labels = rng.integers(0, 4, size=(4, 6))

        def build(tape, p):
            return ops.softmax_cross_entropy(p["logits"], labels)

        assert check_gradient(build, {"logits": logits}) < 1e-6

    def test_gradient_linearity_over_batch(self, rng):
        # gradient of sum of per-item losses equals sum of per-item gradients
        xs = rng.normal(size=(3, 8))

        def grad_of(x_rows):
            t = Tape()
            p = t.param("w", np.full(8, 0.5))
            total = None
            for row in x_rows:
                term = ops.mean(ops.square(ops.multiply(p, row)))
                total = term if total is None else ops.add(total, term)
            return t.backward(total)["w"]

        combined = grad_of(xs)
        summed = sum(grad_of(xs[i : i + 1]) for i in range(3))
        assert np.allclose(combined, summed, atol=1e-12)


class TestLstmSemantics:
    def test_zero_weights_zero_output(self):
        t = Tape()
        x = t.constant(np.random.default_rng(0).normal(size=(2, 5, 3)))
        h = ops.lstm(x, np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))
        assert np.allclose(h.value, 0.0)

    def test_hand_computed_single_step(self):
        # hidden size 1: i = sig(xw_i+b_i), f = sig(...), g = tanh(...), o = sig(...)
        # c1 = i*g, h1 = o*tanh(c1), straight-line arithmetic oracle
        x = 0.7
        wi = np.array([[0.3, -0.2, 0.5, 0.1]])
        wh = np.zeros((1, 4))
        b = np.array([0.05, -0.1, 0.2, 0.0])

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        zi, zf, zg, zo = x * wi[0] + b
        expect_h = sig(zo) * np.tanh(sig(zi) * np.tanh(zg))

        t = Tape()
        out = ops.lstm(t.constant(np.array([[[x]]])), wi * np.ones((1, 4)), wh, b)
        assert abs(out.value[0, 0, 0] - expect_h) < 1e-12

    def test_causality(self, rng):
        x = rng.normal(size=(1, 32, 3))
        wi = rng.normal(size=(3, 16)) * 0.3
        wh = rng.normal(size=(4, 16)) * 0.3
        b = rng.normal(size=16) * 0.1
        t = Tape()
        full = ops.lstm(t.constant(x), wi, wh, b).value
        t2 = Tape()
        head = ops.lstm(t2.constant(x[:, :10]), wi, wh, b).value
        assert np.array_equal(full[:, :10], head)

    def test_output_lengths(self, rng):
        wi = rng.normal(size=(3, 8)) * 0.3
        wh = rng.normal(size=(2, 8)) * 0.3
        b = np.zeros(8)
        for T in (1, 7, 1024):
            t = Tape()
            out = ops.lstm(t.constant(rng.normal(size=(1, T, 3))), wi, wh, b)
            assert out.value.shape == (1, T, 2)
