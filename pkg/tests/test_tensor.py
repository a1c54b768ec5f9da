import threading

import numpy as np
import pytest

from acre.errors import ShapeError, TapeError
from acre.tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    affine,
    backward,
    batch_norm,
    concat,
    conv2d,
    conv2d_dilated,
    dropout,
    elementwise,
    embedding_lookup,
    flatten,
    get_default_dtype,
    matmul,
    reduce_sum,
    relu,
    repeat,
    reshape,
    set_debug_checks,
    set_default_dtype,
    sigmoid,
    structural,
)
from gradcheck import check_gradients, weighted_sum

GRAD_TOL = 1e-4


def leaf(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def naive_dilated_conv(x, w, b, rate):
    """Direct loop over y[f, i, j] = b[f] + sum x[c, i + rate*a, j + rate*b] w[f, c, a, b]."""
    f_out, f_in, k, _ = w.shape
    h_out = x.shape[1] - (k - 1) * rate
    w_out = x.shape[2] - (k - 1) * rate
    y = np.zeros((f_out, h_out, w_out))
    for f in range(f_out):
        for i in range(h_out):
            for j in range(w_out):
                total = b[f]
                for c in range(f_in):
                    for a in range(k):
                        for bb in range(k):
                            total += x[c, i + rate * a, j + rate * bb] * w[f, c, a, bb]
                y[f, i, j] = total
    return y


class TestTensor:

    def test_data_is_contiguous_float64(self):
        t = Tensor(np.arange(6).reshape(2, 3).T)
        assert t.data.dtype == np.float64
        assert t.data.flags.c_contiguous
        assert t.shape == (3, 2)

    def test_float32_build_option(self):
        set_default_dtype(32)
        assert get_default_dtype() == np.float32
        assert Tensor([1.0, 2.0]).data.dtype == np.float32

    def test_rejects_other_float_widths(self):
        with pytest.raises(ValueError):
            set_default_dtype(16)


class TestTape:

    def test_sum_gives_all_ones_gradient(self, rng):
        x = leaf(rng, 2, 3, 4)
        with Tape() as tape:
            loss = reduce_sum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sigmoid_of_dot_at_zero_weight(self, rng):
        x = rng.normal(size=5)
        w = Tensor(np.zeros(5), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(sigmoid(matmul(Tensor(x), reshape(w, (5, 1)))))
        backward(loss, tape)
        np.testing.assert_allclose(w.grad, 0.25 * x, atol=1e-15)

    def test_fan_out_accumulates(self, rng):
        x = leaf(rng, 3)
        with Tape() as tape:
            loss = reduce_sum(add(x, x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_non_scalar_loss_raises(self, rng):
        x = leaf(rng, 3)
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(TapeError):
            backward(y, tape)

    def test_second_backward_needs_reset(self, rng):
        x = leaf(rng, 3)
        with Tape() as tape:
            loss = reduce_sum(x)
        backward(loss, tape)
        with pytest.raises(TapeError):
            backward(loss, tape)
        tape.reset()
        assert len(tape) == 0
        x.zero_grad()
        with tape:
            loss = reduce_sum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_every_recorded_op_is_replayed(self, rng):
        x = leaf(rng, 4)
        with Tape() as tape:
            loss = reduce_sum(sigmoid(relu(x)))
        assert [node.op for node in tape.nodes] == ["relu", "sigmoid", "sum"]
        backward(loss, tape)
        assert x.grad is not None

    def test_nothing_recorded_without_a_tape(self, rng):
        x = leaf(rng, 3)
        y = relu(x)
        assert active_tape() is None
        assert not y.requires_grad

    def test_tape_is_thread_local(self, rng):
        seen = []
        with Tape():
            worker = threading.Thread(target=lambda: seen.append(active_tape()))
            worker.start()
            worker.join()
        assert seen == [None]

    def test_debug_checks_flag_non_finite_outputs(self):
        set_debug_checks(True)
        with pytest.raises(FloatingPointError):
            add(Tensor([np.inf]), Tensor([-np.inf]))


class TestElementwise:

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid_of_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = sigmoid(Tensor([-745.0, -1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert 0.0 < out[0] < 1.0
        assert out[2] == 1.0

    def test_add_leading_broadcast(self):
        out = add(Tensor(np.ones((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_add_rejects_trailing_broadcast(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))

    def test_dispatch(self):
        np.testing.assert_array_equal(elementwise("relu", Tensor([-1.0, 1.0])).data, [0.0, 1.0])
        with pytest.raises(ShapeError):
            elementwise("add", Tensor([1.0]))
        with pytest.raises(ValueError):
            elementwise("tanh", Tensor([1.0]))

    @pytest.mark.parametrize("op", [relu, sigmoid])
    def test_unary_gradients(self, rng, op):
        x = leaf(rng, 3, 4)
        weights = rng.normal(size=12)
        assert check_gradients(lambda: weighted_sum(op(x), weights), [x]) <= GRAD_TOL

    def test_broadcast_add_gradients(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 4)
        weights = rng.normal(size=24)
        assert check_gradients(lambda: weighted_sum(add(a, b), weights), [a, b]) <= GRAD_TOL

    def test_finite_outputs_at_large_magnitudes(self, rng):
        x = Tensor(rng.uniform(-1e3, 1e3, size=100))
        for out in (relu(x), sigmoid(x), add(x, x)):
            assert np.all(np.isfinite(out.data))


class TestAffine:

    def test_identity(self):
        out = affine(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_with_bias(self):
        out = affine(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_matches_loop_oracle(self, rng):
        x, w, b = rng.normal(size=5), rng.normal(size=(5, 5)), rng.normal(size=5)
        expected = [b[j] + sum(x[i] * w[i, j] for i in range(5)) for j in range(5)]
        np.testing.assert_allclose(affine(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            affine(Tensor(np.ones(3)), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
        with pytest.raises(ShapeError):
            affine(Tensor(np.ones(2)), Tensor(np.ones((2, 2))), Tensor(np.ones(3)))

    def test_gradients(self, rng):
        x, w, b = leaf(rng, 3, 5), leaf(rng, 5, 4), leaf(rng, 4)
        weights = rng.normal(size=12)
        assert check_gradients(lambda: weighted_sum(affine(x, w, b), weights), [x, w, b]) <= GRAD_TOL

    def test_transposed_matmul_gradients(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
        weights = rng.normal(size=8)
        assert check_gradients(lambda: weighted_sum(matmul(a, b, transpose_b=True), weights), [a, b]) <= GRAD_TOL


class TestStructural:

    def test_flatten_is_row_major(self):
        out = flatten(Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [1, 2, 3, 4, 5, 6])

    def test_reshape_round_trip(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        np.testing.assert_array_equal(reshape(flatten(x), x.shape).data, x.data)

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones(6)), (4, 2))

    def test_concat_and_slice_back(self, rng):
        a, b = Tensor(rng.normal(size=(3, 2, 2))), Tensor(rng.normal(size=(3, 2, 2)))
        out = concat([a, b], axis=0)
        assert out.shape == (6, 2, 2)
        np.testing.assert_array_equal(out.data[:3], a.data)
        np.testing.assert_array_equal(out.data[3:], b.data)

    def test_concat_rejects_mismatched_axes(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)

    def test_embedding_lookup_out_of_range(self):
        with pytest.raises(ShapeError):
            embedding_lookup(Tensor(np.ones((3, 2))), [0, 3])

    def test_embedding_lookup_accumulates_repeated_rows(self, rng):
        table = leaf(rng, 4, 3)
        with Tape() as tape:
            loss = reduce_sum(embedding_lookup(table, [1, 1, 2]))
        backward(loss, tape)
        np.testing.assert_array_equal(table.grad, [[0, 0, 0], [2, 2, 2], [1, 1, 1], [0, 0, 0]])

    def test_dropout_identity_cases(self, rng):
        x = Tensor(rng.normal(size=10))
        assert dropout(x, 0.0, True, rng) is x
        assert dropout(x, 0.5, False, rng) is x

    def test_dropout_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 1.0, True)

    def test_dropout_preserves_mean(self):
        out = dropout(Tensor(np.ones(10 ** 6)), 0.5, True, np.random.default_rng(7))
        assert 0.99 <= out.data.mean() <= 1.01
        assert set(np.unique(out.data)) <= {0.0, 2.0}

    def test_dispatch(self):
        out = structural("flatten", Tensor(np.ones((2, 2))))
        assert out.shape == (4,)
        with pytest.raises(ValueError):
            structural("transpose", Tensor(np.ones(2)))

    def test_gradients(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
        table = leaf(rng, 5, 3)
        mask_rng_seed = 3

        def loss():
            joined = concat([a, b], axis=1)
            looked_up = embedding_lookup(table, [4, 0, 4])
            dropped = dropout(repeat(joined, 2, axis=0), 0.3, True, np.random.default_rng(mask_rng_seed))
            return add(
                weighted_sum(reshape(dropped, (5, 4)), np.linspace(-1, 1, 20)),
                weighted_sum(looked_up, np.arange(9.0)),
            )

        assert check_gradients(loss, [a, b, table]) <= GRAD_TOL


class TestBatchNorm:

    def _params(self, channels):
        return (
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
        )

    def test_training_normalizes_per_channel(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(8, 2, 3, 3)))
        gamma, beta, mean, var = self._params(2)
        out = batch_norm(x, gamma, beta, mean, var, train=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        assert np.all(mean > 0)

    def test_eval_uses_running_buffers(self, rng):
        x = Tensor(rng.normal(size=(4, 3)))
        gamma, beta, mean, var = self._params(3)
        out = batch_norm(x, gamma, beta, mean, var, train=False).data
        np.testing.assert_allclose(out, x.data / np.sqrt(1.0 + 1e-5))

    def test_shape_mismatch(self):
        gamma, beta, mean, var = self._params(2)
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.ones((4, 3))), gamma, beta, mean, var, train=True)

    def test_single_row_in_training(self):
        gamma, beta, mean, var = self._params(3)
        with pytest.raises(ShapeError, match="more than one value"):
            batch_norm(Tensor(np.ones((1, 3))), gamma, beta, mean, var, train=True)
        np.testing.assert_array_equal(var, np.ones(3))

    def test_single_row_in_evaluation(self):
        gamma, beta, mean, var = self._params(3)
        out = batch_norm(Tensor(np.full((1, 3), 2.0)), gamma, beta, mean, var, train=False).data
        np.testing.assert_allclose(out, np.full((1, 3), 2.0 / np.sqrt(1.0 + 1e-5)))

    @pytest.mark.parametrize("shape", [(5, 3), (3, 2, 2, 3)])
    @pytest.mark.parametrize("train", [True, False])
    def test_gradients(self, rng, shape, train):
        x = leaf(rng, *shape)
        channels = shape[1]
        gamma, beta = leaf(rng, channels), leaf(rng, channels)
        mean, var = rng.normal(size=channels), rng.uniform(0.5, 2.0, size=channels)
        weights = rng.normal(size=int(np.prod(shape)))

        def loss():
            return weighted_sum(batch_norm(x, gamma, beta, mean.copy(), var.copy(), train), weights)

        assert check_gradients(loss, [x, gamma, beta]) <= GRAD_TOL


class TestConv2dDilated:

    def test_standard_example(self):
        x = Tensor(np.arange(1.0, 10.0).reshape(1, 3, 3))
        w = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
        out = conv2d_dilated(x, w, Tensor([0.0]), rate=1)
        np.testing.assert_array_equal(out.data, [[[6.0, 8.0], [12.0, 14.0]]])

    def test_rate_two_on_ones(self):
        out = conv2d_dilated(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]), rate=2)
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 4.0))

    def test_rate_one_is_bitwise_standard_conv(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            k = int(rng.integers(1, 4))
            batch, f_in, f_out = (int(v) for v in rng.integers(1, 4, size=3))
            height, width = (int(v) for v in rng.integers(k, 8, size=2))
            padding = "same" if rng.random() < 0.5 else "valid"
            shape = (batch, f_in, height, width) if rng.random() < 0.5 else (f_in, height, width)
            x = Tensor(rng.normal(size=shape))
            w = Tensor(rng.normal(size=(f_out, f_in, k, k)))
            b = Tensor(rng.normal(size=f_out))
            np.testing.assert_array_equal(
                conv2d_dilated(x, w, b, rate=1, padding=padding).data,
                conv2d(x, w, b, padding=padding).data,
            )

    @pytest.mark.parametrize("rate", [1, 2, 3])
    def test_matches_loop_oracle(self, rng, rate):
        x = rng.normal(size=(2, 9, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d_dilated(Tensor(x), Tensor(w), Tensor(b), rate=rate)
        np.testing.assert_allclose(out.data, naive_dilated_conv(x, w, b, rate), atol=1e-12)

    def test_same_padding_keeps_spatial_size(self, rng):
        for k, rate in [(3, 1), (3, 2), (2, 3), (3, 4)]:
            x = Tensor(rng.normal(size=(2, 1, 5, 6)))
            out = conv2d_dilated(x, Tensor(rng.normal(size=(4, 1, k, k))), Tensor(np.zeros(4)), rate, padding="same")
            assert out.shape == (2, 4, 5, 6)

    def test_linearity(self, rng):
        w, zero = Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(np.zeros(2))
        x, y = rng.normal(size=(3, 7, 7)), rng.normal(size=(3, 7, 7))
        alpha, beta = 1.7, -0.4
        combined = conv2d_dilated(Tensor(alpha * x + beta * y), w, zero, 2, "same").data
        separate = alpha * conv2d_dilated(Tensor(x), w, zero, 2, "same").data \
            + beta * conv2d_dilated(Tensor(y), w, zero, 2, "same").data
        np.testing.assert_allclose(combined, separate, atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_dilated(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]), 1)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d_dilated(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), 2)

    def test_bad_rate(self):
        with pytest.raises(ShapeError):
            conv2d_dilated(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]), 0)

    @pytest.mark.parametrize("rate,padding", [(1, "valid"), (2, "same"), (3, "same"), (2, "valid")])
    def test_gradients(self, rng, rate, padding):
        x = leaf(rng, 2, 2, 7, 6)
        w = leaf(rng, 3, 2, 3, 3)
        b = leaf(rng, 3)
        out_shape = conv2d_dilated(x, w, b, rate, padding).shape
        weights = rng.normal(size=int(np.prod(out_shape)))
        loss = lambda: weighted_sum(conv2d_dilated(x, w, b, rate, padding), weights)
        assert check_gradients(loss, [x, w, b]) <= GRAD_TOL

    def test_agrees_with_torch(self, rng):
        torch = pytest.importorskip("torch")
        x = rng.normal(size=(2, 3, 9, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for rate in (1, 2, 3):
            expected = torch.nn.functional.conv2d(
                torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), dilation=rate, padding=rate
            ).numpy()
            out = conv2d_dilated(Tensor(x), Tensor(w), Tensor(b), rate, padding="same")
            np.testing.assert_allclose(out.data, expected, atol=1e-10)
