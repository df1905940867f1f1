import numpy as np
import pytest

from gridflow import tensor as T
from gridflow.optim import AdamState, adam_step
from gridflow.tensor import NonFiniteError, ShapeError, Tensor, grad_check


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_pointwise_scaling(self):
        out = T.conv2d(t64(np.ones((1, 1, 3, 3))), t64([[[[2.0]]]]), t64([0.0]))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_direct_sum(self):
        x = t64(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
        out = T.conv2d(x, t64(np.ones((1, 1, 3, 3))), t64([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 45.0

    def test_bias_only(self, rng):
        out = T.conv2d(t64(np.zeros((2, 3, 5, 5))), t64(rng.normal(size=(4, 3, 3, 3))), t64([1.0, -2.0, 0.5, 3.0]), padding=1)
        for c, b in enumerate([1.0, -2.0, 0.5, 3.0]):
            assert np.all(out.data[:, c] == b)

    def test_is_cross_correlation(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(t64(x), t64(w), t64(b), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 6, 5))
        for n in range(2):
            for o in range(4):
                for i in range(6):
                    for j in range(5):
                        ref[n, o, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("padding,stride", [(0, 1), (1, 1), (1, 2), (0, 2)])
    def test_grad_check(self, rng, padding, stride):
        x = t64(rng.normal(size=(2, 3, 5, 6)))
        w = t64(rng.normal(size=(4, 3, 3, 3)))
        b = t64(rng.normal(size=4))
        rep = grad_check(lambda x, w, b: T.conv2d(x, w, b, padding=padding, stride=stride), [x, w, b])
        assert rep["pass"], rep["max_rel_err"]

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64([0.0]))


class TestTransposeConv:
    def test_single_pixel_scatter(self):
        out = T.transpose_conv2d(t64([[[[1.0]]]]), t64(np.ones((1, 1, 2, 2))), t64([0.0]))
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))

    def test_zero_input_gives_bias(self, rng):
        out = T.transpose_conv2d(t64(np.zeros((1, 3, 2, 3))), t64(rng.normal(size=(3, 2, 2, 2))), t64([0.25, -1.0]))
        assert out.shape == (1, 2, 4, 6)
        assert np.all(out.data[:, 0] == 0.25) and np.all(out.data[:, 1] == -1.0)

    def test_grad_check(self, rng):
        x = t64(rng.normal(size=(2, 3, 3, 2)))
        w = t64(rng.normal(size=(3, 2, 2, 2)))
        b = t64(rng.normal(size=2))
        rep = grad_check(lambda x, w, b: T.tensor_sum(T.transpose_conv2d(x, w, b)), [x, w, b])
        assert rep["pass"], rep["max_rel_err"]

    def test_only_stride_two(self):
        with pytest.raises(ValueError):
            T.transpose_conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 2, 2))), t64([0.0]), stride=3)


class TestPoolConcatRelu:
    def test_avg_pool_constant_window(self):
        assert T.avg_pool2(t64([[[[1.0, 1.0], [1.0, 1.0]]]])).data.item() == 1.0

    def test_avg_pool_mean(self):
        assert T.avg_pool2(t64([[[[0.0, 2.0], [4.0, 6.0]]]])).data.item() == 3.0

    def test_avg_pool_constant_field(self):
        out = T.avg_pool2(t64(np.full((1, 2, 6, 4), 0.7)))
        assert out.shape == (1, 2, 3, 2)
        np.testing.assert_allclose(out.data, 0.7)

    def test_avg_pool_odd_extent(self):
        with pytest.raises(ShapeError):
            T.avg_pool2(t64(np.zeros((1, 1, 3, 4))))

    def test_concat_shapes_and_round_trip(self, rng):
        a, b = t64(rng.normal(size=(1, 2, 4, 4))), t64(rng.normal(size=(1, 3, 4, 4)))
        c = T.concat_channels(a, b)
        assert c.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(T.slice_channels(c, 2, 5).data, b.data)

    def test_concat_empty_is_identity(self, rng):
        x = t64(rng.normal(size=(2, 3, 4, 4)))
        np.testing.assert_array_equal(T.concat_channels(x, t64(np.zeros((2, 0, 4, 4)))).data, x.data)

    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(t64([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_negative_has_zero_grad(self):
        x = t64([-3.0, -0.5, -1e-3])
        T.tensor_sum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_grad_checks(self, rng):
        x = t64(rng.normal(size=(2, 3, 4, 4)))
        y = t64(rng.normal(size=(2, 2, 4, 4)))
        assert grad_check(T.avg_pool2, [x])["pass"]
        assert grad_check(T.concat_channels, [x, y])["pass"]
        assert grad_check(lambda a: T.slice_channels(a, 1, 3), [x])["pass"]
        assert grad_check(lambda a: T.narrow(a, 3, 1, 3), [x])["pass"]
        assert grad_check(lambda a, b: T.concat([a, b], axis=1), [x, y])["pass"]
        assert grad_check(lambda a, b: T.add(a, b), [x, t64(rng.normal(size=x.shape))])["pass"]
        # keep inputs away from the kink
        z = rng.normal(size=(3, 5))
        z[np.abs(z) < 0.05] = 0.5
        assert grad_check(T.relu, [t64(z)])["pass"]


class TestLoss:
    def test_equal_is_zero(self, rng):
        x = rng.normal(size=(3, 4))
        assert T.mse_loss(t64(x), t64(x, grad=False)).item() == 0.0

    def test_unit(self):
        assert T.mse_loss(t64([1.0]), t64([0.0])).item() == 1.0

    def test_mean_of_squares(self):
        assert T.mse_loss(t64([0.2, 0.4]), t64([0.0, 1.0])).item() == pytest.approx(0.2, abs=1e-15)

    def test_grad_check_tight(self, rng):
        p = t64(rng.normal(size=(2, 3, 4)))
        y = t64(rng.normal(size=(2, 3, 4)), grad=False)
        rep = grad_check(T.mse_loss, [p, y], tolerance=1e-6)
        assert rep["pass"], rep["max_rel_err"]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.mse_loss(t64([1.0, 2.0]), t64([1.0]))


class TestGradCheck:
    def test_corrupted_backward_is_caught(self, rng):
        def scaled_relu(x):
            out = T.relu(x)
            inner = out._backward

            def broken(g):
                inner(g * 1.01)

            out._backward = broken
            return out

        x = rng.normal(size=(4, 4))
        x[np.abs(x) < 0.05] = 0.5
        rep = grad_check(scaled_relu, [t64(x)])
        assert not rep["pass"]
        assert rep["max_rel_err"] > 5e-3

    def test_rejects_float32(self):
        with pytest.raises(TypeError):
            grad_check(T.relu, [Tensor(np.ones(3, dtype=np.float32), requires_grad=True)])

    def test_sampled_coordinates(self, rng):
        x = t64(rng.normal(size=(2, 3, 6, 6)))
        w = t64(rng.normal(size=(2, 3, 3, 3)))
        rep = grad_check(lambda x, w: T.conv2d(x, w, t64(np.zeros(2), grad=False), padding=1), [x, w], max_coords=10)
        assert rep["pass"] and rep["n_checked"] == 20


class TestAutodiffCore:
    def test_shared_subexpression_accumulates(self):
        x = t64([1.0, -2.0, 3.0])
        T.tensor_sum(T.add(T.relu(x), T.relu(x))).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 2.0])

    def test_non_finite_is_raised(self):
        with pytest.raises(NonFiniteError):
            T.relu(t64([1.0, np.inf]))

    def test_no_graph_without_grad(self):
        out = T.relu(t64([1.0], grad=False))
        assert out._backward is None and not out.requires_grad

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 5, 8, 8)).astype(np.float32)
        w = rng.normal(size=(6, 5, 3, 3)).astype(np.float32)
        b = np.zeros(6, dtype=np.float32)
        a1 = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        a2 = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        assert a1.tobytes() == a2.tobytes()


class TestAdam:
    def test_zero_gradient_is_noop(self):
        params = {"w": np.array([0.5, -1.0])}
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [0.5, -1.0])
        np.testing.assert_array_equal(state.first_moment["w"], 0.0)
        np.testing.assert_array_equal(state.second_moment["w"], 0.0)

    def test_first_step_is_learning_rate(self):
        params = {"theta": np.array([0.0])}
        state = AdamState.for_params(params, learning_rate=3e-4)
        adam_step(params, {"theta": np.array([1.0])}, state)
        assert abs(params["theta"][0] + 3e-4) < 1e-7
        assert state.step_count == 1

    def test_two_steps_hand_computed(self):
        params = {"theta": np.array([0.0])}
        state = AdamState.for_params(params, learning_rate=3e-4)
        prev = 0.0
        for _ in range(2):
            adam_step(params, {"theta": np.array([1.0])}, state)
            delta = prev - params["theta"][0]
            assert abs(delta - 3e-4) < 0.01 * 3e-4
            prev = params["theta"][0]

    def test_rejects_bad_gradients(self):
        params = {"w": np.zeros(2)}
        state = AdamState.for_params(params)
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(3)}, state)
        with pytest.raises(FloatingPointError):
            adam_step(params, {"w": np.array([np.nan, 0.0])}, state)
