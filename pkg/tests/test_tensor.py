import numpy as np
import pytest

from sanet.errors import ConfigurationError, NonFiniteError, UninitializedStatisticsError
from sanet.tensor import (
    Graph,
    Parameter,
    RunningStats,
    Tensor,
    activation,
    batchnorm2d,
    combine,
    conv2d,
    grad_check,
    he_uniform,
    relative_error,
    upsample_nearest2x,
)


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_scaling_kernel(self):
        out = conv2d(t(np.ones((1, 1, 3, 3))), t([[[[2.0]]]]), t([0.0]))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_hand_evaluated_sum(self):
        x = t([[[[1, 2], [3, 4]]]])
        out = conv2d(x, t(np.ones((1, 1, 2, 2))), t([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 10.0

    def test_zero_kernel_gives_bias(self):
        rng = np.random.default_rng(0)
        out = conv2d(t(rng.standard_normal((2, 3, 5, 5))), t(np.zeros((4, 3, 3, 3))),
                     t([1.0, -2.0, 0.5, 3.0]), padding=1)
        np.testing.assert_array_equal(out.data[:, :, 2, 2], np.tile([1.0, -2.0, 0.5, 3.0], (2, 1)))

    def test_output_extent_formula(self):
        out = conv2d(t(np.zeros((1, 2, 7, 9))), t(np.zeros((3, 2, 3, 3))), t(np.zeros(3)), stride=2, padding=1)
        assert out.shape == (1, 3, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(t(x), t(w), t(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 5, 5))
        w = t(rng.standard_normal((3, 2, 3, 3)))
        zero = t(np.zeros(3))
        a = conv2d(t(3.5 * x), w, zero, padding=1).data
        b = 3.5 * conv2d(t(x), w, zero, padding=1).data
        np.testing.assert_allclose(a, b, rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))), t([0.0]))

    def test_non_positive_extent(self):
        with pytest.raises(ConfigurationError):
            conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))), t([0.0]))

    def test_gradcheck_example(self):
        shapes = [(1, 2, 5, 5), (2, 2, 3, 3), (2,)]
        rep = grad_check(lambda x, w, b: conv2d(x, w, b, padding=1), shapes, trials=30, step=1e-4)
        assert rep.worst < 1e-5


class TestActivation:
    def test_relu(self):
        assert activation(t([-1.5]), "relu").data.item() == 0.0

    def test_sigmoid_values(self):
        out = activation(t([0.0, 2.0]), "sigmoid").data
        np.testing.assert_allclose(out, [0.5, 0.880797], atol=1e-6)

    def test_sigmoid_extremes_finite(self):
        out = activation(t([-800.0, 800.0]), "sigmoid").data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_relu_derivative_at_zero(self):
        x = t([0.0, 1.0, -1.0], grad=True)
        with Graph() as g:
            y = activation(x, "relu")
        g.backward(y, np.ones(3))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_sigmoid_gradient_at_zero(self):
        h = 1e-4
        x = t([0.0], grad=True)
        with Graph() as g:
            y = activation(x, "sigmoid")
        g.backward(y, np.ones(1))
        fd = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
        assert x.grad.item() == 0.25
        assert abs(fd - 0.25) < 1e-9

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            activation(t([1.0]), "tanh")


class TestCombine:
    def test_add(self):
        out = combine(t([[[[1, 2]]]]), t([[[[3, 4]]]]), "add")
        np.testing.assert_array_equal(out.data, [[[[4, 6]]]])

    def test_add_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(combine(t(x), t(np.zeros_like(x)), "add").data, x)

    def test_concat_shape(self):
        out = combine(t(np.zeros((1, 2, 3, 3))), t(np.ones((1, 3, 3, 3))), "concat_channels")
        assert out.shape == (1, 5, 3, 3)
        assert out.data[0, :2].sum() == 0 and out.data[0, 2:].sum() == 27

    def test_add_backward_distributes(self):
        a, b = t(np.zeros((1, 1, 2, 2)), True), t(np.zeros((1, 1, 2, 2)), True)
        up = np.arange(4.0).reshape(1, 1, 2, 2)
        with Graph() as g:
            y = combine(a, b, "add")
        g.backward(y, up)
        np.testing.assert_array_equal(a.grad, up)
        np.testing.assert_array_equal(b.grad, up)

    def test_concat_backward_partitions(self):
        a, b = t(np.zeros((1, 2, 2, 2)), True), t(np.zeros((1, 1, 2, 2)), True)
        up = np.arange(12.0).reshape(1, 3, 2, 2)
        with Graph() as g:
            y = combine(a, b, "concat_channels")
        g.backward(y, up)
        np.testing.assert_array_equal(a.grad, up[:, :2])
        np.testing.assert_array_equal(b.grad, up[:, 2:])

    def test_mismatch(self):
        with pytest.raises(ConfigurationError):
            combine(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 2, 3))), "add")
        with pytest.raises(ConfigurationError):
            combine(t(np.zeros((1, 1, 2, 2))), t(np.zeros((2, 1, 2, 2))), "concat_channels")


class TestBatchNorm:
    def test_normalizes(self):
        rng = np.random.default_rng(0)
        x = 5 + 2 * rng.standard_normal((4, 2, 8, 8))
        out = batchnorm2d(t(x), t(np.ones(2)), t(np.zeros(2)), RunningStats(2, np.float64),
                          epsilon=1e-12).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-8)

    def test_degenerate_affine(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        out = batchnorm2d(t(x), t(np.zeros(3)), t(np.full(3, 7.0)), RunningStats(3, np.float64)).data
        np.testing.assert_array_equal(out, np.full_like(x, 7.0))

    def test_single_element_channel(self):
        out = batchnorm2d(t([[[[3.0]]]]), t([1.0]), t([0.0]), RunningStats(1, np.float64))
        assert out.data.item() == 0.0

    def test_eval_before_train(self):
        with pytest.raises(UninitializedStatisticsError):
            batchnorm2d(t(np.zeros((1, 1, 2, 2))), t([1.0]), t([0.0]), RunningStats(1), mode="eval")

    def test_running_statistics(self):
        stats = RunningStats(1, np.float64)
        x1 = np.arange(4.0).reshape(1, 1, 2, 2)
        batchnorm2d(t(x1), t([1.0]), t([0.0]), stats, momentum=0.1)
        assert stats.mean.item() == 1.5 and stats.var.item() == 1.25
        batchnorm2d(t(x1 + 10), t([1.0]), t([0.0]), stats, momentum=0.1)
        np.testing.assert_allclose(stats.mean, 0.9 * 1.5 + 0.1 * 11.5)
        np.testing.assert_allclose(stats.var, 1.25)

    def test_eval_uses_running_statistics(self):
        stats = RunningStats(1, np.float64)
        stats.mean[:] = 2.0
        stats.var[:] = 4.0
        stats.initialized = True
        out = batchnorm2d(t([[[[6.0]]]]), t([1.0]), t([0.0]), stats, mode="eval", epsilon=0.0)
        assert out.data.item() == 2.0


class TestUpsample:
    def test_replication(self):
        np.testing.assert_array_equal(upsample_nearest2x(t([[[[3.0]]]])).data, np.full((1, 1, 2, 2), 3.0))

    def test_pattern(self):
        out = upsample_nearest2x(t([[[[1.0], [2.0]]]])).data[0, 0]
        np.testing.assert_array_equal(out, [[1, 1], [1, 1], [2, 2], [2, 2]])

    def test_backward_sums_blocks(self):
        x = t(np.zeros((1, 2, 3, 3)), True)
        with Graph() as g:
            y = upsample_nearest2x(x)
        g.backward(y, np.ones(y.shape))
        np.testing.assert_array_equal(x.grad, np.full((1, 2, 3, 3), 4.0))


class TestGraph:
    def test_no_graph_no_buffers(self):
        x = t(np.ones((1, 1, 2, 2)), True)
        y = activation(x, "sigmoid")
        assert not y.requires_grad and y.grad is None and x.grad is None

    def test_backward_reverse_order_and_reuse(self):
        # x feeds two branches; gradients must accumulate
        x = t([[[[1.0, -2.0]]]], True)
        with Graph() as g:
            a = activation(x, "relu")
            y = combine(a, x, "add")
        g.backward(y, np.ones((1, 1, 1, 2)))
        np.testing.assert_array_equal(x.grad, [[[[2.0, 1.0]]]])

    def test_non_finite_forward(self):
        with pytest.raises(NonFiniteError):
            combine(t([np.inf]), t([1.0]), "add")

    def test_parameter_moments(self):
        p = Parameter("w", np.ones((2, 3)))
        assert p.requires_grad and p.m1.shape == (2, 3) and p.m2.shape == (2, 3)

    def test_he_uniform_bound(self):
        w = he_uniform((8, 4, 3, 3), np.random.default_rng(0), np.float64)
        assert np.abs(w).max() <= np.sqrt(6 / 36)
        np.testing.assert_array_equal(w, he_uniform((8, 4, 3, 3), np.random.default_rng(0), np.float64))


class TestGradCheck:
    def test_add_exact(self):
        rep = grad_check(lambda a, b: combine(a, b, "add"), [(2, 3, 4, 5)] * 2, trials=3)
        assert rep.worst < 1e-6
        assert set(rep.max_rel_error) == {"arg0", "arg1"}

    def test_detects_wrong_gradient(self):
        from sanet.tensor import _emit

        def bad_square(x):
            return _emit("bad", x.data ** 2, (x,), lambda g: (g * x.data,))

        rep = grad_check(bad_square, [(5,)], trials=2, tolerance=1e-5)
        assert not rep.passed and rep.worst > 0.1
        assert rep.lines().startswith("FAIL bad_square")

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
        assert relative_error(2.0, 1.0) == 0.5
