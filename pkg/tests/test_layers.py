import numpy as np
import pytest

from pairfuse import layers
from pairfuse.errors import InvalidConfig, ShapeMismatch

from conftest import assert_close_grad, fd_gradient


def conv_loop_oracle(x, w, b, stride=1):
    """Naive nested-loop convolution with same padding; test-only reference."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh = (h + 2 * p - k) // stride + 1
    ow = (wd + 2 * p - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for ni in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(ci):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[ni, c, i * stride + ki, j * stride + kj] \
                                    * w[o, c, ki, kj]
                    out[ni, o, i, j] = acc
    return out


class TestConv:
    @pytest.mark.parametrize("stride,k", [(1, 3), (1, 1), (2, 3), (1, 5)])
    def test_matches_loop_oracle(self, stride, k, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        got = layers.conv2d(x, w, b, stride=stride)
        want = conv_loop_oracle(x, w, b, stride=stride)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            layers.conv2d(rng.random((1, 2, 4, 4)), rng.random((4, 3, 3, 3)),
                          np.zeros(4))

    def test_gradients(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        g = rng.standard_normal((2, 3, 4, 4))
        out, cache = layers.conv2d_cached(x, w, b)
        dx, dw, db = layers.conv2d_backward(g, cache)

        def loss():
            return float(np.sum(g * layers.conv2d(x, w, b)))

        assert_close_grad(dx, fd_gradient(loss, x), 1e-4)
        assert_close_grad(dw, fd_gradient(loss, w), 1e-4)
        assert_close_grad(db, fd_gradient(loss, b), 1e-4)

    def test_strided_gradients(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        out, cache = layers.conv2d_cached(x, w, b, stride=2)
        g = rng.standard_normal(out.shape)
        dx, dw, db = layers.conv2d_backward(g, cache)

        def loss():
            return float(np.sum(g * layers.conv2d(x, w, b, stride=2)))

        assert_close_grad(dx, fd_gradient(loss, x), 1e-4)
        assert_close_grad(dw, fd_gradient(loss, w), 1e-4)


class TestStage:
    def test_identity_1x1_is_relu(self, rng):
        spec = layers.StageSpec(3, 3, kernel=1, pool="none")
        params = {"w": np.eye(3).reshape(3, 3, 1, 1), "b": np.zeros(3)}
        x = rng.standard_normal((2, 3, 5, 5))
        out = layers.stage_forward(params, spec, x)
        assert np.array_equal(out, np.maximum(x, 0))

    def test_zero_weights_zero_output(self, rng):
        spec = layers.StageSpec(3, 4, kernel=3, pool="max2")
        params = {"w": np.zeros((4, 3, 3, 3)), "b": np.zeros(4)}
        out = layers.stage_forward(params, spec, rng.standard_normal((1, 3, 6, 6)))
        assert np.array_equal(out, np.zeros((1, 4, 3, 3)))

    def test_wrong_channels(self, rng):
        spec = layers.StageSpec(3, 4)
        params = layers.init_stage(rng, spec)
        with pytest.raises(ShapeMismatch):
            layers.stage_forward(params, spec, rng.random((1, 2, 6, 6)))


class TestPools:
    def test_maxpool_values_and_ties(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        x[x < 0] = 0.0  # engineered ties
        out, cache = layers.maxpool2_cached(x)
        assert out.shape == (2, 3, 2, 3)
        for i in range(2):
            for j in range(3):
                np.testing.assert_array_equal(
                    out[:, :, i, j],
                    x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3)))
        g = rng.standard_normal(out.shape)
        dx = layers.maxpool2_backward(g, cache)
        # each window routes its gradient to exactly one element
        for i in range(2):
            for j in range(3):
                win = dx[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(2, 3, 4)
                np.testing.assert_allclose(win.sum(-1), g[:, :, i, j])
                assert ((win != 0).sum(-1) <= 1).all()

    def test_avgpool(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        out, cache = layers.avgpool2_cached(x)
        np.testing.assert_allclose(out[0, 0, 0, 0], x[0, 0, :2, :2].mean())
        g = rng.standard_normal(out.shape)
        dx = layers.avgpool2_backward(g, cache)
        np.testing.assert_allclose(dx[0, :, :2, :2].sum(axis=(1, 2)), g[0, :, 0, 0])

    def test_adaptive_identity_exact(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        out = layers.adaptive_avg_pool(x, (4, 4))
        assert np.array_equal(out, x)

    def test_adaptive_downsample_mean(self, rng):
        x = rng.standard_normal((1, 1, 6, 6))
        out = layers.adaptive_avg_pool(x, (2, 2))
        np.testing.assert_allclose(out[0, 0, 0, 0], x[0, 0, :3, :3].mean())

    def test_adaptive_backward_mass(self, rng):
        x = rng.standard_normal((1, 2, 5, 7))
        out, cache = layers.adaptive_avg_pool_cached(x, (2, 3))
        g = rng.standard_normal(out.shape)
        dx = layers.adaptive_avg_pool_backward(g, cache)

        def loss():
            return float(np.sum(g * layers.adaptive_avg_pool(x, (2, 3))))

        assert_close_grad(dx, fd_gradient(loss, x), 1e-4)


class TestMLP:
    def test_hand_built_2_2(self):
        spec = layers.MLPSpec((2, 2), out_classes=2)
        params = {
            "fc0.w": np.array([[1.0, 2.0], [3.0, 4.0]]),
            "fc0.b": np.array([0.5, -1.0]),
            "fc1.w": np.array([[1.0, -1.0], [2.0, 0.0]]),
            "fc1.b": np.array([0.0, 1.0]),
        }
        x = np.array([[1.0, 0.0]])
        # layer1: relu([1*1+0*3+0.5, 1*2+0*4-1]) = [1.5, 1.0]
        # logits: [1.5*1+1*2+0, 1.5*(-1)+1*0+1] = [3.5, -0.5]
        logits = layers.mlp_forward(params, spec, x)
        np.testing.assert_allclose(logits, [[3.5, -0.5]])

    def test_zero_weights_logits_are_bias(self, rng):
        spec = layers.MLPSpec((3, 2), out_classes=2)
        params = {
            "fc0.w": np.zeros((5, 3)), "fc0.b": np.zeros(3),
            "fc1.w": np.zeros((3, 2)), "fc1.b": np.array([0.7, -0.2]),
        }
        logits = layers.mlp_forward(params, spec, rng.standard_normal((4, 5)))
        np.testing.assert_allclose(logits, np.tile([0.7, -0.2], (4, 1)))

    def test_gradients(self, rng):
        spec = layers.MLPSpec((6, 3), out_classes=3)
        params = layers.init_mlp(rng, spec, in_width=4)
        x = rng.standard_normal((3, 4))
        out, caches = layers.mlp_forward_cached(params, spec, x)
        g = rng.standard_normal(out.shape)
        dx, grads = layers.mlp_backward(g, caches)

        def loss():
            return float(np.sum(g * layers.mlp_forward(params, spec, x)))

        for key in params:
            assert_close_grad(grads[key], fd_gradient(loss, params[key]), 1e-4)
        assert_close_grad(dx, fd_gradient(loss, x), 1e-4)


class TestInitAndCounts:
    def test_mlp_param_count_by_hand(self, rng):
        # 8 -> 4 -> 2 with biases: 8*4+4 + 4*2+2 = 46
        params = layers.init_mlp(rng, layers.MLPSpec((4, 2), out_classes=2), 8)
        assert sum(p.size for p in params.values()) == 46

    def test_conv_stage_count_by_hand(self, rng):
        # 3 -> 8, kernel 3: 3*3*3*8 + 8 = 224
        params = layers.init_stage(rng, layers.StageSpec(3, 8, kernel=3))
        assert sum(p.size for p in params.values()) == 224

    def test_init_deterministic(self):
        spec = layers.StageSpec(3, 8)
        a = layers.init_stage(np.random.default_rng(5), spec)
        b = layers.init_stage(np.random.default_rng(5), spec)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_spec_validation(self):
        with pytest.raises(InvalidConfig):
            layers.StageSpec(3, 4, kernel=2).validate()
        with pytest.raises(InvalidConfig):
            layers.StageSpec(3, 0).validate()
        with pytest.raises(InvalidConfig):
            layers.StageSpec(3, 4, stride=0).validate()
        with pytest.raises(InvalidConfig):
            layers.StageSpec(3, 4, pool="bogus").validate()
        with pytest.raises(InvalidConfig):
            layers.MLPSpec((8, 3), out_classes=4).validate()
        with pytest.raises(InvalidConfig):
            layers.StageSpec(3, 4, pool="max2").out_spatial(1, 1)
