"""Forward kernels against independent oracles, plus routing invariants."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prunekit import ops
from prunekit.errors import StructuralError

from oracles import conv2d_loops


class TestConvForward:
    def test_identity_1x1_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 5)).astype(np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        y, _ = ops.conv2d_forward(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(y, x)

    def test_matches_nested_loop_oracle(self, rng):
        x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        y, _ = ops.conv2d_forward(x, w, None, stride=1, padding=1)
        ref = conv2d_loops(x.astype(np.float64), w.astype(np.float64), padding=1)
        rel = np.abs(y - ref).max() / np.abs(ref).max()
        assert rel < 1e-5

    @settings(max_examples=40, deadline=None)
    @given(st.data())
    def test_oracle_property_over_random_shapes(self, data):
        n = data.draw(st.integers(1, 2))
        cin = data.draw(st.integers(1, 4))
        cout = data.draw(st.integers(1, 4))
        h = data.draw(st.integers(1, 8))
        w = data.draw(st.integers(1, 8))
        k = data.draw(st.integers(1, min(3, h, w)))
        stride = data.draw(st.integers(1, 2))
        padding = data.draw(st.integers(0, 1))
        if (h + 2 * padding - k) < 0 or (w + 2 * padding - k) < 0:
            return
        rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
        x = rng.normal(size=(n, cin, h, w))
        wt = rng.normal(size=(cout, cin, k, k))
        b = rng.normal(size=cout)
        y, _ = ops.conv2d_forward(x, wt, b, stride=stride, padding=padding)
        ref = conv2d_loops(x, wt, b, stride=stride, padding=padding)
        np.testing.assert_allclose(y, ref, rtol=1e-9, atol=1e-9)

    def test_channel_mismatch_raises(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        w = rng.normal(size=(2, 5, 3, 3))
        with pytest.raises(StructuralError, match="3 channels.*expects 5"):
            ops.conv2d_forward(x, w, None, 1, 1)

    def test_kernel_too_large_raises(self, rng):
        x = rng.normal(size=(1, 1, 2, 2))
        w = rng.normal(size=(1, 1, 5, 5))
        with pytest.raises(StructuralError, match="does not fit"):
            ops.conv2d_forward(x, w, None, 1, 0)


class TestBatchNorm:
    def test_eval_identity_statistics(self, rng):
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        c = 3
        y, _, _, _ = ops.batchnorm_forward(
            x, np.ones(c, np.float32), np.zeros(c, np.float32),
            np.zeros(c, np.float32), np.ones(c, np.float32), training=False)
        # identity up to the eps term in the denominator
        np.testing.assert_allclose(y, x, rtol=2e-5, atol=1e-6)

    def test_train_normalizes_batch(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 5, 5))
        c = 2
        y, _, new_mean, new_var = ops.batchnorm_forward(
            x, np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), training=True)
        assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
        # running stats move toward batch stats with momentum 0.1
        np.testing.assert_allclose(new_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(
            new_var, 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_width_mismatch_raises(self, rng):
        x = rng.normal(size=(1, 3, 2, 2))
        with pytest.raises(StructuralError, match="3 channels"):
            ops.batchnorm_forward(x, np.ones(5), np.zeros(5), np.zeros(5), np.ones(5))


class TestPooling:
    def test_maxpool_first_max_wins_on_ties(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        x[0, 0] = [[7, 7], [7, 7]]
        y, cache = ops.maxpool_forward(x, 2, 2)
        assert y[0, 0, 0, 0] == 7
        _, arg, _, _ = cache
        assert arg[0, 0, 0, 0] == 0  # lowest linear index

    def test_maxpool_backward_routes_to_argmax_only(self, rng):
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        y, cache = ops.maxpool_forward(x, 2, 2)
        dy = rng.normal(size=y.shape).astype(np.float32)
        dx = ops.maxpool_backward(dy, cache)
        # each upstream element lands on exactly one input position
        assert np.count_nonzero(dx) <= dy.size
        np.testing.assert_allclose(np.abs(dx).sum(), np.abs(dy).sum(), rtol=1e-6)

    def test_global_avg_pool_constant_channel_is_exact(self):
        for c_val in (2.5, -1.25, 4.0):
            x = np.full((1, 2, 7, 5), c_val, dtype=np.float32)
            y, _ = ops.global_avg_pool_forward(x)
            assert (y == c_val).all()


class TestHead:
    def test_linear_shapes_and_values(self, rng):
        x = rng.normal(size=(3, 4, 1, 1))
        w = rng.normal(size=(2, 4))
        b = rng.normal(size=2)
        y, _ = ops.linear_forward(x, w, b)
        assert y.shape == (3, 2, 1, 1)
        np.testing.assert_allclose(y[:, :, 0, 0], x[:, :, 0, 0] @ w.T + b)

    def test_linear_feature_mismatch(self, rng):
        x = rng.normal(size=(1, 3, 1, 1))
        with pytest.raises(StructuralError, match="3 features.*expects 7"):
            ops.linear_forward(x, rng.normal(size=(2, 7)), None)

    def test_softmax_normalizes(self, rng):
        x = rng.normal(size=(4, 5, 1, 1)) * 10
        p, _ = ops.softmax_forward(x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert (p > 0).all()


def test_assert_finite_flags_nan():
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(StructuralError, match="NaN"):
        ops.assert_finite(x)
