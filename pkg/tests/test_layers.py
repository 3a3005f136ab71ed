import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import LAYER_KINDS, REL_TOL, check_layer_gradient
from patchcompare.layers import (SPP, CacheError, Conv2d, Linear, MaxPool2d, ReLU, ShapeError,
                                 conv2d, conv_output_size, l2_normalize, linear, max_pool2d, relu,
                                 spp_bounds, spp_pool, uniform_init)


def naive_conv(x, w, b, s):
    n, c, k, _ = w.shape
    H, W = x.shape[1:]
    ho, wo = (H - k) // s + 1, (W - k) // s + 1
    out = np.zeros((n, ho, wo))
    for f in range(n):
        for i in range(ho):
            for j in range(wo):
                out[f, i, j] = np.sum(x[:, i * s:i * s + k, j * s:j * s + k] * w[f]) + b[f]
    return out


class TestConv:
    def test_hand_example(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        w = np.ones((1, 1, 2, 2))
        out = conv2d(x, w, np.array([0.5]), stride=2)
        np.testing.assert_array_equal(out, [[[10.5, 18.5], [42.5, 50.5]]])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_loops(self, seed):
        rng = np.random.default_rng(seed)
        c, n, k, s = 3, 4, int(rng.integers(1, 5)), int(rng.integers(1, 4))
        x = rng.standard_normal((c, 11, 9))
        w = rng.standard_normal((n, c, k, k))
        b = rng.standard_normal(n)
        np.testing.assert_allclose(conv2d(x, w, b, s), naive_conv(x, w, b, s), rtol=1e-12, atol=1e-12)

    def test_output_size_floor(self):
        assert conv_output_size(64, 7, 3) == 20
        assert conv_output_size(20, 2, 2) == 10
        assert conv_output_size(7, 2, 2) == 3

    def test_window_larger_than_input(self):
        with pytest.raises(ShapeError):
            Conv2d(1, 1, 5).forward(np.zeros((1, 1, 4, 4), np.float32))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            Conv2d(2, 1, 3).forward(np.zeros((1, 3, 5, 5), np.float32))

    def test_init_range_and_seed(self):
        a = Conv2d(2, 8, 3, rng=np.random.default_rng(7))
        b = Conv2d(2, 8, 3, rng=np.random.default_rng(7))
        bound = 1 / np.sqrt(2 * 9)
        assert np.all(np.abs(a.params["weight"]) <= bound)
        np.testing.assert_array_equal(a.params["weight"], b.params["weight"])

    def test_backward_before_forward(self):
        with pytest.raises(CacheError):
            Conv2d(1, 1, 3).backward(np.zeros((1, 1, 1, 1)))


class TestMaxPool:
    def test_example(self):
        x = np.array([[[1, 3, 2, 0], [4, 2, 1, 5], [0, 0, 7, 1], [2, 9, 1, 1]]], dtype=np.float64)
        out, am = max_pool2d(x, 2, 2, return_argmax=True)
        np.testing.assert_array_equal(out, [[[4, 5], [9, 7]]])
        np.testing.assert_array_equal(am, [[[4, 7], [13, 10]]])

    def test_ties_go_to_smallest_index(self):
        _, am = max_pool2d(np.ones((1, 2, 2)), 2, 2, return_argmax=True)
        assert am.item() == 0

    def test_floor_drops_trailing_row(self):
        assert max_pool2d(np.zeros((1, 7, 7)), 2, 2).shape == (1, 3, 3)

    @given(arrays(np.float64, (2, 3, 6, 5), elements=st.floats(-10, 10)))
    def test_gradient_mass_is_conserved(self, x):
        layer = MaxPool2d(2, 2)
        out = layer.forward(x)
        g = np.random.default_rng(0).standard_normal(out.shape)
        dx, _ = layer.backward(g)
        assert dx.sum() == pytest.approx(g.sum(), abs=1e-9)
        assert np.count_nonzero(dx) <= g.size


class TestReLU:
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
    def test_idempotent(self, x):
        np.testing.assert_array_equal(relu(relu(x)), relu(x))
        layer = ReLU()
        np.testing.assert_array_equal(layer.forward(layer.forward(x)), relu(x))

    def test_subgradient_at_zero_is_zero(self):
        layer = ReLU()
        layer.forward(np.array([-1.0, 0.0, 2.0]))
        dx, _ = layer.backward(np.ones(3))
        np.testing.assert_array_equal(dx, [0, 0, 1])


class TestLinear:
    def test_example(self):
        w = np.array([[1.0, 2.0], [0.0, -1.0]])
        np.testing.assert_array_equal(linear([3, 4], w, [1, 1]), [12, -3])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="dimension"):
            Linear(4, 2).forward(np.zeros((1, 3), np.float32))


class TestSPP:
    def test_bounds(self):
        assert spp_bounds(6, 4) == [0, 1, 3, 4, 6]
        assert spp_bounds(8, 4) == [0, 2, 4, 6, 8]

    @pytest.mark.parametrize("H,W", [(4, 4), (5, 9), (13, 7), (32, 32)])
    def test_length_is_fixed(self, H, W):
        x = np.random.default_rng(0).standard_normal((3, H, W))
        assert spp_pool(x, 4).shape == (3 * 16,)

    def test_cell_maxima_order(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        np.testing.assert_array_equal(spp_pool(x, 2), [5, 7, 13, 15])

    def test_grid_larger_than_input(self):
        with pytest.raises(ShapeError):
            SPP(4).forward(np.zeros((1, 1, 3, 8)))


class TestL2Normalize:
    def test_unit_norm(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            l2_normalize(np.zeros(4))


def test_uniform_init_bound():
    w = uniform_init(np.random.default_rng(0), (1000,), 25, np.float64)
    assert w.min() >= -0.2 and w.max() <= 0.2 and w.min() < -0.19 and w.max() > 0.19


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_gradients_match_central_differences(kind):
    errors = [check_layer_gradient(kind, seed) for seed in range(20)]
    assert max(errors) < REL_TOL


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_conv_gradient_random_seeds(seed):
    assert check_layer_gradient("Conv", seed) < REL_TOL
