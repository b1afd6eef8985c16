import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage, signal

from keymotion import tensor as T
from keymotion.tensor import Tensor


def test_add_broadcast_forward_and_backward():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.array([10.0, 20.0, 30.0]), requires_grad=True)
    out = T.tsum(a + b)
    out.backward()
    assert_array_equal(a.grad, np.ones((2, 3)))
    assert_array_equal(b.grad, np.full(3, 2.0))  # summed over broadcast axis


def test_mul_product_rule():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    b = Tensor(np.array([5.0, 7.0]), requires_grad=True)
    T.tsum(a * b).backward()
    assert_array_equal(a.grad, b.data)
    assert_array_equal(b.grad, a.data)


def test_diamond_graph_accumulates():
    a = Tensor(np.array(3.0), requires_grad=True)
    y = a * a            # used twice by one node
    z = y + y            # node used twice downstream
    z.backward()
    assert a.grad == pytest.approx(4 * 3.0)


def test_interior_nodes_freed_leaves_kept():
    a = Tensor(np.ones(4), requires_grad=True)
    mid = a * 2.0
    out = T.tsum(mid)
    out.backward()
    assert a.grad is not None
    assert mid.grad is None          # interior buffers released
    assert mid._parents == ()
    assert mid._backward is None


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = a * 2.0
    assert not out.requires_grad
    assert out._parents == ()


def test_stop_gradient_shares_data_blocks_grad():
    a = Tensor(np.arange(3.0), requires_grad=True)
    s = T.stop_gradient(a * 1.0)
    assert_array_equal(s.data, a.data)
    T.tsum(s * 5.0).backward()
    assert a.grad is None


def test_activation_values():
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    t = Tensor(x)
    assert_array_equal(T.relu(t).data, np.maximum(x, 0))
    assert_allclose(T.leaky_relu(t, 0.2).data, np.where(x > 0, x, 0.2 * x))
    assert_allclose(T.sigmoid(t).data, 1 / (1 + np.exp(-x)))
    assert_array_equal(T.absolute(t).data, np.abs(x))
    assert_array_equal(T.square(t).data, x * x)


def test_reductions_match_numpy():
    x = np.arange(24.0).reshape(2, 3, 4)
    t = Tensor(x)
    assert_array_equal(T.tsum(t, axis=(0, 2)).data, x.sum(axis=(0, 2)))
    assert_array_equal(T.tmean(t, axis=1, keepdims=True).data,
                       x.mean(axis=1, keepdims=True))
    assert T.l1_mean(Tensor(x), Tensor(x + 2.0)).data == pytest.approx(2.0)
    assert T.square_mean(Tensor(np.full(5, 3.0))).data == pytest.approx(9.0)


def test_concat_backward_splits():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
    out = T.concat([a, b], axis=1)
    T.tsum(out * Tensor(np.arange(out.data.size).reshape(out.data.shape) * 1.0)).backward()
    total = np.arange(20.0).reshape(1, 5, 2, 2)
    assert_array_equal(a.grad, total[:, :2])
    assert_array_equal(b.grad, total[:, 2:])


def test_repeat_batch_and_tile_backward_sum():
    a = Tensor(np.ones((2, 1, 1, 1)), requires_grad=True)
    T.tsum(T.repeat_batch(a, 3)).backward()
    assert_array_equal(a.grad, np.full((2, 1, 1, 1), 3.0))
    b = Tensor(np.ones((1, 2, 1, 1)), requires_grad=True)
    T.tsum(T.tile_hw(b, 4, 5)).backward()
    assert_array_equal(b.grad, np.full((1, 2, 1, 1), 20.0))


def test_softmax_normalizes_and_sharpens():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    soft = T.softmax(x, axis=(2, 3), temperature=1.0)
    sharp = T.softmax(x, axis=(2, 3), temperature=0.1)
    assert_allclose(soft.data.sum(axis=(2, 3)), np.ones((2, 3)), atol=1e-12)
    assert (sharp.data.max(axis=(2, 3)) >= soft.data.max(axis=(2, 3))).all()


def test_norm2d_instance_statistics():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)) * 4 + 7)
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = T.norm2d(x, gamma, beta, mode="instance")
    assert_allclose(out.data.mean(axis=(2, 3)), np.zeros((2, 3)), atol=1e-10)
    assert_allclose(out.data.var(axis=(2, 3)), np.ones((2, 3)), atol=1e-6)


def test_norm2d_auto_switches_on_batch_size():
    rng = np.random.default_rng(2)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    small = Tensor(rng.standard_normal((3, 2, 4, 4)))
    big = Tensor(rng.standard_normal((4, 2, 4, 4)))
    assert_array_equal(T.norm2d(small, g, b, "auto").data,
                       T.norm2d(small, g, b, "instance").data)
    assert_array_equal(T.norm2d(big, g, b, "auto").data,
                       T.norm2d(big, g, b, "batch").data)
    batch = T.norm2d(big, g, b, "batch")
    assert_allclose(batch.data.mean(axis=(0, 2, 3)), np.zeros(2), atol=1e-10)


def test_conv2d_matches_scipy():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 9, 11))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
    ref = np.empty((2, 4, 9, 11))
    for n in range(2):
        for o in range(4):
            ref[n, o] = sum(signal.correlate2d(x[n, c], w[o, c], mode="same")
                            for c in range(3)) + b[o]
    assert_allclose(out.data, ref, atol=1e-12)


def test_conv2d_stride_and_validation():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    w = Tensor(np.zeros((4, 3, 4, 4)))
    assert T.conv2d(x, w, stride=2, padding=1).shape == (1, 4, 4, 4)
    with pytest.raises(ValueError, match="channel mismatch"):
        T.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))))


def test_avg_pool_oracle():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = T.avg_pool2d(Tensor(x), 2)
    assert_array_equal(out.data[0, 0], np.array([[2.5, 4.5], [10.5, 12.5]]))


def test_down_up_sampling():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    up = T.upsample_nearest(Tensor(x), 2)
    assert up.shape == (1, 1, 8, 8)
    assert_array_equal(T.downsample_nearest(up, 2).data, x)  # top-left picks
    assert_array_equal(up.data[0, 0, :2, :2], np.full((2, 2), 0.0))


def test_lattice_conventions():
    assert_array_equal(T.lattice_1d(4), np.array([-0.75, -0.25, 0.25, 0.75]))
    grid = T.pixel_grid(2, 4)
    assert grid.shape == (2, 4, 2)
    assert_array_equal(grid[0, :, 0], T.lattice_1d(4))   # x varies along width
    assert_array_equal(grid[:, 0, 1], T.lattice_1d(2))
    assert T.pixel_pitch(64) == pytest.approx(2.0 / 64)
    coords = np.linspace(-0.9, 0.9, 7)
    assert_allclose(T.from_pixel(T.to_pixel(coords, 64), 64), coords, atol=1e-15)


def test_grid_sample_identity_bit_exact():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 3, 16, 16)))
    grid = Tensor(np.broadcast_to(T.pixel_grid(16, 16), (2, 16, 16, 2)).copy())
    out = T.grid_sample_bilinear(x, grid)
    assert_array_equal(out.data, x.data)


def test_grid_sample_integer_shift_exact():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 1, 8, 8))
    grid = T.pixel_grid(8, 8).copy()
    grid[..., 0] += 2 * T.pixel_pitch(8)  # sample two pixels to the right
    out = T.grid_sample_bilinear(Tensor(x), Tensor(grid[None]))
    assert_array_equal(out.data[0, 0, :, :6], x[0, 0, :, 2:])


def test_grid_sample_matches_map_coordinates():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 9, 7))
    grid = rng.uniform(-1.3, 1.3, (1, 5, 6, 2))  # includes out-of-range
    out = T.grid_sample_bilinear(Tensor(x), Tensor(grid))
    px = T.to_pixel(grid[0, ..., 0], 7)
    py = T.to_pixel(grid[0, ..., 1], 9)
    for c in range(2):
        ref = ndimage.map_coordinates(x[0, c], [py.ravel(), px.ravel()],
                                      order=1, mode="nearest").reshape(5, 6)
        assert_allclose(out.data[0, c], ref, atol=1e-12)


def test_backward_needs_scalar_seed_semantics():
    a = Tensor(np.ones(3), requires_grad=True)
    out = a * 2.0
    T.tsum(out).backward()
    assert_array_equal(a.grad, np.full(3, 2.0))
    # second graph on the same leaf accumulates
    T.tsum(a * 3.0).backward()
    assert_array_equal(a.grad, np.full(3, 5.0))
