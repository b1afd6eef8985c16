import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from keymotion import dense_motion as DM
from keymotion import tensor as T
from keymotion.dense_motion import DenseMotionNetwork
from keymotion.keypoints import KeypointSet
from keymotion.tensor import Tensor


def _kps(loc):
    loc = np.asarray(loc, dtype=float)
    cov = np.tile(np.eye(2) * 0.01, loc.shape[:2] + (1, 1))
    return KeypointSet(Tensor(loc), Tensor(cov))


def test_displacements_source_minus_driving():
    src = _kps([[[0.5, 0.2], [-0.1, 0.0]]])
    drv = _kps([[[0.1, 0.1], [0.3, -0.2]]])
    d = DM.displacements(src, drv)
    assert_allclose(d.data, [[[0.4, 0.1], [-0.4, 0.2]]], atol=1e-15)


def test_locally_aligned_inputs_shift_by_integer_pitch():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((1, 3, 8, 8)))
    pitch = T.pixel_pitch(8)
    disp = Tensor(np.array([[[2 * pitch, 0.0], [0.0, -pitch]]]))  # K=2
    aligned = DM.locally_aligned_inputs(x, disp)
    assert aligned.shape == (1, 6, 8, 8)
    # channel block 0 samples x at p + 2px along +x
    assert_array_equal(aligned.data[0, :3, :, :6], x.data[0, :, :, 2:])
    # block 1 samples at p - 1px along y
    assert_array_equal(aligned.data[0, 3:, 1:, :], x.data[0, :, :7, :])


def test_mask_weighted_displacement_oracle():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((2, 4, 5, 5))
    masks = T.softmax(Tensor(logits), axis=1)  # K=3 + background
    disp = rng.uniform(-1, 1, (2, 3, 2))
    out = DM.mask_weighted_displacement(masks, Tensor(disp))
    ref = np.einsum("nkhw,nkc->nchw", masks.data[:, :3], disp)
    assert_allclose(out.data, ref, atol=1e-14)


def test_mask_weighted_background_gets_no_gradient():
    rng = np.random.default_rng(2)
    masks = Tensor(rng.random((1, 3, 4, 4)), requires_grad=True)
    disp = Tensor(rng.uniform(-1, 1, (1, 2, 2)), requires_grad=True)
    T.tsum(DM.mask_weighted_displacement(masks, disp)).backward()
    # the background channel never touches the output
    assert_array_equal(masks.grad[:, -1], np.zeros((1, 4, 4)))
    ones = np.ones((1, 2, 4, 4))
    assert_allclose(masks.grad[:, :2],
                    np.einsum("nchw,nkc->nkhw", ones, disp.data), atol=1e-15)
    assert_allclose(disp.grad,
                    np.einsum("nchw,nkhw->nkc", ones, masks.data[:, :2]),
                    atol=1e-15)


def test_compose_flow_paths():
    rng = np.random.default_rng(3)
    masks = T.softmax(Tensor(rng.standard_normal((1, 3, 6, 6))), axis=1)
    disp = Tensor(rng.uniform(-0.1, 0.1, (1, 2, 2)))
    resid = Tensor(rng.uniform(-0.05, 0.05, (1, 2, 6, 6)))
    full = DM.compose_flow(masks, disp, resid)
    coarse = DM.compose_flow(masks, disp, resid, no_residual=True)
    fine = DM.compose_flow(masks, disp, resid, no_coarse=True)
    neither = DM.compose_flow(masks, disp, resid, no_coarse=True,
                              no_residual=True)
    assert_allclose(full.data, coarse.data + fine.data, atol=1e-14)
    assert_array_equal(fine.data, resid.data)
    assert_array_equal(neither.data, np.zeros((1, 2, 6, 6)))


def test_compose_flow_channel_validation():
    masks = Tensor(np.zeros((1, 2, 4, 4)))  # K=2 needs 3 channels
    disp = Tensor(np.zeros((1, 2, 2)))
    resid = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        DM.compose_flow(masks, disp, resid)


def test_warp_constant_flow_is_translation():
    rng = np.random.default_rng(4)
    x = Tensor(rng.random((1, 2, 8, 8)))
    flow = np.zeros((1, 2, 8, 8))
    flow[0, 1, :, :] = 3 * T.pixel_pitch(8)  # pull content from below
    out = DM.warp(x, Tensor(flow))
    assert_array_equal(out.data[0, :, :5, :], x.data[0, :, 3:, :])


def test_flow_to_grid_zero_is_identity():
    flow = Tensor(np.zeros((2, 2, 6, 6)))
    grid = DM.flow_to_grid(flow)
    assert_array_equal(grid.data,
                       np.broadcast_to(T.pixel_grid(6, 6), (2, 6, 6, 2)))


def test_motion_network_contract():
    rng = np.random.default_rng(5)
    k = 3
    net = DenseMotionNetwork(k, rng=np.random.default_rng(6))
    assert net.in_ch == 4 * k + 3
    hd = Tensor(rng.standard_normal((2, k, 64, 64)))
    x = Tensor(rng.random((2, 3, 64, 64)))
    disp = Tensor(rng.uniform(-0.2, 0.2, (2, k, 2)))
    aligned = DM.locally_aligned_inputs(x, disp)
    masks, resid = net(hd, x, aligned)
    assert masks.shape == (2, k + 1, 64, 64)
    assert resid.shape == (2, 2, 64, 64)
    assert_allclose(masks.data.sum(axis=1), np.ones((2, 64, 64)), atol=1e-12)
    assert_array_equal(resid.data, np.zeros_like(resid.data))  # zero init


def test_motion_network_appearance_free_variant():
    net = DenseMotionNetwork(2, rng=np.random.default_rng(7),
                             use_appearance=False)
    assert net.in_ch == 2
    hd = Tensor(np.random.default_rng(8).standard_normal((1, 2, 64, 64)))
    masks, resid = net(hd)
    assert masks.shape == (1, 3, 64, 64)
    with pytest.raises(ValueError):
        DenseMotionNetwork(2, rng=np.random.default_rng(9))(hd)


def test_flow_binary_round_trip(tmp_path):
    flow = np.random.default_rng(10).standard_normal((2, 5, 7)).astype(np.float32)
    path = tmp_path / "flow.bin"
    DM.write_flow_binary(path, flow)
    assert_array_equal(DM.read_flow_binary(path, 5, 7), flow)
    with pytest.raises(ValueError):
        DM.write_flow_binary(path, np.zeros((3, 5, 7)))
