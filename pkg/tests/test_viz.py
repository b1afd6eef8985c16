import numpy as np
import pytest
from numpy.testing import assert_allclose

from keymotion import viz


def test_palette_is_stable_and_cycles():
    assert viz.index_color(0) == viz.PALETTE[0]
    assert viz.index_color(3) == viz.index_color(3)
    assert viz.index_color(len(viz.PALETTE)) == viz.PALETTE[0]
    assert len(set(viz.PALETTE)) == len(viz.PALETTE)


def test_covariance_ellipse_matches_eigendecomposition():
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    cov = rot @ np.diag([0.09, 0.01]) @ rot.T
    ring = viz.covariance_ellipse(cov, scale=2.0, n_points=128)
    assert ring.shape == (129, 2)
    assert_allclose(ring[0], ring[-1], atol=1e-12)  # closed
    # every point obeys the level-set equation x' cov^-1 x = scale^2
    inv = np.linalg.inv(cov)
    level = np.einsum("ni,ij,nj->n", ring, inv, ring)
    assert_allclose(level, 4.0, rtol=1e-9)
    # the long axis reaches 2 * sqrt(0.09)
    assert_allclose(np.linalg.norm(ring, axis=1).max(), 0.6, rtol=1e-6)


def test_covariance_ellipse_rejects_bad_shape():
    with pytest.raises(ValueError):
        viz.covariance_ellipse(np.eye(3))


def test_pixel_mapping_half_pixel_centers():
    # the first and last lattice sites sit half a pixel inside the edges
    assert_allclose(viz._to_pixels(-1.0 + 1.0 / 8, 8), 0.0, atol=1e-12)
    assert_allclose(viz._to_pixels(1.0 - 1.0 / 8, 8), 7.0, atol=1e-12)


def test_overlay_marks_the_keypoint_pixel():
    frame = np.zeros((3, 32, 32))
    loc = np.array([[0.0, 0.0]])
    out = viz.overlay_keypoints(frame, loc)
    assert out.shape == (3, 32, 32)
    assert out.min() >= 0.0 and out.max() <= 1.0
    center = out[:, 15:17, 15:17]
    assert center.max() > 0.5  # marker drawn near the middle
    assert np.array_equal(out[:, :8, :8], frame[:, :8, :8])  # far corner clean


def test_overlay_clip_shapes():
    frames = np.random.default_rng(0).random((2, 3, 16, 16))
    locs = np.zeros((2, 3, 2))
    covs = np.tile(np.eye(2) * 0.01, (2, 3, 1, 1))
    out = viz.overlay_clip(frames, locs, covs)
    assert out.shape == (2, 3, 16, 16)


def test_flow_color_wheel():
    flow = np.zeros((2, 4, 4))
    flow[0] = 0.5  # uniform +x motion
    img = viz.flow_to_color(flow)
    assert img.shape == (3, 4, 4)
    # +x maps to hue 0 = pure red at full saturation
    assert_allclose(img[0], 1.0, atol=1e-9)
    assert_allclose(img[1], 0.0, atol=1e-9)
    assert_allclose(img[2], 0.0, atol=1e-9)


def test_flow_color_zero_is_white():
    img = viz.flow_to_color(np.zeros((2, 5, 5)))
    assert_allclose(img, 1.0, atol=1e-9)


def test_flow_color_magnitude_scales_saturation():
    flow = np.zeros((2, 1, 2))
    flow[0, 0] = [0.1, 0.2]  # two +x vectors, half and full magnitude
    img = viz.flow_to_color(flow)
    # weaker vector is paler (higher G/B), same red channel
    assert img[1, 0, 0] > img[1, 0, 1]
    assert img[0, 0, 0] == img[0, 0, 1] == 1.0
