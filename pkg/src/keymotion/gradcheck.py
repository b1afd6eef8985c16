"""Central finite-difference verification of every differentiable op.

Each registered check builds a small random graph ending in a scalar,
runs the hand-written backward pass, then probes a handful of input
coordinates with central differences at float64.  The reported error is

    max |analytic - numeric|  /  max(1, ||analytic||_inf, ||numeric||_inf)

over the probed coordinates.  Checks are grouped into two tolerance
classes: smooth ops must agree to 1e-5, bilinear sampling (piecewise
smooth, probed off its kinks) to 1e-4.  Inputs for kinked activations
(relu, abs, l1) are kept away from zero so the difference quotient
never straddles a corner.

Run directly:  python3 -m keymotion.gradcheck [--seeds N]
"""

from __future__ import annotations

import argparse
import sys
import time
from typing import Callable, NamedTuple

import numpy as np

from keymotion import dense_motion, keypoints
from keymotion import tensor as T
from keymotion.keypoints import KeypointSet
from keymotion.tensor import Tensor

REL_TOL_SMOOTH = 1e-5
REL_TOL_SAMPLING = 1e-4
EPS = 1e-6
PROBES_PER_INPUT = 4


class Check(NamedTuple):
    name: str
    category: str        # "smooth" | "sampling"
    build: Callable      # rng -> (inputs: [Tensor], forward: () -> Tensor)

    @property
    def tol(self):
        return REL_TOL_SAMPLING if self.category == "sampling" else REL_TOL_SMOOTH


def _away_from_zero(rng, shape, lo=0.3, hi=1.5):
    """Random values with |x| in [lo, hi]: safe for relu/abs corners."""
    mag = rng.uniform(lo, hi, size=shape)
    return mag * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def _param(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def check_gradients(build, rng, probes=PROBES_PER_INPUT, eps=EPS):
    """One seed of one check; returns the relative error defined above."""
    inputs, forward = build(rng)
    loss = forward()
    if loss.data.shape != ():
        raise ValueError("check forward must end in a scalar")
    loss.backward()
    analytic, numeric = [], []
    for inp in inputs:
        grad = inp.grad.copy()
        flat = inp.data.reshape(-1)
        n = flat.shape[0]
        idx = rng.choice(n, size=min(probes, n), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            with T.no_grad():
                up = float(forward().data)
            flat[i] = keep - eps
            with T.no_grad():
                down = float(forward().data)
            flat[i] = keep
            numeric.append((up - down) / (2.0 * eps))
            analytic.append(grad.reshape(-1)[i])
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    scale = max(1.0, np.abs(analytic).max(), np.abs(numeric).max())
    return float(np.abs(analytic - numeric).max() / scale)


def run_check(check, seeds=20):
    """Max relative error across seeds."""
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([97, s])
        worst = max(worst, check_gradients(check.build, rng))
    return worst


# -- builders --------------------------------------------------------------
# Every builder closes over its Tensors so finite differences can poke
# input.data in place and re-run forward() on the same objects.


def _scalarize(rng, out_shape):
    w = rng.standard_normal(out_shape)
    return lambda t: T.tsum(t * Tensor(w))


def build_add_broadcast(rng):
    a, b = _param(rng, (2, 3, 4, 5)), _param(rng, (3, 1, 5))
    s = _scalarize(rng, (2, 3, 4, 5))
    return [a, b], lambda: s(a + b)


def build_sub_neg(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (4,))
    s = _scalarize(rng, (3, 4))
    return [a, b], lambda: s(-(a - b))


def build_mul_broadcast(rng):
    a, b = _param(rng, (2, 3, 4)), _param(rng, (2, 1, 4))
    s = _scalarize(rng, (2, 3, 4))
    return [a, b], lambda: s(a * b)


def build_relu(rng):
    a = Tensor(_away_from_zero(rng, (3, 5, 4)), requires_grad=True)
    s = _scalarize(rng, (3, 5, 4))
    return [a], lambda: s(T.relu(a))


def build_leaky_relu(rng):
    a = Tensor(_away_from_zero(rng, (2, 6)), requires_grad=True)
    s = _scalarize(rng, (2, 6))
    return [a], lambda: s(T.leaky_relu(a, 0.2))


def build_sigmoid(rng):
    a = _param(rng, (4, 7))
    s = _scalarize(rng, (4, 7))
    return [a], lambda: s(T.sigmoid(a))


def build_absolute(rng):
    a = Tensor(_away_from_zero(rng, (5, 3)), requires_grad=True)
    s = _scalarize(rng, (5, 3))
    return [a], lambda: s(T.absolute(a))


def build_square(rng):
    a = _param(rng, (3, 4, 2))
    s = _scalarize(rng, (3, 4, 2))
    return [a], lambda: s(T.square(a))


def build_sum_axis(rng):
    a = _param(rng, (2, 3, 4, 5))
    s = _scalarize(rng, (2, 4))
    return [a], lambda: s(T.tsum(a, axis=(1, 3)))


def build_mean_keepdims(rng):
    a = _param(rng, (2, 3, 4, 5))
    s = _scalarize(rng, (2, 1, 4, 1))
    return [a], lambda: s(T.tmean(a, axis=(1, 3), keepdims=True))


def build_reshape_moveaxis(rng):
    a = _param(rng, (2, 3, 4))
    s = _scalarize(rng, (4, 6))
    return [a], lambda: s(T.reshape(T.moveaxis(a, 0, 2), (4, 6)))


def build_concat(rng):
    a, b = _param(rng, (2, 3, 4, 4)), _param(rng, (2, 2, 4, 4))
    s = _scalarize(rng, (2, 5, 4, 4))
    return [a, b], lambda: s(T.concat([a, b], axis=1))


def build_repeat_batch(rng):
    a = _param(rng, (2, 3, 4, 4))
    s = _scalarize(rng, (6, 3, 4, 4))
    return [a], lambda: s(T.repeat_batch(a, 3))


def build_tile_hw(rng):
    a = _param(rng, (2, 3, 1, 1))
    s = _scalarize(rng, (2, 3, 4, 5))
    return [a], lambda: s(T.tile_hw(a, 4, 5))


def build_l1_mean(rng):
    a = _param(rng, (2, 3, 4))
    b = Tensor(a.data + _away_from_zero(rng, (2, 3, 4), lo=0.4),
               requires_grad=True)
    return [a, b], lambda: T.l1_mean(a, b)


def build_square_mean(rng):
    a = _param(rng, (3, 4, 5))
    return [a], lambda: T.square_mean(a)


def build_softmax_spatial(rng):
    a = _param(rng, (2, 3, 5, 5))
    s = _scalarize(rng, (2, 3, 5, 5))
    return [a], lambda: s(T.softmax(a, axis=(2, 3), temperature=0.1))


def build_softmax_channel(rng):
    a = _param(rng, (2, 4, 3, 3))
    s = _scalarize(rng, (2, 4, 3, 3))
    return [a], lambda: s(T.softmax(a, axis=1))


def build_norm2d_instance(rng):
    x = _param(rng, (2, 3, 5, 5))
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = _param(rng, (3,))
    s = _scalarize(rng, (2, 3, 5, 5))
    return [x, gamma, beta], lambda: s(T.norm2d(x, gamma, beta, "instance"))


def build_norm2d_batch(rng):
    x = _param(rng, (4, 3, 4, 4))
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = _param(rng, (3,))
    s = _scalarize(rng, (4, 3, 4, 4))
    return [x, gamma, beta], lambda: s(T.norm2d(x, gamma, beta, "batch"))


def build_conv_3x3(rng):
    x, w, b = _param(rng, (2, 3, 6, 6)), _param(rng, (4, 3, 3, 3), 0.5), _param(rng, (4,))
    s = _scalarize(rng, (2, 4, 6, 6))
    return [x, w, b], lambda: s(T.conv2d(x, w, b, stride=1, padding=1))


def build_conv_4x4_stride2(rng):
    x, w, b = _param(rng, (2, 3, 8, 8)), _param(rng, (4, 3, 4, 4), 0.5), _param(rng, (4,))
    s = _scalarize(rng, (2, 4, 4, 4))
    return [x, w, b], lambda: s(T.conv2d(x, w, b, stride=2, padding=1))


def build_conv_1x1(rng):
    x, w = _param(rng, (2, 5, 4, 4)), _param(rng, (3, 5, 1, 1), 0.5)
    s = _scalarize(rng, (2, 3, 4, 4))
    return [x, w], lambda: s(T.conv2d(x, w))


def build_avg_pool(rng):
    x = _param(rng, (2, 3, 6, 6))
    s = _scalarize(rng, (2, 3, 3, 3))
    return [x], lambda: s(T.avg_pool2d(x, 2))


def build_upsample(rng):
    x = _param(rng, (2, 3, 3, 3))
    s = _scalarize(rng, (2, 3, 6, 6))
    return [x], lambda: s(T.upsample_nearest(x, 2))


def build_downsample(rng):
    x = _param(rng, (2, 3, 6, 6))
    s = _scalarize(rng, (2, 3, 3, 3))
    return [x], lambda: s(T.downsample_nearest(x, 2))


def _off_lattice_grid(rng, n, h, w):
    """Sample grid whose points sit strictly inside the image and at
    least 0.05 pixel from every bilinear kink (the pixel-center lines)."""
    ix = rng.integers(0, w - 1, size=(n, h, w))
    iy = rng.integers(0, h - 1, size=(n, h, w))
    fx = rng.uniform(0.1, 0.9, size=(n, h, w))
    fy = rng.uniform(0.1, 0.9, size=(n, h, w))
    gx = T.from_pixel(ix + fx, w)
    gy = T.from_pixel(iy + fy, h)
    return np.stack([gx, gy], axis=-1)


def build_grid_sample(rng):
    x = _param(rng, (2, 3, 6, 7))
    grid = Tensor(_off_lattice_grid(rng, 2, 6, 7), requires_grad=True)
    s = _scalarize(rng, (2, 3, 6, 7))
    return [x, grid], lambda: s(T.grid_sample_bilinear(x, grid))


def build_moment_fit(rng):
    logits = _param(rng, (2, 3, 8, 8), 0.5)

    def forward():
        stack = T.softmax(logits, axis=(2, 3), temperature=0.5)
        kps = keypoints.heatmaps_to_keypoints(stack)
        return T.tsum(kps.locations * Tensor(wl)) + T.tsum(kps.covariances * Tensor(wc))

    wl = rng.standard_normal((2, 3, 2))
    wc = rng.standard_normal((2, 3, 2, 2))
    return [logits], forward


def build_gaussian_render(rng):
    loc = Tensor(rng.uniform(-0.6, 0.6, (2, 3, 2)), requires_grad=True)
    base = rng.uniform(0.05, 0.2, (2, 3, 2))
    cov = np.zeros((2, 3, 2, 2))
    cov[..., 0, 0] = base[..., 0] ** 2
    cov[..., 1, 1] = base[..., 1] ** 2
    off = rng.uniform(-0.3, 0.3, (2, 3)) * base[..., 0] * base[..., 1]
    cov[..., 0, 1] = cov[..., 1, 0] = off
    cov_t = Tensor(cov, requires_grad=True)
    s = _scalarize(rng, (2, 3, 8, 8))

    def forward():
        kps = KeypointSet(loc, cov_t)
        return s(keypoints.keypoints_to_gaussian_maps(kps, (8, 8)))

    return [loc, cov_t], forward


def build_heatmap_difference(rng):
    a, b = _param(rng, (2, 3, 5, 5)), _param(rng, (2, 3, 5, 5))
    s = _scalarize(rng, (2, 3, 5, 5))
    return [a, b], lambda: s(keypoints.heatmap_difference(a, b))


def build_mask_weighted_displacement(rng):
    logits = _param(rng, (2, 4, 5, 5))
    disp = Tensor(rng.uniform(-0.5, 0.5, (2, 3, 2)), requires_grad=True)
    s = _scalarize(rng, (2, 2, 5, 5))

    def forward():
        masks = T.softmax(logits, axis=1)
        return s(dense_motion.mask_weighted_displacement(masks, disp))

    return [logits, disp], forward


def build_warp_by_flow(rng):
    x = _param(rng, (2, 3, 6, 6))
    # small flows keep samples interior; offsets avoid pixel-center kinks
    base = rng.uniform(0.1, 0.4, (2, 2, 6, 6)) * np.where(
        rng.random((2, 2, 6, 6)) < 0.5, -1.0, 1.0)
    flow = Tensor(base * T.pixel_pitch(6), requires_grad=True)
    s = _scalarize(rng, (2, 3, 6, 6))
    return [x, flow], lambda: s(dense_motion.warp(x, flow))


REGISTRY = [
    Check("add_broadcast", "smooth", build_add_broadcast),
    Check("sub_neg", "smooth", build_sub_neg),
    Check("mul_broadcast", "smooth", build_mul_broadcast),
    Check("relu", "smooth", build_relu),
    Check("leaky_relu", "smooth", build_leaky_relu),
    Check("sigmoid", "smooth", build_sigmoid),
    Check("absolute", "smooth", build_absolute),
    Check("square", "smooth", build_square),
    Check("sum_axis", "smooth", build_sum_axis),
    Check("mean_keepdims", "smooth", build_mean_keepdims),
    Check("reshape_moveaxis", "smooth", build_reshape_moveaxis),
    Check("concat", "smooth", build_concat),
    Check("repeat_batch", "smooth", build_repeat_batch),
    Check("tile_hw", "smooth", build_tile_hw),
    Check("l1_mean", "smooth", build_l1_mean),
    Check("square_mean", "smooth", build_square_mean),
    Check("softmax_spatial_t0.1", "smooth", build_softmax_spatial),
    Check("softmax_channel", "smooth", build_softmax_channel),
    Check("norm2d_instance", "smooth", build_norm2d_instance),
    Check("norm2d_batch", "smooth", build_norm2d_batch),
    Check("conv2d_3x3", "smooth", build_conv_3x3),
    Check("conv2d_4x4_stride2", "smooth", build_conv_4x4_stride2),
    Check("conv2d_1x1", "smooth", build_conv_1x1),
    Check("avg_pool2d", "smooth", build_avg_pool),
    Check("upsample_nearest", "smooth", build_upsample),
    Check("downsample_nearest", "smooth", build_downsample),
    Check("grid_sample_bilinear", "sampling", build_grid_sample),
    Check("moment_fit", "smooth", build_moment_fit),
    Check("gaussian_render", "smooth", build_gaussian_render),
    Check("heatmap_difference", "smooth", build_heatmap_difference),
    Check("mask_weighted_displacement", "smooth", build_mask_weighted_displacement),
    Check("warp_by_flow", "sampling", build_warp_by_flow),
]


def run_registry(seeds=20):
    """[(name, category, err, tol, passed)] for every registered check."""
    rows = []
    for check in REGISTRY:
        err = run_check(check, seeds)
        rows.append((check.name, check.category, err, check.tol, err < check.tol))
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=20)
    args = parser.parse_args(argv)
    start = time.time()
    rows = run_registry(args.seeds)
    width = max(len(r[0]) for r in rows)
    for name, category, err, tol, ok in rows:
        verdict = "ok" if ok else "FAIL"
        print(f"{name:<{width}}  {category:<8}  {err:.3e} < {tol:.0e}  {verdict}")
    failed = [r[0] for r in rows if not r[4]]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed "
          f"({args.seeds} seeds, {time.time() - start:.1f}s)")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
