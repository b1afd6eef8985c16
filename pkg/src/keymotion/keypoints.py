"""Unsupervised keypoint detection.

A 5-level U-Net predicts K confidence maps which a temperature softmax
(T = 0.1) turns into per-map spatial distributions.  The expectation of
the pixel-center lattice under each map gives the keypoint location;
the centered second moment gives a 2x2 covariance describing the blob's
extent and orientation.  Keypoints are re-rendered as Gaussian maps
normalized to peak value 1, which is the representation consumed by
the motion and generator networks.

Both direction changes (maps -> moments, moments -> maps) are fused
autodiff ops with hand-derived gradients; building them from generic
primitives would create thousands of graph nodes per call.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from keymotion import nn
from keymotion import tensor as T
from keymotion.tensor import Tensor

# Ridge added to every fitted covariance so that even a one-hot map
# (zero spread) yields an invertible matrix for rendering.
COV_EPS = 1e-4

DEFAULT_TEMPERATURE = 0.1
DEFAULT_K = 10


class KeypointSet(NamedTuple):
    """Batched keypoints: locations (N,K,2) as (x, y) normalized
    coordinates, covariances (N,K,2,2) in normalized units squared."""

    locations: Tensor
    covariances: Tensor

    @property
    def k(self):
        return self.locations.shape[1]


def heatmaps_to_keypoints(stack, grid=None, eps=COV_EPS):
    """Fit (location, covariance) to each map of stack (N,K,H,W).

    location = E[p], covariance = E[(p-h)(p-h)^T] + eps*I, expectations
    under the mass-normalized map.  Maps are expected to already sum to
    ~1 (softmax output); maps with vanishing total mass are rejected.
    Differentiable w.r.t. the stack.
    """
    stack = T.as_tensor(stack)
    n, k, h, w = stack.shape
    if grid is None:
        grid = T.pixel_grid(h, w, dtype=stack.dtype)
    p = stack.data
    s0 = p.sum(axis=(2, 3))  # (N,K)
    if np.any(np.abs(s0) < 1e-6):
        raise ValueError("heatmap with (near-)zero total mass cannot be normalized")
    m1 = np.einsum("nkhw,hwc->nkc", p, grid)
    gg = np.einsum("hwc,hwd->hwcd", grid, grid)
    s2 = np.einsum("nkhw,hwcd->nkcd", p, gg)
    inv0 = 1.0 / s0
    loc = m1 * inv0[..., None]
    cov = s2 * inv0[..., None, None] - loc[..., :, None] * loc[..., None, :]
    cov = cov + eps * np.eye(2, dtype=cov.dtype)

    def build_loc():
        def bw():
            gh = loc_t.grad  # (N,K,2)
            # d h_c / d P_p = (g_pc - h_c) / s0
            a = gh * inv0[..., None]
            g = np.einsum("nkc,hwc->nkhw", a, grid) - (a * loc).sum(-1)[..., None, None]
            stack._accum(g)
        return bw

    def build_cov():
        def bw():
            gs = cov_t.grad  # (N,K,2,2)
            gs_sym_h = np.einsum("nkcd,nkd->nkc", gs + np.swapaxes(gs, -1, -2), loc)
            a = -gs_sym_h * inv0[..., None]                       # couples through h
            lin = np.einsum("nkc,hwc->nkhw", a, grid) - (a * loc).sum(-1)[..., None, None]
            quad = np.einsum("nkcd,hwcd->nkhw", gs, gg) * inv0[..., None, None]
            const = -np.einsum("nkcd,nkcd->nk", gs, s2) * inv0 * inv0
            stack._accum(lin + quad + const[..., None, None])
        return bw

    loc_t = Tensor._result(loc, (stack,), build_loc)
    cov_t = Tensor._result(cov, (stack,), build_cov)
    return KeypointSet(loc_t, cov_t)


def keypoints_to_gaussian_maps(kps, out_size, grid=None):
    """Render each keypoint as exp(-(p-h)^T Sigma^-1 (p-h)) on an
    out_size = (H, W) lattice.

    The normalization constant is chosen so the peak value is exactly 1
    (the exponent vanishes at p = h), keeping rendered stacks in [0,1]
    regardless of the covariance scale.  Differentiable w.r.t. both the
    locations and the covariances.
    """
    loc = T.as_tensor(kps.locations)
    cov = T.as_tensor(kps.covariances)
    hh, ww = out_size
    if grid is None:
        grid = T.pixel_grid(hh, ww, dtype=loc.dtype)
    c = cov.data
    det = c[..., 0, 0] * c[..., 1, 1] - c[..., 0, 1] * c[..., 1, 0]
    if np.any(det <= 0):
        raise ValueError("covariance must be positive definite for rendering")
    inv = np.empty_like(c)
    inv[..., 0, 0] = c[..., 1, 1]
    inv[..., 1, 1] = c[..., 0, 0]
    inv[..., 0, 1] = -c[..., 0, 1]
    inv[..., 1, 0] = -c[..., 1, 0]
    inv /= det[..., None, None]

    q = grid[None, None] - loc.data[:, :, None, None, :]      # (N,K,H,W,2)
    aq = np.einsum("nkcd,nkhwd->nkhwc", inv, q)
    maps = np.exp(-np.einsum("nkhwc,nkhwc->nkhw", q, aq))

    def build():
        def bw():
            g = out.grad
            gm = g * maps                                     # (N,K,H,W)
            if loc.requires_grad:
                # exponent e = -q^T A q, dq/dh = -I, A symmetric
                gh = 2.0 * np.einsum("nkhw,nkhwc->nkc", gm, aq)
                loc._accum(gh)
            if cov.requires_grad:
                ga = -np.einsum("nkhw,nkhwc,nkhwd->nkcd", gm, q, q)
                # d(A = C^-1): dL/dC = -A^T (dL/dA) A^T
                gc = -np.einsum("nkdc,nkde,nkef->nkcf", inv, ga, inv)
                cov._accum(np.swapaxes(gc, -1, -2).copy())
        return bw

    out = Tensor._result(maps, (loc, cov), build)
    return out


def heatmap_difference(new_stack, old_stack):
    """Motion code: rendered driving maps minus rendered source maps."""
    if new_stack.shape != old_stack.shape:
        raise ValueError(f"shape mismatch: {new_stack.shape} vs {old_stack.shape}")
    return T.sub(new_stack, old_stack)


class KeypointDetector(nn.Module):
    """U-Net + temperature softmax producing K spatial distributions."""

    def __init__(self, k=DEFAULT_K, rng=None, temperature=DEFAULT_TEMPERATURE,
                 dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.k = k
        self.temperature = temperature
        self.unet = nn.UNet(3, rng, dtype=dtype)
        self.head = nn.Conv2d(self.unet.base, k, 3, rng, init="xavier", dtype=dtype)

    def __call__(self, images):
        n, c, h, w = images.shape
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} must be a multiple of 32 (5 pooling levels)")
        logits = self.head(self.unet(images))
        return T.softmax(logits, axis=(2, 3), temperature=self.temperature)

    def detect(self, images, fixed_sigma=None):
        """images -> (softmax stack, KeypointSet).

        fixed_sigma, if given, replaces every fitted covariance with
        sigma^2 * I (constant, no gradient) while keeping locations
        learned; used by the fixed-covariance ablation.
        """
        stack = self(images)
        kps = heatmaps_to_keypoints(stack)
        if fixed_sigma is not None:
            n = stack.shape[0]
            cov = np.broadcast_to(
                fixed_sigma * np.eye(2, dtype=stack.data.dtype),
                (n, self.k, 2, 2)).copy()
            kps = KeypointSet(kps.locations, Tensor(cov))
        return stack, kps


# -- track serialization ---------------------------------------------------
#
# One row per (frame, keypoint): frame index, keypoint index, location,
# and the three free entries of the symmetric covariance.  This 5-number
# encoding is shared by the synthetic ground-truth tracks and by
# detector output dumps, so evaluation can consume either.

TRACK_HEADER = "# frame, k, h_x, h_y, sigma_xx, sigma_xy, sigma_yy"


def write_tracks(path, locations, covariances):
    """locations (T,K,2), covariances (T,K,2,2) -> text table."""
    locations = np.asarray(locations)
    covariances = np.asarray(covariances)
    nframes, k = locations.shape[:2]
    lines = [TRACK_HEADER]
    for t in range(nframes):
        for i in range(k):
            x, y = locations[t, i]
            s = covariances[t, i]
            lines.append(f"{t}, {i}, {x:.17g}, {y:.17g}, "
                         f"{s[0, 0]:.17g}, {s[0, 1]:.17g}, {s[1, 1]:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tracks(path):
    """Text table -> (locations (T,K,2), covariances (T,K,2,2))."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [float(v) for v in line.split(",")]
            rows.append(parts)
    if not rows:
        raise ValueError(f"no track rows in {path}")
    arr = np.array(rows)
    nframes = int(arr[:, 0].max()) + 1
    k = int(arr[:, 1].max()) + 1
    if len(rows) != nframes * k:
        raise ValueError(f"ragged track table in {path}")
    loc = np.zeros((nframes, k, 2))
    cov = np.zeros((nframes, k, 2, 2))
    for row in rows:
        t, i = int(row[0]), int(row[1])
        loc[t, i] = row[2:4]
        cov[t, i] = [[row[4], row[5]], [row[5], row[6]]]
    return loc, cov
