"""Dense motion estimation from sparse keypoint displacements.

Each keypoint pair (source, driving) implies a constant displacement
d_k = h_k(source) - h_k(driving); the flow field is a backward map, so
for an output pixel p (aligned with the driving frame) the source image
is sampled at p + F(p).  A U-Net predicts K+1 soft part masks (channel
K+1 is static background) and a 2-channel residual field; the coarse
flow is the mask-weighted sum of the broadcast displacements and the
final flow adds the residual.

The residual head starts from zero weights so that early training is
governed by the part model alone.
"""

from __future__ import annotations

import numpy as np

from keymotion import nn
from keymotion import tensor as T
from keymotion.tensor import Tensor


def displacements(src_kps, drv_kps):
    """Per-keypoint displacement field values: source minus driving."""
    return T.sub(src_kps.locations, drv_kps.locations)  # (N, K, 2)


def broadcast_vector(vecs, h, w):
    """Constant per-keypoint fields: (N, K, 2) -> (N, K, 2, h, w)."""
    return T.tile_hw(vecs, h, w)


def locally_aligned_inputs(x, disp):
    """Warp x (N,3,H,W) by each keypoint's constant displacement.

    Returns (N, 3K, H, W): K translated copies of x, channel-stacked in
    keypoint order.  A zero displacement reproduces x exactly.
    """
    n, c, hh, ww = x.shape
    k = disp.shape[1]
    identity = Tensor(T.pixel_grid(hh, ww, dtype=x.data.dtype)[None])
    grids = T.add(identity, T.reshape(disp, (n * k, 1, 1, 2)))
    warped = T.grid_sample_bilinear(T.repeat_batch(x, k), grids)
    return T.reshape(warped, (n, k * c, hh, ww))


def mask_weighted_displacement(masks, disp):
    """Coarse flow: sum_k M_k * d_k over the K moving parts.

    masks (N,K+1,H,W) with the background last; disp (N,K,2).  The
    background channel contributes zero motion, so it only enters
    through the softmax partition.  Fused op, differentiable in both.
    """
    m = masks.data[:, :-1]  # (N,K,H,W)
    out_data = np.einsum("nkhw,nkc->nchw", m, disp.data)

    def build():
        def bw():
            g = out.grad
            if masks.requires_grad:
                gm = np.zeros_like(masks.data)
                gm[:, :-1] = np.einsum("nchw,nkc->nkhw", g, disp.data)
                masks._accum(gm)
            if disp.requires_grad:
                disp._accum(np.einsum("nchw,nkhw->nkc", g, masks.data[:, :-1]))
        return bw

    out = Tensor._result(out_data, (masks, disp), build)
    return out


def compose_flow(masks, disp, residual, no_coarse=False, no_residual=False):
    """Full flow (N,2,H,W) = coarse + residual, honoring ablations."""
    if masks.shape[1] != disp.shape[1] + 1:
        raise ValueError(f"expected {disp.shape[1] + 1} mask channels, got {masks.shape[1]}")
    if no_coarse and no_residual:
        return Tensor(np.zeros_like(residual.data))
    if no_coarse:
        return residual
    coarse = mask_weighted_displacement(masks, disp)
    if no_residual:
        return coarse
    return T.add(coarse, residual)


def flow_to_grid(flow):
    """Backward-map sampling grid: identity lattice plus flow, as
    (N,H,W,2) ready for bilinear sampling."""
    n, c, hh, ww = flow.shape
    identity = Tensor(T.pixel_grid(hh, ww, dtype=flow.data.dtype)[None])
    return T.add(identity, T.moveaxis(flow, 1, 3))


def warp(x, flow):
    """Warp x (N,C,H,W) by a displacement field (N,2,H,W)."""
    return T.grid_sample_bilinear(x, flow_to_grid(flow))


class DenseMotionNetwork(nn.Module):
    """Predicts part masks and residual flow.

    Input channels: K (keypoint-difference maps) + 3K (locally aligned
    copies) + 3 (raw source) = 4K+3; the appearance-free variant sees
    only the K difference maps.
    """

    def __init__(self, k, rng=None, use_appearance=True, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.k = k
        self.use_appearance = use_appearance
        in_ch = 4 * k + 3 if use_appearance else k
        self.in_ch = in_ch
        self.unet = nn.UNet(in_ch, rng, dtype=dtype)
        self.mask_head = nn.Conv2d(self.unet.base, k + 1, 3, rng, init="xavier", dtype=dtype)
        self.residual_head = nn.Conv2d(self.unet.base, 2, 3, rng, init="zero", dtype=dtype)

    def __call__(self, hd, x=None, aligned=None):
        if self.use_appearance:
            if x is None or aligned is None:
                raise ValueError("appearance inputs required by this configuration")
            inp = T.concat([hd, aligned, x], axis=1)
        else:
            inp = hd
        if inp.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {inp.shape[1]}")
        feats = self.unet(inp)
        masks = T.softmax(self.mask_head(feats), axis=1)
        residual = self.residual_head(feats)
        return masks, residual


def write_flow_binary(path, flow):
    """Debug dump: raw little-endian float32 (dx, dy) grid, row-major."""
    arr = np.asarray(flow, dtype="<f4")
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError("expected a (2, H, W) flow field")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(np.moveaxis(arr, 0, 2)).tobytes())


def read_flow_binary(path, h, w):
    raw = np.fromfile(path, dtype="<f4")
    return np.moveaxis(raw.reshape(h, w, 2), 2, 0)
