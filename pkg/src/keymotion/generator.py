"""Frame generator with feature-space deformation.

The source frame is encoded into a 5-level pyramid; each level is
warped by the dense flow (downsampled to the level's resolution by
nearest-neighbour picking, so displacement values are never rescaled)
and decoded together with per-level copies of the keypoint-difference
maps.  Four residual blocks at full resolution clean up warping
artifacts before the sigmoid output.

The difference maps enter the decoder directly, giving the keypoint
detector a gradient path that does not pass through the motion
network.
"""

from __future__ import annotations

import numpy as np

from keymotion import dense_motion, nn
from keymotion import tensor as T


def warp_pyramid(feats, flow):
    """Warp each pyramid level by the full-resolution flow.

    Differentiable through both the features and the flow.  Zero flow
    reproduces every level exactly (identity lattice sampling).
    """
    warped = []
    for f in feats:
        factor = flow.shape[2] // f.shape[2]
        layer_flow = T.downsample_nearest(flow, factor)
        warped.append(dense_motion.warp(f, layer_flow))
    return warped


class Generator(nn.Module):
    def __init__(self, k, rng=None, num_residual=4, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.k = k
        self.unet = nn.UNet(3, rng, extra_skip=k, dtype=dtype)
        self.refine = [nn.ResidualBlock(self.unet.base, rng, dtype) for _ in range(num_residual)]
        self.out_conv = nn.Conv2d(self.unet.base, 3, 3, rng, init="xavier", dtype=dtype)

    def __call__(self, x, flow=None, hd=None):
        n, c, hh, ww = x.shape
        if hh % 32 or ww % 32:
            raise ValueError(f"image size {hh}x{ww} must be a multiple of 32 (5 pooling levels)")
        feats = self.unet.encode(x)
        if flow is not None:
            feats = warp_pyramid(feats, flow)
        if hd is None:
            hd = T.Tensor(np.zeros((n, self.k, hh, ww), dtype=x.data.dtype))
        extras = [T.downsample_nearest(hd, hh // f.shape[2]) for f in feats]
        h = self.unet.decode(feats, extras)
        for block in self.refine:
            h = block(h)
        return T.sigmoid(self.out_conv(h))
