"""Patch discriminator and the full loss stack.

The discriminator sees the image concatenated with the rendered
driving-keypoint maps (3+K channels) and produces a small score map
(least-squares GAN targets: 1 for real, 0 for generated) plus the list
of intermediate features used by the reconstruction loss.  Feature
index 0 is the raw input itself, so even an untrained discriminator
provides a pixel-level reconstruction signal.

Reconstruction is measured as feature matching: per layer, the mean
absolute difference between features of the generated and the real
pair, summed over layers.  The total generator objective weighs it
with lambda_rec = 10 against the adversarial term.
"""

from __future__ import annotations

import numpy as np

from keymotion import nn
from keymotion import tensor as T

LAMBDA_REC = 10.0


class Discriminator(nn.Module):
    """4 stride-2 conv blocks (64..512 channels), then a 1-channel
    score map.  First block skips normalization so raw input statistics
    stay visible; LeakyReLU(0.2) activations throughout."""

    def __init__(self, k, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.k = k
        self.in_ch = 3 + k
        chans = [64, 128, 256, 512]
        self.convs = []
        self.norms = []
        c = self.in_ch
        for i, cout in enumerate(chans):
            self.convs.append(nn.Conv2d(c, cout, 4, rng, stride=2, padding=1,
                                        bias=(i == 0), dtype=dtype))
            self.norms.append(nn.Norm2d(cout, dtype=dtype) if i > 0 else None)
            c = cout
        self.score = nn.Conv2d(c, 1, 3, rng, init="xavier", dtype=dtype)

    def __call__(self, image, heatmaps):
        if image.shape[2:] != heatmaps.shape[2:]:
            raise ValueError(f"spatial mismatch: {image.shape} vs {heatmaps.shape}")
        x = T.concat([image, heatmaps], axis=1)
        if x.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        feats = [x]
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = conv(h)
            if norm is not None:
                h = norm(h)
            h = T.leaky_relu(h, 0.2)
            feats.append(h)
        return self.score(h), feats


def loss_discriminator(real_scores, fake_scores):
    """mean[(real - 1)^2] + mean[fake^2]; fake side must be detached."""
    return T.add(T.square_mean(T.sub(real_scores, 1.0)), T.square_mean(fake_scores))


def loss_generator_gan(fake_scores):
    """mean[(fake - 1)^2]."""
    return T.square_mean(T.sub(fake_scores, 1.0))


def loss_feature_matching(real_feats, fake_feats):
    """Sum over layers of mean |fake_i - real_i|, layer 0 = raw input."""
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"feature list lengths differ: {len(real_feats)} vs {len(fake_feats)}")
    total = None
    for real, fake in zip(real_feats, fake_feats):
        term = T.l1_mean(fake, real)
        total = term if total is None else T.add(total, term)
    return total


def loss_total(rec, gan_g, lambda_rec=LAMBDA_REC):
    return T.add(T.mul(rec, lambda_rec), gan_g)
