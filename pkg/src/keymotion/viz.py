"""Overlay rendering for learned keypoints and flow fields.

Everything draws into plain (3, H, W) float arrays in [0, 1]; PNG
output reuses the pinned encoder from the dataset writer.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

# distinct hues, stable per keypoint index (cycled past 10)
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190),
]


def index_color(i):
    """Fixed RGB tuple for keypoint index i (stable across frames)."""
    return PALETTE[i % len(PALETTE)]


def covariance_ellipse(cov, scale=2.0, n_points=64):
    """Closed polyline of the scale-sigma contour of a 2x2 covariance.

    Returns (n_points + 1, 2) offsets around the center: eigenvector
    axes scaled by scale * sqrt(eigenvalue).  Same units as cov^(1/2).
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2):
        raise ValueError(f"expected a 2x2 covariance, got {cov.shape}")
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, 0.0)
    t = np.linspace(0.0, 2.0 * np.pi, n_points + 1)
    circle = np.stack([np.cos(t), np.sin(t)])  # (2, n+1)
    return (evecs @ (scale * np.sqrt(evals)[:, None] * circle)).T


def _to_pixels(loc, size):
    # normalized [-1,1] with half-pixel centers -> continuous pixel coords
    return (np.asarray(loc) + 1.0) * (size / 2.0) - 0.5


def overlay_keypoints(frame, locations, covariances=None, sigma_scale=2.0):
    """Draw keypoint markers (and covariance ellipses if given) onto a
    copy of frame (3, H, W); returns the annotated float array."""
    frame = np.asarray(frame)
    _, h, w = frame.shape
    img = Image.fromarray(
        np.round(np.clip(np.moveaxis(frame, 0, 2), 0, 1) * 255).astype(np.uint8),
        "RGB")
    draw = ImageDraw.Draw(img)
    locations = np.asarray(locations)
    for i, loc in enumerate(locations):
        color = index_color(i)
        px, py = _to_pixels(loc[0], w), _to_pixels(loc[1], h)
        draw.ellipse([px - 1.5, py - 1.5, px + 1.5, py + 1.5],
                     fill=color, outline=color)
        if covariances is not None:
            ring = covariance_ellipse(covariances[i], sigma_scale)
            pts = [(px + dx * w / 2.0, py + dy * h / 2.0) for dx, dy in ring]
            draw.line(pts, fill=color, width=1)
    return np.moveaxis(np.asarray(img, dtype=frame.dtype) / 255.0, 2, 0)


def overlay_clip(frames, locations, covariances=None, sigma_scale=2.0):
    """Per-frame overlays for a clip: frames (T,3,H,W), locations
    (T,K,2), covariances (T,K,2,2) or None."""
    out = []
    for t, frame in enumerate(np.asarray(frames)):
        cov = None if covariances is None else covariances[t]
        out.append(overlay_keypoints(frame, locations[t], cov, sigma_scale))
    return np.stack(out)


def flow_to_color(flow, max_norm=None):
    """Direction-as-hue, magnitude-as-saturation rendering of a flow
    field (2, H, W) in normalized units; returns (3, H, W) in [0, 1]."""
    flow = np.asarray(flow)
    dx, dy = flow[0].astype(np.float64), flow[1].astype(np.float64)
    mag = np.hypot(dx, dy)
    if max_norm is None:
        max_norm = max(float(mag.max()), 1e-12)
    hue = (np.arctan2(dy, dx) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_norm, 0.0, 1.0)
    # inline HSV -> RGB with value fixed at 1
    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p, q, t = 1.0 - sat, 1.0 - sat * f, 1.0 - sat * (1.0 - f)
    one = np.ones_like(hue)
    lut = np.stack([
        np.stack([one, t, p]), np.stack([q, one, p]), np.stack([p, one, t]),
        np.stack([p, q, one]), np.stack([t, p, one]), np.stack([one, p, q]),
    ])  # (6, 3, H, W)
    return np.take_along_axis(lut, i[None, None], axis=0)[0]
