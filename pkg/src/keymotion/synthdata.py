"""Synthetic moving-shapes videos with exact ground-truth tracks.

Each video is 1-3 rigid colored shapes (ellipse, rectangle, triangle)
translating and rotating (at most 15 degrees per frame) over a static
textured background, bouncing off the canvas margins so no shape ever
leaves the frame.  Shape centers and orientations follow a scripted
motion, so keypoint tracks (center + rotated second-moment matrix) are
known analytically per frame.

Determinism: every video derives its generator from (seed, video
index), and PNG encoding is pinned (fixed zlib level, no ancillary
chunks), so a dataset tree is byte-identical across runs for a fixed
spec.  Videos are split 90/10 train/test by index order.

Also home to the two desk-scale metrics: mean absolute pixel error and
average keypoint distance (Hungarian-matched on the first frame,
reported in pixels).
"""

from __future__ import annotations

import dataclasses
import hashlib
import os

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter
from scipy.optimize import linear_sum_assignment

from keymotion.keypoints import read_tracks, write_tracks

SUPERSAMPLE = 4
MAX_ROT_DEG = 15.0


@dataclasses.dataclass
class SynthSpec:
    seed: int = 0
    num_videos: int = 200
    frames_per_video: int = 16
    size: int = 64

    def video_rng(self, index):
        return np.random.default_rng([self.seed, index])


def _background(rng, size):
    low = rng.uniform(0.15, 0.55, size=(8, 8, 3))
    img = np.repeat(np.repeat(low, size // 8, axis=0), size // 8, axis=1)
    return uniform_filter(img, size=(7, 7, 1), mode="wrap")


def _shape_mask(kind, center, axes, theta, size):
    """Anti-aliased occupancy in [0,1] at canvas resolution.

    Rendered on a SUPERSAMPLE-times finer lattice then box-averaged.
    Coordinates are continuous pixel units: pixel (i, j) covers
    [j, j+1) x [i, i+1).
    """
    s = size * SUPERSAMPLE
    u = (np.arange(s) + 0.5) / SUPERSAMPLE
    xx, yy = np.meshgrid(u, u)
    dx, dy = xx - center[0], yy - center[1]
    ct, st = np.cos(theta), np.sin(theta)
    lx = ct * dx + st * dy
    ly = -st * dx + ct * dy
    a, b = axes
    if kind == "ellipse":
        inside = (lx / a) ** 2 + (ly / b) ** 2 <= 1.0
    elif kind == "rect":
        inside = (np.abs(lx) <= a) & (np.abs(ly) <= b)
    elif kind == "tri":
        # equilateral triangle inscribed in the circumradius-a circle
        verts = np.stack([
            [a * np.cos(ang), a * np.sin(ang)]
            for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3)
        ])
        inside = np.ones_like(lx, dtype=bool)
        for i in range(3):
            p, q = verts[i], verts[(i + 1) % 3]
            cross = (q[0] - p[0]) * (ly - p[1]) - (q[1] - p[1]) * (lx - p[0])
            inside &= cross >= 0
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    fine = inside.astype(np.float64)
    return fine.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _base_second_moment(kind, axes):
    """Second moment (pixel units^2) of the unrotated shape about its center."""
    a, b = axes
    if kind == "ellipse":
        return np.diag([a * a / 4.0, b * b / 4.0])
    if kind == "rect":
        return np.diag([a * a / 3.0, b * b / 3.0])
    # triangle: measure once from a centered high-resolution mask
    size = int(np.ceil(4 * a)) + 8
    m = _shape_mask("tri", (size / 2.0, size / 2.0), axes, 0.0, size)
    u = np.arange(size) + 0.5
    xx, yy = np.meshgrid(u, u)
    tot = m.sum()
    cx, cy = (m * xx).sum() / tot, (m * yy).sum() / tot
    sxx = (m * (xx - cx) ** 2).sum() / tot
    syy = (m * (yy - cy) ** 2).sum() / tot
    sxy = (m * (xx - cx) * (yy - cy)).sum() / tot
    return np.array([[sxx, sxy], [sxy, syy]])


def _script_video(spec, index):
    """Deterministic motion script for one video: shapes + per-frame poses."""
    rng = spec.video_rng(index)
    size = spec.size
    bg = _background(rng, size)
    num_shapes = int(rng.integers(1, 4))
    shapes = []
    for _ in range(num_shapes):
        kind = ["ellipse", "rect", "tri"][int(rng.integers(3))]
        axes = rng.uniform(4.0, 9.0, size=2)
        if kind == "tri":
            axes[1] = axes[0]
        color = rng.uniform(0.25, 1.0, size=3)
        margin = float(np.max(axes)) + 2.0
        lo, hi = margin, size - margin
        pos = rng.uniform(lo, hi, size=2)
        vel = rng.uniform(-2.5, 2.5, size=2)
        while np.hypot(*vel) < 0.8:
            vel = rng.uniform(-2.5, 2.5, size=2)
        theta = rng.uniform(0.0, 2 * np.pi)
        omega = np.deg2rad(rng.uniform(-MAX_ROT_DEG, MAX_ROT_DEG))
        poses = []
        p, v = pos.copy(), vel.copy()
        th = theta
        for _t in range(spec.frames_per_video):
            poses.append((p.copy(), th))
            p = p + v
            for ax in range(2):
                if p[ax] < lo:
                    p[ax] = 2 * lo - p[ax]
                    v[ax] = -v[ax]
                elif p[ax] > hi:
                    p[ax] = 2 * hi - p[ax]
                    v[ax] = -v[ax]
            th += omega
        shapes.append({"kind": kind, "axes": axes, "color": color, "poses": poses,
                       "moment": _base_second_moment(kind, axes)})
    return bg, shapes


def render_video(spec, index):
    """(frames (T,H,W,3) float in [0,1], locations (T,S,2), covariances
    (T,S,2,2)); tracks in normalized coordinates."""
    bg, shapes = _script_video(spec, index)
    size = spec.size
    frames = np.empty((spec.frames_per_video, size, size, 3))
    nshapes = len(shapes)
    loc = np.zeros((spec.frames_per_video, nshapes, 2))
    cov = np.zeros((spec.frames_per_video, nshapes, 2, 2))
    unit = 2.0 / size  # pixel units -> normalized
    for t in range(spec.frames_per_video):
        img = bg.copy()
        for s_i, sh in enumerate(shapes):
            center, theta = sh["poses"][t]
            alpha = _shape_mask(sh["kind"], center, sh["axes"], theta, size)
            img = img * (1.0 - alpha[..., None]) + sh["color"] * alpha[..., None]
            loc[t, s_i] = center * unit - 1.0
            ct, st = np.cos(theta), np.sin(theta)
            rot = np.array([[ct, -st], [st, ct]])
            cov[t, s_i] = rot @ sh["moment"] @ rot.T * unit * unit
        frames[t] = np.clip(img, 0.0, 1.0)
    return frames, loc, cov


def _save_png(path, frame):
    img = Image.fromarray((np.round(frame * 255.0)).astype(np.uint8), "RGB")
    img.save(path, format="PNG", compress_level=6, optimize=False)


def generate_dataset(spec, out_dir):
    """Write the full dataset tree; returns the manifest path.

    Layout: out_dir/video_XXX/frame_YYY.png + track.txt per video,
    manifest.txt at the root (one line per video: id, split,
    frame_count, track_file).
    """
    os.makedirs(out_dir, exist_ok=True)
    # 90/10 by index order; tiny datasets still get one test video
    n_test = max(1, spec.num_videos // 10) if spec.num_videos > 1 else 0
    n_train = spec.num_videos - n_test
    lines = ["# id, split, frame_count, track_file"]
    for i in range(spec.num_videos):
        vid = f"video_{i:03d}"
        vdir = os.path.join(out_dir, vid)
        os.makedirs(vdir, exist_ok=True)
        frames, loc, cov = render_video(spec, i)
        for t in range(frames.shape[0]):
            _save_png(os.path.join(vdir, f"frame_{t:03d}.png"), frames[t])
        write_tracks(os.path.join(vdir, "track.txt"), loc, cov)
        split = "train" if i < n_train else "test"
        lines.append(f"{vid}, {split}, {frames.shape[0]}, {vid}/track.txt")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def tree_sha256(root):
    """Hash of every file under root, in sorted relative-path order."""
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            digest.update(os.path.relpath(full, root).encode())
            with open(full, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


class Dataset:
    """Loaded dataset: frames kept as uint8, converted on access."""

    def __init__(self, root):
        self.root = root
        manifest = os.path.join(root, "manifest.txt")
        self.videos = []
        with open(manifest) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vid, split, count, track = [p.strip() for p in line.split(",")]
                self.videos.append({"id": vid, "split": split,
                                    "frame_count": int(count), "track_file": track})
        for v in self.videos:
            if v["frame_count"] < 2:
                raise ValueError(f"{v['id']}: videos must have at least 2 frames")
            frames = []
            for t in range(v["frame_count"]):
                path = os.path.join(root, v["id"], f"frame_{t:03d}.png")
                frames.append(np.asarray(Image.open(path).convert("RGB")))
            v["frames"] = np.stack(frames)  # (T, H, W, 3) uint8
            v["track"] = read_tracks(os.path.join(root, v["track_file"]))

    def split_indices(self, split):
        return [i for i, v in enumerate(self.videos) if v["split"] == split]

    def frames_float(self, index, dtype=np.float64):
        """(T, 3, H, W) in [0,1]."""
        arr = self.videos[index]["frames"].astype(dtype) / 255.0
        return np.moveaxis(arr, 3, 1)

    def __len__(self):
        return len(self.videos)


# -- metrics ---------------------------------------------------------------


def metric_l1(generated, reference):
    """Mean absolute difference over all frames, pixels, channels."""
    generated = np.asarray(generated)
    reference = np.asarray(reference)
    if generated.shape != reference.shape:
        raise ValueError(f"shape mismatch: {generated.shape} vs {reference.shape}")
    return float(np.abs(generated - reference).mean())


def match_keypoints(tracks_a, tracks_b):
    """Minimum-cost assignment between the first-frame keypoints.

    Returns (rows, cols) index arrays into a and b; the matching is
    then held fixed for all frames.
    """
    a0, b0 = np.asarray(tracks_a[0]), np.asarray(tracks_b[0])
    if len(a0) == 0 or len(b0) == 0:
        raise ValueError("cannot match empty keypoint sets")
    cost = np.linalg.norm(a0[:, None, :] - b0[None, :, :], axis=-1)
    return linear_sum_assignment(cost)


def metric_akd(tracks_a, tracks_b, image_size):
    """Average keypoint distance in pixels.

    tracks_* are (T, K, 2) normalized locations; K may differ (the
    assignment matches min(Ka, Kb) pairs on frame 0 and keeps them).
    """
    tracks_a = np.asarray(tracks_a)
    tracks_b = np.asarray(tracks_b)
    if tracks_a.shape[0] != tracks_b.shape[0]:
        raise ValueError(f"frame count mismatch: {tracks_a.shape[0]} vs {tracks_b.shape[0]}")
    rows, cols = match_keypoints(tracks_a, tracks_b)
    diff = tracks_a[:, rows, :] - tracks_b[:, cols, :]
    dist = np.linalg.norm(diff, axis=-1) * (image_size / 2.0)
    return float(dist.mean())
