"""Evaluation-time procedures: video reconstruction and image animation.

Both run the trained pipeline one frame at a time (batch 1, so
normalization statistics never mix frames) with gradients disabled.
Reconstruction is literally relative animation with the clip's first
frame as the source, so the two share every line of the generation
path; the reconstruction protocol then copies frame 0 verbatim instead
of generating it.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np
from PIL import Image

from keymotion import keypoints, synthdata
from keymotion import tensor as T
from keymotion.keypoints import KeypointSet
from keymotion.tensor import Tensor
from keymotion.trainer import FIXED_SIGMA, generate_from_keypoints


class AnimationRequest(NamedTuple):
    source: np.ndarray   # (3, H, W) appearance image in [0, 1]
    driving: np.ndarray  # (T, 3, H, W) motion-supplying clip in [0, 1]
    mode: str = "relative"


class AnimationResult(NamedTuple):
    frames: np.ndarray                   # (T, 3, H, W) generated clip
    source_keypoints: KeypointSet        # arrays, leading dim 1
    driving_keypoints: KeypointSet       # arrays, leading dim T
    transferred_keypoints: KeypointSet   # arrays, leading dim T, unclipped
    warnings: tuple


def detect_clip(models, frames, config):
    """Detector over a clip, one frame per pass; returns a KeypointSet
    of plain arrays with leading dimension T."""
    fixed = FIXED_SIGMA if config.fixed_sigma else None
    locs, covs = [], []
    with T.no_grad():
        for frame in np.asarray(frames):
            x = Tensor(np.ascontiguousarray(frame[None]).astype(config.np_dtype))
            _, kps = models.detector.detect(x, fixed)
            locs.append(kps.locations.data[0])
            covs.append(kps.covariances.data[0])
    return KeypointSet(np.stack(locs), np.stack(covs))


def transfer_keypoints_relative(src_kps, drive_first_kps, drive_t_kps):
    """Move source keypoints by the driving video's displacement:
    h' = h_src + (h_t - h_first).  Covariances come from the current
    driving frame.  Operates on array-valued KeypointSets."""
    loc = src_kps.locations + (drive_t_kps.locations - drive_first_kps.locations)
    return KeypointSet(loc, drive_t_kps.covariances)


def animation_keypoint_pair(mode, src_kps, drive_first_kps, drive_t_kps):
    """The (source-pose, target-pose) keypoints rendered for one frame.

    This function owns the covariance assignment: in relative mode both
    rendered maps take their covariances from the driving video (first
    frame for the source map, current frame for the target map), so
    blob shapes track the driving motion; in absolute mode the driving
    keypoints are used as-is and the source map keeps its own fit.
    Swap this function to change that policy.
    """
    if mode == "relative":
        tgt = transfer_keypoints_relative(src_kps, drive_first_kps, drive_t_kps)
        src_render = KeypointSet(src_kps.locations, drive_first_kps.covariances)
        return src_render, tgt
    if mode == "absolute":
        return src_kps, drive_t_kps
    raise ValueError(f"unknown transfer mode: {mode!r}")


def _tensor_kps(kps, dtype):
    return KeypointSet(Tensor(kps.locations.astype(dtype)),
                       Tensor(kps.covariances.astype(dtype)))


def animate(models, request, config):
    """Drive the source image with the driving clip's motion.

    Target keypoints falling outside the [-1, 1] lattice are clipped
    before rendering but returned unclipped in transferred_keypoints;
    each such keypoint adds a warning line (relative transfer assumes
    the source pose roughly matches the driving start).
    """
    source = np.asarray(request.source)
    driving = np.asarray(request.driving)
    if driving.ndim != 4 or driving.shape[0] < 1:
        raise ValueError("driving clip must be a nonempty (T,3,H,W) array")
    if source.shape != driving.shape[1:]:
        raise ValueError(
            f"source shape {source.shape} does not match driving frames "
            f"{driving.shape[1:]}")
    if source.shape[1] != config.image_size or source.shape[2] != config.image_size:
        raise ValueError(
            f"clip size {source.shape[1:]} does not match the trained "
            f"size {config.image_size}")

    dtype = config.np_dtype
    src_kps = detect_clip(models, source[None], config)
    drv_kps = detect_clip(models, driving, config)
    first = KeypointSet(drv_kps.locations[0:1], drv_kps.covariances[0:1])

    frames = np.empty_like(driving)
    t_locs, t_covs, warnings = [], [], []
    x_src = Tensor(np.ascontiguousarray(source[None]).astype(dtype))
    for t in range(driving.shape[0]):
        drv_t = KeypointSet(drv_kps.locations[t:t + 1],
                            drv_kps.covariances[t:t + 1])
        render_src, tgt = animation_keypoint_pair(
            request.mode, src_kps, first, drv_t)
        t_locs.append(tgt.locations[0])
        t_covs.append(tgt.covariances[0])
        oob = np.argwhere(np.abs(tgt.locations[0]) > 1.0)
        for k in sorted({int(i) for i, _ in oob}):
            warnings.append(
                f"frame {t}: keypoint {k} transferred outside the image "
                f"(clipped for rendering)")
        clipped = KeypointSet(np.clip(tgt.locations, -1.0, 1.0),
                              tgt.covariances)
        with T.no_grad():
            pred, _ = generate_from_keypoints(
                models, x_src, _tensor_kps(render_src, dtype),
                _tensor_kps(clipped, dtype), config)
        frames[t] = pred.data[0]

    return AnimationResult(
        frames, src_kps, drv_kps,
        KeypointSet(np.stack(t_locs), np.stack(t_covs)), tuple(warnings))


def reconstruct_video(models, clip, config):
    """Regenerate a clip from its first frame plus per-frame keypoints.

    Runs the relative-animation path with source = frame 0 (the
    transfer collapses to the driving keypoints), then copies frame 0
    verbatim: the protocol only generates frames t >= 1.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[0] < 2:
        raise ValueError("reconstruction needs a (T,3,H,W) clip with T >= 2")
    result = animate(models, AnimationRequest(clip[0], clip, "relative"), config)
    frames = result.frames.copy()
    frames[0] = clip[0]
    return result._replace(frames=frames)


def evaluate_reconstruction(models, dataset, config, split="test"):
    """Reconstruct every video of a split and average the metrics.

    Returns a dict with:
      l1        mean absolute pixel error against the real clip
      akd       keypoint distance (pixels): detector tracks on the
                generated clip vs the dataset's ground-truth tracks
      akd_self  same, vs detector tracks on the real clip (cancels any
                systematic detector offset)
    """
    indices = dataset.split_indices(split)
    if not indices:
        raise ValueError(f"dataset has no {split!r} videos")
    size = config.image_size
    l1s, akds, akds_self = [], [], []
    for idx in indices:
        clip = dataset.frames_float(idx, config.np_dtype)
        result = reconstruct_video(models, clip, config)
        l1s.append(synthdata.metric_l1(result.frames, clip))
        gen_kps = detect_clip(models, result.frames, config)
        gt_locs, _ = keypoints.read_tracks(
            os.path.join(dataset.root, dataset.videos[idx]["track_file"]))
        akds.append(synthdata.metric_akd(gen_kps.locations, gt_locs, size))
        akds_self.append(synthdata.metric_akd(
            gen_kps.locations, result.driving_keypoints.locations, size))
    return {"l1": float(np.mean(l1s)), "akd": float(np.mean(akds)),
            "akd_self": float(np.mean(akds_self)), "videos": len(indices)}


# -- clip I/O --------------------------------------------------------------


def load_image(path, dtype=np.float64):
    """PNG -> (3, H, W) in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=dtype) / 255.0
    return np.moveaxis(arr, 2, 0)


def load_clip(path, dtype=np.float64):
    """Directory of PNGs (sorted by name) or one PNG -> (T, 3, H, W)."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".png"))
        if not names:
            raise ValueError(f"no .png frames under {path}")
        return np.stack([load_image(os.path.join(path, n), dtype) for n in names])
    return load_image(path, dtype)[None]


def _to_uint8(frame):
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frames(frames, out_dir, prefix="frame"):
    """(T, 3, H, W) -> numbered PNGs; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, frame in enumerate(np.asarray(frames)):
        path = os.path.join(out_dir, f"{prefix}_{t:03d}.png")
        synthdata._save_png(path, np.moveaxis(frame, 0, 2))
        paths.append(path)
    return paths


def save_gif(frames, path, fps=8):
    imgs = [Image.fromarray(np.moveaxis(_to_uint8(f), 0, 2), "RGB")
            for f in np.asarray(frames)]
    imgs[0].save(path, save_all=True, append_images=imgs[1:],
                 duration=int(round(1000.0 / fps)), loop=0)


def comparison_strip(source, driving_frame, generated_frame):
    """(source | driving | generated) side by side, (3, H, 3W)."""
    return np.concatenate([np.asarray(source), np.asarray(driving_frame),
                           np.asarray(generated_frame)], axis=2)
