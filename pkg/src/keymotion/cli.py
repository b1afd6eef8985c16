"""Command-line entry point.

Commands: make-dataset, train, reconstruct, animate, evaluate,
show-keypoints, kp-sweep.  Every run is reproducible from its flags: a
flat key=value config file supplies defaults and explicit flags win
over it; all randomness derives from --seed (or the seed key).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from keymotion import inference, keypoints, synthdata, trainer, viz

ABLATIONS = {
    "no_flow": "no_flow",
    "no_coarse": "no_coarse",
    "no_residual": "no_residual",
    "fixed_sigma": "fixed_sigma",
    "no_appearance": "no_appearance_to_M",
}


def read_config_file(path):
    """Flat key=value lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, val = [p.strip() for p in line.split("=", 1)]
            values[key] = val
    return values


def _coerce(value, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return target_type(value)


def apply_config(instance, values):
    """Overlay key=value strings onto a dataclass, coercing by field
    type; unknown keys are rejected."""
    fields = {f.name: f.type for f in dataclasses.fields(instance)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    updates = {}
    for key, val in values.items():
        if key not in fields:
            raise ValueError(f"unknown config key: {key}")
        ftype = fields[key]
        if isinstance(ftype, str):  # from __future__ annotations
            ftype = types.get(ftype, str)
        updates[key] = _coerce(val, ftype)
    return dataclasses.replace(instance, **updates)


def build_train_config(args):
    config = trainer.TrainConfig()
    if args.config:
        config = apply_config(config, read_config_file(args.config))
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "k", None) is not None:
        config = dataclasses.replace(config, k=args.k)
    if getattr(args, "epochs", None) is not None:
        config = dataclasses.replace(config, epochs=args.epochs)
    for name in getattr(args, "ablation", None) or []:
        config = dataclasses.replace(config, **{ABLATIONS[name]: True})
    return config


def _load(path):
    models, config = trainer.load_models(path)
    return models, config


def cmd_make_dataset(args):
    spec = synthdata.SynthSpec()
    if args.config:
        spec = apply_config(spec, read_config_file(args.config))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    manifest = synthdata.generate_dataset(spec, args.out)
    digest = synthdata.tree_sha256(args.out)
    print(f"wrote {spec.num_videos} videos to {args.out}")
    print(f"manifest: {manifest}")
    print(f"tree sha256: {digest}")
    return 0


def cmd_train(args):
    config = build_train_config(args)
    dataset = synthdata.Dataset(args.data)

    def log(epoch, step, report):
        print(f"epoch {epoch:3d} step {step:5d}  D {report.loss_D:.4f}  "
              f"gan {report.loss_G_gan:.4f}  rec {report.loss_rec:.4f}  "
              f"total {report.loss_total:.4f}", flush=True)

    final = trainer.run_training(config, dataset, args.out,
                                 resume_from=args.checkpoint, log=log)
    print(f"final checkpoint: {final}")
    return 0


def cmd_reconstruct(args):
    models, config = _load(args.checkpoint)
    clip = inference.load_clip(args.clip, config.np_dtype)
    result = inference.reconstruct_video(models, clip, config)
    inference.save_frames(result.frames, args.out)
    inference.save_gif(result.frames, os.path.join(args.out, "reconstruction.gif"))
    print(f"l1: {synthdata.metric_l1(result.frames, clip):.6f}")
    print(f"wrote {result.frames.shape[0]} frames to {args.out}")
    return 0


def cmd_animate(args):
    models, config = _load(args.checkpoint)
    source = inference.load_image(args.source, config.np_dtype)
    driving = inference.load_clip(args.driving, config.np_dtype)
    request = inference.AnimationRequest(source, driving, args.mode)
    result = inference.animate(models, request, config)
    for line in result.warnings:
        print(f"warning: {line}", file=sys.stderr)
    inference.save_frames(result.frames, args.out)
    inference.save_gif(result.frames, os.path.join(args.out, "animation.gif"))
    strips = np.stack([
        inference.comparison_strip(source, driving[t], result.frames[t])
        for t in range(driving.shape[0])])
    inference.save_frames(strips, args.out, prefix="compare")
    keypoints.write_tracks(os.path.join(args.out, "transferred_tracks.txt"),
                           result.transferred_keypoints.locations,
                           result.transferred_keypoints.covariances)
    print(f"wrote {result.frames.shape[0]} frames to {args.out}")
    return 0


def cmd_evaluate(args):
    models, config = _load(args.checkpoint)
    dataset = synthdata.Dataset(args.data)
    report = inference.evaluate_reconstruction(models, dataset, config)
    print(f"videos:   {report['videos']}")
    print(f"l1:       {report['l1']:.6f}")
    print(f"akd:      {report['akd']:.3f} px (vs ground-truth tracks)")
    print(f"akd_self: {report['akd_self']:.3f} px (vs detector on real clip)")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("l1, akd, akd_self, videos\n")
            fh.write(f"{report['l1']:.10g}, {report['akd']:.10g}, "
                     f"{report['akd_self']:.10g}, {report['videos']}\n")
        print(f"wrote {args.out}")
    return 0


def cmd_show_keypoints(args):
    models, config = _load(args.checkpoint)
    clip = inference.load_clip(args.clip, config.np_dtype)
    kps = inference.detect_clip(models, clip, config)
    overlays = viz.overlay_clip(clip, kps.locations, kps.covariances)
    inference.save_frames(overlays, args.out, prefix="keypoints")
    keypoints.write_tracks(os.path.join(args.out, "tracks.txt"),
                           kps.locations, kps.covariances)
    print(f"wrote {clip.shape[0]} overlay frames to {args.out}")
    return 0


def cmd_kp_sweep(args):
    try:
        ks = [int(v) for v in args.k.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--k expects a comma list of integers, got {args.k!r}")
    if not ks:
        raise ValueError("--k is empty")
    dataset = synthdata.Dataset(args.data)
    rows = []
    for k in ks:
        sub = argparse.Namespace(config=args.config, seed=args.seed,
                                 k=k, epochs=args.epochs, ablation=None)
        config = build_train_config(sub)
        run_dir = os.path.join(args.out, f"k{k}")
        final = os.path.join(run_dir, "checkpoint_final.ckpt")
        if not os.path.exists(final):
            print(f"training k={k} ...", flush=True)
            final = trainer.run_training(config, dataset, run_dir)
        models, config = _load(final)
        report = inference.evaluate_reconstruction(models, dataset, config)
        rows.append((k, report["l1"], report["akd"], report["akd_self"]))
        print(f"k={k}: l1 {report['l1']:.6f}  akd {report['akd']:.3f}", flush=True)
    path = os.path.join(args.out, "kp_sweep.csv")
    with open(path, "w") as fh:
        fh.write("k, l1, akd, akd_self\n")
        for row in rows:
            fh.write(f"{row[0]}, {row[1]:.10g}, {row[2]:.10g}, {row[3]:.10g}\n")
    print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="keymotion",
        description="Keypoint-based motion transfer: dataset generation, "
                    "training, reconstruction, animation, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--ablation", action="append", choices=sorted(ABLATIONS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="regenerate a clip from frame 0")
    p.add_argument("clip", help="directory of PNG frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("animate", help="drive a source image with a clip")
    p.add_argument("source", help="source PNG")
    p.add_argument("driving", help="directory of driving PNG frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("relative", "absolute"),
                   default="relative")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("evaluate", help="reconstruction metrics on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write metrics CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("show-keypoints", help="overlay detected keypoints")
    p.add_argument("clip", help="directory of PNG frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_show_keypoints)

    p = sub.add_parser("kp-sweep", help="train/evaluate across keypoint counts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", required=True, help="comma list, e.g. 2,4,8")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_kp_sweep)

    return parser


def dispatch(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, trainer.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
