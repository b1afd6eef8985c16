"""Executable acceptance checks with a shared criterion report.

Each criterion function returns rows of (criterion, measured,
threshold, verdict); the test suite asserts on the same functions this
module's entry point runs, so there is exactly one implementation of
every check.  Trained models are produced on demand and cached under
$KEYMOTION_CACHE (default ~/.cache/keymotion) keyed by config and
dataset hashes; the three training-dependent criteria share one K=4
run, so a full report costs four trainings on a cold cache and none on
a warm one.

Run directly:  python3 -m keymotion.repro [--out DIR] [--seeds N]
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from typing import NamedTuple

import numpy as np

from keymotion import dense_motion, gradcheck, inference, keypoints, synthdata, trainer
from keymotion import tensor as T
from keymotion.keypoints import KeypointSet
from keymotion.tensor import Tensor

# the dataset and model configuration shared by the training criteria
BASE_SPEC = synthdata.SynthSpec(seed=7, num_videos=200, frames_per_video=16)
BASE_CONFIG = trainer.TrainConfig(k=4, epochs=20, batch_size=8, seed=7,
                                  image_size=64, dtype="float32")


class Row(NamedTuple):
    criterion: str
    measured: str
    threshold: str
    passed: bool


def _spec_hash(spec):
    payload = json.dumps(dataclasses.asdict(spec), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class TrainingCache:
    """Datasets and trained checkpoints keyed by content hashes."""

    def __init__(self, root=None):
        self.root = root or os.environ.get("KEYMOTION_CACHE") \
            or os.path.expanduser("~/.cache/keymotion")

    def dataset_dir(self, spec):
        path = os.path.join(self.root, "datasets", _spec_hash(spec))
        if not os.path.exists(os.path.join(path, "manifest.txt")):
            synthdata.generate_dataset(spec, path)
        return path

    def dataset(self, spec):
        return synthdata.Dataset(self.dataset_dir(spec))

    def run_dir(self, config, spec):
        return os.path.join(self.root, "runs",
                            f"{config.hash()}-{_spec_hash(spec)}")

    def checkpoint(self, config, spec, log=None):
        """Final checkpoint path, training first if absent."""
        run_dir = self.run_dir(config, spec)
        final = os.path.join(run_dir, "checkpoint_final.ckpt")
        if not os.path.exists(final):
            dataset = self.dataset(spec)
            start = time.time()
            trainer.run_training(config, dataset, run_dir, log=log)
            with open(os.path.join(run_dir, "train_time.txt"), "w") as fh:
                fh.write(f"{time.time() - start:.1f}\n")
        return final

    def train_minutes(self, config, spec):
        path = os.path.join(self.run_dir(config, spec), "train_time.txt")
        if not os.path.exists(path):
            return None
        with open(path) as fh:
            return float(fh.read().strip()) / 60.0

    def evaluation(self, config, spec, initialized=False, log=None):
        """Held-out reconstruction metrics, cached as JSON per run."""
        run_dir = self.run_dir(config, spec)
        name = "eval_init.json" if initialized else "eval_final.json"
        path = os.path.join(run_dir, name)
        if os.path.exists(path):
            with open(path) as fh:
                return json.load(fh)
        dataset = self.dataset(spec)
        if initialized:
            models, cfg = trainer.Models(config), config
            os.makedirs(run_dir, exist_ok=True)
        else:
            models, cfg = trainer.load_models(self.checkpoint(config, spec, log))
        report = inference.evaluate_reconstruction(models, dataset, cfg)
        with open(path, "w") as fh:
            json.dump(report, fh)
        return report


# -- criterion 1: gradient soundness ---------------------------------------


def criterion_gradients(seeds=20):
    start = time.time()
    results = gradcheck.run_registry(seeds)
    elapsed = time.time() - start
    rows = []
    for category, tol in (("smooth", gradcheck.REL_TOL_SMOOTH),
                          ("sampling", gradcheck.REL_TOL_SAMPLING)):
        sub = [r for r in results if r[1] == category]
        worst = max(r[2] for r in sub)
        rows.append(Row(f"1 gradient soundness ({category}, {len(sub)} ops)",
                        f"max rel err {worst:.2e}", f"< {tol:g}",
                        all(r[4] for r in sub)))
    rows.append(Row("1 gradient soundness (runtime)",
                    f"{elapsed:.1f} s for {seeds} seeds", "< 120 s",
                    elapsed < 120.0))
    return rows


# -- criterion 2: moment fit / rendering round trip ------------------------


def criterion_moment_roundtrip(trials=100, size=64, seed=23):
    """Render random keypoints, refit moments, compare.

    Locations are drawn so the blob's 2-sigma extent stays inside the
    central 80% of the lattice (the rendered density must actually be
    visible to the moment fit; a blob truncated by the border has
    different moments by construction).  The rendered profile
    exp(-q^T S^-1 q) has true covariance S/2, so the refit is doubled
    before comparison.
    """
    rng = np.random.default_rng(seed)
    pitch = T.pixel_pitch(size)
    worst_h = 0.0
    worst_s = 0.0
    for _ in range(trials):
        lam = rng.uniform(0.01, 0.1, 2)
        phi = rng.uniform(0.0, np.pi)
        rot = np.array([[np.cos(phi), -np.sin(phi)],
                        [np.sin(phi), np.cos(phi)]])
        cov = rot @ np.diag(lam) @ rot.T
        sigma_max = np.sqrt(lam.max() / 2.0)
        reach = 0.8 - 2.0 * sigma_max
        loc = rng.uniform(-reach, reach, 2)
        kps = KeypointSet(Tensor(loc.reshape(1, 1, 2)),
                          Tensor(cov.reshape(1, 1, 2, 2)))
        with T.no_grad():
            maps = keypoints.keypoints_to_gaussian_maps(kps, (size, size))
            refit = keypoints.heatmaps_to_keypoints(maps)
        h_err = np.abs(refit.locations.data[0, 0] - loc).max() / pitch
        cov_back = 2.0 * refit.covariances.data[0, 0]
        s_err = np.abs(cov_back - cov).max() / np.abs(cov).max()
        worst_h = max(worst_h, h_err)
        worst_s = max(worst_s, s_err)
    return [
        Row(f"2 moment round trip: location ({trials} draws)",
            f"max err {worst_h:.3f} pitch", "< 0.5 pitch", worst_h < 0.5),
        Row(f"2 moment round trip: covariance ({trials} draws)",
            f"max entry err {worst_s * 100:.2f}%", "< 10%", worst_s < 0.10),
    ]


# -- criterion 3: flow composition oracle ----------------------------------


def criterion_flow_composition(size=64, seed=31):
    """One-hot masks + per-part integer-pixel displacements must warp a
    piecewise-translated image back onto the original exactly, away
    from the part seam and the border."""
    rng = np.random.default_rng(seed)
    base = rng.random((1, 3, size, size))
    # smooth the texture so any residual misalignment is still visible
    base = (base + np.roll(base, 1, 3) + np.roll(base, 1, 2)) / 3.0
    shifts_px = np.array([[2, 1], [-2, -1]])  # (K, (dx, dy)) whole pixels
    half = size // 2
    region = np.zeros((size, size), dtype=int)
    region[:, half:] = 1

    # translated: content of part k moved by shifts_px[k]
    translated = np.empty_like(base)
    for k in range(2):
        rolled = np.roll(np.roll(base, shifts_px[k][1], axis=2),
                         shifts_px[k][0], axis=3)
        translated[0, :, region == k] = rolled[0, :, region == k]

    pitch = T.pixel_pitch(size)
    masks = np.zeros((1, 3, size, size))
    for k in range(2):
        masks[0, k][region == k] = 1.0
    disp = Tensor(shifts_px[None].astype(float) * pitch)
    zero_resid = Tensor(np.zeros((1, 2, size, size)))
    with T.no_grad():
        flow = dense_motion.compose_flow(Tensor(masks), disp, zero_resid)
        warped = dense_motion.warp(Tensor(translated), flow)

    err = np.abs(warped.data - base)
    yy, xx = np.mgrid[:size, :size]
    band = (np.abs(xx - half) <= 2) | (xx <= 1) | (xx >= size - 2) \
        | (yy <= 1) | (yy >= size - 2)
    l1 = float(err[:, :, ~band].mean())
    return [Row("3 flow composition oracle",
                f"L1 {l1:.2e} outside 2-px band", "< 1e-6", l1 < 1e-6)]


# -- criterion 4: zero-motion fixpoint -------------------------------------


def criterion_zero_motion(size=64, seed=37):
    rng = np.random.default_rng(seed)
    k = 3
    masks = T.softmax(Tensor(rng.standard_normal((2, k + 1, size, size))), axis=1)
    disp = Tensor(np.zeros((2, k, 2)))
    resid = Tensor(np.zeros((2, 2, size, size)))
    x = Tensor(rng.random((2, 3, size, size)))
    with T.no_grad():
        flow = dense_motion.compose_flow(masks, disp, resid)
        grid = dense_motion.flow_to_grid(flow)
        warped = dense_motion.warp(x, flow)
    flow_zero = not np.any(flow.data)
    identity = np.array_equal(grid.data,
                              np.broadcast_to(T.pixel_grid(size, size),
                                              grid.data.shape))
    exact = np.array_equal(warped.data, x.data)

    loc = rng.uniform(-0.8, 0.8, (1, 4, 2))
    cov = np.tile(np.eye(2) * 0.02, (1, 4, 1, 1))
    src = KeypointSet(loc, cov)
    drv = KeypointSet(rng.uniform(-0.8, 0.8, (1, 4, 2)),
                      cov + rng.uniform(0, 0.01, (1, 4, 1, 1)) * np.eye(2))
    same = inference.transfer_keypoints_relative(src, drv, drv)
    transfer_exact = np.array_equal(same.locations, loc)
    return [
        Row("4 zero-motion flow", "flow == 0" if flow_zero else "nonzero",
            "exactly zero", flow_zero),
        Row("4 zero-motion warp grid",
            "bit-exact identity" if identity and exact else "differs",
            "bit-exact", identity and exact),
        Row("4 identity keypoint transfer",
            "source returned exactly" if transfer_exact else "differs",
            "bit-exact", transfer_exact),
    ]


# -- criterion 5: stop-gradient contract -----------------------------------


def criterion_stop_gradient(seed=41):
    from keymotion import adversarial

    config = trainer.TrainConfig(k=3, epochs=1, batch_size=2, seed=seed,
                                 dtype="float64")
    models = trainer.Models(config)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((2, 3, 64, 64)))
    xp = Tensor(rng.random((2, 3, 64, 64)))

    # generator step: the rendered target maps enter D behind a
    # stop-gradient, so a leaf standing in for them must get nothing
    pred, hdrv = trainer.forward_pipeline(models, x, xp, config)
    h_leaf = Tensor(hdrv.data.copy(), requires_grad=True)
    scores, feats = models.discriminator(pred, T.stop_gradient(h_leaf))
    with T.no_grad():
        _, real_feats = models.discriminator(xp, Tensor(h_leaf.data))
    loss = adversarial.loss_total(
        adversarial.loss_feature_matching(real_feats, feats),
        adversarial.loss_generator_gan(scores), config.lambda_rec)
    loss.backward()
    leaf_clean = h_leaf.grad is None

    # discriminator step: no gradient may reach generator-side params
    models = trainer.Models(config)
    opt_d = trainer.Adam(models.discriminator.parameters(), config.lr1)
    g_side = ("detector", "motion", "generator")
    g_hash_before = models.param_hash(g_side)
    pred, hdrv = trainer.forward_pipeline(models, x, xp, config)
    hdrv_const = T.stop_gradient(hdrv)
    real_scores, _ = models.discriminator(xp, hdrv_const)
    fake_scores, _ = models.discriminator(T.stop_gradient(pred), hdrv_const)
    models.discriminator.zero_grad()
    adversarial.loss_discriminator(real_scores, fake_scores).backward()
    g_grads_clean = all(p.grad is None for p in models.generator_side_params())
    opt_d.step()
    g_hash_after = models.param_hash(g_side)
    return [
        Row("5 stop-gradient: target maps into D",
            "leaf grad None" if leaf_clean else "leaked", "exactly zero",
            leaf_clean),
        Row("5 stop-gradient: D step vs generator side",
            "no grads, param hash unchanged"
            if g_grads_clean and g_hash_before == g_hash_after else "leaked",
            "exactly zero / hash equal",
            g_grads_clean and g_hash_before == g_hash_after),
    ]


# -- criteria 6-8: trained-model behavior ----------------------------------


def _eval_line(report):
    return (f"l1 {report['l1']:.4f}, akd {report['akd']:.2f} px, "
            f"akd_self {report['akd_self']:.2f} px")


def criterion_learning(cache, log=None):
    init = cache.evaluation(BASE_CONFIG, BASE_SPEC, initialized=True)
    final = cache.evaluation(BASE_CONFIG, BASE_SPEC, log=log)
    ratio = final["l1"] / init["l1"]
    minutes = cache.train_minutes(BASE_CONFIG, BASE_SPEC)
    rows = [
        Row("6 learning signal: reconstruction L1",
            f"init {init['l1']:.4f} -> trained {final['l1']:.4f} "
            f"(ratio {ratio:.2f})", "<= 0.5x init", ratio <= 0.5),
        Row("6 learning signal: keypoint distance",
            f"akd {final['akd']:.2f} px (self {final['akd_self']:.2f})",
            "< 4 px", final["akd"] < 4.0),
    ]
    if minutes is not None:
        rows.append(Row("6 learning signal: training time",
                        f"{minutes:.0f} min on this host",
                        "45 min target (4-core reference)", True))
    return rows


def criterion_kp_trend(cache, log=None):
    l1 = {}
    for k in (2, 4, 8):
        config = dataclasses.replace(BASE_CONFIG, k=k)
        l1[k] = cache.evaluation(config, BASE_SPEC, log=log)["l1"]
    ok24 = l1[4] <= l1[2] * 1.05
    ok48 = l1[8] <= l1[4] * 1.05
    return [Row("7 keypoint-count trend (K=2,4,8)",
                "L1 " + " -> ".join(f"{l1[k]:.4f}" for k in (2, 4, 8)),
                "non-increasing (5% band)", ok24 and ok48)]


def criterion_ablation(cache, log=None):
    full = cache.evaluation(BASE_CONFIG, BASE_SPEC, log=log)["l1"]
    ablated_config = dataclasses.replace(BASE_CONFIG, no_flow=True)
    ablated = cache.evaluation(ablated_config, BASE_SPEC, log=log)["l1"]
    return [Row("8 ablation ordering (no_flow vs full)",
                f"no_flow {ablated:.4f} vs full {full:.4f} "
                f"(margin {ablated - full:+.4f})",
                "no_flow strictly worse", ablated > full)]


# -- criterion 9: determinism & persistence --------------------------------


def criterion_determinism(tmp_root=None):
    import shutil
    import tempfile

    from keymotion import checkpoint as ckpt_mod

    tmp = tempfile.mkdtemp(dir=tmp_root)
    try:
        spec = synthdata.SynthSpec(seed=11, num_videos=6, frames_per_video=4)
        data_dir = os.path.join(tmp, "data")
        synthdata.generate_dataset(spec, data_dir)
        dataset = synthdata.Dataset(data_dir)
        config = trainer.TrainConfig(k=2, epochs=2, batch_size=8, seed=11,
                                     dtype="float32", checkpoint_every=1)

        final_a = trainer.run_training(config, dataset, os.path.join(tmp, "a"))
        final_b = trainer.run_training(config, dataset, os.path.join(tmp, "b"))
        with open(final_a, "rb") as fh:
            bytes_a = fh.read()
        with open(final_b, "rb") as fh:
            bytes_b = fh.read()
        twice = bytes_a == bytes_b

        arrays, meta = ckpt_mod.load_checkpoint(final_a)
        reserialized = ckpt_mod.checkpoint_bytes(arrays, meta)
        round_trip = reserialized == bytes_a

        trainer.run_training(config, dataset, os.path.join(tmp, "c"),
                             stop_after_epoch=1)
        resumed = trainer.run_training(
            config, dataset, os.path.join(tmp, "c"),
            resume_from=os.path.join(tmp, "c", "checkpoint_epoch_001.ckpt"))
        with open(resumed, "rb") as fh:
            resume_equal = fh.read() == bytes_a

        return [
            Row("9 fixed-seed training twice",
                "checkpoints identical" if twice else "differ", "byte-equal",
                twice),
            Row("9 save/load round trip",
                "re-serialization identical" if round_trip else "differs",
                "byte-equal", round_trip),
            Row("9 interrupt and resume",
                "matches uninterrupted run" if resume_equal else "differs",
                "byte-equal", resume_equal),
        ]
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


# -- report ----------------------------------------------------------------


def run_all_checks(out_dir=None, seeds=20, cache=None, log=None):
    """Every criterion in order; writes report.md / report.csv when
    out_dir is given.  Returns (rows, exit_code)."""
    cache = cache or TrainingCache()
    rows = []
    rows += criterion_gradients(seeds)
    rows += criterion_moment_roundtrip()
    rows += criterion_flow_composition()
    rows += criterion_zero_motion()
    rows += criterion_stop_gradient()
    rows += criterion_learning(cache, log=log)
    rows += criterion_kp_trend(cache, log=log)
    rows += criterion_ablation(cache, log=log)
    rows += criterion_determinism()

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.md"), "w") as fh:
            fh.write("| criterion | measured | threshold | verdict |\n")
            fh.write("|---|---|---|---|\n")
            for row in rows:
                verdict = "pass" if row.passed else "**FAIL**"
                fh.write(f"| {row.criterion} | {row.measured} | "
                         f"{row.threshold} | {verdict} |\n")
        with open(os.path.join(out_dir, "report.csv"), "w") as fh:
            fh.write("criterion, measured, threshold, verdict\n")
            for row in rows:
                verdict = "pass" if row.passed else "fail"
                fh.write(f'"{row.criterion}", "{row.measured}", '
                         f'"{row.threshold}", {verdict}\n')
    return rows, (0 if all(r.passed for r in rows) else 1)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="repro_report")
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--cache", help="training cache root (default "
                        "$KEYMOTION_CACHE or ~/.cache/keymotion)")
    args = parser.parse_args(argv)

    def log(epoch, step, report):
        if step % 25 == 0:
            print(f"  epoch {epoch} step {step}: rec {report.loss_rec:.4f}",
                  flush=True)

    rows, code = run_all_checks(args.out, args.seeds,
                                TrainingCache(args.cache), log=log)
    width = max(len(r.criterion) for r in rows)
    for row in rows:
        verdict = "pass" if row.passed else "FAIL"
        print(f"{row.criterion:<{width}}  {row.measured:<44}  "
              f"{row.threshold:<28}  {verdict}")
    print(f"report written to {args.out}/report.md")
    return code


if __name__ == "__main__":
    sys.exit(main())
