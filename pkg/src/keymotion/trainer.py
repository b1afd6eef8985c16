"""Self-supervised training loop.

Every epoch draws one random frame pair from each training video (pair
order and video order reshuffled per epoch from a (seed, epoch)-derived
generator, so any epoch can be replayed without storing generator
state).  Each step runs one discriminator update followed by one
generator-side update (detector + motion + generator share an
optimizer).  Adam runs at lr1 for `epochs` epochs, then at lr2 for
half as many more.

Ablation flags rewire the forward pass:
  no_flow            skip the motion network, generator sees no warp
  no_coarse          flow = residual only
  no_residual        flow = coarse only
  fixed_sigma        rendered maps use a constant isotropic covariance
  no_appearance_to_M motion network input is the difference maps only
"""

from __future__ import annotations

import dataclasses
import os
from typing import NamedTuple

import numpy as np

from keymotion import adversarial, checkpoint, dense_motion, keypoints
from keymotion import generator as generator_mod
from keymotion import tensor as T
from keymotion.tensor import Tensor

FIXED_SIGMA = 0.01  # variance used by the fixed-covariance ablation


@dataclasses.dataclass
class TrainConfig:
    k: int = 10
    epochs: int = 20            # phase-1 epochs; phase 2 adds epochs // 2
    lr1: float = 2e-4
    lr2: float = 2e-5
    lambda_rec: float = 10.0
    batch_size: int = 8
    seed: int = 0
    image_size: int = 64
    temperature: float = 0.1
    dtype: str = "float64"
    checkpoint_every: int = 5   # epochs between periodic saves
    no_flow: bool = False
    no_coarse: bool = False
    no_residual: bool = False
    fixed_sigma: bool = False
    no_appearance_to_M: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def total_epochs(self):
        return self.epochs + self.epochs // 2

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self):
        return checkpoint.config_hash(self.to_dict())


class LossReport(NamedTuple):
    loss_D: float
    loss_G_gan: float
    loss_rec: float
    loss_total: float

    def finite(self):
        return all(np.isfinite(v) for v in self)


class TrainingDiverged(RuntimeError):
    pass


class Models:
    """The four networks, constructed deterministically from a config."""

    def __init__(self, config):
        dtype = config.np_dtype
        rng = np.random.default_rng([config.seed, 1])
        self.config = config
        self.detector = keypoints.KeypointDetector(
            config.k, rng, config.temperature, dtype)
        self.motion = dense_motion.DenseMotionNetwork(
            config.k, rng, use_appearance=not config.no_appearance_to_M, dtype=dtype)
        self.generator = generator_mod.Generator(config.k, rng, dtype=dtype)
        self.discriminator = adversarial.Discriminator(config.k, rng, dtype)

    def generator_side(self):
        """Modules updated by the generator step, in a fixed order."""
        return [("detector", self.detector), ("motion", self.motion),
                ("generator", self.generator)]

    def all_named(self):
        return self.generator_side() + [("discriminator", self.discriminator)]

    def generator_side_params(self):
        out = []
        for _, mod in self.generator_side():
            out.extend(mod.parameters())
        return out

    def named_arrays(self):
        out = {}
        for mod_name, mod in self.all_named():
            for p_name, p in mod.named_parameters():
                out[f"param/{mod_name}/{p_name}"] = p.data
        return out

    def load_arrays(self, arrays):
        for mod_name, mod in self.all_named():
            for p_name, p in mod.named_parameters():
                key = f"param/{mod_name}/{p_name}"
                src = arrays[key]
                if src.shape != p.data.shape:
                    raise ValueError(f"{key}: shape {src.shape} != {p.data.shape}")
                p.data = src.astype(p.data.dtype, copy=True)

    def param_hash(self, which="all"):
        import hashlib
        mods = self.all_named() if which == "all" else [
            (n, m) for n, m in self.all_named() if n in which]
        h = hashlib.sha256()
        for _, mod in mods:
            h.update(mod.param_bytes())
        return h.hexdigest()


class Adam:
    def __init__(self, params, lr, betas=(0.5, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        """One update.  Consumes p.grad buffers as scratch space; the
        training loop zeroes gradients before every backward anyway."""
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        num_scale = self.lr / bc1
        denom_scale = 1.0 / np.sqrt(bc2)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += g * (1.0 - self.b1)
            np.multiply(g, g, out=g)
            g *= 1.0 - self.b2
            v *= self.b2
            v += g
            d = np.sqrt(v)
            d *= denom_scale
            d += self.eps
            np.divide(m, d, out=d)
            d *= num_scale
            p.data -= d

    def state_arrays(self, prefix):
        out = {f"{prefix}/t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}/m/{i:04d}"] = m
            out[f"{prefix}/v/{i:04d}"] = v
        return out

    def load_state(self, arrays, prefix):
        self.t = int(arrays[f"{prefix}/t"][0])
        for i in range(len(self.m)):
            self.m[i] = arrays[f"{prefix}/m/{i:04d}"].astype(
                self.m[i].dtype, copy=True)
            self.v[i] = arrays[f"{prefix}/v/{i:04d}"].astype(
                self.v[i].dtype, copy=True)


def generate_from_keypoints(models, x, kps_s, kps_d, config):
    """Run rendering, dense motion and generation for a given keypoint
    pair: returns (prediction, rendered target maps).

    x is the appearance batch; kps_s describe its pose, kps_d the pose
    the prediction should take.  Ablation flags in config rewire the
    pass exactly as during training.
    """
    size = (config.image_size, config.image_size)
    hs = keypoints.keypoints_to_gaussian_maps(kps_s, size)
    hdrv = keypoints.keypoints_to_gaussian_maps(kps_d, size)
    hd = keypoints.heatmap_difference(hdrv, hs)
    if config.no_flow:
        flow = None
    else:
        disp = dense_motion.displacements(kps_s, kps_d)
        if models.motion.use_appearance:
            aligned = dense_motion.locally_aligned_inputs(x, disp)
            masks, resid = models.motion(hd, x, aligned)
        else:
            masks, resid = models.motion(hd)
        flow = dense_motion.compose_flow(masks, disp, resid,
                                         config.no_coarse, config.no_residual)
    pred = models.generator(x, flow, hd)
    return pred, hdrv


def forward_pipeline(models, x, xp, config):
    """Shared forward pass: returns (prediction, rendered driving maps).

    x is the appearance (source) frame batch, xp the driving batch the
    prediction should reproduce.
    """
    fixed = FIXED_SIGMA if config.fixed_sigma else None
    _, kps_s = models.detector.detect(x, fixed)
    _, kps_d = models.detector.detect(xp, fixed)
    return generate_from_keypoints(models, x, kps_s, kps_d, config)


def train_step(models, opt_d, opt_g, x_np, xp_np, config):
    x = Tensor(x_np)
    xp = Tensor(xp_np)
    pred, hdrv = forward_pipeline(models, x, xp, config)
    hdrv_const = T.stop_gradient(hdrv)

    # discriminator update on the detached prediction
    real_scores, _ = models.discriminator(xp, hdrv_const)
    fake_scores, _ = models.discriminator(T.stop_gradient(pred), hdrv_const)
    l_d = adversarial.loss_discriminator(real_scores, fake_scores)
    models.discriminator.zero_grad()
    l_d.backward()
    opt_d.step()

    # generator-side update against the refreshed discriminator
    with T.no_grad():
        _, real_feats = models.discriminator(xp, hdrv_const)
    fake_scores2, fake_feats = models.discriminator(pred, hdrv_const)
    l_gan = adversarial.loss_generator_gan(fake_scores2)
    l_rec = adversarial.loss_feature_matching(real_feats, fake_feats)
    l_tot = adversarial.loss_total(l_rec, l_gan, config.lambda_rec)
    for _, mod in models.generator_side():
        mod.zero_grad()
    l_tot.backward()
    opt_g.step()

    return LossReport(float(l_d.data), float(l_gan.data),
                      float(l_rec.data), float(l_tot.data))


def sample_pairs(dataset, config, epoch):
    """One (video, frame, frame') triple per training video, seeded by
    (seed, epoch); video order shuffled, frame order random."""
    rng = np.random.default_rng([config.seed, 2, epoch])
    train = dataset.split_indices("train")
    order = rng.permutation(len(train))
    pairs = []
    for j in order:
        vid = train[j]
        count = dataset.videos[vid]["frame_count"]
        t0, t1 = rng.choice(count, size=2, replace=False)
        pairs.append((vid, int(t0), int(t1)))
    return pairs


def _batches(pairs, size):
    for i in range(0, len(pairs), size):
        yield pairs[i:i + size]


def run_training(config, dataset, out_dir, resume_from=None,
                 stop_after_epoch=None, log=None):
    """Train to completion (or stop_after_epoch); returns the path of
    the latest checkpoint written.

    Determinism contract: for a fixed config and dataset, the final
    checkpoint bytes are identical across runs, and a run resumed from
    any epoch checkpoint matches the uninterrupted run bit for bit.
    """
    if not dataset.split_indices("train"):
        raise ValueError("dataset has no training videos")
    os.makedirs(out_dir, exist_ok=True)
    models = Models(config)
    opt_g = Adam(models.generator_side_params(), config.lr1)
    opt_d = Adam(models.discriminator.parameters(), config.lr1)
    start_epoch = 0
    step = 0
    if resume_from is not None:
        arrays, meta = checkpoint.load_checkpoint(resume_from)
        if meta["config_hash"] != config.hash():
            raise ValueError("checkpoint config does not match the requested config")
        models.load_arrays(arrays)
        opt_g.load_state(arrays, "opt_g")
        opt_d.load_state(arrays, "opt_d")
        start_epoch = meta["epoch"] + 1
        step = meta["step"]

    losses_path = os.path.join(out_dir, "losses.csv")
    mode = "a" if resume_from is not None else "w"
    losses_fh = open(losses_path, mode)
    if mode == "w":
        losses_fh.write("step, loss_D, loss_G_gan, loss_rec, loss_total\n")

    def save(epoch, name):
        arrays = models.named_arrays()
        arrays.update(opt_g.state_arrays("opt_g"))
        arrays.update(opt_d.state_arrays("opt_d"))
        meta = {"epoch": epoch, "step": step, "config": config.to_dict(),
                "config_hash": config.hash()}
        return checkpoint.save_checkpoint(os.path.join(out_dir, name), arrays, meta)

    last_good = None
    latest = None
    dtype = config.np_dtype
    try:
        for epoch in range(start_epoch, config.total_epochs):
            lr = config.lr1 if epoch < config.epochs else config.lr2
            opt_g.lr = lr
            opt_d.lr = lr
            for batch in _batches(sample_pairs(dataset, config, epoch), config.batch_size):
                x_np = np.stack([dataset.frames_float(v, dtype)[t0] for v, t0, _ in batch])
                xp_np = np.stack([dataset.frames_float(v, dtype)[t1] for v, _, t1 in batch])
                report = train_step(models, opt_d, opt_g, x_np, xp_np, config)
                if not report.finite():
                    dump = None
                    if last_good is not None:
                        dump = os.path.join(out_dir, "diverged_last_good.ckpt")
                        with open(dump, "wb") as fh:
                            fh.write(last_good)
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}: {report}; "
                        f"last good checkpoint: {dump}")
                step += 1
                losses_fh.write(f"{step}, {report.loss_D:.17g}, {report.loss_G_gan:.17g}, "
                                f"{report.loss_rec:.17g}, {report.loss_total:.17g}\n")
            losses_fh.flush()
            if log is not None:
                log(epoch, step, report)
            is_last = epoch == config.total_epochs - 1
            if ((epoch + 1) % config.checkpoint_every == 0 or is_last
                    or epoch == stop_after_epoch):
                latest = save(epoch, f"checkpoint_epoch_{epoch:03d}.ckpt")
                with open(latest, "rb") as fh:
                    last_good = fh.read()
            if epoch == stop_after_epoch:
                return latest
        final = save(config.total_epochs - 1, "checkpoint_final.ckpt")
        return final
    finally:
        losses_fh.close()


def load_models(path):
    """Checkpoint -> (Models, TrainConfig)."""
    arrays, meta = checkpoint.load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    models = Models(config)
    models.load_arrays(arrays)
    return models, config
