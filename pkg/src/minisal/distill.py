"""Two-phase distillation training.

Phase 1 trains the compact spatial and temporal models against a convex
combination of a soft loss (teacher soft-label maps) and a hard loss (the
ground-truth fixation density), both normalized L2. Phase 2 initializes the
two streams of the spatiotemporal model from the trained phase-1 weights and
fine-tunes the whole network under the hard loss alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import networks
from .optim import Adam
from .tensor import ShapeError, Tensor, mse_normalized

VALID_RESOLUTIONS = (256, 128, 64, 32)


class ConfigurationError(ValueError):
    pass


@dataclass
class DistillConfig:
    mu: float = 0.5
    resolution: int = 32
    lr: float = 1e-3
    batch: int = 16          # reference protocol uses 128; desk-scale default
    epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError(f"mu must be in [0,1], got {self.mu}")
        if self.resolution not in VALID_RESOLUTIONS:
            raise ConfigurationError(
                f"resolution must be one of {VALID_RESOLUTIONS}, got {self.resolution}")
        if self.batch < 1:
            raise ConfigurationError("batch must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")


@dataclass
class ClipSample:
    """One training record: a consecutive frame pair with its supervision."""
    frame: np.ndarray          # (3,H,W)
    frame_next: np.ndarray     # (3,H,W)
    density: np.ndarray        # (H,W)
    teacher_s: np.ndarray      # (H,W)
    teacher_t: np.ndarray      # (H,W)
    fixations: list


def make_samples(clips):
    """Flatten clips into per-pair samples (frame n paired with n+1)."""
    samples = []
    for clip in clips:
        for n in range(len(clip.frames) - 1):
            samples.append(ClipSample(
                frame=clip.frames[n],
                frame_next=clip.frames[n + 1],
                density=clip.densities[n],
                teacher_s=clip.teacher_s[n],
                teacher_t=clip.teacher_t[n],
                fixations=clip.fixations[n],
            ))
    return samples


def split_clips(clips, seed, train_frac=0.8):
    """Seeded 80/20 split by clip."""
    order = np.random.default_rng(seed).permutation(len(clips))
    n_train = max(1, int(round(train_frac * len(clips))))
    if n_train >= len(clips):
        n_train = len(clips) - 1
    train = [clips[i] for i in order[:n_train]]
    val = [clips[i] for i in order[n_train:]]
    return train, val


# ---- losses ------------------------------------------------------------------

def _mix(student_out, teacher_map, gt_density, mu):
    if not 0.0 <= mu <= 1.0:
        raise ConfigurationError(f"mu must be in [0,1], got {mu}")
    soft = mse_normalized(student_out, teacher_map)
    hard = mse_normalized(student_out, gt_density)
    return mu * soft + (1.0 - mu) * hard


def loss_spatial(student_out, teacher_map, gt_density, mu):
    """mu * soft + (1-mu) * hard for the spatial model."""
    return _mix(student_out, teacher_map, gt_density, mu)


def loss_temporal(student_out, teacher_map, gt_density, mu):
    """Same convex combination, with temporal operands."""
    return _mix(student_out, teacher_map, gt_density, mu)


def loss_spatiotemporal(model_out, gt_density):
    """Hard loss only: normalized L2 against the ground-truth density."""
    return mse_normalized(model_out, gt_density)


# ---- batching ----------------------------------------------------------------

def _stack_frames(batch):
    return Tensor(np.stack([s.frame for s in batch]))


def _stack_pairs(batch):
    return Tensor(np.stack([np.concatenate([s.frame, s.frame_next]) for s in batch]))


def _stack_maps(batch, attr):
    return Tensor(np.stack([getattr(s, attr)[None] for s in batch]))


def _batches(samples, batch_size, rng):
    order = rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        yield [samples[j] for j in order[i:i + batch_size]]


# ---- training ----------------------------------------------------------------

def train_student(kind, samples, config, widths=None, progress=None):
    """Phase 1: distil one teacher into a compact model.

    kind is "spatial" or "temporal". Returns (weights, per-epoch mean loss).
    Deterministic per config.seed (init and shuffle order are both seeded).
    """
    if kind not in ("spatial", "temporal"):
        raise ConfigurationError(f"unknown student kind {kind!r}")
    if not samples:
        raise ConfigurationError("dataset is empty")
    widths = widths or networks.LayerTable()
    teacher_attr = "teacher_s" if kind == "spatial" else "teacher_t"
    for s in samples:
        if getattr(s, teacher_attr) is None:
            raise ConfigurationError(f"samples lack {teacher_attr} maps for {kind} training")

    if kind == "spatial":
        spec = networks.build_spatial_student(widths)
        stack_inputs = _stack_frames
    else:
        spec = networks.build_temporal_student(widths)
        stack_inputs = _stack_pairs

    weights = networks.init_weights(spec, config.seed)
    opt = Adam(weights, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for batch in _batches(samples, config.batch, rng):
            x = stack_inputs(batch)
            out = networks.forward(spec, weights, x)
            loss = _mix(out, _stack_maps(batch, teacher_attr),
                        _stack_maps(batch, "density"), config.mu)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if progress:
            progress(f"{kind} epoch {epoch + 1}/{config.epochs}: loss {history[-1]:.6f}")
    return weights, history


def train_fusion(samples, s_weights, t_weights, config, widths=None,
                 random_streams=False, progress=None):
    """Phase 2: fuse the two streams and fine-tune under the hard loss.

    With random_streams=True the phase-1 weights are ignored and the streams
    start from random initialization (the no-distillation ablation).
    """
    if not samples:
        raise ConfigurationError("dataset is empty")
    widths = widths or networks.LayerTable()
    spec = networks.build_spatiotemporal(widths)
    if random_streams:
        weights = networks.init_weights(spec, config.seed)
    else:
        if s_weights is None or t_weights is None:
            raise ConfigurationError("fusion training requires both trained student weights")
        weights = networks.init_from_students(spec, s_weights, t_weights, config.seed)

    opt = Adam(weights, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for batch in _batches(samples, config.batch, rng):
            out = networks.forward(spec, weights, _stack_frames(batch), _stack_pairs(batch))
            loss = loss_spatiotemporal(out, _stack_maps(batch, "density"))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if progress:
            progress(f"fusion epoch {epoch + 1}/{config.epochs}: loss {history[-1]:.6f}")
    return weights, history


# ---- evaluation --------------------------------------------------------------

def predict(weights, samples, widths=None, batch_size=32, kind=None):
    """Forward a trained model over samples; returns (len(samples), H, W) maps."""
    widths = widths or networks.LayerTable()
    kind = kind or infer_kind(weights)
    if kind == "spatial":
        spec = networks.build_spatial_student(widths)
    elif kind == "temporal":
        spec = networks.build_temporal_student(widths)
    else:
        spec = networks.build_spatiotemporal(widths)
    outs = []
    for i in range(0, len(samples), batch_size):
        batch = samples[i:i + batch_size]
        if kind == "spatial":
            out = networks.forward(spec, weights, _stack_frames(batch))
        elif kind == "temporal":
            out = networks.forward(spec, weights, _stack_pairs(batch))
        else:
            out = networks.forward(spec, weights, _stack_frames(batch), _stack_pairs(batch))
        outs.append(out.data[:, 0])
    return np.concatenate(outs, axis=0)


def infer_kind(weights):
    """Recover the network kind from canonical weight names."""
    if any(k.startswith("s_stream.") for k in weights):
        return "spatiotemporal"
    if "conv1.kernel" in weights and weights["conv1.kernel"].shape[1] == 6:
        return "temporal"
    if "conv1.kernel" in weights:
        return "spatial"
    raise ShapeError("weight store does not match any known network layout")


def mean_nss(weights, samples, widths=None, kind=None):
    from .metrics import nss
    preds = predict(weights, samples, widths=widths, kind=kind)
    scores = [nss(preds[i], samples[i].fixations) for i in range(len(samples))]
    return float(np.mean(scores))


def run_two_phase(train_samples, config, widths=None, random_streams=False, progress=None):
    """Full pipeline: both phase-1 students, then phase-2 fusion."""
    if random_streams:
        weights, hist = train_fusion(train_samples, None, None, config, widths=widths,
                                     random_streams=True, progress=progress)
        return weights, {"fusion": hist}
    sw, sh = train_student("spatial", train_samples, config, widths=widths, progress=progress)
    tw, th = train_student("temporal", train_samples, config, widths=widths, progress=progress)
    fw, fh = train_fusion(train_samples, sw, tw, config, widths=widths, progress=progress)
    return fw, {"spatial": sh, "temporal": th, "fusion": fh}


def sweep_mu(train_samples, val_samples, grid, config, repeats=3, widths=None, progress=None):
    """Mean/std held-out NSS of the full pipeline for each soft-loss weight.

    Each grid value runs both phases ``repeats`` times with distinct seeds;
    rows come back as (mu, nss_mean, nss_std).
    """
    rows = []
    for mu in grid:
        if not 0.0 <= mu <= 1.0:
            raise ConfigurationError(f"sweep grid value {mu} outside [0,1]")
    for mu in grid:
        scores = []
        for r in range(repeats):
            cfg = DistillConfig(mu=mu, resolution=config.resolution, lr=config.lr,
                                batch=config.batch, epochs=config.epochs,
                                seed=config.seed + r)
            weights, _ = run_two_phase(train_samples, cfg, widths=widths, progress=progress)
            scores.append(mean_nss(weights, val_samples, widths=widths))
        rows.append((float(mu), float(np.mean(scores)), float(np.std(scores))))
        if progress:
            progress(f"mu={mu:.2f}: NSS {rows[-1][1]:.4f} +/- {rows[-1][2]:.4f}")
    return rows
