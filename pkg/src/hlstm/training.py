"""Masked sequence loss, mini-batch sampling over pixels, optimizers, and the
LSTM training loop.

The loss for one instance over an unrolled window of length rho is

    L = (1/rho) * sum_t 1_obs(t) * (y_t - y*_t)^2

and a batch's loss is the mean over its instances. Only observed steps carry
gradient; unobserved steps contribute exactly zero.

One "epoch" here is one mini-batch update; history rows and the checkpoint
cadence count in that unit. The loop is the single writer to the weights;
batch members are evaluated together and reduced in fixed instance order, so
a (config, seed) pair fully determines the trained weights.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .dataset import GridDataset, build_features
from .errors import DegenerateBatchError, NumericError, ValidationError
from .lstm import (
    DropoutSpec,
    LstmWeights,
    bptt_gradients,
    forward_sequence,
    init_weights,
    make_rng,
    sample_dropout_masks,
)

OPTIMIZERS = ("sgd", "adaptive_moments")
LOSS_DIVISORS = ("rho", "observed")


@dataclass
class TrainingConfig:
    hidden_size: int = 64
    unroll_length: int = 365
    batch_size: int = 100
    epochs: int = 500
    learning_rate: float = 0.001
    dropout: DropoutSpec = field(default_factory=lambda: DropoutSpec("recurrent_constant", 0.5))
    seed: int = 0
    optimizer: str = "adaptive_moments"
    gradient_clip_norm: float = 5.0
    # Eq-style divisor: window length ("rho") or per-instance observation
    # count ("observed"); the former is the paper-faithful default.
    loss_divisor: str = "rho"
    checkpoint_every: int = 50

    def validate(self):
        ints = ("hidden_size", "unroll_length", "batch_size", "epochs",
                "checkpoint_every")
        for name in ints:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.gradient_clip_norm <= 0:
            raise ValidationError("learning_rate and gradient_clip_norm must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss_divisor not in LOSS_DIVISORS:
            raise ValidationError(f"loss_divisor must be one of {LOSS_DIVISORS}")
        self.dropout.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout"] = {"variant": self.dropout.variant, "rate": self.dropout.rate}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training config fields: {sorted(unknown)}")
        if "dropout" in d:
            dro = d["dropout"]
            d["dropout"] = DropoutSpec(variant=dro.get("variant", "none"),
                                       rate=dro.get("rate", 0.0))
        return cls(**d).validate()


@dataclass
class SequenceData:
    """Model-ready stacked arrays for a set of pixels sharing one date axis."""

    pixel_ids: list[str]
    inputs: np.ndarray    # (n_pixels, T, n_features)
    targets: np.ndarray   # (n_pixels, T), NaN where unobserved
    mask: np.ndarray      # (n_pixels, T) bool
    feature_names: list[str]

    @property
    def n_pixels(self) -> int:
        return len(self.pixel_ids)

    @property
    def n_days(self) -> int:
        return self.inputs.shape[1]

    def subset(self, pixel_ids) -> "SequenceData":
        index = {pid: k for k, pid in enumerate(self.pixel_ids)}
        try:
            rows = [index[pid] for pid in pixel_ids]
        except KeyError as exc:
            raise ValidationError(f"unknown pixel id {exc.args[0]!r}") from exc
        sel = np.asarray(rows, dtype=int)
        return SequenceData(pixel_ids=list(pixel_ids), inputs=self.inputs[sel],
                            targets=self.targets[sel], mask=self.mask[sel],
                            feature_names=self.feature_names)


def prepare_sequences(dataset: GridDataset, include_lsm: bool = True,
                      include_attributes: bool = True,
                      pixel_ids=None) -> SequenceData:
    """Stack the dataset's pixels into the arrays the training loop consumes."""
    names, feats = build_features(dataset, include_lsm=include_lsm,
                                  include_attributes=include_attributes)
    if pixel_ids is None:
        pixel_ids = [px.pixel_id for px in dataset.pixels]
    by_id = {px.pixel_id: px for px in dataset.pixels}
    inputs, targets, mask = [], [], []
    for pid in pixel_ids:
        if pid not in by_id:
            raise ValidationError(f"unknown pixel id {pid!r}")
        px = by_id[pid]
        inputs.append(feats[pid])
        targets.append(px.target)
        mask.append(px.mask)
    return SequenceData(pixel_ids=list(pixel_ids), inputs=np.stack(inputs),
                        targets=np.stack(targets), mask=np.stack(mask),
                        feature_names=names)


@dataclass
class Batch:
    inputs: np.ndarray    # (batch, rho, n_features)
    targets: np.ndarray   # (batch, rho)
    mask: np.ndarray      # (batch, rho) float 0/1
    pixel_ids: list[str]
    starts: np.ndarray


def masked_loss(Y: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                divisor: str = "rho"):
    """Observation-masked mean squared error and its gradient in Y.

    Y is (..., rho, 1) or (..., rho); the batch loss averages the
    per-instance losses. Raises DegenerateBatchError when no step anywhere in
    the batch is observed.
    """
    Y = np.asarray(Y, dtype=float)
    targets = np.asarray(targets, dtype=float)
    mask = np.asarray(mask)
    squeeze = Y.ndim == targets.ndim + 1
    Ys = Y[..., 0] if squeeze else Y
    if Ys.shape != targets.shape or targets.shape != mask.shape:
        raise ValidationError(
            f"shape mismatch Y {Ys.shape}, targets {targets.shape}, mask {mask.shape}")
    maskf = mask.astype(float)
    if not maskf.any():
        raise DegenerateBatchError("batch has no observed target steps")

    rho = targets.shape[-1]
    diff = np.where(mask.astype(bool), Ys - targets, 0.0)
    if divisor == "rho":
        denom = np.full(targets.shape[:-1], float(rho))
    elif divisor == "observed":
        denom = np.maximum(maskf.sum(axis=-1), 1.0)
    else:
        raise ValidationError(f"unknown loss divisor {divisor!r}")

    per_instance = (diff * diff).sum(axis=-1) / denom
    if per_instance.ndim == 0:
        loss = float(per_instance)
        grad = 2.0 * diff / denom
    else:
        n_inst = per_instance.size
        loss = float(per_instance.mean())
        grad = 2.0 * diff / denom[..., None] / n_inst
    if squeeze:
        grad = grad[..., None]
    return loss, grad


def sample_batch(data: SequenceData, config: TrainingConfig, rng,
                 window: tuple[int, int] | None = None) -> Batch:
    """Uniformly sample batch_size pixels with replacement, each contributing
    a contiguous window of unroll_length days with a uniform start offset."""
    rng = make_rng(rng)
    if data.n_pixels < 1:
        raise ValidationError("no pixels to sample from")
    t0, t1 = window if window is not None else (0, data.n_days)
    span = t1 - t0
    rho = config.unroll_length
    if rho > span:
        raise ValidationError(
            f"unroll_length {rho} exceeds the {span}-day sampling window")
    pix = rng.integers(0, data.n_pixels, size=config.batch_size)
    starts = t0 + rng.integers(0, span - rho + 1, size=config.batch_size)
    inputs = np.stack([data.inputs[p, s:s + rho] for p, s in zip(pix, starts)])
    targets = np.stack([data.targets[p, s:s + rho] for p, s in zip(pix, starts)])
    mask = np.stack([data.mask[p, s:s + rho] for p, s in zip(pix, starts)])
    return Batch(inputs=inputs, targets=np.where(mask, targets, 0.0),
                 mask=mask.astype(float), pixel_ids=[data.pixel_ids[p] for p in pix],
                 starts=starts)


def clip_gradients(grads: LstmWeights, max_norm: float) -> float:
    """Scale all gradient arrays in place so the global norm is at most
    max_norm; returns the pre-clip norm."""
    total = 0.0
    for _, arr in grads.named_arrays():
        total += float((arr * arr).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for name, arr in grads.named_arrays():
            setattr(grads, name, arr * scale)
    return norm


class AdamState:
    def __init__(self, w: LstmWeights):
        self.m = {name: np.zeros_like(arr) for name, arr in w.named_arrays()}
        self.v = {name: np.zeros_like(arr) for name, arr in w.named_arrays()}
        self.t = 0


def adam_step(w: LstmWeights, grads: LstmWeights, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.named_arrays():
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        setattr(w, name, getattr(w, name) - step)


def sgd_step(w: LstmWeights, grads: LstmWeights, lr: float):
    for name, g in grads.named_arrays():
        setattr(w, name, getattr(w, name) - lr * g)


def train_lstm(data: SequenceData, config: TrainingConfig,
               window: tuple[int, int] | None = None,
               checkpoint_dir: str | None = None,
               checkpoint_writer=None):
    """Run the full training loop; returns (weights, history).

    ``window`` restricts sampling to [t0, t1) on the time axis. History rows
    are dicts of epoch, loss and cumulative wall seconds. Checkpoints go
    through ``checkpoint_writer(path, weights)`` every ``checkpoint_every``
    epochs when a directory is given.
    """
    config.validate()
    n_features = data.inputs.shape[2]
    if len(data.feature_names) != n_features:
        raise ValidationError("feature name list does not match input width")

    w = init_weights(n_features, config.hidden_size, 1, seed=config.seed)
    batch_rng = make_rng([config.seed, 1])
    dropout_rng = make_rng([config.seed, 2])
    adam = AdamState(w) if config.optimizer == "adaptive_moments" else None

    history = []
    started = time.perf_counter()
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        batch = None
        for _ in range(20):  # degenerate batches are resampled
            candidate = sample_batch(data, config, batch_rng, window=window)
            if candidate.mask.any():
                batch = candidate
                break
        if batch is None:
            raise DegenerateBatchError(
                "20 consecutive batches carried no observed targets")

        masks = sample_dropout_masks(
            config.dropout, n_features, config.hidden_size,
            config.unroll_length, dropout_rng, batch=config.batch_size)
        Y, cache = forward_sequence(w, batch.inputs, masks=masks)
        loss, dY = masked_loss(Y, batch.targets, batch.mask,
                               divisor=config.loss_divisor)
        if not np.isfinite(loss):
            raise NumericError(
                f"non-finite loss at epoch {epoch}; batch pixels "
                f"{batch.pixel_ids[:5]}{'...' if len(batch.pixel_ids) > 5 else ''}")
        grads = bptt_gradients(w, cache, dY)
        clip_gradients(grads, config.gradient_clip_norm)
        if adam is not None:
            adam_step(w, grads, adam, config.learning_rate)
        else:
            sgd_step(w, grads, config.learning_rate)

        history.append({"epoch": epoch, "loss": loss,
                        "seconds": time.perf_counter() - started})
        if (checkpoint_dir is not None and checkpoint_writer is not None
                and epoch % config.checkpoint_every == 0):
            checkpoint_writer(
                os.path.join(checkpoint_dir, f"checkpoint_{epoch:06d}.json"), w)

    return w, history


def write_history_csv(history, path: str):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "seconds"])
        for row in history:
            writer.writerow([row["epoch"], format(row["loss"], ".17g"),
                             format(row["seconds"], ".3f")])
