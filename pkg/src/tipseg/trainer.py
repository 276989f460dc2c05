"""SGD-with-momentum training loop, evaluation runner, and history export.

Training applies the augmentation pipeline per sample with its own
deterministic random stream, batches the results, minimizes the soft
Jaccard loss with classical momentum SGD (no weight decay, no schedule),
and records one loss pair per epoch. Validation and test data go through
resize-only preprocessing. Evaluation merges per-image confusion totals
first and computes metrics once on the merged totals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from tipseg.augment import AugmentConfig, RngStream, _resize, pipeline, standardize
from tipseg.errors import ConfigurationError, DataValidationError, NumericalError
from tipseg.imgdata import GrayImage, LabelMask, Sample, SplitSet, load_samples
from tipseg.lossmetrics import (MetricsReport, argmax_mask, confusion, metrics,
                                soft_jaccard_loss)
from tipseg.model import ModelSpec, SegModel, save_weights

OVERLAY_PALETTE = np.array([
    [0, 0, 0],        # background, unused in blending
    [230, 60, 60],    # 1 left index
    [240, 150, 40],   # 2 left middle
    [230, 220, 50],   # 3 left ring
    [110, 200, 60],   # 4 left little
    [60, 200, 200],   # 5 right index
    [70, 110, 230],   # 6 right middle
    [150, 70, 220],   # 7 right ring
    [230, 80, 180],   # 8 right little
], dtype=np.float64)


@dataclass
class TrainConfig:
    learning_rate: float = 8e-5
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    aug: str = "full"             # augmentation preset: none | minimal | full
    checkpoint_every: int = 0     # 0 disables periodic checkpoints
    data_dir: str | None = None
    model: ModelSpec | None = None

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0 (0 only for no-op tests)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("epochs and checkpoint_every must be >= 0")
        if self.aug not in ("none", "minimal", "full"):
            raise ConfigurationError(f"unknown augmentation preset {self.aug!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None


def sgd_step(weights, grads, velocity, lr: float, momentum: float):
    """Classical momentum update: v <- momentum*v - lr*g; w <- w + v.

    Updates `weights` and `velocity` in place (torch tensors or numpy
    arrays) and returns them. No weight decay, no schedule.
    """
    for w, g, v in zip(weights, grads, velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise DataValidationError(
                f"shape mismatch in sgd_step: w{tuple(w.shape)} g{tuple(g.shape)} v{tuple(v.shape)}")
        v *= momentum
        v -= lr * g
        w += v
    return weights, velocity


def samples_to_batch(samples: list[Sample], in_channels: int):
    """Stack 224x224 samples into (B, C, H, W) float [0,1] and (B, H, W) long."""
    imgs = np.stack([s.image.values for s in samples]).astype(np.float32) / 255.0
    x = torch.from_numpy(imgs).unsqueeze(1)
    if in_channels == 3:
        x = x.repeat(1, 3, 1, 1)
    elif in_channels != 1:
        raise ConfigurationError("in_channels must be 1 or 3 for grayscale data")
    y = torch.from_numpy(np.stack([s.mask.labels for s in samples]).astype(np.int64))
    return x, y


def _batch_loss(model: SegModel, batch: list[Sample]) -> torch.Tensor:
    x, y = samples_to_batch(batch, model.spec.backbone.in_channels)
    probs = torch.softmax(model(x), dim=1)
    return soft_jaccard_loss(probs, y)


def train(model: SegModel, split: SplitSet, cfg: TrainConfig,
          aug_cfg: AugmentConfig | None = None,
          run_dir: str | Path | None = None) -> tuple[SegModel, History]:
    """Train in place; returns the model and its per-epoch loss history.

    Checkpoints (when ``run_dir`` is set) go to ``run_dir/ckpt_<epoch>``
    every ``checkpoint_every`` epochs, plus ``run_dir/ckpt_best`` at every
    new best validation loss.
    """
    cfg.validate()
    if not split.train:
        raise ConfigurationError("training split is empty")
    if cfg.data_dir is None:
        raise ConfigurationError("cfg.data_dir is required")
    if aug_cfg is None:
        aug_cfg = AugmentConfig(preset=cfg.aug)

    train_samples = load_samples(cfg.data_dir, split.train)
    val_samples = [standardize(s) for s in load_samples(cfg.data_dir, split.val)]
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    velocity = [torch.zeros_like(p) for p in model.parameters()]
    history = History()
    best_val = float("inf")

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch]))
        order = order_rng.permutation(len(train_samples))

        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idxs = order[b0:b0 + cfg.batch_size]
            batch = [
                pipeline(train_samples[i], aug_cfg,
                         RngStream(cfg.seed, epoch * 1_000_003 + int(pos)))
                for pos, i in zip(range(b0, b0 + len(idxs)), idxs)
            ]
            loss = _batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss {loss.item()!r} at epoch {epoch}, batch {b0 // cfg.batch_size}")
            model.zero_grad(set_to_none=False)
            loss.backward()
            with torch.no_grad():
                params = list(model.parameters())
                sgd_step([p.data for p in params], [p.grad for p in params],
                         velocity, cfg.learning_rate, cfg.momentum)
            losses.append(float(loss.item()))

        val_loss = _mean_loss(model, val_samples, cfg.batch_size) if val_samples else float("nan")
        record = EpochRecord(epoch, float(np.mean(losses)), val_loss,
                             time.perf_counter() - t0)
        history.records.append(record)

        if run_dir is not None:
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_weights(model, run_dir / f"ckpt_{epoch}")
            if val_loss == val_loss and val_loss < best_val:  # NaN-safe
                best_val = val_loss
                history.best_epoch = epoch
                save_weights(model, run_dir / "ckpt_best")
        elif val_loss == val_loss and val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch

    return model, history


def _mean_loss(model: SegModel, samples: list[Sample], batch_size: int) -> float:
    model.eval()
    losses, weights = [], []
    with torch.no_grad():
        for b0 in range(0, len(samples), batch_size):
            batch = samples[b0:b0 + batch_size]
            losses.append(float(_batch_loss(model, batch).item()))
            weights.append(len(batch))
    return float(np.average(losses, weights=weights))


def predict(model: SegModel, image: GrayImage) -> LabelMask:
    """Segment one grayscale image of any size.

    The image is resized to the model's input size, passed through the
    network, argmax-decoded, and the mask resized back to the original
    dimensions with nearest sampling.
    """
    size = model.spec.input_size
    sample = Sample("predict", image, LabelMask(np.zeros_like(image.values)))
    std = standardize(sample, size)
    x, _ = samples_to_batch([std], model.spec.backbone.in_channels)
    model.eval()
    with torch.no_grad():
        logits = model(x)
    mask = argmax_mask(logits[0])
    if mask.labels.shape != image.values.shape:
        mask = LabelMask(_resize(mask.labels, image.width, image.height, nearest=True))
    return mask


def render_overlay(image: GrayImage, mask: LabelMask, alpha: float = 0.5) -> np.ndarray:
    """RGB visualization: class-colored fingertip regions over the image."""
    if image.values.shape != mask.labels.shape:
        raise DataValidationError("image and mask dimensions differ")
    rgb = np.repeat(image.values[:, :, None].astype(np.float64), 3, axis=2)
    fg = mask.labels > 0
    colors = OVERLAY_PALETTE[mask.labels]
    rgb[fg] = (1 - alpha) * rgb[fg] + alpha * colors[fg]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def evaluate(model, samples: list[Sample], predict_fn=None) -> MetricsReport:
    """Micro metrics over a sample list: merge confusion totals, then compute.

    ``predict_fn(model, image) -> LabelMask`` defaults to :func:`predict`;
    tests inject stubs through it.
    """
    if not samples:
        raise ConfigurationError("no samples to evaluate")
    if predict_fn is None:
        predict_fn = predict
    totals = None
    for sample in samples:
        c = confusion(predict_fn(model, sample.image), sample.mask)
        totals = c if totals is None else totals + c
    return metrics(totals)


def export_history(history: History, path):
    """Write epoch records as CSV (epoch,train_loss,val_loss,seconds)."""
    lines = ["epoch,train_loss,val_loss,seconds"]
    for r in history.records:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.seconds!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_history(path) -> History:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "epoch,train_loss,val_loss,seconds":
        raise DataValidationError(f"not a history CSV: {path}")
    history = History()
    best_val = float("inf")
    for line in text[1:]:
        if not line.strip():
            continue
        e, tl, vl, sec = line.split(",")
        rec = EpochRecord(int(e), float(tl), float(vl), float(sec))
        history.records.append(rec)
        if rec.val_loss == rec.val_loss and rec.val_loss < best_val:
            best_val = rec.val_loss
            history.best_epoch = rec.epoch
    return history
