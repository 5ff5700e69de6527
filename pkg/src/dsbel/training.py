"""Stratified splits, affine augmentation, and SGD-with-momentum training."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .ingestion import GrayImage, Label, LabeledDataset
from .model import Model, images_to_input
from .optim import SGD
from .tensor import ConfigError, NumericError, Tensor, softmax_xent

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# splitting


@dataclass
class SplitPlan:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def indices(self, name: str) -> np.ndarray:
        if name == "all":
            return np.sort(np.concatenate([self.train, self.val, self.test]))
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def split_counts(n: int) -> tuple:
    """(test, val, train) sizes for one class of ``n`` items.

    test = floor(3n/10), which gives Table-1 sizes 745/441 for 2486/1473;
    val = round-half-up of 20% of the remainder.
    """
    test = (3 * n) // 10
    rest = n - test
    val = (2 * rest + 5) // 10
    return test, val, rest - val


def split_dataset(ds: LabeledDataset, seed: int) -> SplitPlan:
    """Per-class seeded shuffle, 70/30 train+val/test, then 80/20 train/val."""
    y = ds.labels
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for cls in Label:
        members = np.flatnonzero(y == cls)
        if len(members) < 5:
            raise ConfigError(f"class {cls.name} has {len(members)} items; at least 5 are needed to split")
        members = rng.permutation(members)
        n_test, n_val, _ = split_counts(len(members))
        parts["test"].append(members[:n_test])
        parts["val"].append(members[n_test:n_test + n_val])
        parts["train"].append(members[n_test + n_val:])
    cat = {k: np.sort(np.concatenate(v)) for k, v in parts.items()}
    return SplitPlan(cat["train"], cat["val"], cat["test"], seed)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    rotation: tuple = (0.0, 360.0)
    scale: tuple = (0.5, 1.0)
    shear: tuple = (-0.5, 0.5)
    reflect: bool = True
    probability: float = 0.5

    def __post_init__(self):
        lo, hi = self.rotation
        if not 0.0 <= lo <= hi <= 360.0:
            raise ConfigError(f"rotation range {self.rotation} outside [0, 360]")
        lo, hi = self.scale
        if not 0.5 <= lo <= hi <= 1.0:
            raise ConfigError(f"scale range {self.scale} outside [0.5, 1]")
        lo, hi = self.shear
        if not -0.5 <= lo <= hi <= 0.5:
            raise ConfigError(f"shear range {self.shear} outside [-0.5, 0.5]")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("probability must lie in [0, 1]")


def affine_warp(img: GrayImage, rotation: float = 0.0, scale: float = 1.0, shear: float = 0.0,
                flip: bool = False) -> GrayImage:
    """Warp about the image centre with nearest-neighbour sampling.

    The forward map is rotate . shear . scale . flip on (x, y) = (col, row)
    offsets from the centre; each output pixel pulls from the inverse-mapped
    source location, and reads outside the image yield 0.
    """
    h, w = img.height, img.width
    theta = math.radians(rotation)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    forward = rot @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([scale, scale])
    if flip:
        forward = forward @ np.diag([-1.0, 1.0])
    inv = np.linalg.inv(forward)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w]
    dx, dy = cc - cx, rr - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy
    si = np.floor(sy + 0.5).astype(np.int64)
    sj = np.floor(sx + 0.5).astype(np.int64)
    inside = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    out = np.zeros((h, w), dtype=np.uint8)
    out[inside] = img.pixels[si[inside], sj[inside]]
    return GrayImage(w, h, out)


def draw_affine(spec: AugmentSpec, rng: np.random.Generator) -> dict:
    return {
        "rotation": float(rng.uniform(*spec.rotation)),
        "scale": float(rng.uniform(*spec.scale)),
        "shear": float(rng.uniform(*spec.shear)),
        "flip": bool(spec.reflect and rng.random() < 0.5),
    }


def augment(img: GrayImage, spec: AugmentSpec, rng: np.random.Generator) -> GrayImage:
    """One random affine draw from ``spec`` applied to ``img``."""
    return affine_warp(img, **draw_affine(spec, rng))


# --------------------------------------------------------------------------
# configuration and history


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    optimizer: str = "sgd"
    batch_size: int = 16
    momentum: float = 0.95
    seed: int = 0
    augment: bool = True
    pretrain_epochs: int = 2
    surrogate_per_class: int = 32
    deterministic: bool = True

    def __post_init__(self):
        if self.optimizer.lower() != "sgd":
            raise ConfigError(f"optimizer: only 'sgd' is supported, got {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate must be >= 0 and momentum in [0, 1)")

    def as_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.val_loss:.6f},{r.val_acc:.6f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())


# --------------------------------------------------------------------------
# training


def _prepare_batch(pixels, idx, aug: Optional[AugmentSpec], rng, dtype):
    imgs = pixels[idx]
    if aug is not None:
        imgs = imgs.copy()
        for k in range(len(imgs)):
            if rng.random() < aug.probability:
                imgs[k] = augment(GrayImage.from_array(imgs[k]), aug, rng).pixels
    return images_to_input(imgs, dtype)


def evaluate(model: Model, pixels: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> tuple:
    """(mean cross-entropy, accuracy) in inference mode."""
    if len(labels) == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for lo in range(0, len(labels), batch_size):
        x = images_to_input(pixels[lo:lo + batch_size], model.dtype)
        y = labels[lo:lo + batch_size]
        logits, probs = model.forward(x)
        _, loss = softmax_xent(Tensor(logits.data), y)
        total += float(loss.data) * len(y)
        correct += int(np.sum(probs.argmax(axis=1) == y))
    return total / len(labels), correct / len(labels)


def train(model: Model, ds: LabeledDataset, plan: SplitPlan, cfg: TrainConfig, *,
          best_path=None, final_path=None, augment_spec: Optional[AugmentSpec] = None) -> tuple:
    """Mini-batch SGD with momentum on ``plan.train``; returns ``(model, history)``.

    The returned model carries the final-epoch weights.  When ``best_path`` is
    given, the checkpoint with the highest validation accuracy (earliest on
    ties) is written there; ``final_path`` receives the last weights.
    """
    if not model.aux_frozen:
        raise ConfigError("auxiliary stem must be pretrained and frozen before training")
    model.set_requires_grad()
    side = model.config.side
    pixels = ds.to_batch(side)
    labels = ds.labels
    aug = (augment_spec or AugmentSpec()) if cfg.augment else None

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    order_rng, aug_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    opt = SGD([t for _, t in model.trainable()], lr=cfg.learning_rate, momentum=cfg.momentum)
    history = TrainHistory()
    val_pixels, val_labels = pixels[plan.val], labels[plan.val]
    pool = None if cfg.deterministic else ThreadPoolExecutor(max_workers=1)

    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = order_rng.permutation(plan.train)
            batches = [order[lo:lo + cfg.batch_size] for lo in range(0, len(order), cfg.batch_size)]
            prep = lambda b: _prepare_batch(pixels, b, aug, aug_rng, model.dtype)
            pending = pool.submit(prep, batches[0]) if pool and batches else None
            total, correct = 0.0, 0
            for bi, idx in enumerate(batches):
                if pool:
                    x = pending.result()
                    if bi + 1 < len(batches):
                        pending = pool.submit(prep, batches[bi + 1])
                else:
                    x = prep(idx)
                y = labels[idx]
                try:
                    logits, probs = model.forward(x, train=True, rng=drop_rng)
                    _, loss = softmax_xent(logits, y)
                except NumericError as e:
                    raise NumericError(f"epoch {epoch}, batch {bi + 1}: {e}") from e
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi + 1}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += value * len(idx)
                correct += int(np.sum(probs.argmax(axis=1) == y))
            n = max(1, len(order))
            val_loss, val_acc = evaluate(model, val_pixels, val_labels)
            rec = EpochRecord(epoch, total / n, correct / n, val_loss, val_acc, time.perf_counter() - t0)
            history.records.append(rec)
            log.info("epoch %d: loss %.4f acc %.4f | val loss %.4f acc %.4f (%.1fs)", epoch,
                     rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.seconds)
            if val_acc > history.best_val_acc:
                history.best_val_acc, history.best_epoch = val_acc, epoch
                if best_path is not None:
                    save_checkpoint(model, best_path)
    finally:
        if pool:
            pool.shutdown()

    if best_path is not None and history.best_epoch == 0:
        save_checkpoint(model, best_path)
    if final_path is not None:
        save_checkpoint(model, final_path)
    return model, history


def score(model: Model, ds: LabeledDataset, indices=None, batch_size: int = 32) -> tuple:
    """Inference-mode malware probabilities and true labels for ``indices``."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
    pixels = ds.to_batch(model.config.side, idx)
    probs = model.predict_proba(images_to_input(pixels, model.dtype), batch_size)
    malware = probs[:, int(Label.MALWARE)] if len(idx) else np.zeros(0)
    return malware, ds.labels[idx]
