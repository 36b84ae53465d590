"""Training loop: Adam with decoupled weight decay, poly LR decay, RSM mixing."""

from __future__ import annotations

import csv
import logging
import math
import os
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import augment, image_to_array
from .errors import ConfigurationError, NonFiniteError, TrainingDivergedError
from .losses import LossConfig, inverse_ratio_weights, total_loss_and_grad
from .metrics import aggregate, image_counts
from .model import ModelConfig, ToySANet, save_checkpoint, superpixel_ground_truth
from .rsm import mix_batch, mix_seed
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "iter", "lr", "loss", "gbcel", "gbjal")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 10
    poly_power: float = 0.9
    seed: int = 0
    # loss
    gamma: float = 1.0
    theta: float = 0.2
    class_weight_mode: str = "uniform"
    epsilon: float = 1e-6
    micro_weight: float = 0.5
    macro_weight: float = 0.5
    cel_weight: float = 0.5
    jal_weight: float = 0.5
    # region shuffling / augmentation
    shuffle: bool = True
    grid: int = 7
    neighborhood: int = 2
    augment: bool = True
    # model
    base_channels: int = 16
    sam_mode: str = "add"
    # evaluation
    threshold: float = 0.5
    empty_convention: float = 1.0

    def __post_init__(self):
        for name in ("lr", "weight_decay", "beta1", "beta2", "adam_epsilon", "poly_power"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.class_weight_mode not in ("uniform", "inverse_ratio"):
            raise ConfigurationError("class_weight_mode must be 'uniform' or 'inverse_ratio'")

    @property
    def loss(self):
        weights = (1.0,) * 5 if self.class_weight_mode == "uniform" else inverse_ratio_weights()
        return LossConfig(self.gamma, self.theta, weights, self.epsilon, self.micro_weight,
                          self.macro_weight, self.cel_weight, self.jal_weight)

    def model_config(self, height, width, seed=None):
        return ModelConfig(height=height, width=width, base_channels=self.base_channels,
                           seed=self.seed if seed is None else seed, sam_mode=self.sam_mode)


def poly_lr(iteration, max_iter, base_lr=1e-4, power=0.9):
    if not 0 <= iteration <= max_iter or max_iter <= 0:
        raise ConfigurationError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def optimizer_step(params, lr, step, config=TrainConfig()):
    """One Adam update (bias-corrected, decoupled weight decay) at 1-based ``step``.

    Weight decay is skipped for parameters flagged ``decay=False`` (biases and
    batch-norm scale/shift).
    """
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape or p.m1.shape != p.data.shape:
            raise ConfigurationError(f"{p.name}: gradient/state shape mismatch")
        p.m1 = (b1 * p.m1 + (1 - b1) * g).astype(p.data.dtype)
        p.m2 = (b2 * p.m2 + (1 - b2) * g * g).astype(p.data.dtype)
        delta = lr * (p.m1 / c1) / (np.sqrt(p.m2 / c2) + config.adam_epsilon)
        if p.decay:
            delta = delta + lr * config.weight_decay * p.data
        p.data = (p.data - delta).astype(p.data.dtype)


def batch_arrays(samples, dtype=np.float32):
    x = np.stack([image_to_array(s.image) for s in samples]).astype(dtype)
    return Tensor(x), [s.map for s in samples]


def batch_targets(samples):
    return np.concatenate([superpixel_ground_truth(s.masks, s.map) for s in samples]).astype(np.float64)


def predict_masks(model, samples, batch_size=5, threshold=0.5):
    """Binary (5, H, W) masks per sample from an eval-mode forward pass."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, maps = batch_arrays(chunk, model.config.np_dtype)
        res = model.forward(x, maps, mode="eval")
        out.extend((res.pixel_probabilities[j] >= threshold).astype(np.uint8) for j in range(len(chunk)))
    return out


def evaluate(model, samples, batch_size=5, threshold=0.5, empty_value=1.0):
    preds = predict_masks(model, samples, batch_size, threshold)
    counts = np.stack([image_counts(p, s.masks) for p, s in zip(preds, samples)])
    return aggregate(counts, empty_value)


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    val_rows: list = field(default_factory=list)
    best_challenge: float = -1.0
    step: int = 0

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    @property
    def initial_loss(self):
        return self.rows[0]["loss"]

    def epoch_mean_loss(self, epoch):
        vals = [r["loss"] for r in self.rows if r["epoch"] == epoch]
        return float(np.mean(vals))

    @property
    def final_loss(self):
        return self.epoch_mean_loss(self.rows[-1]["epoch"])


def _thread_limit():
    env = os.environ.get("SANET_THREADS")
    if not env:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(max(1, int(env)))


def _dump_batch(out_dir, batch, reason):
    if out_dir is None:
        return
    path = Path(out_dir) / "nan_dump.txt"
    with open(path, "w") as fh:
        fh.write(f"{reason}\n")
        for s in batch:
            img = s.image.astype(np.float64)
            fh.write(f"{s.id} finite={bool(np.isfinite(img).all())} min={img.min()} max={img.max()}\n")


def train(model, samples, config=TrainConfig(), val_samples=None, out_dir=None, progress=None):
    """Train ``model`` in place; returns a :class:`TrainResult`.

    Writes ``train_log.csv``, per-epoch checkpoints and ``best.sanc`` to
    ``out_dir`` when given.
    """
    if not samples:
        raise ConfigurationError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    loss_cfg = config.loss
    n = len(samples)
    per_epoch = math.ceil(n / config.batch_size)
    max_iter = config.epochs * per_epoch
    result = TrainResult()
    log_fh = open(out / "train_log.csv", "w", newline="") if out is not None else None
    writer = csv.DictWriter(log_fh, LOG_COLUMNS) if log_fh else None
    if writer:
        writer.writeheader()
    it = 0
    try:
        with _thread_limit():
            for epoch in range(config.epochs):
                order = np.random.default_rng(mix_seed(config.seed, 10_000 + epoch)).permutation(n)
                for b in range(per_epoch):
                    idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                    batch = [samples[i] for i in idx]
                    if config.augment:
                        batch = [augment(s, mix_seed(config.seed, it * 1009 + j)) for j, s in enumerate(batch)]
                    if config.shuffle:
                        batch, _ = mix_batch(batch, mix_seed(config.seed ^ 0x5A5A, it),
                                             config.grid, config.neighborhood)
                    lr = poly_lr(it, max_iter, config.lr, config.poly_power)
                    row = _train_step(model, batch, loss_cfg, lr, it + 1, config, out)
                    row.update(epoch=epoch, iter=it, lr=lr)
                    result.rows.append(row)
                    if writer:
                        writer.writerow({k: row[k] for k in LOG_COLUMNS})
                    if progress:
                        progress(row)
                    it += 1
                result.step = it
                if out is not None:
                    save_checkpoint(out / f"epoch_{epoch:03d}.sanc", model, it)
                if val_samples:
                    report = evaluate(model, val_samples, config.batch_size, config.threshold,
                                      config.empty_convention)
                    result.val_rows.append({
                        "epoch": epoch,
                        "micro_jaccard": report.micro_jaccard,
                        "macro_jaccard": report.macro_jaccard,
                        "challenge_jaccard": report.challenge_jaccard,
                    })
                    log.info("epoch %d val challenge JA %.4f micro %.4f", epoch,
                             report.challenge_jaccard, report.micro_jaccard)
                    if report.challenge_jaccard > result.best_challenge:
                        result.best_challenge = report.challenge_jaccard
                        if out is not None:
                            save_checkpoint(out / "best.sanc", model, it)
    finally:
        if log_fh:
            log_fh.close()
    if out is not None and result.val_rows:
        with open(out / "val_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, list(result.val_rows[0]))
            w.writeheader()
            w.writerows(result.val_rows)
    return result


def _train_step(model, batch, loss_cfg, lr, step, config, out):
    ids = [s.id for s in batch]
    x, maps = batch_arrays(batch, model.config.np_dtype)
    q = batch_targets(batch)
    model.zero_grad()
    try:
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteError("non-finite input pixels")
        with Graph() as g:
            res = model.forward(x, maps, mode="train")
        loss, grad, parts = total_loss_and_grad(res.probabilities.data, q, loss_cfg)
        if not np.isfinite(loss):
            raise NonFiniteError("loss is not finite")
        g.backward(res.probabilities, grad)
    except NonFiniteError as exc:
        _dump_batch(out, batch, str(exc))
        raise TrainingDivergedError(f"training diverged on batch {ids}: {exc}", ids) from exc
    optimizer_step(model.parameters(), lr, step, config)
    return {"loss": float(loss), "gbcel": parts["gbcel"], "gbjal": parts["gbjal"]}


def new_model(config, height, width):
    return ToySANet(config.model_config(height, width))
