"""Alignment training: SGD with cosine-annealed learning rate.

Batches pool the labeled patches of a few images; the contrastive loss
sees them jointly (patch-patch pairs cross image boundaries) while each
head forward runs per image, so self-attention stays within one image.
Everything is seeded and single-threaded: identical seeds give
bit-identical parameter trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import derive_seed, seeded_rng
from .heads import HeadConfig, create_head
from .losses import LossBatch, LOSSES


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 5
    lr0: float = 0.1
    momentum: float = 0.0
    loss: str = "tsupcon"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr0 <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr0 > 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r} (have {sorted(LOSSES)})")


def flatten_labeled(features: np.ndarray, labels: np.ndarray):
    """Drop unlabeled patches; returns (N_labeled x D features, labels)."""
    flat_x = features.reshape(-1, features.shape[-1])
    flat_y = labels.reshape(-1)
    keep = flat_y >= 0
    return flat_x[keep], flat_y[keep]


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def train(dataset, prototypes: np.ndarray, head_config: HeadConfig,
          config: TrainConfig):
    """Train a head on (vision feature grid, patch label grid) pairs.

    ``dataset`` is a list of (features H_p x W_p x D_in, labels H_p x W_p
    with -1 for unlabeled). Returns (head, log) where log is a list of
    {"step", "lr", "loss"} records, one per SGD step.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    images = []
    for features, labels in dataset:
        x, y = flatten_labeled(np.asarray(features), np.asarray(labels))
        if len(y):
            images.append((x, y))
    if not images:
        raise ValueError("no labeled patches in the training dataset")

    d_in = images[0][0].shape[1]
    d_out = prototypes.shape[1]
    head = create_head(head_config.variant, d_in, d_out, head_config,
                       seed=derive_seed(config.seed, "head-init"))

    loss_fn = LOSSES[config.loss]
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if total_steps == 0:
        return head, []

    rng = seeded_rng(derive_seed(config.seed, "shuffle"))
    buffers: dict = {}
    log = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        for b in range(steps_per_epoch):
            batch_ids = order[b * config.batch_size:(b + 1) * config.batch_size]
            forwards = []
            for i in batch_ids:
                x, y = images[int(i)]
                z, cache = head.forward(x)
                forwards.append((x, y, z, cache))
            batch = LossBatch(
                z=np.concatenate([f[2] for f in forwards]),
                labels=np.concatenate([f[1] for f in forwards]),
                prototypes=prototypes,
            )
            loss, dz = loss_fn(batch, temperature=config.temperature)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step}")

            lr = cosine_lr(config.lr0, step, total_steps)
            grads: dict[str, np.ndarray] = {}
            offset = 0
            for x, y, z, cache in forwards:
                part = head.backward(cache, dz[offset:offset + len(y)])
                offset += len(y)
                for name, g in part.items():
                    if name in grads:
                        grads[name] += g
                    else:
                        grads[name] = g
            head.sgd_step(grads, lr, momentum=config.momentum, buffers=buffers)
            log.append({"step": step, "lr": lr, "loss": float(loss)})
            step += 1
    return head, log
