"""Desk-scale training and evaluation loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .builder import build_fishnet
from .checkpoint import NORM_MEAN, NORM_STD, Checkpoint
from .data import channel_stats, normalize
from .errors import ConfigError, FishNetError, TrainingDivergedError
from .optim import sgd_step, step_lr


@dataclass
class TrainRecipe:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    lr_step: int = 15
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    flip: bool = False
    crop_pad: int = 0
    seed: int = 0
    # optional, off by default
    warmup_epochs: int = 0
    clip_norm: float = 0.0

    def validate(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.lr_factor < 1:
            raise ValueError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_step < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr_step >= 1 required")
        return self

    def lr_at(self, epoch):
        lr = step_lr(self.lr, epoch, self.lr_step, self.lr_factor)
        if epoch < self.warmup_epochs:
            lr *= (epoch + 1) / (self.warmup_epochs + 1)
        return lr


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    acc: float

    def tsv(self):
        return f"{self.epoch}\t{self.lr!r}\t{self.loss:.6f}\t{self.acc:.6f}"


METRICS_HEADER = "epoch\tlr\tloss\tacc"


@dataclass
class TrainResult:
    network: object
    metrics: list
    mean: np.ndarray
    std: np.ndarray
    velocity: dict = field(default_factory=dict)

    def checkpoint(self, with_momentum=True):
        tensors = dict(self.network.graph.state_dict())
        tensors[NORM_MEAN] = self.mean
        tensors[NORM_STD] = self.std
        mom = dict(self.velocity) if with_momentum else None
        return Checkpoint(self.network.config, tensors, mom)


def first_nonfinite(graph):
    """First node (topological order) whose output holds NaN or inf."""
    for node in graph.nodes:
        if node.output is not None and not np.all(np.isfinite(node.output.values)):
            return node
    return None


def _augment(x, rng, flip, pad):
    if flip:
        mask = rng.random(len(x)) < 0.5
        x = x.copy()
        x[mask] = x[mask, :, :, ::-1]
    if pad:
        n, c, h, w = x.shape
        padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        padded[:, :, pad:pad + h, pad:pad + w] = x
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        x = np.stack([padded[i, :, a:a + h, b:b + w] for i, (a, b) in enumerate(offs)])
    return x


def _clip(grads, max_norm):
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def train(config, dataset, recipe=None, log=None, dtype=np.float32, network=None):
    """Train ``config`` on ``dataset``; ``log`` receives one TSV line per epoch."""
    recipe = (recipe or TrainRecipe()).validate()
    config.validate()
    if tuple(config.input_shape) != dataset.shape:
        raise ConfigError(f"dataset images {dataset.shape} do not match config input "
                          f"{tuple(config.input_shape)}")
    if int(dataset.labels.max()) >= config.num_classes:
        raise ConfigError(f"dataset has label {int(dataset.labels.max())} but config has "
                          f"{config.num_classes} classes")
    net = network or build_fishnet(config, batch=recipe.batch_size, dtype=dtype,
                                   seed=recipe.seed)
    mean, std = channel_stats(dataset.images)
    x_all = normalize(dataset.images, mean, std).astype(dtype)
    y_all = dataset.labels.astype(np.int64)
    rng = np.random.default_rng(recipe.seed)
    params = net.parameters()
    velocity = {}
    metrics = []
    n = len(dataset)
    for epoch in range(recipe.epochs):
        lr = recipe.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, recipe.batch_size):
            idx = order[start:start + recipe.batch_size]
            xb = _augment(x_all[idx], rng, recipe.flip, recipe.crop_pad)
            yb = y_all[idx]
            loss = net.forward(xb, yb, training=True)
            if not np.isfinite(loss):
                bad = first_nonfinite(net.graph)
                where = bad.name if bad is not None else net.loss.name
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; first non-finite node: {where}", where)
            loss_sum += loss * len(idx)
            correct += int((net.logits.value.argmax(1) == yb).sum())
            net.backward()
            grads = net.gradients()
            if recipe.clip_norm:
                _clip(grads, recipe.clip_norm)
            sgd_step(params, grads, velocity, lr, recipe.momentum, recipe.weight_decay)
        m = EpochMetrics(epoch, lr, loss_sum / n, correct / n)
        metrics.append(m)
        if log is not None:
            log(m.tsv())
    return TrainResult(net, metrics, mean, std, velocity)


def evaluate(network, dataset, mean, std, batch_size=100):
    """Eval-mode (running BN statistics) accuracy and mean loss."""
    dtype = network.graph.dtype
    x = normalize(dataset.images, mean, std).astype(dtype)
    y = dataset.labels.astype(np.int64)
    loss_sum, correct = 0.0, 0
    for start in range(0, len(y), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        loss_sum += network.forward(xb, yb, training=False) * len(yb)
        correct += int((network.logits.value.argmax(1) == yb).sum())
    return correct / len(y), loss_sum / len(y)


def network_from_checkpoint(ckpt, batch=2, dtype=np.float32):
    net = build_fishnet(ckpt.config, batch=batch, dtype=dtype)
    net.graph.load_state_dict(ckpt.state())
    return net


def evaluate_checkpoint(ckpt, dataset, batch_size=100):
    if ckpt.norm is None:
        raise FishNetError("checkpoint carries no normalization statistics")
    if tuple(ckpt.config.input_shape) != dataset.shape:
        raise ConfigError(f"dataset images {dataset.shape} do not match checkpoint input "
                          f"{tuple(ckpt.config.input_shape)}")
    net = network_from_checkpoint(ckpt, batch=batch_size)
    return evaluate(net, dataset, *ckpt.norm, batch_size=batch_size)
