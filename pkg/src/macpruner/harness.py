"""Desk-scale training and evaluation.

Synthetic class-conditional Gaussian image datasets stand in for the large
benchmark corpora: each class has a random mean image and samples add
isotropic noise, so moderate-noise datasets are linearly separable by
construction and fixture networks train to high accuracy in a few epochs.
Inline fine-tuning is plain SGD with momentum for a handful of epochs on a
configured data subset; heavily pruned networks (over 15% parameter
reduction) drop to the reduced learning rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netexec import WeightedNet, forward, forward_backward


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the caller treats this as collapse."""


@dataclass
class DatasetParams:
    classes: int = 10
    samples: int = 512
    channels: int = 3
    height: int = 16
    width: int = 16
    noise: float = 0.6
    seed: int = 7
    val_fraction: float = 0.25

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples < self.classes:
            raise ValueError("need at least one sample per class")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class SyntheticDataset:
    inputs: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    params: DatasetParams

    @property
    def train_x(self) -> np.ndarray:
        return self.inputs[self.train_idx]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def val_x(self) -> np.ndarray:
        return self.inputs[self.val_idx]

    @property
    def val_y(self) -> np.ndarray:
        return self.labels[self.val_idx]


def generate_dataset(params: DatasetParams) -> SyntheticDataset:
    """Class-stratified Gaussian blobs, reproducible from the seed."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    k = params.classes
    shape = (params.channels, params.height, params.width)
    means = rng.normal(0.0, 1.0, size=(k,) + shape)

    per_class = [params.samples // k] * k
    for i in range(params.samples - sum(per_class)):
        per_class[i] += 1
    xs, ys = [], []
    for cls, count in enumerate(per_class):
        noise = rng.normal(0.0, 1.0, size=(count,) + shape) * params.noise
        xs.append(means[cls][None] + noise)
        ys.append(np.full(count, cls, dtype=np.int64))
    inputs = np.concatenate(xs, axis=0)
    labels = np.concatenate(ys, axis=0)

    train_parts, val_parts = [], []
    offset = 0
    for count in per_class:
        order = offset + rng.permutation(count)
        n_val = max(1, int(round(params.val_fraction * count)))
        val_parts.append(order[:n_val])
        train_parts.append(order[n_val:])
        offset += count
    return SyntheticDataset(
        inputs=inputs, labels=labels,
        train_idx=np.sort(np.concatenate(train_parts)),
        val_idx=np.sort(np.concatenate(val_parts)),
        params=params,
    )


def make_calibration_batches(data: SyntheticDataset, num_batches: int,
                             batch_size: int, seed: int = 0
                             ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic calibration batches drawn from the training split."""
    rng = np.random.default_rng(seed)
    x, y = data.train_x, data.train_y
    batches = []
    for _ in range(num_batches):
        idx = rng.choice(len(x), size=min(batch_size, len(x)), replace=False)
        batches.append((x[idx], y[idx]))
    return batches


@dataclass
class InlineConfig:
    """Inline fine-tuning recipe (brief recovery training during search)."""

    epochs: int = 5
    subset_fraction: float = 0.3
    base_lr: float = 0.01
    heavy_lr: float = 0.0005
    heavy_reduction_threshold: float = 0.15
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    label_smoothing: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0


def train_sgd(net: WeightedNet, x: np.ndarray, y: np.ndarray, *, epochs: int,
              lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
              batch_size: int = 64, label_smoothing: float = 0.0,
              grad_clip: float = 0.0, subset_fraction: float = 1.0,
              seed: int = 0) -> WeightedNet:
    """SGD with momentum, mutating ``net`` in place; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    n = len(x)
    if subset_fraction < 1.0:
        take = max(batch_size, int(n * subset_fraction))
        subset = np.sort(rng.choice(n, size=min(take, n), replace=False))
        x, y = x[subset], y[subset]
        n = len(x)
    vel_w = {k: np.zeros_like(w) for k, w in net.weights.items()}
    vel_b = {k: np.zeros_like(b) for k, b in net.biases.items()}
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = forward_backward(net, x[idx], y[idx], label_smoothing)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss}")
            if grad_clip > 0:
                total = 0.0
                for g in grads.weights.values():
                    total += float((g * g).sum())
                for g in grads.biases.values():
                    total += float((g * g).sum())
                norm = np.sqrt(total)
                if norm > grad_clip:
                    scale = grad_clip / norm
                    for g in grads.weights.values():
                        g *= scale
                    for g in grads.biases.values():
                        g *= scale
            for key in net.weights:
                g = grads.weights[key]
                if weight_decay:
                    g = g + weight_decay * net.weights[key]
                vel_w[key] = momentum * vel_w[key] - lr * g
                net.weights[key] += vel_w[key]
                vel_b[key] = momentum * vel_b[key] - lr * grads.biases[key]
                net.biases[key] += vel_b[key]
    return net


def evaluate(net: WeightedNet, x: np.ndarray, y: np.ndarray,
             chunk: int = 256) -> float:
    """Top-1 accuracy in percent, deterministic."""
    if len(x) != len(y):
        raise ValueError("inputs and labels disagree in length")
    correct = 0
    for start in range(0, len(x), chunk):
        logits = forward(net, x[start:start + chunk])
        correct += int((logits.argmax(axis=1) == y[start:start + chunk]).sum())
    return 100.0 * correct / len(y)


def evaluate_val(net: WeightedNet, data: SyntheticDataset) -> float:
    return evaluate(net, data.val_x, data.val_y)


def inline_finetune(net: WeightedNet, data: SyntheticDataset, config: InlineConfig,
                    baseline_params: int | None = None) -> tuple[WeightedNet, float]:
    """Brief recovery training; returns the tuned net and its val accuracy."""
    lr = config.base_lr
    if baseline_params:
        reduction = 1.0 - net.num_params() / baseline_params
        if reduction > config.heavy_reduction_threshold:
            lr = config.heavy_lr
    net = train_sgd(
        net, data.train_x, data.train_y,
        epochs=config.epochs, lr=lr, momentum=config.momentum,
        weight_decay=config.weight_decay, batch_size=config.batch_size,
        label_smoothing=config.label_smoothing, grad_clip=config.grad_clip,
        subset_fraction=config.subset_fraction, seed=config.seed)
    return net, evaluate_val(net, data)


def train_baseline(net: WeightedNet, data: SyntheticDataset, *, epochs: int = 20,
                   lr: float = 0.01, batch_size: int = 64, seed: int = 0
                   ) -> tuple[WeightedNet, float]:
    """Train a fixture baseline to its frozen reference accuracy."""
    net = train_sgd(net, data.train_x, data.train_y, epochs=epochs, lr=lr,
                    momentum=0.9, weight_decay=5e-4, batch_size=batch_size,
                    label_smoothing=0.0, grad_clip=1.0, seed=seed)
    return net, evaluate_val(net, data)
