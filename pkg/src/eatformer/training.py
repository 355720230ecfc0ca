"""Mini-batch training loop shared by the CLI and the estimator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import AdamW, EATFormer, check_labels, model_state, train_step
from .tensor import no_grad


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float


def evaluate_accuracy(model: EATFormer, images: np.ndarray, labels: np.ndarray, batch_size: int = 100) -> float:
    """Accuracy in inference mode (running norm statistics)."""
    model.eval()
    correct = 0
    with no_grad():
        for start in range(0, len(labels), batch_size):
            logits = model(images[start : start + batch_size]).data
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + batch_size]))
    return correct / max(1, len(labels))


def fit(model: EATFormer, images: np.ndarray, labels: np.ndarray, epochs: int, batch_size: int = 50, lr: float = 2e-3,
        weight_decay: float = 5e-2, seed: int = 0, target_accuracy: float | None = None,
        on_epoch: Callable[[EpochMetrics, EATFormer], None] | None = None) -> list[EpochMetrics]:
    """Train on float images (N, 3, H, W) with AdamW on shuffled mini-batches.

    Batches smaller than two samples are folded into the previous one so
    batch statistics are always defined. Stops early once the inference-mode
    training accuracy reaches ``target_accuracy``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = check_labels(labels, model.spec.num_classes)
    rng = np.random.default_rng(seed)
    optimizer = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    n = len(labels)
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        bounds.pop(-2)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = order[lo:hi]
            losses.append(train_step(model, images[idx], labels[idx], optimizer) * len(idx))
        metrics = EpochMetrics(epoch, float(np.sum(losses) / n), evaluate_accuracy(model, images, labels))
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics, model)
        if target_accuracy is not None and metrics.train_accuracy >= target_accuracy:
            break
    return history


def snapshot(model: EATFormer) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model_state(model).items()}


def restore(model: EATFormer, state: dict[str, np.ndarray]) -> None:
    for name, target in model_state(model).items():
        target[...] = state[name]
