"""Desk-scale classification tasks for the federated simulator.

The model is a single linear softmax head ``logits = W x`` with
``W = W0 + s B A``. ``W0`` comes from brief non-private training on a
disjoint pretraining set; the adapters then fine-tune to a shifted
version of the same classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .numkit import SeededRng, matmul

__all__ = [
    "Dataset",
    "gen_blobs",
    "softmax_loss_and_grad",
    "softmax_residuals",
    "per_sample_grads",
    "accuracy",
    "train_linear",
    "LoraTask",
    "make_lora_task",
    "load_csv_dataset",
]


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    n_classes: int

    def __post_init__(self):
        for y in (self.y_train, self.y_eval):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError("labels must lie in [0, n_classes)")

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def _unit_directions(n: int, d: int, rng: SeededRng) -> np.ndarray:
    u = rng.normal(n * d).reshape(n, d)
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _split(x, y, n_classes, rng: SeededRng, eval_fraction: float = 0.2) -> Dataset:
    """Stratified, seeded train/eval split."""
    train_idx, eval_idx = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        perm = idx[rng.child("split", c).generator().permutation(idx.size)]
        n_eval = int(round(eval_fraction * idx.size))
        eval_idx.append(perm[:n_eval])
        train_idx.append(perm[n_eval:])
    tr = np.sort(np.concatenate(train_idx))
    ev = np.sort(np.concatenate(eval_idx))
    return Dataset(x[tr], y[tr], x[ev], y[ev], n_classes)


def gen_blobs(
    n_classes: int,
    d: int,
    per_class: int,
    separation: float,
    rng: SeededRng,
    centers: np.ndarray | None = None,
) -> Dataset:
    """Isotropic unit-variance blobs around ``separation * u_c``; 80/20 split.

    ``centers`` overrides the random unit directions ``u_c``.
    """
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    if centers is None:
        centers = _unit_directions(n_classes, d, rng.child("centers"))
    noise = rng.child("noise").normal(n_classes * per_class * d).reshape(n_classes, per_class, d)
    x = (separation * centers[:, None, :] + noise).reshape(-1, d)
    y = np.repeat(np.arange(n_classes), per_class)
    return _split(x, y, n_classes, rng)


def softmax_residuals(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and ``p - onehot(y)`` for logits ``x W^T``."""
    logits = matmul(x, w.T)
    lse = logsumexp(logits, axis=1)
    losses = lse - logits[np.arange(y.size), y]
    resid = np.exp(logits - lse[:, None])
    resid[np.arange(y.size), y] -= 1.0
    return losses, resid


def softmax_loss_and_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``w``."""
    losses, resid = softmax_residuals(w, x, y)
    return float(np.mean(losses)), matmul(resid.T, x) / y.size


def per_sample_grads(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Stacked per-sample gradients ``(batch, classes, d)``; they average to the batch gradient."""
    _, resid = softmax_residuals(w, x, y)
    return resid[:, :, None] * x[:, None, :]


def accuracy(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    if y.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(matmul(x, w.T), axis=1) == y))


def train_linear(
    x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 200, lr: float = 0.5, w: np.ndarray | None = None
) -> np.ndarray:
    """Full-batch gradient descent on the softmax loss (non-private)."""
    if w is None:
        w = np.zeros((n_classes, x.shape[1]))
    for _ in range(steps):
        _, g = softmax_loss_and_grad(w, x, y)
        w = w - lr * g
    return w


@dataclass(frozen=True)
class LoraTask:
    data: Dataset
    w0: np.ndarray
    pretrain: Dataset


def make_lora_task(
    rng: SeededRng,
    n_classes: int = 10,
    d: int = 32,
    per_class: int = 100,
    separation: float = 3.0,
    shift: float = 1.0,
    pretrain_steps: int = 50,
    pretrain_lr: float = 0.5,
) -> LoraTask:
    """Pretrain ``W0`` on one blob set, then return a shifted fine-tuning set.

    Fine-tuning centers are ``normalize(u_c + shift * v_c)`` for fresh
    random directions ``v_c``.
    """
    base = _unit_directions(n_classes, d, rng.child("base_centers"))
    pre = gen_blobs(n_classes, d, per_class, separation, rng.child("pretrain"), centers=base)
    w0 = train_linear(pre.x_train, pre.y_train, n_classes, steps=pretrain_steps, lr=pretrain_lr)
    moved = base + shift * _unit_directions(n_classes, d, rng.child("shift"))
    moved /= np.linalg.norm(moved, axis=1, keepdims=True)
    data = gen_blobs(n_classes, d, per_class, separation, rng.child("finetune"), centers=moved)
    return LoraTask(data, w0, pre)


def load_csv_dataset(path, label_column: str = "label", eval_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Read a CSV with one integer label column and numeric feature columns.

    The header row is required. Labels are remapped to ``0..n_classes-1``
    in sorted order. The split is stratified and seeded.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or label_column not in reader.fieldnames:
            raise ValueError(f"CSV needs a header with a {label_column!r} column")
        feature_cols = [c for c in reader.fieldnames if c != label_column]
        rows = list(reader)
    if not rows:
        raise ValueError("CSV has no data rows")
    x = np.array([[float(r[c]) for c in feature_cols] for r in rows])
    raw = [int(r[label_column]) for r in rows]
    classes = sorted(set(raw))
    y = np.array([classes.index(v) for v in raw])
    if not np.all(np.isfinite(x)):
        raise ValueError("CSV features contain NaN or Inf")
    return _split(x, y, len(classes), SeededRng(seed, ("csv",)), eval_fraction)
