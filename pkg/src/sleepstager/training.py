"""Multi-task loss, class-balanced batching and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .aggregate import fuse, scatter_decisions
from .errors import ConfigError, LabelError, ShapeError, TrainingDiverged
from .network import (ContextConfig, ModelParams, ModelSpec, as_leaves, context_indices,
                      init_params, objective, predict)
from .optim import AdamState, adam_step

LOG_FLOOR = 1e-12
PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 200
    batch_size: int = 200
    learning_rate: float = 1e-4
    lambda_reg: float = 1e-3
    dropout: float = 0.2
    balanced_batching: bool = True
    seed: int = 0
    precision: str = "float64"  # compute dtype; parameters and Adam state stay float64

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive", "learning_rate")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be non-negative", "lambda_reg")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)", "dropout")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {', '.join(PRECISIONS)}", "precision")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class Dataset:
    """Training samples drawn from one or more recordings.

    ``images`` holds one (P, M, T) image per epoch. ``windows`` holds the
    label window per sample (edge labels replicated at recording ends).
    For many-to-one, ``context`` indexes the neighbour images of each
    sample, again edge-replicated.
    """

    images: np.ndarray
    windows: np.ndarray  # (N, S) int
    subject_ids: list[str]
    epoch_index: np.ndarray
    recordings: list[tuple[str, int, int]] = field(default_factory=list)
    context: np.ndarray | None = None
    n_classes: int = 5

    def __len__(self):
        return len(self.windows)

    @property
    def center_labels(self) -> np.ndarray:
        return self.windows[:, self.windows.shape[1] // 2]

    def inputs(self, idx=None) -> np.ndarray:
        if idx is None:
            idx = np.arange(len(self))
        if self.context is None:
            return self.images[idx]
        stacked = self.images[self.context[idx]]  # (B, K, P, M, T)
        b, k, p, m, t = stacked.shape
        return stacked.transpose(0, 2, 3, 1, 4).reshape(b, p, m, k * t)

    def targets(self, idx=None) -> np.ndarray:
        if idx is None:
            idx = np.arange(len(self))
        return np.eye(self.n_classes)[self.windows[idx]]


def label_windows(labels: np.ndarray, tau: int) -> np.ndarray:
    labels = np.asarray(labels)
    return labels[context_indices(len(labels), tau)]


def build_dataset(recordings: Sequence[tuple[str, np.ndarray, np.ndarray]],
                  context: ContextConfig, n_classes: int = 5) -> Dataset:
    """``recordings`` holds (subject_id, images (N, P, M, T), labels (N,))."""
    images, windows, subjects, epochs, spans, ctx = [], [], [], [], [], []
    start = 0
    for subject, imgs, labels in recordings:
        n = len(labels)
        if len(imgs) != n:
            raise ShapeError(f"{subject}: {len(imgs)} images for {n} labels")
        images.append(np.asarray(imgs, dtype=np.float64))
        if context.mode == "one_to_many":
            windows.append(label_windows(labels, context.tau))
        else:
            windows.append(np.asarray(labels)[:, None])
        if context.mode == "many_to_one":
            ctx.append(context_indices(n, context.tau) + start)
        subjects += [subject] * n
        epochs.append(np.arange(n))
        spans.append((subject, start, start + n))
        start += n
    if not images:
        raise ShapeError("no recordings given")
    return Dataset(np.concatenate(images), np.concatenate(windows).astype(np.int64),
                   subjects, np.concatenate(epochs), spans,
                   np.concatenate(ctx) if ctx else None, n_classes)


def multitask_loss(posteriors, targets) -> float:
    """Sum over slots of the cross-entropy -sum_y t_y ln p_y (non-negative)."""
    p = np.asarray(posteriors, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"{p.shape[0] if p.ndim else 0} posterior slots vs "
                         f"{t.shape[0] if t.ndim else 0} target slots")
    if not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=-1) == 1):
        raise ValueError("targets must be one-hot")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("posteriors must be finite and non-negative")
    return float(-np.sum(t * np.log(np.maximum(p, LOG_FLOOR)))) + 0.0  # no negative zero


def total_objective(posteriors_batch, targets_batch, params: ModelParams,
                    lambda_reg: float) -> float:
    """Batch-mean multi-task loss plus (lambda / 2) ||theta||^2."""
    data = np.mean([multitask_loss(p, t) for p, t in zip(posteriors_batch, targets_batch)])
    return float(data + 0.5 * lambda_reg * params.sq_norm())


def make_balanced_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices with ``batch_size / Y`` samples of every centre class, drawn with replacement."""
    y = dataset.n_classes
    if batch_size % y:
        raise ConfigError(f"batch_size {batch_size} is not divisible by {y} classes",
                          "batch_size")
    centre = dataset.center_labels
    per = batch_size // y
    picks = []
    for c in range(y):
        pool = np.flatnonzero(centre == c)
        if pool.size == 0:
            raise LabelError(f"class {c} has no training samples; cannot build a balanced batch")
        picks.append(rng.choice(pool, size=per, replace=True))
    return np.concatenate(picks)


def _aggregated_accuracy(post: np.ndarray, dataset: Dataset,
                         scheme: str = "multiplicative") -> float:
    s = post.shape[1]
    tau = (s - 1) // 2
    correct = 0
    for _, a, b in dataset.recordings:
        grid = scatter_decisions(post[a:b], tau, b - a)
        correct += int(np.sum(np.argmax(fuse(grid, scheme), axis=1) == dataset.center_labels[a:b]))
    return correct / len(dataset)


def evaluate_dataset(params: ModelParams, spec: ModelSpec, dataset: Dataset,
                     dtype=np.float64) -> dict:
    post = predict(params, spec, dataset.inputs(), dtype=dtype)
    centre = post.shape[1] // 2
    acc = float(np.mean(np.argmax(post[:, centre], axis=1) == dataset.center_labels))
    return {"accuracy": acc, "accuracy_aggregated": _aggregated_accuracy(post, dataset)}


def train(spec: ModelSpec, train_set: Dataset, val_set: Dataset, config: TrainingConfig,
          log=None) -> tuple[ModelParams, list[dict]]:
    """Adam training with best-validation-accuracy checkpoint retention.

    ``config.dropout`` and ``config.lambda_reg`` override the values on
    ``spec``. ``log`` receives per-pass wall-clock lines, which are kept out
    of the returned history so that history is reproducible.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    spec = dataclasses.replace(spec, dropout_rate=config.dropout, lambda_reg=config.lambda_reg)
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, config.seed)
    names = list(params.tensors)
    state = AdamState()
    n_batches = max(1, len(train_set) // config.batch_size)
    best, best_acc = params.copy(), -1.0
    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b in range(n_batches):
            if config.balanced_batching:
                idx = make_balanced_batch(train_set, config.batch_size, rng)
            else:
                idx = rng.choice(len(train_set), size=min(config.batch_size, len(train_set)),
                                 replace=False)
            x, tgt = train_set.inputs(idx), train_set.targets(idx)
            leaves = as_leaves(params, config.dtype)
            with ag.GradTape() as tape:
                total, _ = objective(leaves, spec, x, tgt, rng, train=True)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at pass {epoch}, batch {b}; "
                    f"lower the learning rate (currently {config.learning_rate})")
            grads = ag.backward(tape, total, wrt=[leaves[n] for n in names])
            adam_step(params.tensors, dict(zip(names, grads)), state, config.learning_rate)
            if "fb" in params.tensors:
                np.maximum(params.tensors["fb"], 0.0, out=params.tensors["fb"])
            losses.append(value)
        scores = evaluate_dataset(params, spec, val_set, config.dtype)
        history.append({"pass": epoch, "train_loss": float(np.mean(losses)),
                        "val_accuracy": scores["accuracy"],
                        "val_accuracy_aggregated": scores["accuracy_aggregated"]})
        if scores["accuracy"] > best_acc:
            best_acc = scores["accuracy"]
            best = params.copy()
        if log is not None:
            log(f"pass {epoch}: loss {np.mean(losses):.5f} val {scores['accuracy']:.4f} "
                f"({time.perf_counter() - t0:.2f}s)")
    return best, history


HISTORY_FIELDS = ("pass", "train_loss", "val_accuracy", "val_accuracy_aggregated")


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["pass"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
