"""Loss, early stopping, and the per-fold mini-batch training loop."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Dataset, FoldSplit, Sample
from .errors import ConfigError, DivergenceError, ShapeError, TrainingError
from .model import Batch, ModelSpec, MultimodalNet, batch_tensors, build_model
from .seeding import STREAM_FOLDS, child_seed, rng_for

LOSS_CLAMP_EPS = 1e-7

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol; defaults mirror the reference run."""

    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_min_delta: float = 1e-4
    early_stop_patience: int = 5
    seed: int = 0
    restore_best: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_min_delta < 0:
            raise ConfigError(
                f"early_stop_min_delta must be >= 0, got {self.early_stop_min_delta}"
            )
        if self.early_stop_patience < 1:
            raise ConfigError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be unsigned, got {self.seed}")


@dataclass(frozen=True)
class EpochRecord:
    """One epoch of the training history."""

    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float

    def __post_init__(self) -> None:
        for name in ("train_loss", "val_loss"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise TrainingError(f"{name} must be finite and >= 0, got {value!r}")
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise TrainingError(f"val_accuracy must be in [0, 1], got {self.val_accuracy!r}")


def binary_cross_entropy(labels, probs) -> float:
    """Mean natural-log cross-entropy of ill-class probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log so a
    saturated prediction yields a large finite penalty instead of inf.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.ndim != 1 or p.ndim != 1:
        raise ShapeError(f"labels and probs must be 1-D, got {y.shape} and {p.shape}")
    if y.shape != p.shape:
        raise ShapeError(f"labels have length {y.size}, probs {p.size}")
    if y.size == 0:
        raise ShapeError("labels must be non-empty")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must contain only 0 and 1")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probs must lie in [0, 1]")
    p = np.clip(p, LOSS_CLAMP_EPS, 1.0 - LOSS_CLAMP_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def binary_cross_entropy_torch(labels: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of binary_cross_entropy on backend tensors."""
    p = probs.clamp(LOSS_CLAMP_EPS, 1.0 - LOSS_CLAMP_EPS)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()


def should_stop(history: Sequence[EpochRecord], min_delta: float, patience: int) -> bool:
    """True iff the last `patience` epochs all failed to beat the running
    best validation loss by more than min_delta.

    The reference loss is the running minimum over all earlier epochs, so
    a streak of sub-min_delta improvements cannot keep resetting patience.
    """
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    if not history:
        raise TrainingError("should_stop requires a non-empty history")
    best = np.inf
    streak = 0
    for record in history:
        improved = best - record.val_loss > min_delta
        streak = 0 if improved else streak + 1
        best = min(best, record.val_loss)
    return streak >= patience


def best_epoch_index(history: Sequence[EpochRecord]) -> int:
    """Position of the lowest validation loss; ties go to the earliest epoch."""
    if not history:
        raise TrainingError("best_epoch_index requires a non-empty history")
    losses = [r.val_loss for r in history]
    return int(np.argmin(losses))


def batch_from_samples(samples: Sequence[Sample], spec: ModelSpec) -> Batch:
    """Stack samples into model inputs, replicating grayscale to C channels."""
    channels = spec.image_input_shape[2]
    images = np.stack([np.repeat(s.image[:, :, None], channels, axis=2) for s in samples])
    features = np.stack([s.features.as_array() for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Batch(images=images, features=features, labels=labels)


def _epoch_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Contiguous mini-batches; a trailing singleton merges into the
    previous batch (batch normalization needs >= 2 samples in training)."""
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def evaluate_probs(model: MultimodalNet, ds: Dataset, batch_size: int = 32) -> np.ndarray:
    """Inference-mode ill-class probabilities for every sample, in order."""
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for start in range(0, len(ds), batch_size):
                batch = batch_from_samples(ds.samples[start : start + batch_size], model.spec)
                images, features = batch_tensors(model, batch)
                chunks.append(model(images, features)[:, 1].numpy().astype(np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(chunks) if chunks else np.zeros(0)


def train_fold(
    spec: ModelSpec, fold: FoldSplit, ds: Dataset, cfg: TrainConfig
) -> tuple[MultimodalNet, list[EpochRecord]]:
    """Seeded mini-batch Adam with per-epoch validation and early stopping.

    Returns the trained model (parameters restored to the best-validation
    epoch when cfg.restore_best) and the full epoch history.
    """
    train_ds = ds.subset(fold.train_ids)
    val_ds = ds.subset(fold.val_ids)
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise TrainingError(
            f"fold {fold.fold_index}: train ({len(train_ds)}) and validation "
            f"({len(val_ds)}) sets must be non-empty"
        )
    if cfg.batch_size < 2 and spec.fusion_norm == "batch" and len(train_ds) > 1:
        raise ConfigError("batch_size must be >= 2 when fusion_norm is 'batch'")

    model = build_model(spec, child_seed(cfg.seed, STREAM_FOLDS, fold.fold_index, 0))
    shuffle_rng = rng_for(cfg.seed, STREAM_FOLDS, fold.fold_index, 1)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )

    val_labels = val_ds.labels()
    history: list[EpochRecord] = []
    best_loss = np.inf
    best_state = None
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = shuffle_rng.permutation(len(train_ds))
        total_loss = 0.0
        for indices in _epoch_batches(order, cfg.batch_size):
            samples = [train_ds.samples[i] for i in indices]
            batch = batch_from_samples(samples, spec)
            images, features = batch_tensors(model, batch)
            labels = torch.from_numpy(batch.labels).to(images.dtype)
            optimizer.zero_grad()
            probs = model(images, features)
            loss = binary_cross_entropy_torch(labels, probs[:, 1])
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(epoch, loss_value)
            loss.backward()
            optimizer.step()
            total_loss += loss_value * len(indices)
        train_loss = total_loss / len(train_ds)

        val_probs = evaluate_probs(model, val_ds, cfg.batch_size)
        if not np.all(np.isfinite(val_probs)):
            raise DivergenceError(epoch, float("nan"))
        val_loss = binary_cross_entropy(val_labels, val_probs)
        val_accuracy = float(np.mean((val_probs >= 0.5).astype(np.int64) == val_labels))
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
            )
        )

        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(model.state_dict())
        if should_stop(history, cfg.early_stop_min_delta, cfg.early_stop_patience):
            break

    if cfg.restore_best and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def write_history(history: Sequence[EpochRecord], path: Path | str) -> None:
    """One structured record per line: epoch, losses, validation accuracy."""
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(asdict(record), sort_keys=True))
            fh.write("\n")


def read_history(path: Path | str) -> list[EpochRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(EpochRecord(**json.loads(line)))
    return records
