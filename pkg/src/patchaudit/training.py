"""Shared supervised training loop for the binary classifiers.

Both networks train with Adam on binary cross-entropy over the scalar image
logit.  The loop is deterministic given (config.seed, data): batch order
comes from a named RNG substream and torch is seeded before the first
parameter update.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .datakit.normalize import NormalizationStats, normalize_batch
from .errors import TrainingError
from .rngkit import substream, substream_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(
                f"invalid training config: epochs={self.epochs} "
                f"batch_size={self.batch_size} lr={self.learning_rate}"
            )

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            learning_rate=float(d["learning_rate"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class BlackboxTrainConfig(TrainConfig):
    batch_size: int = 128


@dataclass
class TrainLog:
    init_train_loss: float = math.nan
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = math.nan

    def to_dict(self) -> dict:
        return {
            "init_train_loss": self.init_train_loss,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
        }


def prep_batch(images: np.ndarray, stats: NormalizationStats) -> torch.Tensor:
    """uint8 or [0,1] float images (N,H,W,3) -> normalized NCHW float tensor."""
    if images.dtype == np.uint8:
        arr = images.astype(np.float32) / 255.0
    else:
        arr = images.astype(np.float32)
    arr = normalize_batch(arr, stats)
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    return t.contiguous(memory_format=torch.channels_last)


def binary_metrics(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(accuracy, F1 on the positive class); logit > 0 means positive."""
    pred = (logits > 0).astype(np.int64)
    labels = labels.astype(np.int64)
    acc = float((pred == labels).mean())
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return acc, f1


def evaluate(
    model: torch.nn.Module,
    logits_fn,
    images: np.ndarray,
    labels: np.ndarray,
    stats: NormalizationStats,
    batch_size: int = 256,
) -> tuple[float, float, float, np.ndarray]:
    """(bce loss, accuracy, f1, logits) in eval mode, no gradients."""
    model.eval()
    out = np.empty(len(images), dtype=np.float64)
    with torch.inference_mode():
        for i in range(0, len(images), batch_size):
            x = prep_batch(images[i:i + batch_size], stats)
            out[i:i + batch_size] = logits_fn(model, x).double().numpy()
    y = labels.astype(np.float64)
    # stable BCE-with-logits
    loss = float(np.mean(np.maximum(out, 0) - out * y + np.log1p(np.exp(-np.abs(out)))))
    acc, f1 = binary_metrics(out, labels)
    return loss, acc, f1, out


def train_binary_classifier(
    model: torch.nn.Module,
    logits_fn,
    train_data: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    stats: NormalizationStats,
    val_data: tuple[np.ndarray, np.ndarray] | None = None,
    stream: str = "train",
) -> TrainLog:
    """Optimize BCE on the scalar logit; restores the best-val-accuracy weights.

    Without a validation set the final weights are kept.  Raises
    TrainingError when the train split is single-class or the loss diverges.
    """
    images, labels = train_data
    classes = np.unique(labels)
    if len(classes) < 2:
        raise TrainingError(
            f"training data has a single class ({classes.tolist()}); refusing to train"
        )

    torch.manual_seed(substream_seed(config.seed, stream, "torch"))
    rng = substream(config.seed, stream, "order")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    loss_fn = torch.nn.BCEWithLogitsLoss()

    tlog = TrainLog()
    tlog.init_train_loss, _, _, _ = evaluate(model, logits_fn, images, labels, stats)

    best_state = None
    n = len(images)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_logits = np.empty(n, dtype=np.float64)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            x = prep_batch(images[idx], stats)
            y = torch.from_numpy(labels[idx].astype(np.float32))
            optimizer.zero_grad(set_to_none=True)
            logit = logits_fn(model, x)
            loss = loss_fn(logit, y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"loss diverged at epoch {epoch} (seed={config.seed}, "
                    f"lr={config.learning_rate}, batch_size={config.batch_size})"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
            epoch_logits[idx] = logit.detach().double().numpy()
        epoch_loss /= n
        train_acc, train_f1 = binary_metrics(epoch_logits, labels)

        record = {
            "epoch": epoch,
            "train_loss": epoch_loss,
            "train_accuracy": train_acc,
            "train_f1": train_f1,
        }
        if val_data is not None:
            val_loss, val_acc, val_f1, _ = evaluate(model, logits_fn, val_data[0], val_data[1], stats)
            record.update({"val_loss": val_loss, "val_accuracy": val_acc, "val_f1": val_f1})
            if math.isnan(tlog.best_val_accuracy) or val_acc > tlog.best_val_accuracy:
                tlog.best_val_accuracy = val_acc
                tlog.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
        tlog.epochs.append(record)
        log.info(
            "epoch %d/%d loss=%.4f acc=%.4f%s",
            epoch, config.epochs, epoch_loss, train_acc,
            f" val_acc={record.get('val_accuracy'):.4f}" if val_data is not None else "",
        )

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return tlog
