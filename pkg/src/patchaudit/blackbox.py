"""Opaque reference classifier and the oracle adapters that gate access to it.

The classifier is a standard residual network with global context, trained
on the same data as the proxy.  Everything downstream of training talks to
it exclusively through an OracleAdapter, which exposes predicted labels
(and optionally scores) and counts every submitted image; weights,
gradients, and activations are unreachable through that surface.
"""

from __future__ import annotations

import base64
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import requests
import torch
from torch import nn

from .errors import OracleError, OracleItemError, ValidationError
from .rngkit import substream_seed
from .training import BlackboxTrainConfig, TrainLog, train_binary_classifier

log = logging.getLogger(__name__)

ARTIFACT_FORMAT = "patchaudit-blackbox/1"
WIRE_VERSION = "1"


@dataclass(frozen=True)
class BlackboxArchConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1)

    def __post_init__(self):
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ValidationError("stage_channels and blocks_per_stage lengths differ")
        if self.stem_channels < 1 or min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ValidationError(f"invalid blackbox arch {self}")

    def to_dict(self) -> dict:
        return {
            "stem_channels": self.stem_channels,
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": list(self.blocks_per_stage),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlackboxArchConfig":
        return cls(
            stem_channels=int(d["stem_channels"]),
            stage_channels=tuple(int(c) for c in d["stage_channels"]),
            blocks_per_stage=tuple(int(b) for b in d["blocks_per_stage"]),
        )

    @classmethod
    def full_scale(cls) -> "BlackboxArchConfig":
        return cls(stem_channels=64, stage_channels=(128, 256, 512), blocks_per_stage=(3, 4, 3))


class _ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.skip(x))


class ResidualClassifier(nn.Module):
    """Global-context binary classifier; deliberately unlike the proxy."""

    def __init__(self, config: BlackboxArchConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = [
            nn.Conv2d(3, config.stem_channels, 3, 2, 1, bias=False),
            nn.BatchNorm2d(config.stem_channels),
            nn.ReLU(inplace=True),
        ]
        channels = config.stem_channels
        for stage_ch, n_blocks in zip(config.stage_channels, config.blocks_per_stage):
            for b in range(n_blocks):
                layers.append(_ResidualBlock(channels, stage_ch, stride=2 if b == 0 else 1))
                channels = stage_ch
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(channels, 1)

    def forward(self, x):
        return self.fc(self.pool(self.body(x)).flatten(1)).reshape(-1)

    def image_logits(self, x):
        return self.forward(x)


def build_blackbox(config: BlackboxArchConfig, seed: int = 0) -> ResidualClassifier:
    torch.manual_seed(substream_seed(seed, "blackbox-init"))
    model = ResidualClassifier(config)
    model.eval()
    return model


def train_blackbox(
    model: ResidualClassifier,
    train_data: tuple[np.ndarray, np.ndarray],
    config: BlackboxTrainConfig,
    stats,
    val_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainLog:
    return train_binary_classifier(
        model,
        lambda m, x: m.image_logits(x),
        train_data,
        config,
        stats,
        val_data=val_data,
        stream="blackbox-train",
    )


def save_blackbox_artifact(path, model: ResidualClassifier, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": ARTIFACT_FORMAT,
            "arch": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_blackbox_artifact(path) -> ResidualClassifier:
    """Used by oracle adapters and the serving process only."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != ARTIFACT_FORMAT:
        raise ValidationError(f"unexpected blackbox artifact format {blob.get('format')!r}")
    model = ResidualClassifier(BlackboxArchConfig.from_dict(blob["arch"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


# --------------------------------------------------------------------------
# Oracle adapters


class OracleAdapter:
    """Label-only access to a model; the audit sees nothing else.

    `query_labels` maps a batch of model-ready images to 0/1 labels,
    order-preserving.  `query` additionally returns scores when the backend
    offers them, else None.  Every submitted image increments query_count.
    """

    max_concurrency: int = 1

    def __init__(self):
        self._query_count = 0

    @property
    def query_count(self) -> int:
        return self._query_count

    def query_labels(self, images: np.ndarray) -> np.ndarray:
        labels, _ = self.query(images)
        return labels

    def query(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        raise NotImplementedError


def _check_batch(images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"oracle expects (N, H, W, 3) images, got shape {arr.shape}")
    return arr


class InProcessOracle(OracleAdapter):
    """Adapter over a model living in this process (fast path)."""

    def __init__(self, model, expose_scores: bool = False, max_concurrency: int = 2,
                 batch_size: int = 256):
        super().__init__()
        self._model = model
        self.expose_scores = expose_scores
        self.max_concurrency = max_concurrency
        self._batch_size = batch_size

    @classmethod
    def from_artifact(cls, path, **kwargs) -> "InProcessOracle":
        return cls(load_blackbox_artifact(path), **kwargs)

    def query(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        arr = _check_batch(images)
        self._query_count += len(arr)
        logits = np.empty(len(arr), dtype=np.float64)
        self._model.eval()
        with torch.inference_mode():
            for i in range(0, len(arr), self._batch_size):
                chunk = np.ascontiguousarray(arr[i:i + self._batch_size], dtype=np.float32)
                t = torch.from_numpy(chunk).permute(0, 3, 1, 2)
                t = t.contiguous(memory_format=torch.channels_last)
                logits[i:i + self._batch_size] = self._model.image_logits(t).double().numpy()
        labels = (logits > 0).astype(np.int64)
        if not self.expose_scores:
            return labels, None
        return labels, 1.0 / (1.0 + np.exp(-logits))


class MockOracle(OracleAdapter):
    """Adapter with no model behind it; labels come from a plain function."""

    def __init__(self, label_fn, expose_scores: bool = False, max_concurrency: int = 2):
        super().__init__()
        self._label_fn = label_fn
        self.expose_scores = expose_scores
        self.max_concurrency = max_concurrency

    def query(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        arr = _check_batch(images)
        self._query_count += len(arr)
        labels = np.asarray(self._label_fn(arr), dtype=np.int64)
        scores = labels.astype(np.float64) if self.expose_scores else None
        return labels, scores


def encode_images(images: np.ndarray) -> list[dict]:
    arr = _check_batch(images).astype(np.float32)
    return [
        {
            "data": base64.b64encode(np.ascontiguousarray(img).tobytes()).decode("ascii"),
            "shape": list(img.shape),
            "dtype": "float32",
        }
        for img in arr
    ]


def decode_image(item: dict) -> np.ndarray:
    if item.get("dtype") != "float32":
        raise ValidationError(f"unsupported dtype {item.get('dtype')!r}")
    shape = tuple(int(v) for v in item["shape"])
    if len(shape) != 3 or shape[-1] != 3:
        raise ValidationError(f"unsupported image shape {shape}")
    raw = base64.b64decode(item["data"])
    arr = np.frombuffer(raw, dtype=np.float32)
    if arr.size != int(np.prod(shape)):
        raise ValidationError(f"payload has {arr.size} values, shape {shape} needs {np.prod(shape)}")
    return arr.reshape(shape)


class HttpOracle(OracleAdapter):
    """Adapter speaking the /predict JSON protocol of `serve-oracle`."""

    def __init__(self, url: str, max_concurrency: int = 2, timeout: float = 60.0,
                 retries: int = 3, backoff: float = 0.5, batch_size: int = 64):
        super().__init__()
        self.url = url.rstrip("/")
        self.max_concurrency = max_concurrency
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._batch_size = batch_size
        self._session = requests.Session()

    def _post(self, payload: dict) -> dict:
        delay = self.backoff
        last = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(
                    f"{self.url}/predict", json=payload, timeout=self.timeout
                )
                if resp.status_code >= 500:
                    raise OracleError(f"server error {resp.status_code}: {resp.text[:200]}")
                if resp.status_code != 200:
                    raise OracleError(f"request rejected {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except (requests.ConnectionError, requests.Timeout, OracleError) as exc:
                last = exc
                if attempt + 1 < self.retries:
                    log.warning("oracle query failed (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
                    delay *= 2
        raise OracleError(f"oracle unreachable after {self.retries} attempts: {last}")

    def query(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        arr = _check_batch(images)
        self._query_count += len(arr)
        labels: list[int | None] = []
        scores: list[float | None] = []
        have_scores = True
        failures: dict[int, str] = {}
        for i in range(0, len(arr), self._batch_size):
            chunk = arr[i:i + self._batch_size]
            body = self._post({"version": WIRE_VERSION, "images": encode_images(chunk)})
            if body.get("version") != WIRE_VERSION:
                raise OracleError(f"protocol version mismatch: {body.get('version')!r}")
            preds = body.get("predictions", [])
            if len(preds) != len(chunk):
                raise OracleError(f"got {len(preds)} predictions for {len(chunk)} images")
            for j, p in enumerate(preds):
                if "error" in p:
                    failures[i + j] = str(p["error"])
                    labels.append(None)
                    scores.append(None)
                    continue
                labels.append(int(p["label"]))
                if "score" in p and p["score"] is not None:
                    scores.append(float(p["score"]))
                else:
                    have_scores = False
                    scores.append(None)
        if failures:
            raise OracleItemError(
                f"{len(failures)} of {len(arr)} images rejected", labels, failures
            )
        label_arr = np.asarray(labels, dtype=np.int64)
        if not have_scores:
            return label_arr, None
        return label_arr, np.asarray(scores, dtype=np.float64)
