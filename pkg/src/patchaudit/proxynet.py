"""Receptive-field-limited proxy classifier with per-patch logit heatmaps.

The network sees the image only through r x r windows on a stride-s grid:
spatial mixing comes from unpadded 3x3 convolutions whose composition is
checked analytically against the configured receptive field at build time.
A 1x1 head maps each final feature-map position to one patch logit before
any pooling, so the full heatmap falls out of a single forward pass; the
image logit is the mean of the heatmap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import BuildError, ValidationError
from .grid import GridGeometry
from .rngkit import substream, substream_seed
from .training import TrainConfig, TrainLog, prep_batch, train_binary_classifier

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "patchaudit-proxy/1"


@dataclass(frozen=True)
class ConvBlockSpec:
    kernel: int
    stride: int
    out_channels: int

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValidationError(f"block kernel must be 1 or 3, got {self.kernel}")
        if self.stride < 1 or self.out_channels < 1:
            raise ValidationError(f"invalid block spec {self}")


def default_blocks() -> tuple[ConvBlockSpec, ...]:
    """Reduced-depth schedule realizing receptive field 17 at stride 8."""
    spec = [(3, 1, 8), (3, 2, 16), (1, 1, 16), (3, 2, 32),
            (1, 1, 32), (3, 2, 64), (1, 1, 64), (1, 1, 64)]
    return tuple(ConvBlockSpec(*b) for b in spec)


def full_scale_blocks() -> tuple[ConvBlockSpec, ...]:
    """Wider and deeper schedule with the identical (17, 8) contract."""
    spec = [(3, 1, 32), (1, 1, 32), (3, 2, 64), (1, 1, 64), (1, 1, 64),
            (3, 2, 128), (1, 1, 128), (1, 1, 128),
            (3, 2, 256), (1, 1, 256), (1, 1, 256), (1, 1, 256)]
    return tuple(ConvBlockSpec(*b) for b in spec)


def analyze_blocks(blocks: tuple[ConvBlockSpec, ...]) -> tuple[int, int]:
    """(receptive field, output stride) of a composed valid-convolution stack."""
    rf, jump = 1, 1
    for b in blocks:
        rf += (b.kernel - 1) * jump
        jump *= b.stride
    return rf, jump


@dataclass(frozen=True)
class ProxyArchConfig:
    receptive_field: int = 17
    stride: int = 8
    blocks: tuple[ConvBlockSpec, ...] = field(default_factory=default_blocks)
    in_channels: int = 3

    def __post_init__(self):
        if self.receptive_field < 1 or self.receptive_field % 2 == 0:
            raise ValidationError(f"receptive_field must be odd and positive, got {self.receptive_field}")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")

    def to_dict(self) -> dict:
        return {
            "receptive_field": self.receptive_field,
            "stride": self.stride,
            "in_channels": self.in_channels,
            "blocks": [[b.kernel, b.stride, b.out_channels] for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProxyArchConfig":
        return cls(
            receptive_field=int(d["receptive_field"]),
            stride=int(d["stride"]),
            in_channels=int(d.get("in_channels", 3)),
            blocks=tuple(ConvBlockSpec(int(k), int(s), int(c)) for k, s, c in d["blocks"]),
        )


@dataclass(frozen=True)
class Heatmap:
    """Per-patch logits on the receptive-field grid of one image."""

    values: np.ndarray          # G_H x G_W float32
    geometry: GridGeometry

    def __post_init__(self):
        if tuple(self.values.shape) != self.geometry.shape:
            raise ValidationError(
                f"heatmap shape {self.values.shape} does not match grid {self.geometry.shape}"
            )

    @property
    def image_logit(self) -> float:
        return float(self.values.astype(np.float64).mean())


class LocalPatchNet(nn.Module):
    """Conv stack (no padding) + per-position linear head."""

    def __init__(self, config: ProxyArchConfig):
        super().__init__()
        self.config = config
        layers = []
        channels = config.in_channels
        for b in config.blocks:
            layers.append(nn.Conv2d(channels, b.out_channels, b.kernel, b.stride))
            layers.append(nn.BatchNorm2d(b.out_channels))
            layers.append(nn.ReLU(inplace=True))
            channels = b.out_channels
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Patch-logit heatmap (N, 1, G_H, G_W): head applied before pooling."""
        return self.head(self.features(x))

    def image_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Scalar logit per image: spatial mean of the heatmap."""
        return self.forward(x).mean(dim=(2, 3)).reshape(-1)

    def pooled_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Pool-then-head path; must agree with image_logits up to float error."""
        pooled = self.features(x).mean(dim=(2, 3), keepdim=True)
        return self.head(pooled).reshape(-1)


def build_proxy(config: ProxyArchConfig, seed: int = 0) -> LocalPatchNet:
    """Construct and deterministically initialize the proxy.

    Raises BuildError when the block schedule does not realize the configured
    receptive field and stride.
    """
    rf, stride = analyze_blocks(config.blocks)
    if rf != config.receptive_field or stride != config.stride:
        raise BuildError(
            f"block schedule computes receptive field {rf} at stride {stride}, "
            f"config declares ({config.receptive_field}, {config.stride})"
        )
    torch.manual_seed(substream_seed(seed, "proxy-init"))
    model = LocalPatchNet(config)
    model.eval()
    return model


def _as_batch_tensor(images: np.ndarray) -> torch.Tensor:
    arr = np.ascontiguousarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(arr).permute(0, 3, 1, 2)
    return t.contiguous(memory_format=torch.channels_last)


def heatmap_batch(model: LocalPatchNet, images: np.ndarray) -> np.ndarray:
    """Heatmaps for a batch of normalized (N, H, W, 3) images -> (N, G_H, G_W)."""
    h, w = images.shape[-3:-1]
    geometry = GridGeometry(model.config.receptive_field, model.config.stride, h, w)
    model.eval()
    with torch.inference_mode():
        out = model(_as_batch_tensor(images))
    values = out.squeeze(1).float().numpy()
    if tuple(values.shape[1:]) != geometry.shape:
        raise BuildError(
            f"model produced grid {values.shape[1:]} but geometry says {geometry.shape}"
        )
    return values


def patch_heatmap(model: LocalPatchNet, image: np.ndarray) -> Heatmap:
    """Single forward pass over one normalized image."""
    if image.ndim != 3:
        raise ValidationError(f"expected one H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    geometry = GridGeometry(model.config.receptive_field, model.config.stride, h, w)
    values = heatmap_batch(model, image)[0]
    return Heatmap(values=values, geometry=geometry)


def predict_logits(model: LocalPatchNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Image logits for normalized (N, H, W, 3) input."""
    out = np.empty(len(images), dtype=np.float64)
    model.eval()
    with torch.inference_mode():
        for i in range(0, len(images), batch_size):
            t = _as_batch_tensor(images[i:i + batch_size])
            out[i:i + batch_size] = model.image_logits(t).double().numpy()
    return out


def predict(model: LocalPatchNet, image: np.ndarray) -> tuple[str, float]:
    """(label, scalar logit); a logit of exactly 0 classifies negative."""
    logit = patch_heatmap(model, image).image_logit
    return ("positive" if logit > 0 else "negative"), logit


def train_proxy(
    model: LocalPatchNet,
    train_data: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    stats,
    val_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainLog:
    """BCE training on the heatmap-mean logit; keeps best-val-accuracy weights."""
    return train_binary_classifier(
        model,
        lambda m, x: m.image_logits(x),
        train_data,
        config,
        stats,
        val_data=val_data,
        stream="proxy-train",
    )


@dataclass
class ReceptiveFieldReport:
    cells_checked: list[tuple[int, int]]
    failing_cells: list[tuple[int, int]]
    max_outside_delta: float
    cells_without_inside_response: list[tuple[int, int]]

    @property
    def passed(self) -> bool:
        return not self.failing_cells and not self.cells_without_inside_response


def verify_receptive_field(
    model: LocalPatchNet,
    grid_cell: tuple[int, int] | None = None,
    n_trials: int = 3,
    seed: int = 0,
    input_size: tuple[int, int] = (100, 160),
    n_cells: int = 20,
    tol: float = 1e-6,
) -> ReceptiveFieldReport:
    """Empirically check that each heatmap cell reads only its pixel window.

    For every checked cell and trial, all pixels outside the cell's window
    are re-randomized (logit must move at most `tol`) and one pixel inside
    is perturbed (logit must move for at least one trial).
    """
    h, w = input_size
    geometry = GridGeometry(model.config.receptive_field, model.config.stride, h, w)
    gh, gw = geometry.shape
    rng = substream(seed, "rf-verify")
    if grid_cell is not None:
        cells = [tuple(grid_cell)]
    else:
        picks = rng.choice(gh * gw, size=min(n_cells, gh * gw), replace=False)
        cells = [(int(p) // gw, int(p) % gw) for p in picks]

    model.eval()
    failing = []
    no_inside = []
    max_delta = 0.0
    for row, col in cells:
        top, left, rh, rw = geometry.cell_window(row, col)
        inside_seen = False
        cell_max = 0.0
        for _ in range(n_trials):
            base = rng.standard_normal((h, w, 3)).astype(np.float32)
            outside = rng.standard_normal((h, w, 3)).astype(np.float32)
            outside[top:top + rh, left:left + rw] = base[top:top + rh, left:left + rw]
            inside = base.copy()
            inside[top + rh // 2, left + rw // 2] += 2.5
            maps = heatmap_batch(model, np.stack([base, outside, inside]))
            ref, out_v, in_v = (float(m[row, col]) for m in maps)
            cell_max = max(cell_max, abs(out_v - ref))
            if abs(in_v - ref) > 0:
                inside_seen = True
        max_delta = max(max_delta, cell_max)
        if cell_max > tol:
            failing.append((row, col))
        if not inside_seen:
            no_inside.append((row, col))
    return ReceptiveFieldReport(
        cells_checked=cells,
        failing_cells=failing,
        max_outside_delta=max_delta,
        cells_without_inside_response=no_inside,
    )


def save_proxy(path, model: LocalPatchNet, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "arch": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_proxy(path) -> LocalPatchNet:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unexpected proxy checkpoint format {blob.get('format')!r}")
    config = ProxyArchConfig.from_dict(blob["arch"])
    model = LocalPatchNet(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
