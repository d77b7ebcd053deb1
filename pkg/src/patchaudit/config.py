"""One structured config drives the whole pipeline.

The effective config (all defaults expanded) is serialized next to a run's
outputs; CLI flags only override keys of a loaded config.  Everything
random derives from the per-section seeds, which the factory helpers set
from one global seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .blackbox import BlackboxArchConfig
from .datakit import LabelRule, SceneSpec
from .errors import ValidationError
from .proxynet import ProxyArchConfig
from .training import BlackboxTrainConfig, TrainConfig

ABLATION_NAMES = ("shuffle", "mean")
NETWORK_NAMES = ("proxy", "blackbox")
ADAPTER_BACKENDS = ("in_process", "http")


@dataclass(frozen=True)
class SplitParams:
    train_fraction: float = 0.8
    n_subsequences: int = 3

    def to_dict(self) -> dict:
        return {"train_fraction": self.train_fraction, "n_subsequences": self.n_subsequences}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitParams":
        return cls(float(d["train_fraction"]), int(d["n_subsequences"]))


@dataclass(frozen=True)
class AdapterSpec:
    backend: str = "in_process"
    max_concurrency: int = 2
    url: str | None = None
    expose_scores: bool = False

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "max_concurrency": self.max_concurrency,
            "url": self.url,
            "expose_scores": self.expose_scores,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        return cls(
            backend=str(d.get("backend", "in_process")),
            max_concurrency=int(d.get("max_concurrency", 2)),
            url=d.get("url"),
            expose_scores=bool(d.get("expose_scores", False)),
        )


@dataclass(frozen=True)
class DatasetSection:
    scene: SceneSpec = field(default_factory=SceneSpec)
    label_rule: LabelRule = field(default_factory=LabelRule)
    split: SplitParams = field(default_factory=SplitParams)
    load_path: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "label_rule": self.label_rule.to_dict(),
            "split": self.split.to_dict(),
            "load_path": self.load_path,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSection":
        return cls(
            scene=SceneSpec.from_dict(d["scene"]),
            label_rule=LabelRule.from_dict(d["label_rule"]),
            split=SplitParams.from_dict(d["split"]),
            load_path=d.get("load_path"),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class ProxySection:
    arch: ProxyArchConfig = field(default_factory=ProxyArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProxySection":
        return cls(ProxyArchConfig.from_dict(d["arch"]), TrainConfig.from_dict(d["train"]))


@dataclass(frozen=True)
class BlackboxSection:
    arch: BlackboxArchConfig = field(default_factory=BlackboxArchConfig)
    train: BlackboxTrainConfig = field(default_factory=BlackboxTrainConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "adapter": self.adapter.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlackboxSection":
        return cls(
            arch=BlackboxArchConfig.from_dict(d["arch"]),
            train=BlackboxTrainConfig.from_dict(d["train"]),
            adapter=AdapterSpec.from_dict(d.get("adapter", {})),
        )


@dataclass(frozen=True)
class ExtractionSection:
    quantile: float = 0.99
    band: tuple[float, float] = (0.50, 0.51)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"quantile": self.quantile, "band": list(self.band), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionSection":
        return cls(
            quantile=float(d.get("quantile", 0.99)),
            band=tuple(float(v) for v in d.get("band", (0.50, 0.51))),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class AuditSection:
    ablations: tuple[str, ...] = ("shuffle", "mean")
    networks: tuple[str, ...] = ("proxy", "blackbox")
    checkpoint: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "ablations": list(self.ablations),
            "networks": list(self.networks),
            "checkpoint": self.checkpoint,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditSection":
        return cls(
            ablations=tuple(d.get("ablations", ("shuffle", "mean"))),
            networks=tuple(d.get("networks", ("proxy", "blackbox"))),
            checkpoint=bool(d.get("checkpoint", True)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out_root: str = "runs/default"
    deterministic: bool = True
    torch_threads: int = 2
    dataset: DatasetSection = field(default_factory=DatasetSection)
    proxy: ProxySection = field(default_factory=ProxySection)
    blackbox: BlackboxSection = field(default_factory=BlackboxSection)
    extraction: ExtractionSection = field(default_factory=ExtractionSection)
    audit: AuditSection = field(default_factory=AuditSection)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_root": self.out_root,
            "deterministic": self.deterministic,
            "torch_threads": self.torch_threads,
            "dataset": self.dataset.to_dict(),
            "proxy": self.proxy.to_dict(),
            "blackbox": self.blackbox.to_dict(),
            "extraction": self.extraction.to_dict(),
            "audit": self.audit.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                out_root=str(d.get("out_root", "runs/default")),
                deterministic=bool(d.get("deterministic", True)),
                torch_threads=int(d.get("torch_threads", 2)),
                dataset=DatasetSection.from_dict(d["dataset"]),
                proxy=ProxySection.from_dict(d["proxy"]),
                blackbox=BlackboxSection.from_dict(d["blackbox"]),
                extraction=ExtractionSection.from_dict(d["extraction"]),
                audit=AuditSection.from_dict(d["audit"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed pipeline config: {exc}") from exc

    def validate(self) -> None:
        problems = []
        if not 0.0 < self.extraction.quantile < 1.0:
            problems.append(f"extraction.quantile must be in (0, 1), got {self.extraction.quantile}")
        lo, hi = self.extraction.band
        if not (0.0 < lo < hi < 1.0):
            problems.append(f"extraction.band must satisfy 0 < low < high < 1, got {self.extraction.band}")
        for a in self.audit.ablations:
            if a not in ABLATION_NAMES:
                problems.append(f"unknown ablation {a!r} (choose from {ABLATION_NAMES})")
        for n in self.audit.networks:
            if n not in NETWORK_NAMES:
                problems.append(f"unknown audit network {n!r} (choose from {NETWORK_NAMES})")
        if not self.audit.networks:
            problems.append("audit.networks is empty")
        if self.blackbox.adapter.backend not in ADAPTER_BACKENDS:
            problems.append(
                f"unknown adapter backend {self.blackbox.adapter.backend!r} "
                f"(choose from {ADAPTER_BACKENDS})"
            )
        if self.blackbox.adapter.backend == "http" and not self.blackbox.adapter.url:
            problems.append("http adapter needs a url")
        if not 0.0 < self.dataset.split.train_fraction < 1.0:
            problems.append(
                f"split.train_fraction must be in (0, 1), got {self.dataset.split.train_fraction}"
            )
        if self.torch_threads < 1:
            problems.append(f"torch_threads must be >= 1, got {self.torch_threads}")
        if problems:
            raise ValidationError("invalid config:\n  - " + "\n  - ".join(problems))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path) -> PipelineConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} does not hold a mapping")
    config = PipelineConfig.from_dict(data)
    config.validate()
    return config


def save_config(config: PipelineConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)


def default_config(seed: int = 0, out_root: str = "runs/default") -> PipelineConfig:
    """Desk-scale defaults: ~2500 scenes, short training, full audit."""
    return PipelineConfig(
        seed=seed,
        out_root=out_root,
        dataset=DatasetSection(
            scene=SceneSpec(n_sequences=140, frames_per_sequence=19),
            seed=seed,
        ),
        proxy=ProxySection(train=TrainConfig(epochs=12, batch_size=64, seed=seed)),
        blackbox=BlackboxSection(
            train=BlackboxTrainConfig(epochs=10, batch_size=128, seed=seed)
        ),
        extraction=ExtractionSection(seed=seed),
        audit=AuditSection(seed=seed),
    )


def smoke_config(seed: int = 0, out_root: str = "runs/smoke") -> PipelineConfig:
    """Tiny end-to-end configuration for fast checks."""
    return PipelineConfig(
        seed=seed,
        out_root=out_root,
        dataset=DatasetSection(
            scene=SceneSpec(n_sequences=20, frames_per_sequence=10),
            seed=seed,
        ),
        proxy=ProxySection(train=TrainConfig(epochs=3, batch_size=64, seed=seed)),
        blackbox=BlackboxSection(
            train=BlackboxTrainConfig(epochs=3, batch_size=64, seed=seed)
        ),
        extraction=ExtractionSection(seed=seed),
        audit=AuditSection(seed=seed),
    )
