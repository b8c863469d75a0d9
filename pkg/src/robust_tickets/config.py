"""Experiment configuration (JSON).

Schema (every key optional; defaults shown by ``robust-tickets show-config``)::

    {
      "name": str,
      "dataset": {"name": "digits"|"cifar10"|"synthetic", "train": int, "val": int,
                  "test": int, "subset_seed": int, "root": str|null},
      "library_root": str,            # overridden by $RLT_LIBRARY_ROOT
      "output_dir": str,
      "architectures": [arch_id, ...],
      "ratios": [float, ...],
      "omega_seed": int,
      "training": {TrainingConfig fields},
      "training_overrides": {"<arch>@<ratio>": {TrainingConfig fields}},
      "attack": {AttackConfig fields},          # evaluation attack (pgd)
      "transfer": {"sources": [[arch, ratio], ...]|null, "targets": ...|null,
                   "eval_subset": int},
      "sampler": {SamplerConfig fields},
      "theta_draws": int,                        # K draws per batch
      "sweep": [epsilon, ...],
      "dense_structures": [arch_id, ...]|null,
      "eval_subset": int                         # ensemble-eval test subset
    }
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig, derive_seed
from .ensemble import SamplerConfig
from .errors import ConfigurationError
from .masked import ARCH_IDS
from .pruning import TrainingConfig

LIBRARY_ENV = "RLT_LIBRARY_ROOT"
EPS_SWEEP = (0.0, 2 / 255, 4 / 255, 8 / 255, 12 / 255, 20 / 255)


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "digits"
    train: int = 1200
    val: int = 300
    test: int = 297
    subset_seed: int = 0
    root: str | None = None


@dataclass(frozen=True)
class TransferSpec:
    sources: tuple | None = None
    targets: tuple | None = None
    eval_subset: int = 1000


@dataclass
class ExperimentConfig:
    name: str = "desk"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    library_root: str = "runs/library"
    output_dir: str = "runs/out"
    architectures: tuple[str, ...] = ARCH_IDS
    ratios: tuple[float, ...] = (0.3, 0.5, 0.7)
    omega_seed: int = 0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    training_overrides: dict = field(default_factory=dict)
    attack: AttackConfig = field(default_factory=AttackConfig)
    transfer: TransferSpec = field(default_factory=TransferSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    theta_draws: int = 16
    sweep: tuple[float, ...] = EPS_SWEEP
    dense_structures: tuple[str, ...] | None = None
    eval_subset: int = 1000

    def __post_init__(self):
        unknown = [a for a in self.architectures if a not in ARCH_IDS]
        if unknown:
            raise ConfigurationError(f"unregistered architectures {unknown}; registered: {list(ARCH_IDS)}")
        for d in self.dense_structures or ():
            if d not in ARCH_IDS:
                raise ConfigurationError(f"unregistered dense structure {d!r}")
        if not self.ratios or any(not 0 < r <= 1 for r in self.ratios):
            raise ConfigurationError(f"ratios must be a non-empty list in (0, 1], got {self.ratios}")
        if not self.sweep:
            raise ConfigurationError("epsilon sweep must be non-empty")
        if self.attack.family != "pgd":
            raise ConfigurationError("the evaluation attack must be family 'pgd'")
        if self.theta_draws < 1:
            raise ConfigurationError("theta_draws must be >= 1")
        for key in self.training_overrides:
            arch, _, ratio = key.partition("@")
            if arch not in self.architectures:
                raise ConfigurationError(f"training override {key!r} names an unconfigured architecture")
            try:
                float(ratio)
            except ValueError:
                raise ConfigurationError(f"training override key {key!r} must look like 'arch@ratio'") from None

    # -- derived values ---------------------------------------------------
    def training_for(self, arch: str, ratio: float) -> TrainingConfig:
        for key, override in self.training_overrides.items():
            a, _, r = key.partition("@")
            if a == arch and abs(float(r) - ratio) < 1e-9:
                return dataclasses.replace(self.training, **override)
        return self.training

    def pairs(self) -> list[tuple[str, float]]:
        return [(a, float(r)) for a in self.architectures for r in self.ratios]

    def resolved_library_root(self) -> Path:
        return Path(os.environ.get(LIBRARY_ENV) or self.library_root)

    def seeds(self) -> dict:
        return {"omega": self.omega_seed, "train": self.training.rng_seed, "attack": self.attack.rng_seed,
                "sampler": self.sampler.rng_seed, "subset": self.dataset.subset_seed}

    def with_seed(self, seed: int, library_root: str, output_dir: str) -> "ExperimentConfig":
        """Copy with every random stream re-derived from ``seed``."""
        return dataclasses.replace(
            self,
            library_root=library_root,
            output_dir=output_dir,
            omega_seed=derive_seed(seed, 1),
            dataset=dataclasses.replace(self.dataset, subset_seed=derive_seed(seed, 2)),
            training=dataclasses.replace(self.training, rng_seed=derive_seed(seed, 3)),
            attack=dataclasses.replace(self.attack, rng_seed=derive_seed(seed, 4)),
            sampler=dataclasses.replace(self.sampler, rng_seed=derive_seed(seed, 5)),
        )

    # -- (de)serialization ------------------------------------------------
    def to_json(self) -> dict:
        return {
            "name": self.name,
            "dataset": dataclasses.asdict(self.dataset),
            "library_root": self.library_root,
            "output_dir": self.output_dir,
            "architectures": list(self.architectures),
            "ratios": list(self.ratios),
            "omega_seed": self.omega_seed,
            "training": self.training.to_json(),
            "training_overrides": self.training_overrides,
            "attack": self.attack.to_json(),
            "transfer": {
                "sources": [list(p) for p in self.transfer.sources] if self.transfer.sources else None,
                "targets": [list(p) for p in self.transfer.targets] if self.transfer.targets else None,
                "eval_subset": self.transfer.eval_subset,
            },
            "sampler": self.sampler.to_json(),
            "theta_draws": self.theta_draws,
            "sweep": list(self.sweep),
            "dense_structures": list(self.dense_structures) if self.dense_structures else None,
            "eval_subset": self.eval_subset,
        }

    def digest(self) -> str:
        """Hash of everything that affects results (paths excluded)."""
        data = self.to_json()
        data.pop("library_root")
        data.pop("output_dir")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigurationError(f"unknown config keys {sorted(extra)}")
        try:
            if "dataset" in data:
                data["dataset"] = DatasetSpec(**data["dataset"])
            if "training" in data:
                data["training"] = TrainingConfig(**data["training"])
            if "attack" in data:
                data["attack"] = AttackConfig(**data["attack"])
            if "transfer" in data:
                t = dict(data["transfer"])
                for k in ("sources", "targets"):
                    if t.get(k) is not None:
                        t[k] = tuple((a, float(r)) for a, r in t[k])
                data["transfer"] = TransferSpec(**t)
            if "sampler" in data:
                data["sampler"] = SamplerConfig.from_json(data["sampler"])
            for k in ("architectures", "ratios", "sweep", "dense_structures"):
                if data.get(k) is not None:
                    data[k] = tuple(data[k])
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(f"bad config: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad config: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(data)
