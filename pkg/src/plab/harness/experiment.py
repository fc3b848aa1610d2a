"""Experiment configuration: one JSON document describing a run matrix."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..models import STANDARD_DEPTHS, ConfigError, LoRAConfig, ModelConfig
from ..objectives import ObjectiveError, as_kind, objectives_for
from ..trainer import CONDITIONS, ConditionConfig, TrustRatioConfig


@dataclass(frozen=True)
class ModelEntry:
    name: str
    config: ModelConfig
    objectives: tuple[str, ...] | None = None  # None: the experiment-level list

    def to_dict(self) -> dict:
        d = {"name": self.name, "config": asdict(self.config)}
        if self.objectives is not None:
            d["objectives"] = list(self.objectives)
        return d


@dataclass(frozen=True)
class CorpusSpec:
    kind: str = "zipf-synthetic"  # or "byte-text", or "file" for a pre-generated corpus file
    size: int = 4000
    seed: int = 0
    path: str | None = None  # byte-text source or corpus file


@dataclass(frozen=True)
class ExperimentSpec:
    models: tuple[ModelEntry, ...]
    objectives: tuple[str, ...] = ()
    conditions: tuple[str, ...] = CONDITIONS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    corpus: CorpusSpec = CorpusSpec()
    probe_count: int = 290
    depths: tuple[float, ...] = STANDARD_DEPTHS
    schedule_batches: int = 64
    schedule_batch_size: int = 8
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    finetune_steps: int = 300
    batch_size: int = 32
    lr: float = 2e-5
    layer_decay: float = 0.95
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    tau: float = 1e-3
    accumulation: int = 1
    lora_rank: int = 8
    lora_alpha: float = 16.0
    out_dir: str = "plab_out"

    def __post_init__(self):
        if not self.models:
            raise ConfigError("experiment lists no models")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}")
        if any(not 0 < d <= 1 for d in self.depths):
            raise ConfigError("depths must lie in (0, 1]")
        if list(self.depths) != sorted(set(self.depths)):
            raise ConfigError("depths must be strictly increasing")
        for m in self.models:
            for obj in self.objectives_for(m.name):
                try:
                    as_kind(obj).check_compatible(m.config)
                except ObjectiveError as exc:
                    raise ConfigError(f"model {m.name}: {exc}") from exc

    def model(self, name: str) -> ModelEntry:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(f"no model named {name!r}")

    def objectives_for(self, name: str) -> tuple[str, ...]:
        m = self.model(name)
        if m.objectives is not None:
            return m.objectives
        return self.objectives or objectives_for(m.config)

    def condition(self, kind: str) -> ConditionConfig:
        return ConditionConfig(
            kind=kind,
            lr=self.lr,
            layer_decay=self.layer_decay,
            weight_decay=self.weight_decay,
            max_grad_norm=self.max_grad_norm,
            trust=TrustRatioConfig(tau=self.tau),
            lora=LoRAConfig(rank=self.lora_rank, alpha=self.lora_alpha),
            accumulation=self.accumulation,
        )

    def cells(self) -> list[tuple[str, str, str, int]]:
        """(model, objective, condition, seed) in canonical order."""
        return [
            (m.name, obj, cond, seed)
            for m in self.models
            for obj in self.objectives_for(m.name)
            for cond in self.conditions
            for seed in self.seeds
        ]

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "models"}
        d["models"] = [m.to_dict() for m in self.models]
        for k in ("objectives", "conditions", "seeds", "depths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        models = []
        for m in d.pop("models"):
            objs = m.get("objectives")
            models.append(ModelEntry(m["name"], ModelConfig.from_dict(m.get("config", {})), None if objs is None else tuple(objs)))
        if "corpus" in d:
            d["corpus"] = CorpusSpec(**d["corpus"])
        for k in ("objectives", "conditions", "seeds", "depths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(models=tuple(models), **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def spec_hash(self) -> str:
        """Hash of everything that affects results; the output directory is excluded."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_changes(self, **changes) -> "ExperimentSpec":
        return replace(self, **changes)


def default_spec() -> ExperimentSpec:
    """One sequential causal decoder (L=8, d=64) over the causal objectives."""
    return ExperimentSpec(models=(ModelEntry("seq-causal", ModelConfig()),))
