"""Experiment configuration: dataclass sections, YAML round-trip and validation."""

from __future__ import annotations

import copy
import itertools
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .data import ClassTaxonomy, synthetic_taxonomy
from .labelops import AttackSpec
from .optimize import SearchConfig
from .trigger import TriggerSpec, candidate_family

DEFENSE_DEFAULTS: dict[str, dict[str, Any]] = {
    "finetune": {"clean_fraction": 0.1, "epochs": 10},
    "prune": {"fraction": 0.05, "n_probe": 50},
    "abl": {"isolation_rate": 0.1, "brief_epochs": 5, "unlearn_epochs": 1, "unlearn_step_size": 1e-4},
    "strip": {"n_perturbations": 8, "fpr": 0.05, "n_per_class": 25, "aggregate": "mean"},
    "teco": {"n_std": 1.0, "miou_break_threshold": 0.5, "n_per_class": 10},
    "beatrix": {"grouping": "main_class", "selected_class": None, "orders": [1, 2, 3, 4], "n_mad": 3.0, "n_per_class": 25},
}


@dataclass
class Diagnostic:
    level: str  # "error" | "warning"
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.message}"


class ConfigError(ValueError):
    pass


def _build(cls, data: Mapping | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | directory
    root: str | None = None  # directory datasets: train/, test/, optional aux/, taxonomy.yaml
    n_train: int = 500
    n_test: int = 100
    n_aux: int = 100
    height: int = 64
    width: int = 64
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "directory" and not self.root:
            raise ValueError("directory datasets need a root")

    def taxonomy(self) -> ClassTaxonomy:
        if self.kind == "synthetic":
            return synthetic_taxonomy(self.num_classes)
        return ClassTaxonomy.load(Path(self.root) / "taxonomy.yaml")


@dataclass
class TrainingConfig:
    poison_rate: float = 0.2
    aux_fraction: float = 0.0
    epochs: int = 25
    step_size: float = 0.01
    batch_size: int = 16
    hflip: bool = False
    feature_channels: int = 32


@dataclass
class SurrogateConfig:
    epochs: int = 10
    step_size: float = 0.01
    batch_size: int = 16
    feature_channels: int = 32


@dataclass
class TriggerConfig:
    fixed: dict | None = None
    optimize: dict | None = None

    def __post_init__(self):
        if (self.fixed is None) == (self.optimize is None):
            raise ValueError("give exactly one of 'fixed' or 'optimize'")
        if self.fixed is not None:
            self.fixed = TriggerSpec.from_dict(self.fixed).to_dict()
        else:
            opt = dict(self.optimize)
            color = opt.pop("color", [0, 0, 0])
            self.optimize = {**SearchConfig(**opt).to_dict(), "color": list(color)}

    def spec(self) -> TriggerSpec | None:
        return None if self.fixed is None else TriggerSpec.from_dict(self.fixed)

    def search_config(self) -> tuple[SearchConfig, tuple]:
        opt = dict(self.optimize)
        color = tuple(opt.pop("color"))
        return SearchConfig(**opt), color


@dataclass
class EvaluationConfig:
    stealth_samples: int = 16
    rank_pairs: bool = False
    overlays: int = 4


@dataclass
class ExperimentConfig:
    name: str
    attack: dict
    trigger: TriggerConfig
    seed: int = 0
    output_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    defenses: list[dict] = field(default_factory=list)
    sweep: dict[str, list] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        for key in ("name", "attack", "trigger"):
            if key not in d:
                raise ConfigError(f"missing required section {key!r}")
        attack = dict(d["attack"])
        for key in ("vector", "victim", "target"):
            if key not in attack:
                raise ConfigError(f"attack: missing {key!r}")
        defenses = []
        for i, entry in enumerate(d.get("defenses") or []):
            entry = dict(entry)
            name = entry.pop("name", None)
            if name not in DEFENSE_DEFAULTS:
                raise ConfigError(f"defenses[{i}]: unknown defense {name!r}")
            unknown = sorted(set(entry) - set(DEFENSE_DEFAULTS[name]))
            if unknown:
                raise ConfigError(f"defenses[{i}] ({name}): unknown keys {unknown}")
            defenses.append({"name": name, **DEFENSE_DEFAULTS[name], **entry})
        sweep = dict(d.get("sweep") or {})
        for key, values in sweep.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep.{key}: expected a non-empty list")
        return cls(
            name=str(d["name"]),
            attack=attack,
            trigger=_build(TriggerConfig, d["trigger"], "trigger"),
            seed=int(d.get("seed", 0)),
            output_dir=d.get("output_dir"),
            dataset=_build(DatasetConfig, d.get("dataset"), "dataset"),
            surrogate=_build(SurrogateConfig, d.get("surrogate"), "surrogate"),
            training=_build(TrainingConfig, d.get("training"), "training"),
            evaluation=_build(EvaluationConfig, d.get("evaluation"), "evaluation"),
            defenses=defenses,
            sweep=sweep,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["trigger"] = {k: v for k, v in out["trigger"].items() if v is not None}
        if not out["sweep"]:
            del out["sweep"]
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def attack_spec(self, taxonomy: ClassTaxonomy) -> AttackSpec:
        return AttackSpec.from_dict(self.attack, taxonomy)


def parse(text: str) -> ExperimentConfig:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return ExperimentConfig.from_dict(data)


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def serialize(config: ExperimentConfig) -> str:
    return config.dump()


def validate_config(config: ExperimentConfig) -> list[Diagnostic]:
    """Semantic checks; warnings do not make a config invalid."""
    out: list[Diagnostic] = []
    try:
        taxonomy = config.dataset.taxonomy()
    except (OSError, ValueError) as exc:
        return [Diagnostic("error", f"dataset taxonomy: {exc}")]
    try:
        attack = config.attack_spec(taxonomy)
    except (KeyError, ValueError) as exc:
        return [Diagnostic("error", f"attack: {exc}")]
    out += [Diagnostic("error", m) for m in attack.diagnostics(taxonomy)]
    spec = config.trigger.spec()
    if spec is not None:
        family = candidate_family(attack.vector)
        object_like = family == "object"
        if object_like and spec.position == "background_region":
            out.append(Diagnostic("error", f"position background_region needs a stuff victim, not {attack.base}"))
        if not object_like and spec.position != "background_region":
            out.append(Diagnostic("error", f"{attack.base} triggers use position background_region"))
        for attr in spec.off_grid(attack.vector):
            if attr == "position":
                continue
            out.append(
                Diagnostic("warning", f"fixed trigger {attr}={getattr(spec, attr)!r} is outside the {attack.base} candidate set")
            )
    if not 0 <= config.training.poison_rate <= 1:
        out.append(Diagnostic("error", "training.poison_rate must be in [0, 1]"))
    needs_surrogate = config.trigger.optimize is not None or config.evaluation.rank_pairs
    if needs_surrogate and config.training.poison_rate == 0 and config.training.aux_fraction == 0:
        out.append(Diagnostic("error", "surrogate dataset is empty: raise poison_rate or aux_fraction"))
    for d in config.defenses:
        if d["name"] == "finetune" and d["clean_fraction"] not in (0.01, 0.05, 0.1):
            out.append(Diagnostic("warning", f"finetune clean_fraction {d['clean_fraction']} is not one of 0.01/0.05/0.1"))
        if d["name"] == "prune" and not 0 <= d["fraction"] < 1:
            out.append(Diagnostic("error", "prune fraction must be in [0, 1)"))
        if d["name"] == "abl" and not 0 < d["isolation_rate"] < 1:
            out.append(Diagnostic("error", "abl isolation_rate must be in (0, 1)"))
        if d["name"] == "beatrix" and d["grouping"] == "selected_class":
            try:
                taxonomy.resolve(d["selected_class"])
            except (KeyError, ValueError, TypeError):
                out.append(Diagnostic("error", f"beatrix selected_class {d['selected_class']!r} is not a class"))
    for key in config.sweep:
        try:
            get_path(config.to_dict(), key)
        except KeyError:
            out.append(Diagnostic("error", f"sweep key {key!r} does not name a config field"))
    return out


def validate(path) -> list[Diagnostic]:
    """Diagnostics for a config file; raises OSError if it cannot be read."""
    text = Path(path).read_text()
    try:
        config = parse(text)
    except (ConfigError, yaml.YAMLError) as exc:
        return [Diagnostic("error", str(exc))]
    return validate_config(config)


def is_valid(diagnostics) -> bool:
    return not any(d.level == "error" for d in diagnostics)


# --------------------------------------------------------------------------
# sweeps


def get_path(d: Mapping, dotted: str):
    cur: Any = d
    for part in dotted.split("."):
        if not isinstance(cur, Mapping) or part not in cur:
            raise KeyError(dotted)
        cur = cur[part]
    return cur


def set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = d
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value


def expand_sweep(config: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian product over the sweep lists; each child has no sweep of its own."""
    base = config.to_dict()
    base.pop("sweep", None)
    keys = list(config.sweep)
    children = []
    for values in itertools.product(*(config.sweep[k] for k in keys)):
        d = copy.deepcopy(base)
        assignment = dict(zip(keys, values))
        for k, v in assignment.items():
            set_path(d, k, v)
        tag = "__".join(f"{k.split('.')[-1]}={v}" for k, v in assignment.items())
        d["name"] = f"{config.name}__{tag}" if tag else config.name
        children.append((assignment, ExperimentConfig.from_dict(d)))
    return children
