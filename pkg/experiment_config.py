"""
Experiment Config - the single resolved configuration behind every command
JSON on disk (sorted keys), flag overrides on top; parse(render(cfg)) == cfg
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from attacks import AttackConfig, AttackError, AttackMethod
from tensor_core import LabError

DATASET_KINDS = ("blobs", "rings", "file")
ALL_METHODS = [m.value for m in AttackMethod]


class ConfigError(LabError):
    """Config file could not be parsed or references missing paths"""


def _from_known(cls, d: Dict[str, Any], where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"'{where}' must be an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"Unknown keys in '{where}': {sorted(unknown)}")
    return cls(**d)


@dataclass
class DatasetSpec:
    kind: str = "blobs"
    path: Optional[str] = None
    n_examples: int = 1200
    n_features: int = 8
    n_classes: int = 3
    separation: float = 0.12
    noise: float = 0.02
    train_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("dataset.kind 'file' needs dataset.path")


@dataclass
class ModelSpec:
    name: str
    hidden: List[int] = field(default_factory=lambda: [32, 32])
    seed: int = 0
    checkpoint: Optional[str] = None
    epochs: int = 40
    lr: float = 0.1


def default_models() -> List[ModelSpec]:
    return [ModelSpec("mlp-a", [32], seed=1), ModelSpec("mlp-b", [32, 32], seed=2),
            ModelSpec("mlp-c", [64], seed=3)]


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    models: List[ModelSpec] = field(default_factory=default_models)
    attack: AttackConfig = field(default_factory=AttackConfig)
    methods: List[str] = field(default_factory=lambda: list(ALL_METHODS))
    output_dir: str = "runs"
    seed: int = 0
    ensemble_weights: Dict[str, List[float]] = field(default_factory=dict)
    sweep_seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1  # 0 means one per physical core
    max_examples: Optional[int] = None

    def __post_init__(self):
        try:
            self.methods = [AttackMethod.parse(m).value for m in self.methods]
        except AttackError as e:
            raise ConfigError(str(e)) from e
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"Model names must be unique: {names}")

    def model(self, name: str) -> ModelSpec:
        for spec in self.models:
            if spec.name == name:
                return spec
        raise ConfigError(f"No model named '{name}' in the roster {[m.name for m in self.models]}")

    def checkpoint_path(self, spec: ModelSpec) -> Path:
        if spec.checkpoint:
            return Path(spec.checkpoint)
        return Path(self.output_dir) / f"{spec.name}.ckpt"

    def dataset_path(self) -> Path:
        if self.dataset.kind == "file":
            return Path(self.dataset.path)
        return Path(self.output_dir) / "dataset.bin"

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("Config root must be a JSON object")
        d = dict(d)
        try:
            if "dataset" in d:
                d["dataset"] = _from_known(DatasetSpec, d["dataset"], "dataset")
            if "models" in d:
                d["models"] = [_from_known(ModelSpec, m, "models[]") for m in d["models"]]
            if "attack" in d:
                d["attack"] = AttackConfig.from_dict(d["attack"])
            return _from_known(cls, d, "config")
        except (TypeError, AttackError) as e:
            raise ConfigError(f"Invalid config: {e}") from e

    def render(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config is not valid JSON: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        cfg = cls.parse(text)
        cfg.validate_paths()
        return cfg

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render() + "\n")
        return path

    def validate_paths(self, require_checkpoints: bool = False, require_dataset: bool = False):
        """Referenced input files must exist; generated ones only when a command needs them"""
        if (self.dataset.kind == "file" or require_dataset) and not self.dataset_path().exists():
            raise ConfigError(f"Dataset file not found: {self.dataset_path()}")
        if require_checkpoints:
            missing = [str(self.checkpoint_path(m)) for m in self.models if not self.checkpoint_path(m).exists()]
            if missing:
                raise ConfigError(f"Missing checkpoint(s): {missing} (run 'train' first)")

    def with_overrides(self, seed: Optional[int] = None, eps: Optional[float] = None,
                       steps: Optional[int] = None, method: Optional[str] = None,
                       out: Optional[str] = None) -> "ExperimentConfig":
        """Flag overrides; None leaves the file value in place"""
        try:
            attack = self.attack.with_overrides(eps_ball=eps, steps=steps, method=method)
            methods = self.methods if method is None else [AttackMethod.parse(method).value]
        except AttackError as e:
            raise ConfigError(str(e)) from e
        return replace(
            self,
            attack=attack,
            seed=self.seed if seed is None else int(seed),
            methods=methods,
            output_dir=self.output_dir if out is None else str(out),
        )
