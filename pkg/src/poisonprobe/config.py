"""Experiment configuration: flat ``section.key=value`` text files.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected so a
typo cannot silently fall back to a default. Every value is kept as text
until :func:`resolve` turns the mapping into typed component configs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .detection import DetectionConfig
from .mitigation import MitigationConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default); None defaults are derived from other keys at resolve time
_SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "data.source": (str, "synthetic"),
    "data.classes": (int, 10),
    "data.train_size": (int, 5000),
    "data.test_per_class": (int, 100),
    "data.noise": (float, 0.05),
    "data.geometry_seed": (int, None),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "model.architecture": (str, "mlp"),
    "attack.technique": (str, "none"),
    "attack.targets": (str, ""),
    "attack.sources": (str, ""),
    "attack.proportion": (float, 0.06),
    "attack.trigger": (str, ""),
    "attack.triggers": (int, 1),
    "attack.patch_size": (int, 4),
    "attack.transparency": (float, 0.1),
    "attack.noise_seed": (int, 0),
    "attack.ensemble": (str, ""),
    "reference.fraction": (float, 0.3),
    "reference.architecture": (str, ""),
    "reference.epochs": (int, None),
    "reference.seed": (int, None),
    "reference.paths": (str, ""),
    "reference.k": (int, 0),
    "detect.model": (str, ""),
    "mitigate.max_rounds": (int, 4),
}
for _f in fields(TrainConfig):
    if _f.name != "seed":
        _SCHEMA[f"train.{_f.name}"] = (type(_f.default), _f.default)
for _f in fields(DetectionConfig):
    if _f.name != "seed":
        _SCHEMA[f"detect.{_f.name}"] = (type(_f.default), _f.default)
for _f in fields(MitigationConfig):
    if _f.name != "seed":
        _SCHEMA[f"mitigate.{_f.name}"] = (type(_f.default), _f.default)

KEYS = tuple(sorted(_SCHEMA))


def parse_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def load_text(path) -> dict[str, str]:
    try:
        return parse_text(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _convert(key: str, value: str):
    kind, _ = _SCHEMA[key]
    try:
        if kind is bool:
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def _ints(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list of integers") from None


def _paths(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # every key, typed, derived defaults filled in

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def canonical_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in KEYS)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def echo(self) -> dict:
        return {k: self.values[k] for k in KEYS}

    # -- component configs --------------------------------------------------------

    def train_config(self, seed: int | None = None, epochs: int | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.learning_rate"], v["train.momentum"], v["train.dropout"],
                           v["train.batch_size"], v["train.epochs"] if epochs is None else epochs,
                           self.seed if seed is None else seed)

    def detection_config(self) -> DetectionConfig:
        kw = {f.name: self.values[f"detect.{f.name}"] for f in fields(DetectionConfig) if f.name != "seed"}
        return DetectionConfig(seed=self.seed, **kw)

    def mitigation_config(self) -> MitigationConfig:
        kw = {f.name: self.values[f"mitigate.{f.name}"] for f in fields(MitigationConfig) if f.name != "seed"}
        return MitigationConfig(seed=self.seed, **kw)

    @property
    def targets(self) -> tuple[int, ...]:
        return _ints(self.values["attack.targets"], "attack.targets")

    @property
    def sources(self) -> tuple[int, ...]:
        return _ints(self.values["attack.sources"], "attack.sources")

    @property
    def reference_paths(self) -> tuple[str, ...]:
        return _paths(self.values["reference.paths"])

    @property
    def ensemble_paths(self) -> tuple[str, ...]:
        return _paths(self.values["attack.ensemble"])


def resolve(raw: dict[str, str], *, seed: int | None = None, fast: bool = False) -> ExperimentConfig:
    """Typed config with command-line overrides applied and derived defaults filled."""
    values = {}
    for key in KEYS:
        _, default = _SCHEMA[key]
        values[key] = _convert(key, raw[key]) if key in raw else default
    if seed is not None:
        values["seed"] = int(seed)
    if fast:
        values["detect.num_samples"] = 10
    s = values["seed"]
    if values["data.geometry_seed"] is None:
        values["data.geometry_seed"] = s
    if values["reference.seed"] is None:
        values["reference.seed"] = s + 1000
    if values["reference.epochs"] is None:
        values["reference.epochs"] = values["train.epochs"]
    if not values["reference.architecture"]:
        values["reference.architecture"] = values["model.architecture"]
    cfg = ExperimentConfig(values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    if v["data.source"] not in ("synthetic", "idx"):
        raise ConfigError("data.source must be 'synthetic' or 'idx'")
    idx_keys = ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels")
    if v["data.source"] == "idx" and not all(v[k] for k in idx_keys):
        raise ConfigError("data.source=idx needs train/test image and label paths")
    if v["data.source"] == "synthetic" and any(v[k] for k in idx_keys):
        raise ConfigError("give either IDX paths or a synthetic source, not both")
    if v["data.train_size"] < v["data.classes"] or v["data.test_per_class"] < 1:
        raise ConfigError("synthetic sizes too small for the class count")
    technique = v["attack.technique"]
    if technique not in ("none", "mislabel", "badnets", "chen", "adaptive"):
        raise ConfigError(f"unknown attack.technique {technique!r}")
    if technique != "none" and not cfg.targets:
        raise ConfigError("attack.targets is required when an attack is configured")
    if technique == "adaptive" and not cfg.ensemble_paths:
        raise ConfigError("the adaptive attack needs attack.ensemble model paths")
    if not 0.0 < v["reference.fraction"] <= 1.0:
        raise ConfigError("reference.fraction must lie in (0, 1]")
    if v["mitigate.max_rounds"] < 1:
        raise ConfigError("mitigate.max_rounds must be at least 1")
    if v["reference.k"] < 0:
        raise ConfigError("reference.k must be non-negative")
    try:
        cfg.train_config()
        cfg.detection_config()
        cfg.mitigation_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
