"""Run configuration: one versioned YAML document describing a whole experiment.

Example::

    version: 1
    seed: 0
    data:
      images_dir: data/images
      masks_dir: data/masks
      manifest: folds.tsv      # optional; created on first use
      folds: 5
    network: {encoder_name: efficientnet-b7, input_size: 512}
    loss: {gamma: 2.0, alpha: 0.25}
    train: {max_epochs: 200, batch_size: 2}
    augmentation: default      # or {overall_p: 0.9, sets: [...]}, or none
    categories: {thresholds: [0.15, 0.3, 0.6, 1.2, 2.5, 5, 10, 20]}
    output_dir: runs/exp1

Relative paths resolve against the directory holding the config file.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .augment import AugmentationPlan
from .errors import ConfigError
from .losses import LossSettings
from .metrics import CategorySpec
from .network import NetworkConfig
from .trainer import TrainSettings

SCHEMA_VERSION = 1
TOP_LEVEL_KEYS = {"version", "seed", "data", "network", "loss", "train", "augmentation", "categories", "output_dir"}


@dataclass(frozen=True)
class DataPaths:
    images_dir: Optional[Path] = None
    masks_dir: Optional[Path] = None
    manifest: Optional[Path] = None
    folds: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataPaths = field(default_factory=DataPaths)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    augmentation: Optional[AugmentationPlan] = field(default_factory=AugmentationPlan)
    categories: CategorySpec = field(default_factory=CategorySpec)
    output_dir: Path = Path("runs")


def _check_type(section: str, key: str, value, default):
    if default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
        value = tuple(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, data: Any, section: str, exclude=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(fields))}")
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _check_type(section, key, value, default)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _path(value, base: Path, name: str) -> Optional[Path]:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a path string, got {value!r}")
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


def parse_config(doc: Dict, base_dir=".") -> RunConfig:
    base = Path(base_dir)
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(doc) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    seed = _check_type("run", "seed", doc.get("seed", 0), 0)
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")

    raw_data = doc.get("data") or {}
    data = _build(DataPaths, raw_data, "data")
    data = DataPaths(*(_path(getattr(data, k), base, f"data.{k}") for k in ("images_dir", "masks_dir", "manifest")),
                     folds=data.folds)
    if data.folds < 2:
        raise ConfigError(f"data.folds must be >= 2, got {data.folds}")

    # the global seed drives training; a per-section seed would be ambiguous
    train = _build(TrainSettings, doc.get("train"), "train", exclude=("seed",))
    train = dataclasses.replace(train, seed=seed)

    aug = doc.get("augmentation", "default")
    if aug in ("default", None):
        plan = AugmentationPlan() if aug == "default" else None
    elif aug == "none":
        plan = None
    elif isinstance(aug, dict):
        unknown = sorted(set(aug) - {"overall_p", "sets"})
        if unknown:
            raise ConfigError(f"augmentation: unknown key(s) {', '.join(unknown)}")
        try:
            plan = AugmentationPlan.from_dict(aug)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"augmentation: malformed plan ({exc})") from exc
    else:
        raise ConfigError(f"augmentation: expected 'default', 'none' or a mapping, got {aug!r}")

    network = _build(NetworkConfig, doc.get("network"), "network")
    if network.weights_path is not None:
        network = dataclasses.replace(network, weights_path=str(_path(network.weights_path, base, "network.weights_path")))

    return RunConfig(
        seed=seed,
        data=data,
        network=network,
        loss=_build(LossSettings, doc.get("loss"), "loss"),
        train=train,
        augmentation=plan,
        categories=_build(CategorySpec, doc.get("categories"), "categories"),
        output_dir=_path(doc.get("output_dir", "runs"), base, "output_dir"),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return parse_config(doc or {}, path.parent)
