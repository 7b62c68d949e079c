"""Run configuration: one JSON document, profile defaults, strict keys."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .bench_data import SyntheticSpec
from .model import ModelConfig
from .search import SearchConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


PROFILES: dict[str, dict] = {
    "nb101": {
        "model": {"patches": 19, "resolution": 7},
        "train": {"batch_size": 256, "epochs": 35, "warmup": 50, "beta1": 0.9,
                  "beta2": 0.982, "eps": 1e-9, "weight_decay": 5e-4},
        "search": {"sample_size": 256},
        "data": {"train_fraction": 0.01, "val_size": 1024},
    },
    "nb201": {
        "model": {"patches": 31, "resolution": 4},
        "train": {"batch_size": 128, "epochs": 55, "warmup": 30, "beta1": 0.9,
                  "beta2": 0.99, "eps": 1e-9, "weight_decay": 1e-2},
        "search": {"sample_size": 128},
        "data": {"train_size": 1000, "val_size": 256},
    },
    # desk-scale settings for the enumerable synthetic space
    "synth": {
        "model": {"layers": 2, "d_model": 32, "heads": 4, "ffn": 64,
                  "patches": 7, "resolution": 6},
        "train": {"batch_size": 64, "epochs": 40, "warmup": 30, "beta1": 0.9,
                  "beta2": 0.99, "eps": 1e-9, "weight_decay": 1e-2},
        "search": {"sample_size": 64},
        "data": {"train_fraction": 0.02, "val_size": 1024},
    },
}


@dataclass
class DataConfig:
    records: str | None = None
    space: str | None = None
    train_fraction: float | None = None
    train_size: int | None = None
    val_size: int = 1024
    metric: str = "validation"
    split_seed: int | None = None


@dataclass
class RunConfig:
    profile: str = "synth"
    seed: int = 0
    out: str = "runs/default"
    repeats: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    synth: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dict(self.train, seed=self.seed))

    def search_config(self, repeat: int = 0) -> SearchConfig:
        return SearchConfig(**dict(self.search, seed=self.seed + repeat))

    def synth_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**dict(self.synth, seed=self.synth.get("seed", self.seed)))

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "search": SearchConfig,
             "synth": SyntheticSpec, "data": DataConfig}
_TOP = {f.name for f in fields(RunConfig)}


def _check_keys(where: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def build_config(doc: dict | None = None, profile: str | None = None, **overrides) -> RunConfig:
    """Profile defaults, then the config document, then explicit overrides."""
    doc = copy.deepcopy(doc or {})
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys("config", doc, _TOP)
    profile = profile or doc.get("profile", "synth")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged: dict = {"profile": profile}
    for sec, cls in _SECTIONS.items():
        user = doc.get(sec, {})
        if not isinstance(user, dict):
            raise ConfigError(f"section {sec!r} must be an object")
        names = {f.name for f in fields(cls)}
        _check_keys(sec, user, names)
        merged[sec] = dict(PROFILES[profile].get(sec, {}), **user)
    for key in ("seed", "out", "repeats"):
        if key in doc:
            merged[key] = doc[key]
    for key, val in overrides.items():
        if val is None:
            continue
        if key == "mode":
            merged["search"]["mode"] = val
        else:
            merged[key] = val
    try:
        cfg = RunConfig(profile=merged["profile"], seed=int(merged.get("seed", 0)),
                        out=str(merged.get("out", "runs/default")),
                        repeats=int(merged.get("repeats", 1)),
                        data=DataConfig(**merged["data"]), synth=merged["synth"],
                        model=merged["model"], train=merged["train"], search=merged["search"])
        # validate eagerly so bad values surface as config errors
        cfg.model_config()
        cfg.train_config()
        cfg.search_config()
        cfg.synth_spec()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if cfg.repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {cfg.repeats}")
    return cfg


def load_config(path: str | None, **kw) -> tuple[RunConfig, str | None]:
    """Returns the resolved config and the verbatim text of the file (if any)."""
    if path is None:
        return build_config({}, **kw), None
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return build_config(doc, **kw), text
