"""Flat dotted-key run configuration with CLI flag overrides.

Config files hold one ``key = value`` assignment per line; values are
JSON (numbers, strings, lists, objects). Unknown keys are rejected.
Every field can be overridden by a command-line flag; the resolved
config is echoed into every report for provenance.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .auxtasks import AugmentationSpec
from .errors import ConfigError
from .metatrain import TrainConfig
from .networks import EncoderConfig
from .synthdata import DomainProfile

_TOP_KEYS = {"seed": int, "out_dir": str}
_DATA_KEYS = {"dir": str, "pairs_per_profile": int, "split": list}
_EVAL_KEYS = {"re_max": float, "te_max": float}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(EncoderConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_AUG_FIELDS = {f.name for f in dataclasses.fields(AugmentationSpec)}
_PROFILE_FIELDS = ({f.name for f in dataclasses.fields(DomainProfile)}
                   - {"name"}) | {"role"}
PROFILE_ROLES = ("train", "test", "both")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    data_dir: str = "runs/data"
    pairs_per_profile: int = 50
    split: tuple[float, float, float] = (0.8, 0.2, 0.0)
    thresholds: dict = field(default_factory=lambda: {"re_max": 15.0, "te_max": 0.30})
    model: dict = field(default_factory=dict)        # EncoderConfig kwargs
    train: dict = field(default_factory=dict)        # TrainConfig kwargs
    aug: dict = field(default_factory=dict)          # AugmentationSpec kwargs
    profiles: dict = field(default_factory=dict)     # name -> field dict (+ role)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.model)

    def train_config(self) -> TrainConfig:
        kwargs = dict(self.train)
        kwargs.setdefault("seed", self.seed)
        return TrainConfig(**kwargs)

    def augmentation_spec(self) -> AugmentationSpec:
        kwargs = dict(self.aug)
        for key in ("crop_fraction", "downsample_fraction"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return AugmentationSpec(**kwargs)

    def domain_profiles(self) -> list[tuple[DomainProfile, str]]:
        """(profile, role) pairs; role controls split assignment."""
        out = []
        for name, fields_ in self.profiles.items():
            kwargs = dict(fields_)
            role = kwargs.pop("role", "both")
            if role not in PROFILE_ROLES:
                raise ConfigError(f"profile {name!r}: bad role {role!r}")
            out.append((DomainProfile(name=name, **kwargs), role))
        if not out:
            out.append((DomainProfile(name="default"), "both"))
        return out

    def echo(self) -> dict:
        return dataclasses.asdict(self)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _apply_key(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    head = parts[0]
    if head in _TOP_KEYS and len(parts) == 1:
        setattr(cfg, head, _TOP_KEYS[head](value))
    elif head == "data" and len(parts) == 2 and parts[1] in _DATA_KEYS:
        if parts[1] == "dir":
            cfg.data_dir = str(value)
        elif parts[1] == "pairs_per_profile":
            cfg.pairs_per_profile = int(value)
        else:
            if not isinstance(value, list) or len(value) != 3:
                raise ConfigError("data.split must be a list of 3 fractions")
            cfg.split = tuple(float(v) for v in value)
    elif head == "eval" and len(parts) == 2 and parts[1] in _EVAL_KEYS:
        cfg.thresholds[parts[1]] = float(value)
    elif head == "model" and len(parts) == 2 and parts[1] in _MODEL_FIELDS:
        cfg.model[parts[1]] = value
    elif head == "train" and len(parts) == 2 and parts[1] in _TRAIN_FIELDS:
        cfg.train[parts[1]] = value
    elif head == "aug" and len(parts) == 2 and parts[1] in _AUG_FIELDS:
        cfg.aug[parts[1]] = value
    elif head == "profile" and len(parts) == 3 and parts[2] in _PROFILE_FIELDS:
        cfg.profiles.setdefault(parts[1], {})[parts[2]] = value
    else:
        raise ConfigError(f"unknown config key: {key!r}")


def load_run_config(path: Path | str | None = None,
                    overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            _apply_key(cfg, key.strip(), _parse_value(raw))
    for key, value in (overrides or {}).items():
        _apply_key(cfg, key, value)
    return cfg
