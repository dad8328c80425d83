"""Flat experiment configuration: defaults, TOML file, then command-line flags."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from pli_lab.attack import AttackConfig, GradAttackConfig
from pli_lab.data import TransformSpec
from pli_lab.errors import ConfigurationError
from pli_lab.federation import SCHEMES, ProtocolConfig


@dataclass
class ExperimentConfig:
    # data
    corpus: str = "corpus/manifest.tsv"
    synthetic: bool = False              # prepare-data generates the glyph corpus at ``corpus``
    synthetic_classes: int = 32
    synthetic_per_class: int = 12
    image_size: int = 64
    transform: str = "box_blur"
    blur_kernel: int = 9
    band_start: int = 0
    band_stop: int = 0
    band_fill: float = 0.0
    num_clients: int = 2
    num_targets: int = 12
    aux_fraction: float = 0.5
    max_per_class: int = 0               # 0 keeps every image
    # federation
    scheme: str = "fedmd"
    rounds: int = 0                      # 0: scheme default
    epoch_scale: float = 1.0
    fl_lr: float = 1e-3
    fl_batch_size: int = 64
    workers: int = 1
    # logit inversion
    taus: list[float] = field(default_factory=lambda: [3.0])
    gammas: list[float] = field(default_factory=lambda: [0.03])
    q_modes: list[str] = field(default_factory=lambda: ["full"])
    alpha: float = 5.0
    beta: float = 0.1
    inv_epochs: int = 3
    inv_lr: float = 3e-4
    inv_weight_decay: float = 1e-4
    inv_batch_size: int = 8
    inv_width: float = 0.25
    translator: str = "unsharp"
    unsharp_amount: float = 1.0
    dump_rounds: bool = False
    # gradient inversion
    grad_steps: int = 200
    grad_lr: float = 0.3
    grad_tv: float = 0.01
    # run
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs/desk"
    threads: int = 1

    # -- construction ---------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, data: dict, source: str = "config") -> "ExperimentConfig":
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigurationError(f"{source}: unknown keys {unknown}")
        cfg = cls()
        for key, value in data.items():
            setattr(cfg, key, coerce(key, value))
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        with open(path, "rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigurationError(f"{path}: the config is flat; tables {nested} are not allowed")
        return cls.from_mapping(data, str(path))

    def override(self, updates: dict) -> "ExperimentConfig":
        merged = asdict(self)
        merged.update({k: v for k, v in updates.items() if v is not None})
        return ExperimentConfig.from_mapping(merged, "flags")

    # -- validation -------------------------------------------------------------
    def validate(self, need_corpus: bool = False) -> "ExperimentConfig":
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if self.num_clients < 1 or self.num_targets < 1:
            raise ConfigurationError("num_clients and num_targets must be >= 1")
        if self.threads < 1 or self.workers < 1:
            raise ConfigurationError("threads and workers must be >= 1")
        if need_corpus and not self.synthetic and not Path(self.corpus).is_file():
            raise ConfigurationError(f"corpus manifest {self.corpus} does not exist "
                                     "(set synthetic = true to generate one)")
        self.transform_spec().validate(self.image_size)
        self.protocol_config()
        for cfg in self.attack_configs(0):
            pass
        self.grad_config(0)
        return self

    # -- derived configs ------------------------------------------------------------
    def transform_spec(self) -> TransformSpec:
        return TransformSpec(self.transform, self.blur_kernel, self.band_start, self.band_stop, self.band_fill)

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(scheme=self.scheme, rounds=self.rounds or None, epoch_scale=self.epoch_scale,
                              lr=self.fl_lr, batch_size=self.fl_batch_size, workers=self.workers)

    def attack_configs(self, seed: int) -> list[AttackConfig]:
        return [AttackConfig(tau=t, gamma=g, alpha=self.alpha, beta=self.beta, epochs=self.inv_epochs,
                             lr=self.inv_lr, weight_decay=self.inv_weight_decay,
                             batch_size=self.inv_batch_size, q_mode=m, width=self.inv_width, seed=seed)
                for m in self.q_modes for t in self.taus for g in self.gammas]

    def grad_config(self, seed: int) -> GradAttackConfig:
        return GradAttackConfig(steps=self.grad_steps, lr=self.grad_lr, tv_weight=self.grad_tv, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, value):
    """Convert a TOML or command-line value to the declared type of ``key``."""
    kind = _TYPES[key]
    try:
        if kind.startswith("list["):
            inner = {"list[float]": float, "list[int]": int, "list[str]": str}[kind]
            if isinstance(value, str):
                value = [v for v in (s.strip() for s in value.split(",")) if v]
            if not isinstance(value, (list, tuple)):
                value = [value]
            if inner is int:
                return [_as_int(v) for v in value]
            return [inner(v) for v in value]
        if kind == "bool":
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if kind == "int":
            return _as_int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{key}: cannot interpret {value!r} as {kind}") from exc


def _as_int(v) -> int:
    if isinstance(v, bool):
        raise ValueError(v)
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(v)
    return int(v)
