"""JSON run configuration shared by the CLI commands.

Precedence: built-in defaults < config file < command-line flags. A top-level
``seed`` applies to every component unless a flag overrides it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augmentation import PerturbParams
from .consistency_trainer import TrainConfig
from .stain_estimation import SnmfConfig

DEFAULT_SEED = 42
TOP_LEVEL_KEYS = {"seed", "perturb", "snmf", "train", "paths"}


class ConfigError(ValueError):
    pass


def _build(cls, section: str, d: dict | None):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"'{section}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        if cls is TrainConfig:
            return TrainConfig.from_dict(d)
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    perturb: PerturbParams = field(default_factory=PerturbParams)
    snmf: SnmfConfig = field(default_factory=SnmfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        perturb = _build(PerturbParams, "perturb", d.get("perturb"))
        train_d = d.get("train")
        if isinstance(train_d, dict) and "perturb" not in train_d:
            train_d = {**train_d, "perturb": perturb}
        train = _build(TrainConfig, "train", train_d)
        if train_d is None:
            train = replace(train, perturb=perturb)
        cfg = cls(
            perturb=perturb,
            snmf=_build(SnmfConfig, "snmf", d.get("snmf")),
            train=train,
            paths=dict(d.get("paths", {})),
        )
        if "seed" in d:
            cfg = cfg.with_seed(int(d["seed"]))
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            perturb=replace(self.perturb, seed=seed),
            snmf=replace(self.snmf, seed=seed),
            train=replace(self.train, seed=seed, perturb=replace(self.train.perturb, seed=seed)),
        )

    def with_perturb(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if not kw:
            return self
        try:
            perturb = replace(self.perturb, **kw)
            train_perturb = replace(self.train.perturb, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return replace(self, perturb=perturb, train=replace(self.train, perturb=train_perturb))

    def with_snmf(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, snmf=replace(self.snmf, **kw)) if kw else self
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_train(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, train=replace(self.train, **kw)) if kw else self
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
