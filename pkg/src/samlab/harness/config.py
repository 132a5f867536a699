"""Run configuration: a JSON document mirroring :class:`RunConfig`.

Parsing is strict. Unknown keys, wrong types and invalid values all raise
:class:`ConfigError`, which the CLI maps to exit code 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

from ..nn import ModelSpec
from ..optim import AdamWConfig, OptimConfig, SGDConfig, StageSwitch
from ..perturb import PerturbSpec
from .data import DatasetSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelSpec
    optim: OptimConfig
    data: DatasetSpec
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    label_smoothing: float = 0.1
    output_dir: str | None = None
    checkpoint_every: int = 0
    record_wall_ms: bool = False
    short_circuit: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        uses_bn = self.model.architecture in ("mlp_bn", "mini_conv_bn")
        if self.batch_size < (2 if uses_bn else 1):
            raise ConfigError(f"batch_size {self.batch_size} too small for {self.model.architecture}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.data.kind != "idx_files" and self.data.n < 2 * self.batch_size:
            raise ConfigError(f"dataset n={self.data.n} must be >= 2 * batch_size")
        if self.optim.m is not None and self.optim.m > self.batch_size:
            raise ConfigError(f"m={self.optim.m} exceeds batch_size={self.batch_size}")
        try:
            self.model.validate()
            self.data.validate()
            self.optim.validate(self.epochs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self):
        o = self.optim
        base = dict(o.base.__dict__)
        return {
            "model": self.model.to_dict(),
            "optim": {
                "base": base,
                "schedule": o.schedule,
                "perturb": o.perturb.to_dict() if o.perturb else None,
                "m": o.m,
                "stage_switch": None if o.stage_switch is None else {
                    "epoch": o.stage_switch.epoch, "from": o.stage_switch.from_kind,
                    "to": o.stage_switch.to_kind},
            },
            "data": dict(self.data.__dict__),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "label_smoothing": self.label_smoothing,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
            "record_wall_ms": self.record_wall_ms,
            "short_circuit": self.short_circuit,
        }


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _optim(d):
    if not isinstance(d, dict):
        raise ConfigError("optim: expected an object")
    allowed = {"base", "schedule", "perturb", "m", "stage_switch"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"optim: unknown keys {unknown}")
    base = dict(d.get("base") or {"kind": "sgd"})
    kind = base.get("kind", "sgd")
    if kind == "sgd":
        base_cfg = _strict(SGDConfig, base, "optim.base")
    elif kind == "adamw":
        base_cfg = _strict(AdamWConfig, base, "optim.base")
    else:
        raise ConfigError(f"optim.base: unknown kind {kind!r}")
    perturb = d.get("perturb")
    if perturb is not None:
        perturb = _strict(PerturbSpec, perturb, "optim.perturb")
    sw = d.get("stage_switch")
    if sw is not None:
        if not isinstance(sw, dict) or set(sw) - {"epoch", "from", "to"}:
            raise ConfigError("optim.stage_switch: expected keys epoch, from, to")
        try:
            sw = StageSwitch(int(sw["epoch"]), sw["from"], sw["to"])
        except KeyError as exc:
            raise ConfigError(f"optim.stage_switch: missing {exc}") from None
    return OptimConfig(base_cfg, d.get("schedule", "cosine"), perturb, d.get("m"), sw)


def parse_config(d):
    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    for key in ("model", "optim", "data"):
        if key not in d:
            raise ConfigError(f"config: missing {key!r}")
    rest = {k: v for k, v in d.items() if k not in ("model", "optim", "data")}
    cfg = RunConfig(
        model=_strict(ModelSpec, d["model"], "model"),
        optim=_optim(d["optim"]),
        data=_strict(DatasetSpec, d["data"], "data"),
        **rest,
    )
    return cfg.validate()


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw)
