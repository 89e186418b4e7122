"""Run configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .encoders import EncoderDims
from .epd import EpdHyper


@dataclass
class RunConfig:
    # dimensions
    d_v: int = 32
    d_s: int = 16
    d_g: int = 16
    d_o: int = 64
    d_p: int = 64
    d_h: int = 64
    num_object_classes: int = 20
    num_predicate_classes: int = 51  # includes no-relation
    cardinalities: tuple[int, int, int] = (5, 10, 35)
    # losses and aggregation
    alpha: float = 8.0
    beta: float = 10.0
    gamma: float = 0.01
    lambdas: tuple[float, float, float] = (0.5, 0.2, 0.3)
    object_loss: bool = True
    object_loss_weight: float = 1.0
    # optimizer
    lr: float = 0.0025
    batch_size: int = 12
    epochs: int = 30
    seed: int = 0
    # structure flags
    activation: str = "relu"
    bn_enabled: bool = True
    shared_fpd: bool = True
    decoder_mode: str = "multi"
    loss_mode: str = "epd"
    subset_mode: str = "nested"
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    predcls: bool = True
    # evaluation
    graph_constraint: bool = True
    k_list: tuple[int, ...] = (5, 10)

    def encoder_dims(self) -> EncoderDims:
        return EncoderDims(self.d_v, self.d_s, self.d_g, self.d_o, self.d_p, self.num_object_classes)

    def hyper(self) -> EpdHyper:
        return EpdHyper(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, lambdas=self.lambdas,
            bn_enabled=self.bn_enabled, shared_fpd=self.shared_fpd,
            decoder_mode=self.decoder_mode, loss_mode=self.loss_mode,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise KeyError(f"unknown config key {k!r}")
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


_TUPLE_TYPES = {"cardinalities": int, "lambdas": float, "k_list": int}


def _field_type(name: str):
    for f in fields(RunConfig):
        if f.name == name:
            return f.type
    raise KeyError(f"unknown config key {name!r}")


def parse_value(key: str, raw: str):
    """Convert a textual value to the type of config field ``key``."""
    ftype = _field_type(key)
    raw = raw.strip()
    if key in _TUPLE_TYPES:
        conv = _TUPLE_TYPES[key]
        return tuple(conv(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
    if ftype == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, raw)
        except KeyError as e:
            raise ValueError(f"line {lineno}: {e.args[0]}") from None
    return out


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return RunConfig(**values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
