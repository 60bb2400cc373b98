"""TrainConfig: nested dataclasses with JSON round trip, dotted overrides
and sweep expansion."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from ..errors import ConfigError, FormatError
from ..interventions import DEFAULT_EPS_LB, DEFAULT_RHO_F, TEMPLATE_DISTS
from ..signdyn import DEFAULT_COORD_CAP, DEFAULT_EPSILON0, DEFAULT_RHO
from .data import DataConfig
from .model import ModelSpec
from .optim import OptimConfig


@dataclass(frozen=True)
class TrackConfig:
    rho: float = DEFAULT_RHO
    epsilon0: float = DEFAULT_EPSILON0
    coord_cap: int | None = DEFAULT_COORD_CAP
    snapshot_stride: int = 10
    record_traces: bool = True
    eval_every: int = 200
    val_batches: int = 20

    def __post_init__(self):
        if self.snapshot_stride < 1 or self.eval_every < 1 or self.val_batches < 1:
            raise ConfigError("snapshot_stride, eval_every and val_batches must be positive")
        if self.coord_cap is not None and self.coord_cap < 1:
            raise ConfigError("coord_cap must be positive or null")


@dataclass(frozen=True)
class InterventionConfig:
    a_init: float = 0.0
    barrier_lambda: float = 0.0
    barrier_a: float | None = None  # defaults to a_init
    eps_lb: float = DEFAULT_EPS_LB
    template: bool = False
    template_rank: int = 2
    template_dist: str = "gaussian"
    template_seed: int | None = None  # defaults to the run seed
    hard_project: bool = False
    float_lambda: float = 0.0
    rho_f: float = DEFAULT_RHO_F
    targets: tuple[str, ...] | None = None  # None: every weight matrix

    def __post_init__(self):
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(self.targets))
        if self.a_init < 0 or self.barrier_lambda < 0 or self.float_lambda < 0:
            raise ConfigError("a_init and penalty weights must be nonnegative")
        if self.barrier_lambda > 0 and not (self.barrier_a or self.a_init) > 0:
            raise ConfigError("barrier needs a positive threshold (barrier_a or a_init)")
        if self.hard_project and not self.template:
            raise ConfigError("hard_project requires template = true")
        if self.template_dist not in TEMPLATE_DISTS:
            raise ConfigError(f"template_dist must be one of {TEMPLATE_DISTS}")

    @property
    def barrier_threshold(self) -> float:
        return self.barrier_a if self.barrier_a is not None else self.a_init


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    interventions: InterventionConfig = field(default_factory=InterventionConfig)
    steps: int = 2000
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return config_from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (TrainConfig, "model"): ModelSpec,
    (TrainConfig, "data"): DataConfig,
    (TrainConfig, "optim"): OptimConfig,
    (TrainConfig, "track"): TrackConfig,
    (TrainConfig, "interventions"): InterventionConfig,
}


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d.pop("sweep", None)
    return _build(TrainConfig, d, "config")


def parse_value(text: str):
    """JSON if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if not isinstance(cur.get(p), dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(f"override {key!r}: unknown key")
    cur[parts[-1]] = value


def parse_overrides(items) -> dict[str, Any]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def load_config(path) -> tuple[TrainConfig, dict[str, list]]:
    """Read a config JSON; returns the base config and its sweep axes."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    sweep = doc.get("sweep") or {}
    if not isinstance(sweep, dict) or not all(isinstance(v, list) and v for v in sweep.values()):
        raise ConfigError("sweep must map dotted keys to nonempty lists")
    return config_from_dict(doc), sweep


def expand_sweep(base: TrainConfig, sweep: dict[str, list]) -> list[tuple[dict, TrainConfig]]:
    """Cartesian product of sweep axes, in key order, last axis fastest."""
    if not sweep:
        return [({}, base)]
    keys = list(sweep)
    out = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        point = dict(zip(keys, combo))
        out.append((point, base.with_overrides(point)))
    return out
