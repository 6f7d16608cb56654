"""Run configuration: nested records loaded from JSON, with per-flag overrides.

Precedence is flags, then the config file, then the built-in defaults.  The
merged result is what every command writes into its artifacts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
import json
from pathlib import Path
import typing

from .data import SyntheticSpec
from .editor import EditConfig
from .errors import ConfigError, MissingArtifactError
from .model import ModelConfig
from .tracing import TraceConfig
from .trainer import BASELINE_CONFIG, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_per_class: int = 500
    split: tuple[float, float, float] = (0.4, 0.3, 0.3)
    split_seed: int = 0


@dataclass(frozen=True)
class HarvestConfig:
    max_edits: int = 50
    n_anchors: int = 500
    anchor_seed: int = 0


@dataclass(frozen=True)
class BaselineConfig:
    train: TrainConfig = BASELINE_CONFIG
    # FineTune+L2 pull strength toward the pre-edit weights
    l2_lambda: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workdir: str = "xedit-run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    harvest: HarvestConfig = field(default_factory=HarvestConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to every seeded section."""
        return replace(
            self,
            seed=seed,
            data=replace(self.data, synthetic=replace(self.data.synthetic, seed=seed), split_seed=seed),
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
            trace=replace(self.trace, seed=seed),
            harvest=replace(self.harvest, anchor_seed=seed),
            baseline=replace(self.baseline, train=replace(self.baseline.train, seed=seed)),
        )


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _build(cls, data: dict, where: str = "config", base=None):
    base = base if base is not None else cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    updates = {}
    for name, value in data.items():
        tp = hints[name]
        cur = getattr(base, name)
        if is_dataclass(tp):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name}: expected an object")
            updates[name] = _build(tp, value, f"{where}.{name}", cur)
        else:
            updates[name] = _coerce(tp, value, f"{where}.{name}")
    try:
        return replace(base, **updates)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    """Merge ``data`` over the defaults.  A top-level ``seed`` seeds every section
    unless a section names its own seed."""
    cfg = RunConfig()
    if "seed" in data:
        if isinstance(data["seed"], bool) or not isinstance(data["seed"], int):
            raise ConfigError("config.seed: expected an integer")
        cfg = cfg.with_seed(data["seed"])
    return _build(RunConfig, data, base=cfg)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return from_dict(data)


def override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Return ``cfg`` with the field at ``dotted`` (e.g. ``"edit.target_steps"``) replaced."""
    head, _, rest = dotted.partition(".")
    if not hasattr(cfg, head):
        raise ConfigError(f"unknown setting {dotted}")
    if not rest:
        return replace(cfg, **{head: value})
    return replace(cfg, **{head: override(getattr(cfg, head), rest, value)})


def lookup(cfg, dotted: str):
    for part in dotted.split("."):
        cfg = getattr(cfg, part)
    return cfg
