"""Run configuration: a YAML file of nested sections plus dotted-key overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import yaml

from .backtest import DEFAULT_POLICIES, BacktestConfig
from .distill.pipeline import DistillConfig
from .env import RewardConfig
from .marketdata import HedgingRegion, SyntheticMarketConfig
from .stats import DEFAULT_REPLICATIONS
from .td3 import TD3Config


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    chain: str | None = None  # raw chain file for ``ingest``; later commands read <out>/chain.csv
    delimiter: str = ","
    column_map: dict = field(default_factory=dict)
    region: HedgingRegion = HedgingRegion()


@dataclass(frozen=True)
class YearsConfig:
    first: int = 2015
    test: tuple[int, ...] = (2017,)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    synthetic: SyntheticMarketConfig = SyntheticMarketConfig()
    years: YearsConfig = YearsConfig()
    reward: RewardConfig = RewardConfig()
    td3: TD3Config = TD3Config()
    distill: DistillConfig = DistillConfig()
    policies: tuple[str, ...] = DEFAULT_POLICIES
    cost: float = 0.0
    bootstrap_reps: int = DEFAULT_REPLICATIONS
    bootstrap_seed: int = 0
    seed: int = 0
    out: str = "runs/default"

    def backtest(self) -> BacktestConfig:
        return BacktestConfig(self.td3, self.distill, self.reward, self.cost, self.bootstrap_reps, self.bootstrap_seed)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data, path=""):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {path or '<root>'}: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        kw[k] = _coerce(hints[k], v, f"{path}.{k}".lstrip("."))
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from None


def _coerce(tp, v, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, v, path)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if v is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], v, path)
    if origin is tuple:
        if not isinstance(v, (list, tuple)):
            v = [v]
        elem = args[0] if args else object
        return tuple(_coerce(elem, x, path) for x in v)
    if tp is float and isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if tp is float and isinstance(v, str):
        # YAML 1.1 loads "1e-3" (no dot) as a string
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{path} must be a number, got {v!r}") from None
    if tp is int:
        if isinstance(v, bool) or not isinstance(v, int):
            if isinstance(v, float) and v.is_integer():
                return int(v)
            raise ConfigError(f"{path} must be an integer, got {v!r}")
    if tp is bool and not isinstance(v, bool):
        raise ConfigError(f"{path} must be true or false, got {v!r}")
    if tp is float and not isinstance(v, (int, float)):
        raise ConfigError(f"{path} must be a number, got {v!r}")
    return v


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a nested mapping in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    key, val = assignment.split("=", 1)
    try:
        parsed = yaml.safe_load(val)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {val!r}: {exc}") from None
    node = raw
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-section")
    node[parts[-1]] = parsed


def load_config(path: str | None = None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    for ov in overrides:
        apply_override(raw, ov)
    return _build(RunConfig, raw)


def parse_years(text: str) -> tuple[int, ...]:
    """``2019``, ``2017-2019`` or ``2017,2019``."""
    out: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                a, b = (int(x) for x in part.split("-"))
                if b < a:
                    raise ConfigError(f"empty year range {part!r}")
                out.extend(range(a, b + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse years {text!r}") from None
    if not out:
        raise ConfigError("no years given")
    return tuple(out)

