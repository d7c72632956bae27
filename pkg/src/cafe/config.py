"""Pipeline configuration: fully defaulted, JSON-loadable, strictly validated."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .model import FEATURE_KINDS, KEY_SETS, STRATEGIES
from .trainer import TRANSFER_MODES

GROUPING_MODES = ("random", "average", "cognition")
SAMPLING_MODES = ("none", "over", "median", "both")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    out: str = "artifacts"
    # data
    num_scenes: int = 2000
    zipf_exponent: float = 1.2
    data_seed: int = 7
    # model and training
    seed: int = 0
    fusion: str = "entangled"
    key_set: str = "scene"
    features: tuple[str, ...] = FEATURE_KINDS
    transfer: str = "topdown"
    alpha: float = 1.0
    stop_teacher_grad: bool = True
    epochs: int = 12
    lr: float = 0.03
    # grouping and sampling
    k: int = 3
    mu: float = 0.8
    grouping: str = "cognition"
    bootstrap_epochs: int = 2
    sampling: str = "both"
    lam: float = 0.5
    t2: int = 2
    t3: int = 3

    def validate(self) -> PipelineConfig:
        checks = [
            (self.num_scenes >= 10, "num_scenes must be >= 10"),
            (self.zipf_exponent >= 0, "zipf_exponent must be >= 0"),
            (self.fusion in STRATEGIES, f"fusion must be one of {STRATEGIES}"),
            (self.key_set in KEY_SETS, f"key_set must be one of {KEY_SETS}"),
            (len(self.features) > 0 and set(self.features) <= set(FEATURE_KINDS), f"features must be a subset of {FEATURE_KINDS}"),
            (self.transfer in TRANSFER_MODES, f"transfer must be one of {TRANSFER_MODES}"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.epochs >= 1 and self.bootstrap_epochs >= 1, "epochs must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.k == 3, "only K = 3 groups are supported"),
            (0 < self.mu <= 1, "mu must lie in (0, 1]"),
            (self.grouping in GROUPING_MODES, f"grouping must be one of {GROUPING_MODES}"),
            (self.sampling in SAMPLING_MODES, f"sampling must be one of {SAMPLING_MODES}"),
            (0 <= self.lam <= 1, "lambda must lie in [0, 1]"),
            (self.t2 >= 1 and self.t3 >= 1, "repeat factors must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d

    def echo(self) -> dict:
        """Everything except the output path, which does not affect results."""
        d = self.to_dict()
        d.pop("out")
        return d


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def from_dict(data: dict) -> PipelineConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    data = dict(data)
    if "features" in data:
        if not isinstance(data["features"], (list, tuple)):
            raise ConfigError("features must be a list")
        data["features"] = tuple(data["features"])
    defaults = PipelineConfig()
    for key, value in data.items():
        expected = type(getattr(defaults, key))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
            data[key] = value
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"{key} must be of type {expected.__name__}")
    return PipelineConfig(**data).validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_dict(data)


def with_overrides(cfg: PipelineConfig, **kwargs) -> PipelineConfig:
    return replace(cfg, **kwargs).validate()
