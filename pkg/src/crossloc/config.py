"""TOML run configuration mapped onto the per-module parameter dataclasses."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli

from .detect2d import DogParams
from .detect3d import MapKeypointParams
from .embed.train import TrainConfig
from .errors import ConfigError
from .geometry import CameraIntrinsics
from .pose import RansacConfig
from .synth.dataset import LabelRules
from .synth.scene import SceneConfig

SECTIONS = ("scene", "detect2d", "detect3d", "train", "match", "ransac", "eval")


@dataclass(frozen=True)
class MatchConfig:
    K: int = 5
    # optional descriptor-distance pre-filter; None keeps every top-K candidate
    max_distance: float | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.max_distance is not None and not self.max_distance > 0:
            raise ConfigError("max_distance must be positive when set")


@dataclass(frozen=True)
class EvalConfig:
    precision_m: float = 10.0
    precision_deg: float = 45.0
    tight_m: float = 0.5
    tight_deg: float = 2.0
    k_max: int = 10
    curve_points: int = 20
    # translation range of the success curve; rotation thresholds scale with
    # precision_deg / precision_m so the default threshold lies on the curve
    curve_min_m: float = 0.05
    curve_max_m: float = 50.0

    def __post_init__(self):
        if min(self.precision_m, self.precision_deg, self.tight_m, self.tight_deg) <= 0:
            raise ConfigError("precision thresholds must be positive")
        if self.k_max < 1 or self.curve_points < 2:
            raise ConfigError("k_max >= 1 and curve_points >= 2 required")
        if not 0 < self.curve_min_m < self.curve_max_m:
            raise ConfigError("need 0 < curve_min_m < curve_max_m")


@dataclass(frozen=True)
class SplitConfig:
    """Label rules and the held-out fraction; read from the [scene] table."""

    rules: LabelRules = LabelRules()
    test_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    labels: SplitConfig = field(default_factory=SplitConfig)
    detect2d: DogParams = field(default_factory=DogParams)
    detect3d: MapKeypointParams = field(default_factory=MapKeypointParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same configuration with every stage seed set to ``seed``."""
        return replace(self, scene=replace(self.scene, seed=seed), detect3d=replace(self.detect3d, seed=seed),
                       train=replace(self.train, seed=seed), ransac=replace(self.ransac, seed=seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_LABEL_KEYS = {f.name for f in fields(LabelRules)} - {"max_depth"}


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected an array, got {value!r}")
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(v, inner, where) for v in value)
    if tp is CameraIntrinsics:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(CameraIntrinsics, value, where)
    return value


def _build(cls, table: dict, where: str):
    types_ = _field_types(cls)
    unknown = set(table) - set(types_)
    if unknown:
        raise ConfigError(f"[{where}]: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _coerce(v, types_[k], f"{where}.{k}") for k, v in table.items() if k in types_}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(doc: dict) -> PipelineConfig:
    """Validate a parsed TOML document; unknown sections or keys raise ConfigError."""
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")
    for name in doc:
        if not isinstance(doc[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    scene_tab = dict(doc.get("scene", {}))
    label_tab = {k: scene_tab.pop(k) for k in list(scene_tab) if k in _LABEL_KEYS}
    test_fraction = scene_tab.pop("test_fraction", 0.1)
    scene = _build(SceneConfig, scene_tab, "scene")
    rules = _build(LabelRules, {**label_tab, "max_depth": scene.max_depth}, "scene")
    labels = SplitConfig(rules, _coerce(test_fraction, float, "scene.test_fraction"))
    return PipelineConfig(
        scene=scene,
        labels=labels,
        detect2d=_build(DogParams, doc.get("detect2d", {}), "detect2d"),
        detect3d=_build(MapKeypointParams, doc.get("detect3d", {}), "detect3d"),
        train=_build(TrainConfig, doc.get("train", {}), "train"),
        match=_build(MatchConfig, doc.get("match", {}), "match"),
        ransac=_build(RansacConfig, doc.get("ransac", {}), "ransac"),
        eval=_build(EvalConfig, doc.get("eval", {}), "eval"),
    )


def load_config(path=None, seed: int | None = None) -> PipelineConfig:
    """Read a TOML file (or use defaults when ``path`` is None) and apply a seed override."""
    if path is None:
        cfg = PipelineConfig()
    else:
        try:
            with open(Path(path), "rb") as fh:
                doc = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = config_from_dict(doc)
    return cfg.with_seed(seed) if seed is not None else cfg
