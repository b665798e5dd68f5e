"""Experiment configuration: nested dataclasses loaded from YAML with strict keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration documents."""


@dataclass
class PerturbationConfig:
    family: str = "isotropic-bump"
    dim: int = 1
    epsilon: float = 0.05
    sigma0: float = 0.5
    params: dict = field(default_factory=dict)
    seminorms: list | None = None


@dataclass
class GeometryConfig:
    delta: float = 0.01
    c0: float = 0.1
    c1: float = 0.01
    delta1: float = 0.1
    delta2: float = 0.01
    xi0: list = field(default_factory=lambda: [1.0])
    strict: bool = True


@dataclass
class JetConfig:
    n_jet: int = 4
    n0: int = 4
    n_terms: int = 2


@dataclass
class GridConfig:
    half_width: float = 6.0
    nodes: int = 0
    xy_inputs: list = field(default_factory=lambda: [[0.0, 0.3]])
    speeds: list | None = None


@dataclass
class ToleranceConfig:
    flow: float = 1e-10
    phase: float = 1e-10
    transport: float = 1e-9
    reference: float = 1e-10
    kernel_cut: float = 36.0


@dataclass
class StrichartzConfig:
    q: float = 8.0
    r: float = 4.0


@dataclass
class ExperimentConfig:
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    jets: JetConfig = field(default_factory=JetConfig)
    grids: GridConfig = field(default_factory=GridConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    strichartz: StrichartzConfig = field(default_factory=StrichartzConfig)
    lambdas: list = field(default_factory=lambda: [64.0, 128.0, 256.0, 512.0])
    t_grid: list | None = None
    T: float = 1.0
    seeds: int = 200
    seed: int = 0

    # -- loading -----------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = _build(cls, data or {}, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("top level of the configuration must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        p, g = self.perturbation, self.geometry
        if p.dim not in (1, 2, 3):
            raise ConfigError("perturbation.dim must be 1, 2 or 3")
        if p.epsilon < 0 or p.sigma0 <= 0:
            raise ConfigError("epsilon must be nonnegative and sigma0 positive")
        if len(g.xi0) != p.dim:
            raise ConfigError("geometry.xi0 must have perturbation.dim entries")
        if abs(math.hypot(*g.xi0) - 1.0) > 1e-12:
            raise ConfigError("geometry.xi0 must be a unit vector")
        if g.strict and g.delta2 > 0.01:
            raise ConfigError(f"geometry.delta2 = {g.delta2} exceeds 1/100 (set strict: false to override)")
        for name in ("delta", "c0", "c1", "delta1", "delta2"):
            if getattr(g, name) <= 0:
                raise ConfigError(f"geometry.{name} must be positive")
        if self.jets.n0 < 1 or self.jets.n_jet < 2 or self.jets.n_terms < 0:
            raise ConfigError("jet orders out of range")
        if not self.lambdas or min(self.lambdas) < 1:
            raise ConfigError("lambdas must be a nonempty list of values >= 1")
        if self.T <= 0:
            raise ConfigError("T must be positive")
        if self.t_grid is not None and (not self.t_grid or any(abs(t) > self.T for t in self.t_grid)):
            raise ConfigError("t_grid must be nonempty and within [-T, T]")
        from .reference import InadmissiblePairError, StrichartzPair

        try:
            StrichartzPair(self.strichartz.q, self.strichartz.r, p.dim)
        except InadmissiblePairError as exc:
            raise ConfigError(str(exc)) from exc
        from .symbols import CertificationError, builtin_family

        try:
            builtin_family(p.family, dim=p.dim, epsilon=p.epsilon, sigma0=p.sigma0, seminorms=p.seminorms,
                           check_admissible=True, **p.params)
        except (CertificationError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix or 'root'}' must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in '{prefix or 'root'}'")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        path = f"{prefix}.{key}" if prefix else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, path)
        else:
            kwargs[key] = _coerce(hint, value, path)
    return cls(**kwargs)


def _coerce(hint, value, path):
    base = typing.get_origin(hint) or hint
    args = typing.get_args(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"'{path}' may not be null")
    if args and type(None) in args:
        base = typing.get_origin(args[0]) or args[0]
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number")
        return float(value)
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{path}' must be an integer")
        return value
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false")
        return value
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string")
        return value
    if base is list:
        if not isinstance(value, list):
            raise ConfigError(f"'{path}' must be a list")
        return value
    if base is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"'{path}' must be a mapping")
        return value
    return value


def format_float(v: float) -> str:
    """Seventeen significant digits."""
    return format(float(v), ".17g")
