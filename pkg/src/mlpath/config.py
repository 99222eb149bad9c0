"""
Experiment configuration.

A configuration is a JSON object whose ``kind`` selects the experiment.
Unknown keys are errors and numbers are range-checked, so a config either
describes exactly one reproducible run or is rejected with the offending
field named.
"""
from __future__ import annotations

import json
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    TypeAdapter,
    field_validator,
    model_validator,
)

from .measure import DiscretePath, TimeGrid
from .models import DRIFT_PRESETS, MAP_PRESETS, preset_drift, preset_map
from .variational import Constraints

PositiveFloat = Annotated[float, Field(gt=0, allow_inf_nan=False)]
FiniteFloat = Annotated[float, Field(allow_inf_nan=False)]
Seed = Annotated[int, Field(ge=0, le=2**63 - 1)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class ModelRef(_Strict):
    preset: str
    params: dict[str, FiniteFloat] = Field(default_factory=dict)

    @field_validator("preset")
    @classmethod
    def _known(cls, v):
        if v not in DRIFT_PRESETS:
            raise ValueError(f"unknown drift preset {v!r}; choose from {sorted(DRIFT_PRESETS)}")
        return v

    def build(self):
        return preset_drift(self.preset, **self.params)


class GridConfig(_Strict):
    horizon: PositiveFloat = 1.0
    n_intervals: Annotated[int, Field(ge=1, le=1_000_000)] = 1000

    def build(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.n_intervals)


class ConstraintsConfig(_Strict):
    pin_start: Optional[FiniteFloat] = 0.0
    pin_end: Optional[FiniteFloat] = None

    def build(self) -> Constraints:
        return Constraints(self.pin_start, self.pin_end)


class PathConfig(_Strict):
    """``z(t) = sum_k c_k t^k`` (``polynomial``) or nodal ``values``; exactly one."""

    polynomial: Optional[list[FiniteFloat]] = None
    values: Optional[list[FiniteFloat]] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.polynomial is None) == (self.values is None):
            raise ValueError("give exactly one of 'polynomial' or 'values'")
        if self.polynomial is not None and not self.polynomial:
            raise ValueError("polynomial needs at least one coefficient")
        return self

    def build(self, grid: TimeGrid) -> DiscretePath:
        if self.values is not None:
            if len(self.values) != grid.n_nodes:
                raise ValueError(f"path has {len(self.values)} values but the grid has {grid.n_nodes} nodes")
            return DiscretePath(grid, np.array(self.values))
        coef = np.array(self.polynomial)[::-1]
        return DiscretePath(grid, np.polyval(coef, grid.nodes))


class OutputConfig(_Strict):
    directory: Optional[str] = None
    prefix: str = ""


def _decreasing(v: list) -> list:
    if not v:
        raise ValueError("must not be empty")
    if any(b >= a for a, b in zip(v, v[1:])):
        raise ValueError("must be strictly decreasing")
    return v


class _Base(_Strict):
    seed: Seed = 0
    output: OutputConfig = Field(default_factory=OutputConfig)


class EvaluateConfig(_Base):
    kind: Literal["evaluate"]
    model: ModelRef
    grid: GridConfig = Field(default_factory=GridConfig)
    eps: PositiveFloat
    path: PathConfig
    start: FiniteFloat = 0.0


class MinimizeConfig(_Base):
    kind: Literal["minimize"]
    model: ModelRef
    grid: GridConfig = Field(default_factory=GridConfig)
    constraints: ConstraintsConfig = Field(default_factory=ConstraintsConfig)
    eps: Optional[PositiveFloat] = None  # None: FW functional, else eps^2 OM
    extra_starts: Annotated[int, Field(ge=0, le=64)] = 0
    tol: PositiveFloat = 1e-8
    max_iter: Annotated[int, Field(ge=1, le=10_000_000)] = 100_000


class EpsSweepConfig(_Base):
    kind: Literal["eps_sweep"]
    model: ModelRef
    grid: GridConfig = Field(default_factory=GridConfig)
    constraints: ConstraintsConfig = Field(default_factory=ConstraintsConfig)
    eps_list: list[PositiveFloat]
    fw_reference_factor: Optional[Annotated[int, Field(ge=2, le=64)]] = None
    tol: PositiveFloat = 1e-8
    max_iter: Annotated[int, Field(ge=1, le=10_000_000)] = 100_000

    _check_eps = field_validator("eps_list")(classmethod(lambda cls, v: _decreasing(v)))


class GammaConfig(_Base):
    kind: Literal["gamma"]
    model: ModelRef
    grid: GridConfig = Field(default_factory=GridConfig)
    constraints: ConstraintsConfig = Field(default_factory=ConstraintsConfig)
    eps_list: list[PositiveFloat]
    radii: list[PositiveFloat]
    probes: Annotated[int, Field(ge=1, le=1 << 16)] = 256

    _check_eps = field_validator("eps_list", "radii")(classmethod(lambda cls, v: _decreasing(v)))


class SmallBallConfig(_Base):
    kind: Literal["mc_smallball"]
    model: ModelRef
    grid: GridConfig = Field(default_factory=GridConfig)
    eps: PositiveFloat
    z1: PathConfig
    z2: PathConfig
    deltas: list[PositiveFloat]
    count: Annotated[int, Field(ge=1, le=1_000_000_000)]
    start: FiniteFloat = 0.0


class EventConfig(_Strict):
    kind: Literal["terminal_ge", "sup_ge", "always"]
    level: FiniteFloat = 0.0


class LdpConfig(_Base):
    kind: Literal["mc_ldp"]
    model: ModelRef
    grid: GridConfig = Field(default_factory=GridConfig)
    eps_list: list[PositiveFloat]
    event: EventConfig
    count: Annotated[int, Field(ge=1, le=1_000_000_000)]
    start: FiniteFloat = 0.0
    fw_grid: GridConfig = Field(default_factory=GridConfig)

    _check_eps = field_validator("eps_list")(classmethod(lambda cls, v: _decreasing(v)))


class MapRef(_Strict):
    preset: str = "zero"
    params: dict[str, FiniteFloat] = Field(default_factory=dict)

    @field_validator("preset")
    @classmethod
    def _known(cls, v):
        if v not in MAP_PRESETS:
            raise ValueError(f"unknown map preset {v!r}; choose from {sorted(MAP_PRESETS)}")
        return v

    def build(self):
        return preset_map(self.preset, **self.params)


class AlgebraicConfig(_Base):
    kind: Literal["algebraic"]
    truncation: Annotated[int, Field(ge=1, le=10_000_000)]
    map: MapRef = Field(default_factory=MapRef)
    phi: Union[FiniteFloat, list[FiniteFloat]] = 1.0
    eps: Optional[PositiveFloat] = None  # solve one noise draw when given

    @model_validator(mode="after")
    def _phi_length(self):
        if isinstance(self.phi, list) and len(self.phi) != self.truncation:
            raise ValueError("phi must be a number or have one entry per coordinate")
        return self


ExperimentConfig = Annotated[
    Union[
        EvaluateConfig,
        MinimizeConfig,
        EpsSweepConfig,
        GammaConfig,
        SmallBallConfig,
        LdpConfig,
        AlgebraicConfig,
    ],
    Field(discriminator="kind"),
]

KINDS = ("evaluate", "minimize", "eps_sweep", "gamma", "mc_smallball", "mc_ldp", "algebraic")

_adapter = TypeAdapter(ExperimentConfig)


def parse_config(text: str):
    """Parse and validate a JSON config; raises ``pydantic.ValidationError``."""
    return _adapter.validate_json(text)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_echo(cfg) -> dict:
    """The config as plain JSON data; :func:`parse_config` maps it back to ``cfg``."""
    return _adapter.dump_python(cfg, mode="json")


def dumps_config(cfg) -> str:
    return json.dumps(config_echo(cfg), sort_keys=True)
