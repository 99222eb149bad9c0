"""
Reference Gaussian measures and their Cameron-Martin structure.

Two reference measures are supported:

* ``WienerPath`` -- Brownian motion on a uniform grid of ``[0, T]``, pinned at
  zero.  Its Cameron-Martin space is the pinned Sobolev space and the squared
  norm is ``int_0^T z'(t)^2 dt``.
* ``DiagonalSequence`` -- the law of ``(a_1 xi_1, a_2 xi_2, ...)`` truncated at
  ``N`` coordinates, with squared norm ``sum z_n^2 / a_n^2``.

The small-noise family ``mu_0^eps(A) = mu_0(A / eps)`` is represented by the
``noise_scale`` attribute of :class:`GaussianMeasureSpec`.  The Cameron-Martin
norm belongs to ``mu_0`` and does not depend on ``noise_scale``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from ._parallel import chunked_normals

__all__ = [
    "TimeGrid",
    "DiscretePath",
    "WeightedSequence",
    "WienerPath",
    "DiagonalSequence",
    "GaussianMeasureSpec",
    "cm_norm_sq",
    "sample",
    "sample_array",
    "scale",
    "path_derivative",
]


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i T / n`` for ``i = 0..n``."""

    horizon: float
    n_intervals: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError("horizon must be positive and finite")
        if int(self.n_intervals) != self.n_intervals or self.n_intervals < 1:
            raise ValueError("n_intervals must be a positive integer")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_intervals", int(self.n_intervals))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_intervals

    @property
    def n_nodes(self) -> int:
        return self.n_intervals + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_nodes) * self.dt

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_intervals * int(factor))


@dataclass(frozen=True, eq=False)
class DiscretePath:
    """Nodal values of a path on a :class:`TimeGrid`."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values, "values")
        if values.size != self.grid.n_nodes:
            raise ValueError(
                f"path has {values.size} values but the grid has {self.grid.n_nodes} nodes"
            )
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, DiscretePath):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def from_function(cls, grid: TimeGrid, func) -> "DiscretePath":
        return cls(grid, np.asarray(func(grid.nodes), dtype=float) * np.ones(grid.n_nodes))

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    def __sub__(self, other: "DiscretePath") -> "DiscretePath":
        _check_same_grid(self, other)
        return DiscretePath(self.grid, self.values - other.values)

    def __add__(self, other: "DiscretePath") -> "DiscretePath":
        _check_same_grid(self, other)
        return DiscretePath(self.grid, self.values + other.values)

    def __mul__(self, alpha: float) -> "DiscretePath":
        return DiscretePath(self.grid, alpha * self.values)

    __rmul__ = __mul__

    def sup_distance(self, other: "DiscretePath") -> float:
        _check_same_grid(self, other)
        return float(np.max(np.abs(self.values - other.values)))


def _check_same_grid(a: DiscretePath, b: DiscretePath) -> None:
    if a.grid != b.grid:
        raise ValueError("paths live on different grids")


@dataclass(frozen=True, eq=False)
class WeightedSequence:
    """Truncated sequence ``z_1..z_N`` together with the weights ``a_1..a_N``."""

    weights: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        weights = _frozen_array(self.weights, "weights")
        values = _frozen_array(self.values, "values")
        if weights.size < 1:
            raise ValueError("truncation N must be at least 1")
        if weights.size != values.size:
            raise ValueError("weights and values must have equal length")
        if np.any(weights == 0):
            raise ValueError("weights must be nonzero")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, WeightedSequence):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(
            self.values, other.values
        )

    __hash__ = None

    @classmethod
    def from_coordinates(cls, weights, phi) -> "WeightedSequence":
        """Build ``z_n = a_n^2 phi_n`` from Cameron-Martin coordinates ``phi``."""
        weights = np.asarray(weights, dtype=float)
        return cls(weights, weights**2 * np.asarray(phi, dtype=float))

    @property
    def truncation(self) -> int:
        return self.weights.size

    @property
    def coordinates(self) -> np.ndarray:
        """The ``phi_n = z_n / a_n^2`` representation."""
        return self.values / self.weights**2


@dataclass(frozen=True)
class WienerPath:
    grid: TimeGrid


@dataclass(frozen=True, eq=False)
class DiagonalSequence:
    weights: np.ndarray

    def __post_init__(self):
        weights = _frozen_array(self.weights, "weights")
        if weights.size < 1:
            raise ValueError("truncation N must be at least 1")
        if np.any(weights == 0):
            raise ValueError("weights must be nonzero")
        object.__setattr__(self, "weights", weights)

    def __eq__(self, other):
        if not isinstance(other, DiagonalSequence):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    __hash__ = None

    @property
    def truncation(self) -> int:
        return self.weights.size


Variant = Union[WienerPath, DiagonalSequence]
Element = Union[DiscretePath, WeightedSequence]


@dataclass(frozen=True)
class GaussianMeasureSpec:
    """Reference Gaussian ``mu_0`` together with the noise scale ``eps``."""

    variant: Variant
    noise_scale: float = 1.0

    def __post_init__(self):
        if not isinstance(self.variant, (WienerPath, DiagonalSequence)):
            raise TypeError("variant must be WienerPath or DiagonalSequence")
        if not (np.isfinite(self.noise_scale) and self.noise_scale > 0):
            raise ValueError("noise_scale must be positive")

    @classmethod
    def wiener(cls, horizon: float, n_intervals: int, noise_scale: float = 1.0):
        return cls(WienerPath(TimeGrid(horizon, n_intervals)), noise_scale)

    @classmethod
    def diagonal(cls, weights, noise_scale: float = 1.0):
        return cls(DiagonalSequence(weights), noise_scale)


def path_derivative(path: DiscretePath) -> np.ndarray:
    """Forward differences ``(z_{i+1} - z_i) / dt``, one per interval."""
    return np.diff(path.values) / path.grid.dt


def _check_element(spec: GaussianMeasureSpec, element: Element) -> None:
    if isinstance(spec.variant, WienerPath):
        if not isinstance(element, DiscretePath):
            raise TypeError("Wiener measure expects a DiscretePath")
        if element.grid != spec.variant.grid:
            raise ValueError("path grid does not match the measure grid")
    else:
        if not isinstance(element, WeightedSequence):
            raise TypeError("diagonal measure expects a WeightedSequence")
        if element.truncation != spec.variant.truncation:
            raise ValueError("sequence length does not match the truncation")
        if not np.array_equal(element.weights, spec.variant.weights):
            raise ValueError("sequence weights do not match the measure weights")


def cm_norm_sq(spec: GaussianMeasureSpec, element: Element) -> float:
    """
    Squared Cameron-Martin norm of ``element`` under ``spec``.

    For Wiener paths this is ``sum dt * d_i^2`` with forward differences
    ``d_i``, which is the exact norm of the piecewise-linear interpolant.
    Paths with ``z_0 != 0`` are outside the Cameron-Martin space and give
    ``inf``.
    """
    _check_element(spec, element)
    if isinstance(element, DiscretePath):
        if element.values[0] != 0.0:
            return float("inf")
        return float(np.sum(np.diff(element.values) ** 2) / element.grid.dt)
    return float(np.sum((element.values / element.weights) ** 2))


def scale(spec: GaussianMeasureSpec, new_eps: float) -> GaussianMeasureSpec:
    """Same reference measure with the noise scale replaced by ``new_eps``."""
    if not new_eps > 0:
        raise ValueError("noise scale must be positive")
    return replace(spec, noise_scale=float(new_eps))


def sample_array(spec: GaussianMeasureSpec, rng_seed: int, count: int) -> np.ndarray:
    """
    Draw ``count`` samples of ``mu_0^eps`` as a ``(count, dim)`` array.

    Normals are drawn in fixed-size chunks, each from its own stream spawned
    off ``rng_seed``, so the output does not depend on the worker count.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    eps = spec.noise_scale
    if isinstance(spec.variant, WienerPath):
        grid = spec.variant.grid
        xi = chunked_normals(rng_seed, count, grid.n_intervals)
        out = np.zeros((count, grid.n_nodes))
        np.cumsum(xi, axis=1, out=out[:, 1:])
        out[:, 1:] *= eps * np.sqrt(grid.dt)
        return out
    weights = spec.variant.weights
    xi = chunked_normals(rng_seed, count, weights.size)
    return eps * weights * xi


def sample(spec: GaussianMeasureSpec, rng_seed: int, count: int) -> list:
    """Like :func:`sample_array` but wrapped in path/sequence objects."""
    arr = sample_array(spec, rng_seed, count)
    if isinstance(spec.variant, WienerPath):
        return [DiscretePath(spec.variant.grid, row) for row in arr]
    return [WeightedSequence(spec.variant.weights, row) for row in arr]
