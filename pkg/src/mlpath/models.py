"""
Concrete problems: drift presets, a linear path-dependent SDE and a system of
random algebraic equations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .functionals import DriftModel, FunctionalValue, fw_girsanov_residual
from .measure import DiscretePath, GaussianMeasureSpec, TimeGrid, WeightedSequence, WienerPath

__all__ = [
    "DRIFT_PRESETS",
    "preset_drift",
    "PathDependentModel",
    "path_dependent_cm_half_norm",
    "path_dependent_map",
    "path_dependent_om",
    "path_dependent_om_constant",
    "AlgebraicSystem",
    "MAP_PRESETS",
    "preset_map",
    "harmonic_weights",
    "algebraic_fw",
    "algebraic_solve",
    "AlgebraicSolveError",
]


def _zero() -> DriftModel:
    return DriftModel(
        b=lambda x: np.zeros_like(x),
        b_prime=lambda x: np.zeros_like(x),
        b_second=lambda x: np.zeros_like(x),
        name="zero",
    )


def _ou(theta: float = 1.0) -> DriftModel:
    theta = float(theta)
    return DriftModel(
        b=lambda x: -theta * x,
        b_prime=lambda x: np.full_like(x, -theta),
        b_second=lambda x: np.zeros_like(x),
        name=f"ou({theta:g})",
    )


def _double_well() -> DriftModel:
    return DriftModel(
        b=lambda x: x - x**3,
        b_prime=lambda x: 1.0 - 3.0 * x**2,
        b_second=lambda x: -6.0 * x,
        name="double_well",
    )


DRIFT_PRESETS: dict[str, Callable[..., DriftModel]] = {
    "zero": _zero,
    "ou": _ou,
    "double_well": _double_well,
}


def preset_drift(name: str, **params) -> DriftModel:
    """
    Look up a drift by name: ``zero`` (b = 0), ``ou`` (b = -theta x) or
    ``double_well`` (b = x - x^3).
    """
    try:
        factory = DRIFT_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown drift preset {name!r}; choose from {sorted(DRIFT_PRESETS)}"
        ) from None
    return factory(**params)


# -- linear path-dependent SDE -------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathDependentModel:
    """
    ``X(t) = int_0^t a(s) eps B(s) ds + eps B(t)`` with ``A' = a``.

    Both callables must accept numpy arrays.
    """

    a: Callable[[np.ndarray], np.ndarray]
    A: Callable[[np.ndarray], np.ndarray]
    grid: TimeGrid

    def __post_init__(self):
        t = self.grid.nodes
        probe = np.linspace(t[0], t[-1], 17)
        h = 1e-5 * max(1.0, self.grid.horizon)
        fd = (self._A(probe + h) - self._A(probe - h)) / (2 * h)
        exact = self._a(probe)
        err = np.abs(fd - exact) / np.maximum(1.0, np.abs(exact))
        if np.max(err) > 1e-6:
            raise ValueError(f"A' does not match a (max relative error {np.max(err):.3g})")

    def _a(self, t):
        return np.asarray(self.a(t), dtype=float) * np.ones_like(t)

    def _A(self, t):
        return np.asarray(self.A(t), dtype=float) * np.ones_like(t)

    @classmethod
    def constant(cls, coefficient: float, grid: TimeGrid) -> "PathDependentModel":
        c = float(coefficient)
        return cls(a=lambda t: np.full_like(t, c), A=lambda t: c * t, grid=grid)


def path_dependent_cm_half_norm(model: PathDependentModel, z: DiscretePath) -> float:
    """
    ``1/2 int_0^T (z'(t) - a(t) int_0^t exp(-(A(t)-A(s))) z'(s) ds)^2 dt``.

    ``z'`` is the piecewise-constant forward difference.  The inner integral
    is a trapezoid rule in ``s`` on every interval, the outer one a trapezoid
    rule in ``t`` on every interval; the cost is O(n^2).
    """
    if z.grid != model.grid:
        raise ValueError("path grid does not match the model grid")
    zv = z.values
    if zv[0] != 0.0:
        return float("inf")
    grid = model.grid
    t, dt = grid.nodes, grid.dt
    d = np.diff(zv) / dt
    A = model._A(t)
    a = model._a(t)
    n = grid.n_intervals
    inner = np.zeros(n + 1)
    for k in range(1, n + 1):
        kern = np.exp(-(A[k] - A[: k + 1]))
        inner[k] = 0.5 * dt * np.dot(d[:k], kern[:-1] + kern[1:])
    g = a * inner
    left = d - g[:-1]
    right = d - g[1:]
    return 0.5 * 0.5 * dt * math.fsum(left * left + right * right)


def path_dependent_map(model: PathDependentModel) -> Callable[[DiscretePath], DiscretePath]:
    """
    Path-dependent drift integral ``H(z) = z - B(z)``.

    ``B(z)`` solves ``B' = z' - a B``, ``B(0) = 0``; it is stepped with the
    exact exponential factor and a trapezoid weight for the forcing, an
    update independent of the double quadrature above.
    """

    def h_of_z(z: DiscretePath) -> DiscretePath:
        grid = z.grid
        t, dt = grid.nodes, grid.dt
        A = model._A(t)
        decay = np.exp(-(A[1:] - A[:-1]))
        d = np.diff(z.values) / dt
        B = np.zeros(grid.n_nodes)
        for i in range(grid.n_intervals):
            B[i + 1] = decay[i] * B[i] + 0.5 * dt * (decay[i] + 1.0) * d[i]
        return DiscretePath(grid, z.values - B)

    return h_of_z


def path_dependent_om(model: PathDependentModel, z: DiscretePath, eps: float) -> FunctionalValue:
    """
    OM functional of the path-dependent model through the Girsanov route,
    ``(1/2eps^2) |z - H(z)|^2``.

    The quadratic covariation term ``1/2 int a dt`` does not depend on ``z``
    and is dropped (OM functionals are defined up to additive constants); see
    :func:`path_dependent_om_constant`.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    spec = GaussianMeasureSpec(WienerPath(model.grid), eps)
    fw = fw_girsanov_residual(spec, path_dependent_map(model), z)
    if not fw.is_finite:
        return fw
    return FunctionalValue.from_components(residual=fw.value / eps**2)


def path_dependent_om_constant(model: PathDependentModel) -> float:
    """The z-independent term ``1/2 int_0^T a dt`` left out of :func:`path_dependent_om`."""
    a = model._a(model.grid.nodes)
    return 0.5 * model.grid.dt * (math.fsum(a[1:-1]) + 0.5 * (a[0] + a[-1]))


# -- random algebraic equations ------------------------------------------------

VectorMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _linear_map(kappa: float) -> VectorMap:
    kappa = float(kappa)
    if abs(kappa) > 0.9:
        raise ValueError("linear map needs |kappa| <= 0.9 to stay a contraction")
    return lambda x, n: kappa * x


def _tanh_map(scale: float = 0.9) -> VectorMap:
    scale = float(scale)
    if abs(scale) > 0.9:
        raise ValueError("tanh map needs |scale| <= 0.9 to stay a contraction")
    return lambda x, n: scale * np.tanh(x)


MAP_PRESETS: dict[str, Callable[..., VectorMap]] = {
    "zero": lambda: (lambda x, n: np.zeros_like(x)),
    "linear": _linear_map,
    "tanh": _tanh_map,
}


def preset_map(name: str, **params) -> VectorMap:
    try:
        factory = MAP_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown map preset {name!r}; choose from {sorted(MAP_PRESETS)}") from None
    return factory(**params)


def harmonic_weights(N: int) -> np.ndarray:
    """``a_n = 1/n`` for ``n = 1..N``."""
    return 1.0 / np.arange(1, int(N) + 1, dtype=float)


@dataclass(frozen=True, eq=False)
class AlgebraicSystem:
    """
    ``x_n = f_n(x_n) + eps a_n xi_n`` for ``n = 1..N``.

    ``maps(x, n)`` evaluates ``f_n(x_n)`` for a vector of coordinates ``x`` and
    their 1-based indices ``n``.
    """

    weights: np.ndarray
    maps: VectorMap = field(default=MAP_PRESETS["zero"]())

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w == 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonzero")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def truncation(self) -> int:
        return self.weights.size

    @property
    def indices(self) -> np.ndarray:
        return np.arange(1, self.truncation + 1)

    def f(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.maps(np.asarray(x, dtype=float), self.indices), dtype=float)


def algebraic_fw(system: AlgebraicSystem, phi) -> tuple[float, WeightedSequence]:
    """
    ``1/2 sum (phi_n - f_n(phi_n))^2 a_n^2`` together with ``z_n = a_n^2 phi_n``.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != system.weights.shape:
        raise ValueError("phi must have one entry per weight")
    r = (phi - system.f(phi)) * system.weights
    value = 0.5 * math.fsum(r * r)
    return value, WeightedSequence.from_coordinates(system.weights, phi)


class AlgebraicSolveError(RuntimeError):
    def __init__(self, failed: np.ndarray, residuals: np.ndarray):
        self.failed = failed
        self.residuals = residuals
        super().__init__(
            f"{failed.size} coordinate(s) did not converge; first index {int(failed[0]) + 1}"
        )


def algebraic_solve(
    system: AlgebraicSystem,
    noise: WeightedSequence,
    eps: float,
    tol: float = 1e-12,
    max_iter: int = 10_000,
) -> WeightedSequence:
    """
    Solve ``x_n = f_n(x_n) + eps * noise_n`` by fixed-point iteration.

    ``noise`` holds ``a_n xi_n``, a draw of the reference measure.  Coordinates
    that miss ``tol`` after ``max_iter`` sweeps raise
    :class:`AlgebraicSolveError` listing them.
    """
    if noise.truncation != system.truncation:
        raise ValueError("noise length does not match the system")
    forcing = eps * noise.values
    x = forcing.copy()
    active = np.arange(x.size)
    idx = system.indices
    for _ in range(max_iter):
        fx = np.asarray(system.maps(x[active], idx[active]), dtype=float)
        x_new = fx + forcing[active]
        x[active] = x_new
        res = np.abs(x[active] - system.maps(x[active], idx[active]) - forcing[active])
        active = active[res > tol]
        if active.size == 0:
            break
    res = np.abs(x - system.f(x) - forcing)
    failed = np.flatnonzero(res > tol)
    if failed.size:
        raise AlgebraicSolveError(failed, res[failed])
    return WeightedSequence(system.weights, x)
