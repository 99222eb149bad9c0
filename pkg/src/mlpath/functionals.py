"""
Onsager-Machlup and Freidlin-Wentzell functionals for tilted Gaussian measures.

Sign convention
---------------
A tilted measure is stored through the exponent ``F^eps`` of

    d mu^eps / d mu_0^eps  proportional to  exp(-F^eps / eps^2),

so the OM functional is ``F^eps / eps^2 + |z|^2 / (2 eps^2)`` and the FW
functional is ``F_0 + |z|^2 / 2`` (up to the infimum shift).  The Girsanov
density of ``dX = b(X) dt + eps dB`` has a plus sign in its exponent; after
the Stratonovich conversion this gives

    F_0(z) = -(int b(z) o dz - 1/2 int b(z)^2 dt),     F_2(z) = int b'(z) dt,

with ``F^eps = F_0 + eps^2/2 F_2``.  This is the only place where the SDE
exponent is negated.

Discretization
--------------
Paths are nodal values on a uniform grid.  On interval ``i`` the slope is the
forward difference ``d_i`` and the drift is the trapezoid average
``(b(z_i) + b(z_{i+1})) / 2``.  With this choice the pathwise Stratonovich
integral is the trapezoid sum, and the three routes to the SDE rate function
(direct, Girsanov residual, tilted Gaussian) agree to round-off.  Integrals of
``b'`` use the trapezoid rule on nodes.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .measure import (
    DiscretePath,
    GaussianMeasureSpec,
    TimeGrid,
    WienerPath,
    cm_norm_sq,
)

__all__ = [
    "DriftModel",
    "FunctionalValue",
    "Term",
    "TiltingExpansion",
    "PathObjective",
    "sde_expansion",
    "om_tilted",
    "fw_tilted",
    "om_sde",
    "fw_sde",
    "pointwise_gap",
    "fw_girsanov_residual",
    "sde_girsanov_map",
    "om_correction",
    "stochastic_integral",
    "girsanov_log_density",
    "fw_objective",
    "om_objective",
    "tilted_objective",
]

INF = float("inf")


@dataclass(frozen=True, eq=False)
class DriftModel:
    """
    Scalar drift ``b`` with derivative ``b_prime``.

    ``b_second`` is only needed for gradients of the OM correction term; when
    omitted it is approximated by central differences of ``b_prime``.
    Callables must accept numpy arrays.
    """

    b: Callable[[np.ndarray], np.ndarray]
    b_prime: Callable[[np.ndarray], np.ndarray]
    name: str = "drift"
    b_second: Optional[Callable[[np.ndarray], np.ndarray]] = None
    check_range: tuple = (-2.0, 2.0)

    def __post_init__(self):
        self.check_derivative()

    def check_derivative(self, points: int = 16, seed: int = 12345, rtol: float = 1e-6):
        rng = np.random.default_rng(seed)
        x = rng.uniform(*self.check_range, size=points)
        h = 1e-5 * np.maximum(1.0, np.abs(x))
        with np.errstate(invalid="ignore", over="ignore"):
            fd = (self._b(x + h) - self._b(x - h)) / (2 * h)
        exact = self._bp(x)
        if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(exact))):
            raise ValueError(f"drift {self.name!r} is not finite on {self.check_range}")
        err = np.abs(fd - exact) / np.maximum(1.0, np.abs(exact))
        if np.max(err) > rtol:
            raise ValueError(
                f"b_prime of drift {self.name!r} disagrees with finite differences "
                f"(max relative error {np.max(err):.3g})"
            )

    def _b(self, x):
        return np.asarray(self.b(x), dtype=float) * np.ones_like(x, dtype=float)

    def _bp(self, x):
        return np.asarray(self.b_prime(x), dtype=float) * np.ones_like(x, dtype=float)

    def __call__(self, x):
        return self._b(np.asarray(x, dtype=float))

    def derivative(self, x):
        return self._bp(np.asarray(x, dtype=float))

    def second_derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.b_second is not None:
            return np.asarray(self.b_second(x), dtype=float) * np.ones_like(x)
        h = 1e-5 * np.maximum(1.0, np.abs(x))
        return (self._bp(x + h) - self._bp(x - h)) / (2 * h)


@dataclass
class FunctionalValue:
    """Extended-real value together with its labelled addends."""

    value: float
    components: dict = field(default_factory=dict)

    @classmethod
    def from_components(cls, **components) -> "FunctionalValue":
        comps = {k: float(v) for k, v in components.items()}
        if any(v == INF for v in comps.values()):
            return cls(INF, comps)
        return cls(math.fsum(comps.values()), comps)

    @classmethod
    def infinite(cls, reason: str = "outside_cameron_martin") -> "FunctionalValue":
        return cls(INF, {reason: INF})

    def __float__(self):
        return float(self.value)

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.value)


# -- discrete building blocks ------------------------------------------------


def _values(z) -> np.ndarray:
    return z.values if isinstance(z, DiscretePath) else np.asarray(z, dtype=float)


def _trapezoid(f: np.ndarray, dt: float) -> float:
    return dt * (math.fsum(f[1:-1]) + 0.5 * (f[0] + f[-1]))


def _avg(f: np.ndarray) -> np.ndarray:
    return 0.5 * (f[..., 1:] + f[..., :-1])


def _residuals(drift: DriftModel, z: np.ndarray, dt: float) -> np.ndarray:
    return np.diff(z) / dt - _avg(drift(z))


def _fw_value(drift, z, dt) -> float:
    r = _residuals(drift, z, dt)
    return 0.5 * dt * math.fsum(r * r)


def _fw_gradient(drift, z, dt) -> np.ndarray:
    r = _residuals(drift, z, dt)
    left = np.concatenate(([0.0], r))
    right = np.concatenate((r, [0.0]))
    return (left - right) - 0.5 * dt * drift.derivative(z) * (left + right)


def _gauss_newton_band(drift, z, dt) -> tuple[np.ndarray, np.ndarray]:
    """
    Tridiagonal ``J^T (dt I) J`` for the residuals ``r_i = d_i - bbar_i``.

    Returned as ``(diag, off)`` over all nodes; ``off[j]`` couples ``j, j+1``.
    """
    bp = drift.derivative(z)
    a = -1.0 / dt - 0.5 * bp[:-1]
    c = 1.0 / dt - 0.5 * bp[1:]
    diag = np.zeros(z.size)
    diag[1:] += dt * c * c
    diag[:-1] += dt * a * a
    return diag, dt * a * c


def _trap_weights(n_nodes: int) -> np.ndarray:
    w = np.ones(n_nodes)
    w[0] = w[-1] = 0.5
    return w


def _correction_value(drift, z, dt) -> float:
    return 0.5 * _trapezoid(drift.derivative(z), dt)


def _correction_gradient(drift, z, dt) -> np.ndarray:
    return 0.5 * dt * _trap_weights(z.size) * drift.second_derivative(z)


def _check_start(z: np.ndarray, start: float) -> bool:
    return z[0] == start


# -- tilting expansions -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Term:
    """A functional of nodal values with an optional analytic gradient."""

    value: Callable[[np.ndarray], float]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, z: np.ndarray) -> float:
        return float(self.value(z))

    def grad(self, z: np.ndarray, h: float = 1e-6) -> np.ndarray:
        if self.gradient is not None:
            return np.asarray(self.gradient(z), dtype=float)
        g = np.empty_like(z)
        zp = z.copy()
        for j in range(z.size):
            zp[j] = z[j] + h
            fp = self.value(zp)
            zp[j] = z[j] - h
            fm = self.value(zp)
            zp[j] = z[j]
            g[j] = (fp - fm) / (2 * h)
        return g


ZERO_TERM = Term(lambda z: 0.0, lambda z: np.zeros_like(z))


class TiltingExpansion:
    """
    ``F^eps = sum_{i=0}^{n} eps^i / i! * F_i + eps^n R_n(eps, .)``.

    ``moment_params`` carries the declared exponential-moment constants; they
    are recorded, never checked.
    """

    def __init__(
        self,
        terms: Sequence[Term],
        remainder: Optional[Callable[[float, np.ndarray], float]] = None,
        moment_params: Optional[Sequence[float]] = None,
        name: str = "expansion",
    ):
        if len(terms) < 1:
            raise ValueError("an expansion needs at least F_0")
        self.terms = tuple(terms)
        self.order = len(self.terms) - 1
        self.remainder = remainder
        if moment_params is None:
            moment_params = (1.0,) * len(self.terms)
        if len(moment_params) != len(self.terms) or any(g <= 0 for g in moment_params):
            raise ValueError("moment_params must be positive, one per term")
        self.moment_params = tuple(float(g) for g in moment_params)
        self.name = name
        self._shift_cache: dict = {}
        self._shift_lock = threading.Lock()

    def weights(self, eps: float) -> list[float]:
        return [eps**i / math.factorial(i) for i in range(self.order + 1)]

    def evaluate(self, z: np.ndarray, eps: float) -> float:
        parts = [w * t(z) for w, t in zip(self.weights(eps), self.terms) if w != 0.0]
        if self.remainder is not None:
            parts.append(eps**self.order * float(self.remainder(eps, z)))
        return math.fsum(parts)

    def gradient(self, z: np.ndarray, eps: float) -> np.ndarray:
        g = np.zeros_like(z)
        for w, t in zip(self.weights(eps), self.terms):
            if w != 0.0 and t is not ZERO_TERM:
                g += w * t.grad(z)
        if self.remainder is not None:
            rem = Term(lambda y: self.remainder(eps, y))
            g += eps**self.order * rem.grad(z)
        return g

    @staticmethod
    def zero() -> "TiltingExpansion":
        return TiltingExpansion([ZERO_TERM], name="zero")


def sde_expansion(drift: DriftModel, grid: TimeGrid) -> TiltingExpansion:
    """Order-2 expansion of the SDE density: ``F_1 = 0``, ``F_2 = int b'``, ``R_2 = 0``."""
    dt = grid.dt

    def f0(z):
        d = np.diff(z) / dt
        bbar = _avg(drift(z))
        return dt * math.fsum(-d * bbar + 0.5 * bbar * bbar)

    def f0_grad(z):
        # F_0 = FW - |z|^2/2, and both gradients are available in closed form
        d = np.diff(z) / dt
        cm = np.concatenate(([0.0], d)) - np.concatenate((d, [0.0]))
        return _fw_gradient(drift, z, dt) - cm

    def f2(z):
        return _trapezoid(drift.derivative(z), dt)

    def f2_grad(z):
        return dt * _trap_weights(z.size) * drift.second_derivative(z)

    return TiltingExpansion(
        [Term(f0, f0_grad), ZERO_TERM, Term(f2, f2_grad)],
        name=f"sde[{drift.name}]",
    )


def _wiener_grid(spec: GaussianMeasureSpec, z: DiscretePath) -> TimeGrid:
    if not isinstance(spec.variant, WienerPath):
        raise TypeError("tilted path functionals need a Wiener reference measure")
    if not isinstance(z, DiscretePath) or z.grid != spec.variant.grid:
        raise ValueError("path grid does not match the measure grid")
    return z.grid


def om_tilted(spec, expansion: TiltingExpansion, z: DiscretePath, eps: float) -> FunctionalValue:
    """OM functional of ``exp(-F^eps / eps^2) mu_0^eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    _wiener_grid(spec, z)
    norm = cm_norm_sq(spec, z)
    if norm == INF:
        return FunctionalValue.infinite()
    return FunctionalValue.from_components(
        tilt=expansion.evaluate(z.values, eps) / eps**2,
        cm_half_norm=0.5 * norm / eps**2,
    )


def fw_tilted(
    spec,
    expansion: TiltingExpansion,
    z: DiscretePath,
    shifted: bool = True,
    **minimize_opts,
) -> FunctionalValue:
    """
    FW functional ``F_0 + |z|^2/2 - inf(F_0 + |.|^2/2)``.

    The infimum is computed once per expansion and grid by multi-start
    minimization over paths pinned at zero, then cached.  With
    ``shifted=False`` the constant is left out.
    """
    grid = _wiener_grid(spec, z)
    norm = cm_norm_sq(spec, z)
    if norm == INF:
        return FunctionalValue.infinite()
    comps = {"f0": expansion.terms[0](z.values), "cm_half_norm": 0.5 * norm}
    if shifted:
        comps["shift"] = -infimum_shift(expansion, grid, **minimize_opts)
    return FunctionalValue.from_components(**comps)


def infimum_shift(expansion: TiltingExpansion, grid: TimeGrid, **minimize_opts) -> float:
    key = (grid, tuple(sorted(minimize_opts.items())))
    with expansion._shift_lock:
        if key in expansion._shift_cache:
            return expansion._shift_cache[key]
        from .variational import Constraints, multi_start

        obj = tilted_objective(expansion, grid, eps=0.0)
        t = grid.nodes
        starts = [
            DiscretePath(grid, np.zeros(grid.n_nodes)),
            DiscretePath(grid, t / grid.horizon),
            DiscretePath(grid, -t / grid.horizon),
        ]
        found = multi_start(obj, starts, Constraints(pin_start=0.0), **minimize_opts)
        shift = found[0].value
        expansion._shift_cache[key] = shift
        return shift


# -- SDE functionals ----------------------------------------------------------


def om_sde(drift: DriftModel, z: DiscretePath, eps: float, start: float = 0.0) -> FunctionalValue:
    """``(1/2eps^2) int (z' - b(z))^2 dt + 1/2 int b'(z) dt`` on paths starting at ``start``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    zv, dt = z.values, z.grid.dt
    if not _check_start(zv, start):
        return FunctionalValue.infinite()
    return FunctionalValue.from_components(
        residual=_fw_value(drift, zv, dt) / eps**2,
        correction=_correction_value(drift, zv, dt),
    )


def fw_sde(drift: DriftModel, z: DiscretePath, start: float = 0.0) -> FunctionalValue:
    """``1/2 int (z' - b(z))^2 dt`` on paths starting at ``start``."""
    zv = z.values
    if not _check_start(zv, start):
        return FunctionalValue.infinite()
    return FunctionalValue.from_components(residual=_fw_value(drift, zv, z.grid.dt))


def om_correction(drift: DriftModel, z: DiscretePath) -> float:
    """Trapezoid value of ``1/2 int b'(z(t)) dt``."""
    return _correction_value(drift, z.values, z.grid.dt)


def pointwise_gap(drift: DriftModel, z: DiscretePath, eps: float, start: float = 0.0) -> float:
    """``eps^2 OM_eps(z) - FW(z)``; equals ``eps^2/2 int b'(z) dt``."""
    om = om_sde(drift, z, eps, start)
    fw = fw_sde(drift, z, start)
    if not (om.is_finite and fw.is_finite):
        return float("nan")
    # combine component-wise so the residual parts cancel exactly
    return eps**2 * om.components["correction"] + (
        eps**2 * om.components["residual"] - fw.components["residual"]
    )


def sde_girsanov_map(drift: DriftModel) -> Callable[[DiscretePath], DiscretePath]:
    """``H(z)(t) = int_0^t b(z(s)) ds`` (cumulative trapezoid)."""

    def h_of_z(z: DiscretePath) -> DiscretePath:
        inc = z.grid.dt * _avg(drift(z.values))
        return DiscretePath(z.grid, np.concatenate(([0.0], np.cumsum(inc))))

    return h_of_z


def fw_girsanov_residual(spec, h_of_z: Callable[[DiscretePath], DiscretePath], z) -> FunctionalValue:
    """``1/2 |z - H(z)|^2`` in the Cameron-Martin norm of ``spec``."""
    _wiener_grid(spec, z)
    if cm_norm_sq(spec, z) == INF:
        return FunctionalValue.infinite()
    hz = h_of_z(z)
    if not isinstance(hz, DiscretePath) or hz.grid != z.grid:
        raise ValueError("H(z) must be a path on the same grid")
    diff = z.values - hz.values
    if diff[0] != 0.0:
        return FunctionalValue.infinite()
    d = np.diff(diff)
    return FunctionalValue.from_components(residual=0.5 * math.fsum(d * d) / z.grid.dt)


def stochastic_integral(drift: DriftModel, values: np.ndarray, scheme: str) -> np.ndarray:
    """
    ``int b(z) dz`` along rows of ``values``.

    ``ito_left`` evaluates ``b`` at the left node, ``stratonovich_trapezoid``
    at the average of both nodes.
    """
    values = np.asarray(values, dtype=float)
    dz = np.diff(values, axis=-1)
    bz = drift(values)
    if scheme == "ito_left":
        return np.sum(bz[..., :-1] * dz, axis=-1)
    if scheme == "stratonovich_trapezoid":
        return np.sum(_avg(bz) * dz, axis=-1)
    raise ValueError(f"unknown scheme {scheme!r}")


def log_density_array(drift, values, dt: float, eps: float, scheme: str) -> np.ndarray:
    """Vectorized :func:`girsanov_log_density` over the rows of ``values``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    values = np.asarray(values, dtype=float)
    bz = drift(values)
    stoch = stochastic_integral(drift, values, scheme)
    if scheme == "ito_left":
        quad = 0.5 * dt * np.sum(bz[..., :-1] ** 2, axis=-1)
        return (stoch - quad) / eps**2
    bbar = _avg(bz)
    quad = 0.5 * dt * np.sum(bbar * bbar, axis=-1)
    bp = drift.derivative(values)
    corr = dt * (np.sum(bp, axis=-1) - 0.5 * (bp[..., 0] + bp[..., -1]))
    return (stoch - quad) / eps**2 - 0.5 * corr


def girsanov_log_density(drift: DriftModel, path: DiscretePath, eps: float, scheme: str = "ito_left") -> float:
    """
    Log of ``d mu^eps / d mu_0^eps`` at ``path``.

    ``ito_left`` discretizes ``(1/eps^2)(int b dz - 1/2 int b^2 dt)`` with
    left-point sums, which makes the discrete weight an exact martingale.
    ``stratonovich_trapezoid`` uses the pathwise form and subtracts
    ``1/2 int b'``; it equals ``-F^eps(path) / eps^2`` for :func:`sde_expansion`.
    """
    return float(log_density_array(drift, path.values, path.grid.dt, eps, scheme))


# -- objectives for the optimizer --------------------------------------------


class PathObjective:
    """A discretized functional of nodal values with its gradient."""

    def __init__(
        self,
        grid: TimeGrid,
        value,
        gradient,
        start: Optional[float] = 0.0,
        label: str = "objective",
        metric=None,
    ):
        self.grid = grid
        self._value = value
        self._gradient = gradient
        self.start = start
        self.label = label
        # optional z -> (diag, off): a positive tridiagonal metric used by the
        # optimizer as preconditioner
        self.metric = metric

    def value(self, z) -> float:
        zv = _values(z)
        if self.start is not None and zv[0] != self.start:
            return INF
        return float(self._value(zv))

    def __call__(self, z) -> float:
        return self.value(z)

    def gradient(self, z) -> np.ndarray:
        return np.asarray(self._gradient(_values(z)), dtype=float)

    def scaled(self, factor: float) -> "PathObjective":
        return PathObjective(
            self.grid,
            lambda z: factor * self._value(z),
            lambda z: factor * self._gradient(z),
            self.start,
            f"{factor:g}*{self.label}",
            None if self.metric is None else _scaled_metric(self.metric, factor),
        )

    def shifted(self, constant: float) -> "PathObjective":
        return PathObjective(
            self.grid,
            lambda z: self._value(z) + constant,
            self._gradient,
            self.start,
            f"{self.label}{constant:+g}",
            self.metric,
        )


def _scaled_metric(metric, factor):
    if factor <= 0:
        return None

    def scaled(z):
        diag, off = metric(z)
        return factor * diag, factor * off

    return scaled


def fw_objective(drift: DriftModel, grid: TimeGrid, start: float = 0.0) -> PathObjective:
    dt = grid.dt
    return PathObjective(
        grid,
        lambda z: _fw_value(drift, z, dt),
        lambda z: _fw_gradient(drift, z, dt),
        start,
        f"FW[{drift.name}]",
        lambda z: _gauss_newton_band(drift, z, dt),
    )


def om_objective(drift: DriftModel, grid: TimeGrid, eps: float, start: float = 0.0, scaled: bool = True) -> PathObjective:
    """
    OM functional of the SDE as an objective.

    With ``scaled=True`` (default) this is ``eps^2 * OM_eps``, which has the
    same minimizers and stays O(1) as ``eps -> 0``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    dt = grid.dt
    e2 = eps**2

    def value(z):
        return _fw_value(drift, z, dt) + e2 * _correction_value(drift, z, dt)

    def grad(z):
        return _fw_gradient(drift, z, dt) + e2 * _correction_gradient(drift, z, dt)

    obj = PathObjective(
        grid,
        value,
        grad,
        start,
        f"eps2*OM[{drift.name},eps={eps:g}]",
        lambda z: _gauss_newton_band(drift, z, dt),
    )
    return obj if scaled else obj.scaled(1.0 / e2)


def tilted_objective(expansion: TiltingExpansion, grid: TimeGrid, eps: float = 0.0) -> PathObjective:
    """``F^eps + |z|^2/2`` (that is ``eps^2 OM_eps``; ``eps=0`` gives the unshifted FW)."""
    dt = grid.dt

    def value(z):
        d = np.diff(z) / dt
        return expansion.evaluate(z, eps) + 0.5 * dt * math.fsum(d * d)

    def grad(z):
        d = np.diff(z) / dt
        cm = np.concatenate(([0.0], d)) - np.concatenate((d, [0.0]))
        return expansion.gradient(z, eps) + cm

    return PathObjective(grid, value, grad, 0.0, f"tilted[{expansion.name},eps={eps:g}]")
