"""
Minimizers of discretized path functionals and small-noise diagnostics.

The optimizer is gradient descent with Armijo backtracking in a
variable metric.  Objectives may supply a positive tridiagonal metric (the SDE
functionals supply the Gauss-Newton matrix of their residuals); otherwise the
Cameron-Martin Gram matrix of ``int z'^2 dt`` on the free nodes is used.  Both
keep the iteration count essentially independent of the grid size.

Convergence is measured on the sup-norm of the L2 gradient, i.e. the raw
gradient divided by the lumped nodal mass ``w_j dt``.  At interior nodes this
is the discrete Euler-Lagrange residual.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.stats import qmc

from ._parallel import pmap
from .functionals import DriftModel, PathObjective, fw_objective, om_objective
from .measure import DiscretePath, TimeGrid

__all__ = [
    "DomainError",
    "Constraints",
    "MinimizeResult",
    "EpsSweepResult",
    "GammaRow",
    "GammaReport",
    "minimize",
    "multi_start",
    "eps_sweep",
    "gamma_diagnostic",
    "euler_lagrange_residual",
    "coercivity_probe",
    "straight_line",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000
# relative size of objective changes treated as round-off in the line search
ROUNDOFF = 1e-11
APPROX_DELTA = 0.1


class DomainError(ValueError):
    """Raised when an optimization starts outside the objective's domain."""


@dataclass(frozen=True)
class Constraints:
    pin_start: Optional[float] = 0.0
    pin_end: Optional[float] = None

    def __post_init__(self):
        for name in ("pin_start", "pin_end"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} must be finite")

    def free_mask(self, n_nodes: int) -> np.ndarray:
        free = np.ones(n_nodes, dtype=bool)
        if self.pin_start is not None:
            free[0] = False
        if self.pin_end is not None:
            free[-1] = False
        return free

    def check(self, path: DiscretePath) -> None:
        if self.pin_start is not None and path.values[0] != self.pin_start:
            raise DomainError(
                f"start value {path.values[0]!r} violates pin_start={self.pin_start!r}"
            )
        if self.pin_end is not None and path.values[-1] != self.pin_end:
            raise DomainError(f"end value {path.values[-1]!r} violates pin_end={self.pin_end!r}")


@dataclass
class MinimizeResult:
    path: DiscretePath
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    start_label: str = "init"
    history: list = field(default_factory=list, repr=False)


@dataclass
class EpsSweepResult:
    entries: list  # (eps, MinimizeResult)
    fw_mode: MinimizeResult
    distances: list
    reference: Optional[MinimizeResult] = None
    reference_distances: Optional[list] = None

    @property
    def eps(self) -> list:
        return [e for e, _ in self.entries]


def straight_line(grid: TimeGrid, constraints: Constraints) -> DiscretePath:
    a = 0.0 if constraints.pin_start is None else constraints.pin_start
    b = a if constraints.pin_end is None else constraints.pin_end
    values = a + (b - a) * grid.nodes / grid.horizon
    values[0], values[-1] = a, b
    return DiscretePath(grid, values)


def _lumped_mass(free: np.ndarray, dt: float) -> np.ndarray:
    w = np.ones(free.size)
    w[0] = w[-1] = 0.5
    return w[free] * dt


def _cm_factor(free: np.ndarray, dt: float):
    """Banded Cholesky factor of the Cameron-Martin Gram matrix on free nodes."""
    n = free.size
    idx = np.flatnonzero(free)
    if np.any(np.diff(idx) != 1):
        raise ValueError("free nodes must be contiguous")
    ab = np.zeros((2, idx.size))
    # submatrix of the full Gram matrix (1/dt) * tridiag(-1, 2, -1), ends 1/dt
    ab[1] = np.where((idx > 0) & (idx < n - 1), 2.0, 1.0) / dt
    ab[0, 1:] = -1.0 / dt
    if free[0]:
        # an unpinned start leaves constants in the kernel; add the L2 mass
        ab[1] += _lumped_mass(free, dt)
    return cholesky_banded(ab, lower=False)


def _metric_factor(objective: PathObjective, z: np.ndarray, free: np.ndarray, dt: float):
    """Cholesky factor of the objective's own metric, or ``None`` if unusable."""
    if objective.metric is None:
        return None
    diag, off = objective.metric(z)
    idx = np.flatnonzero(free)
    ab = np.zeros((2, idx.size))
    ab[1] = diag[idx]
    ab[0, 1:] = off[idx[:-1]]
    if free[0]:
        ab[1] += _lumped_mass(free, dt)
    try:
        return cholesky_banded(ab, lower=False)
    except np.linalg.LinAlgError:
        return None


def minimize(
    objective: PathObjective,
    init: DiscretePath,
    constraints: Constraints = Constraints(),
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    armijo: float = 1e-4,
    max_backtracks: int = 60,
    start_label: str = "init",
) -> MinimizeResult:
    """
    Minimize ``objective`` over nodal values, holding pinned nodes fixed.

    Steps satisfy the Armijo condition.  Once objective differences fall
    below round-off (relative ``ROUNDOFF``) a step is accepted on the
    approximate Armijo test of Hager and Zhang instead, so the recorded values
    are non-increasing up to round-off.

    Raises :class:`DomainError` if ``init`` violates the pins or the objective
    is infinite there.  Running out of iterations, or a line search that can
    no longer decrease the objective, returns ``converged=False``.
    """
    constraints.check(init)
    grid = init.grid
    dt = grid.dt
    free = constraints.free_mask(grid.n_nodes)
    z = init.values.copy()
    f = objective.value(z)
    if not math.isfinite(f):
        raise DomainError("objective is infinite at the initial path")
    history = [f]
    if not free.any():
        return MinimizeResult(DiscretePath(grid, z), f, 0.0, 0, True, start_label, history)

    factor = _cm_factor(free, dt)
    mass = _lumped_mass(free, dt)
    alpha = 1.0
    converged = False
    it = 0
    gnorm = math.inf
    while True:
        g = objective.gradient(z)[free]
        gnorm = float(np.max(np.abs(g / mass)))
        if gnorm <= tol:
            converged = True
            break
        if it >= max_iter:
            break
        local = _metric_factor(objective, z, free, dt)
        p = -cho_solve_banded((factor if local is None else local, False), g)
        slope = float(g @ p)
        if not slope < 0:
            break
        alpha = min(1.0, 2.0 * alpha)
        trial = z.copy()
        noise = ROUNDOFF * max(1.0, abs(f))
        accepted = False
        for _ in range(max_backtracks):
            trial[free] = z[free] + alpha * p
            if np.array_equal(trial, z):
                break
            f_new = objective.value(trial)
            if f_new <= f + armijo * alpha * slope:
                accepted = True
                break
            if abs(f_new - f) <= noise:
                # value differences are below round-off; use the approximate
                # Armijo test on the directional derivative instead
                d_new = float(objective.gradient(trial)[free] @ p)
                if d_new <= (2 * APPROX_DELTA - 1) * slope:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        z, f = trial, f_new
        history.append(f)
        it += 1
    return MinimizeResult(DiscretePath(grid, z), f, gnorm, it, converged, start_label, history)


def _sort_key(res: MinimizeResult):
    return (res.value, tuple(res.path.values))


def multi_start(
    objective: PathObjective,
    starts: Sequence[DiscretePath],
    constraints: Constraints = Constraints(),
    dedup_radius: float = 1e-4,
    labels: Optional[Sequence[str]] = None,
    **opts,
) -> list[MinimizeResult]:
    """
    Run :func:`minimize` from every start and return the distinct minima.

    Minima closer than ``dedup_radius`` in sup-norm are merged (the lower
    value wins).  The result is sorted by value, ties broken by comparing
    nodal values lexicographically.
    """
    if len(starts) < 1:
        raise ValueError("multi_start needs at least one start")
    for s in starts:
        constraints.check(s)
    if labels is None:
        labels = [f"start{i}" for i in range(len(starts))]
    results = pmap(
        lambda job: minimize(objective, job[0], constraints, start_label=job[1], **opts),
        zip(starts, labels),
    )
    kept: list[MinimizeResult] = []
    for res in sorted(results, key=_sort_key):
        if all(res.path.sup_distance(k.path) > dedup_radius for k in kept):
            kept.append(res)
    return kept


def eps_sweep(
    drift: DriftModel,
    grid: TimeGrid,
    constraints: Constraints,
    eps_list: Sequence[float],
    init: Optional[DiscretePath] = None,
    fw_reference_factor: Optional[int] = None,
    **opts,
) -> EpsSweepResult:
    """
    Track the OM mode along a decreasing noise ladder and compare with the FW mode.

    Each OM minimization is warm-started from the previous mode; the FW mode
    is warm-started from the last OM mode so both stay on the same branch.
    With ``fw_reference_factor=k`` an additional FW minimization on the grid
    refined ``k`` times is run and distances to it are taken at the coarse
    nodes.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list or any(e <= 0 for e in eps_list):
        raise ValueError("eps_list must be non-empty and positive")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    start = 0.0 if constraints.pin_start is None else constraints.pin_start
    current = init if init is not None else straight_line(grid, constraints)
    entries = []
    for eps in eps_list:
        obj = om_objective(drift, grid, eps, start=start)
        res = minimize(obj, current, constraints, start_label=f"warm[eps={eps:g}]", **opts)
        entries.append((eps, res))
        current = res.path
    fw_mode = minimize(
        fw_objective(drift, grid, start), current, constraints, start_label="warm[fw]", **opts
    )
    distances = [res.path.sup_distance(fw_mode.path) for _, res in entries]
    reference = reference_distances = None
    if fw_reference_factor:
        k = int(fw_reference_factor)
        fine = grid.refine(k)
        fine_init = np.interp(fine.nodes, grid.nodes, fw_mode.path.values)
        fine_init[0], fine_init[-1] = fw_mode.path.values[0], fw_mode.path.values[-1]
        reference = minimize(
            fw_objective(drift, fine, start),
            DiscretePath(fine, fine_init),
            constraints,
            start_label=f"fine[x{k}]",
            **opts,
        )
        coarse = reference.path.values[::k]
        reference_distances = [
            float(np.max(np.abs(res.path.values - coarse))) for _, res in entries
        ]
    return EpsSweepResult(entries, fw_mode, distances, reference, reference_distances)


def euler_lagrange_residual(
    drift: DriftModel, z: DiscretePath, mode: str = "fw", eps: Optional[float] = None
) -> float:
    """
    Sup-norm of the discrete Euler-Lagrange residual at interior nodes.

    For ``mode="fw"`` the continuum equation is ``z'' = b(z) b'(z)``; for
    ``mode="om"`` the functional is ``eps^2 OM_eps`` and the equation gains
    ``eps^2/2 b''(z)``.  The start value of ``z`` is taken as its pin.
    """
    start = z.values[0]
    if mode == "fw":
        obj = fw_objective(drift, z.grid, start)
    elif mode == "om":
        if eps is None:
            raise ValueError("mode='om' needs eps")
        obj = om_objective(drift, z.grid, eps, start)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    g = obj.gradient(z)[1:-1] / z.grid.dt
    return float(np.max(np.abs(g))) if g.size else 0.0


@dataclass
class GammaRow:
    radius: float
    infima: list
    liminf: float
    limsup: float
    slack: float


@dataclass
class GammaReport:
    rows: list
    eps: list
    recovery_values: list
    recovery_limit: float
    limit_value: float
    recovery_gap: float

    def liminf_ok(self, slack: float) -> bool:
        return all(row.liminf >= self.limit_value - slack for row in self.rows)


def _extrapolate(eps: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares value at ``eps = 0`` of a polynomial of degree <= 2 in ``eps``."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    deg = min(2, eps.size - 1)
    if deg == 0:
        return float(values[0])
    basis = np.vander(eps, deg + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(basis, values, rcond=None)
    return float(coef[0])


def gamma_diagnostic(
    family: Callable[[float], PathObjective],
    z: DiscretePath,
    radii: Sequence[float],
    eps_list: Sequence[float],
    probes: int = 256,
    seed: int = 0,
    limit: Optional[PathObjective] = None,
    free: Optional[np.ndarray] = None,
) -> GammaReport:
    """
    Estimate the Gamma-lower and Gamma-upper limits of ``family`` at ``z``.

    For every radius the neighborhood infimum of each ``family(eps)`` is
    approximated by its minimum over ``probes`` scrambled-Sobol points in the
    sup-norm ball (plus the center).  The liminf/limsup over ``eps`` are taken
    as the min/max over the second half of the ladder.  The constant recovery
    sequence ``z_eps = z`` is extrapolated to ``eps = 0`` and compared with
    ``limit(z)`` when a limit functional is supplied.

    Probing cannot certify a Gamma-limit; the report only measures
    consistency with one.
    """
    radii = [float(r) for r in radii]
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly decreasing")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if free is None:
        free = np.ones(z.grid.n_nodes, dtype=bool)
        free[0] = False
    dim = int(free.sum())
    sobol = qmc.Sobol(d=dim, scramble=True, seed=seed)
    unit = 2.0 * sobol.random(probes) - 1.0
    functionals = [family(e) for e in eps_list]
    tail = slice(len(eps_list) // 2, None)

    recovery = [f.value(z) for f in functionals]
    recovery_limit = _extrapolate(eps_list, recovery)
    limit_value = limit.value(z) if limit is not None else recovery_limit

    def row_for(r: float) -> GammaRow:
        pts = np.tile(z.values, (probes + 1, 1))
        pts[1:, free] += r * unit
        infima = [min(f.value(p) for p in pts) for f in functionals]
        lo = min(infima[tail])
        hi = max(infima[tail])
        return GammaRow(r, infima, lo, hi, max(0.0, limit_value - lo))

    rows = pmap(row_for, radii)
    return GammaReport(
        rows, eps_list, recovery, recovery_limit, limit_value, abs(recovery_limit - limit_value)
    )


def coercivity_probe(
    objective: PathObjective,
    center: DiscretePath,
    constraints: Constraints = Constraints(),
    directions: int = 16,
    scales: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
    seed: int = 0,
) -> dict:
    """
    Heuristic sublevel-set boundedness check.

    Evaluates the objective along random smooth directions at growing
    distances from ``center`` and reports whether it grows without bound.
    This is not a proof of equicoercivity.
    """
    grid = center.grid
    free = constraints.free_mask(grid.n_nodes)
    rng = np.random.default_rng(seed)
    t = grid.nodes / grid.horizon
    growth = []
    for _ in range(directions):
        k = rng.integers(1, 6)
        v = np.sin(np.pi * k * t) * rng.standard_normal() + rng.standard_normal() * t
        v[~free] = 0.0
        if not np.any(v):
            continue
        v /= np.max(np.abs(v))
        vals = [objective.value(center.values + s * v) for s in scales]
        growth.append(vals)
    growth = np.asarray(growth)
    increasing = bool(np.all(np.diff(growth, axis=1) > 0)) if growth.size else True
    return {"values": growth.tolist(), "scales": list(scales), "coercive_hint": increasing}
