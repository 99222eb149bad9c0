"""
Monte Carlo checks: Euler-Maruyama ensembles, small-ball probability ratios,
rare-event decay rates and a Girsanov reweighting test.

Ensembles are lazy.  Paths are regenerated chunk by chunk from the seed, and
every chunk draws from its own stream, so reductions such as hit counts can
stream through 10^7 samples without holding them in memory.  The results do
not depend on ``MLPATH_THREADS``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ._parallel import chunk_generators, pmap
from .functionals import DriftModel, log_density_array
from .measure import DiscretePath, TimeGrid
from .models import preset_drift
from .variational import Constraints, fw_objective, minimize, straight_line

__all__ = [
    "Ensemble",
    "simulate",
    "RatioEstimate",
    "small_ball_ratio",
    "small_ball_ladder",
    "default_delta_ladder",
    "PathEvent",
    "RateEstimate",
    "ldp_rate",
    "fw_infimum_over_event",
    "WeightCheck",
    "girsanov_weight_check",
]

Z95 = 1.959963984540054
HIT_FLOOR = 100

Seed = Union[int, Sequence[int]]


def _em_chunk(drift: DriftModel, eps: float, grid: TimeGrid, x0: float, xi: np.ndarray) -> np.ndarray:
    rows = xi.shape[0]
    dt = grid.dt
    step = math.sqrt(dt)
    out = np.empty((rows, grid.n_nodes))
    out[:, 0] = x0
    for i in range(grid.n_intervals):
        x = out[:, i]
        out[:, i + 1] = x + drift(x) * dt + eps * (step * xi[:, i])
    return out


@dataclass(frozen=True, eq=False)
class Ensemble:
    """
    ``count`` Euler-Maruyama paths of ``dX = b(X) dt + eps dB``, ``X(0) = x0``.

    Nothing is simulated until paths are requested.  :meth:`map_chunks`
    streams over the ensemble; :attr:`values` materializes it as a
    ``(count, n_nodes)`` array.
    """

    drift: DriftModel
    eps: float
    grid: TimeGrid
    count: int
    seed: Seed
    x0: float = 0.0
    scheme: str = "euler_maruyama"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if not (self.eps >= 0 and math.isfinite(self.eps)):
            raise ValueError("eps must be finite and non-negative")
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def _jobs(self):
        return list(chunk_generators(self.seed, self.count, self.grid.n_intervals))

    def map_chunks(self, func: Callable[[int, int, np.ndarray], object]) -> list:
        """Apply ``func(lo, hi, paths)`` to every chunk; results in chunk order."""

        def run(job):
            lo, hi, rng = job
            xi = rng.standard_normal((hi - lo, self.grid.n_intervals))
            return func(lo, hi, _em_chunk(self.drift, self.eps, self.grid, self.x0, xi))

        return pmap(run, self._jobs())

    @cached_property
    def values(self) -> np.ndarray:
        out = np.empty((self.count, self.grid.n_nodes))

        def fill(lo, hi, paths):
            out[lo:hi] = paths

        self.map_chunks(fill)
        out.setflags(write=False)
        return out

    @property
    def paths(self) -> list:
        return [DiscretePath(self.grid, row) for row in self.values]

    def __eq__(self, other):
        if not isinstance(other, Ensemble):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None

    def to_csv(self, path) -> None:
        """Long format, columns ``sample_id, t, value``."""
        t = self.grid.nodes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "t", "value"])
            for k, row in enumerate(self.values):
                for ti, v in zip(t, row):
                    w.writerow([k, repr(float(ti)), repr(float(v))])


def simulate(
    drift: DriftModel, eps: float, grid: TimeGrid, count: int, seed: Seed, x0: float = 0.0
) -> Ensemble:
    """
    Euler-Maruyama ensemble ``X_{i+1} = X_i + b(X_i) dt + eps sqrt(dt) xi_i``.

    ``eps = 0`` gives the explicit Euler flow of ``z' = b(z)``.
    """
    return Ensemble(drift, float(eps), grid, int(count), seed, float(x0))


# -- small balls ---------------------------------------------------------------


@dataclass(frozen=True)
class RatioEstimate:
    """
    Estimate of ``P(|X - z1| <= delta) / P(|X - z2| <= delta)`` in sup-norm.

    The 95% interval comes from the delta method on the log-ratio, with the
    covariance of the two hit indicators, so ``ci_low <= point <= ci_high``.
    ``flags`` may contain ``"undefined"`` (no hits in the denominator),
    ``"delta_too_small"`` (fewer than 100 denominator hits) and
    ``"zero_numerator"``.
    """

    point: float
    ci_low: float
    ci_high: float
    hits1: int
    hits2: int
    both: int
    count: int
    delta: float
    flags: tuple = ()

    @property
    def log_point(self) -> float:
        return math.log(self.point) if self.point > 0 else -math.inf

    @property
    def log_half_width(self) -> float:
        """Half-width of the 95% interval for ``log(point)``."""
        if not self.point > 0:
            return math.inf
        return 0.5 * (math.log(self.ci_high) - math.log(self.ci_low))

    @property
    def reliable(self) -> bool:
        return not self.flags


def _ratio_from_counts(h1: int, h2: int, h12: int, n: int, delta: float) -> RatioEstimate:
    flags = []
    if h2 == 0:
        nan = float("nan")
        return RatioEstimate(nan, nan, nan, h1, h2, h12, n, delta, ("undefined", "delta_too_small"))
    if h2 < HIT_FLOOR:
        flags.append("delta_too_small")
    if h1 == 0:
        flags.append("zero_numerator")
        return RatioEstimate(0.0, 0.0, math.inf, h1, h2, h12, n, delta, tuple(flags))
    # delta method with multinomial covariance; the 1/n terms cancel, leaving
    # an integer numerator, so equal hit sets give exactly zero width
    var = (h1 + h2 - 2 * h12) / (h1 * h2)
    half = Z95 * math.sqrt(var)
    r = h1 / h2
    return RatioEstimate(r, r * math.exp(-half), r * math.exp(half), h1, h2, h12, n, delta, tuple(flags))


def _as_nodes(ensemble: Ensemble, z) -> np.ndarray:
    if isinstance(z, DiscretePath):
        if z.grid != ensemble.grid:
            raise ValueError("path is not on the ensemble grid")
        return z.values
    v = np.asarray(z, dtype=float)
    if v.shape != (ensemble.grid.n_nodes,):
        raise ValueError("path must have one value per grid node")
    return v


def default_delta_ladder(path_scale: float = 1.0) -> list:
    return [f * path_scale for f in (0.8, 0.6, 0.4, 0.3)]


def small_ball_ladder(ensemble: Ensemble, z1, z2, deltas: Sequence[float]) -> list:
    """:func:`small_ball_ratio` for several radii from a single pass over the ensemble."""
    deltas = np.asarray([float(d) for d in deltas])
    if deltas.size == 0 or np.any(deltas <= 0):
        raise ValueError("radii must be positive")
    a = _as_nodes(ensemble, z1)
    b = _as_nodes(ensemble, z2)

    def count(lo, hi, paths):
        d1 = np.max(np.abs(paths - a), axis=1)
        d2 = np.max(np.abs(paths - b), axis=1)
        in1 = d1[:, None] <= deltas
        in2 = d2[:, None] <= deltas
        return np.stack([in1.sum(0), in2.sum(0), (in1 & in2).sum(0)]).astype(np.int64)

    totals = sum(ensemble.map_chunks(count))
    return [
        _ratio_from_counts(int(totals[0, k]), int(totals[1, k]), int(totals[2, k]), ensemble.count, float(d))
        for k, d in enumerate(deltas)
    ]


def small_ball_ratio(ensemble: Ensemble, z1, z2, delta: float) -> RatioEstimate:
    """
    Ratio of the ensemble's hit frequencies in the sup-norm balls of radius
    ``delta`` around ``z1`` and ``z2`` (grid nodes only).
    """
    return small_ball_ladder(ensemble, z1, z2, [delta])[0]


# -- rare events ---------------------------------------------------------------


@dataclass(frozen=True)
class PathEvent:
    """
    Path events that :func:`fw_infimum_over_event` understands.

    ``terminal_ge``: ``z(T) >= level``; ``sup_ge``: ``max_t z(t) >= level``
    over grid nodes; ``always``: the whole space.  Instances are predicates on
    ``(rows, n_nodes)`` arrays.
    """

    kind: str
    level: float = 0.0

    KINDS = ("terminal_ge", "sup_ge", "always")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unsupported event {self.kind!r}; choose from {self.KINDS}")
        if not math.isfinite(self.level):
            raise ValueError("event level must be finite")

    def __call__(self, paths: np.ndarray) -> np.ndarray:
        paths = np.atleast_2d(paths)
        if self.kind == "terminal_ge":
            return paths[:, -1] >= self.level
        if self.kind == "sup_ge":
            return np.max(paths, axis=1) >= self.level
        return np.ones(paths.shape[0], dtype=bool)


@dataclass(frozen=True)
class RateEstimate:
    """
    ``eps^2 log p_hat(eps)`` along a noise ladder and its extrapolation to 0.

    ``se`` holds delta-method standard errors of the rates.  Ladder entries
    with ``p_hat = 0`` have ``nan`` rates and are listed in ``flags``.
    """

    eps: list
    p_hat: list
    hits: list
    count: int
    rates: list
    se: list
    extrapolated: float
    extrapolated_se: float
    basis: tuple
    flags: tuple = ()
    seeds: list = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return math.isfinite(self.extrapolated)


_BASIS = {
    "const": lambda e: np.ones_like(e),
    "eps2_log_eps": lambda e: e**2 * np.log(e),
    "eps2": lambda e: e**2,
}


def _extrapolate_rate(eps: np.ndarray, rates: np.ndarray, se: np.ndarray):
    """
    Least-squares fit ``r(eps) = c0 + c1 eps^2 log eps + c2 eps^2`` (the
    Laplace-type expansion of ``eps^2 log p``), reduced when fewer points are
    available.  Returns ``c0``, its propagated standard error and the basis.
    """
    m = eps.size
    if m == 0:
        return float("nan"), float("nan"), ()
    names = ("const", "eps2_log_eps", "eps2") if m >= 3 else ("const", "eps2")[:m]
    design = np.column_stack([_BASIS[k](eps) for k in names])
    proj = np.linalg.pinv(design)
    c0 = float(proj[0] @ rates)
    c0_se = float(math.sqrt(math.fsum((proj[0] * se) ** 2)))
    return c0, c0_se, names


def _rate_seed(seed: Seed, k: int) -> list:
    base = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    return [int(s) for s in base] + [k]


def ldp_rate(
    drift: DriftModel,
    event: Callable[[np.ndarray], np.ndarray],
    eps_list: Sequence[float],
    count: int,
    seed: Seed,
    grid: TimeGrid = TimeGrid(1.0, 1),
    x0: float = 0.0,
) -> RateEstimate:
    """
    Direct Monte Carlo estimate of ``lim eps^2 log P(X^eps in A)``.

    For every ``eps`` an independent ensemble (seed ``[seed, k]``) is simulated
    and the fraction of paths in the event counted.  No importance sampling is
    used, so ``eps`` must stay large enough for hits to occur.  The default
    grid is a single step, which is exact for terminal events when ``b = 0``;
    pass a finer grid for other drifts or for path events.
    """
    eps = [float(e) for e in eps_list]
    if not eps or any(e <= 0 for e in eps):
        raise ValueError("eps_list must be non-empty and positive")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if count < 1:
        raise ValueError("count must be at least 1")

    p_hat, hits, rates, se, flags, seeds = [], [], [], [], [], []
    for k, e in enumerate(eps):
        s = _rate_seed(seed, k)
        seeds.append(s)
        ens = simulate(drift, e, grid, count, s, x0)
        h = int(sum(ens.map_chunks(lambda lo, hi, paths: int(np.count_nonzero(event(paths))))))
        p = h / count
        hits.append(h)
        p_hat.append(p)
        if h == 0:
            flags.append(f"no_hits[eps={e:g}]")
            rates.append(float("nan"))
            se.append(float("nan"))
            continue
        rates.append(e * e * math.log(p))
        se.append(e * e * math.sqrt((1 - p) / (count * p)))
    ok = np.isfinite(rates)
    if not ok.any():
        flags.append("rate_undefined")
    c0, c0_se, basis = _extrapolate_rate(np.asarray(eps)[ok], np.asarray(rates)[ok], np.asarray(se)[ok])
    return RateEstimate(eps, p_hat, hits, int(count), rates, se, c0, c0_se, basis, tuple(flags), seeds)


def _as_event(event) -> PathEvent:
    if isinstance(event, PathEvent):
        return event
    if isinstance(event, dict) and len(event) == 1:
        (kind, level), = event.items()
        return PathEvent(kind, float(level))
    raise ValueError(f"unsupported event specification {event!r}")


def _pinned_fw(drift, grid, a, b, **opts) -> float:
    cons = Constraints(pin_start=a, pin_end=b)
    return minimize(fw_objective(drift, grid, a), straight_line(grid, cons), cons, **opts).value


def _free_end_fw(drift, grid, a, **opts) -> tuple[float, float]:
    cons = Constraints(pin_start=a)
    res = minimize(fw_objective(drift, grid, a), straight_line(grid, cons), cons, **opts)
    return res.value, float(res.path.values[-1])


def fw_infimum_over_event(
    drift: DriftModel,
    event,
    constraints: Constraints = Constraints(),
    grid: TimeGrid = TimeGrid(1.0, 100),
    levels: int = 9,
    level_span: float = 1.0,
    max_hit_nodes: int = 200,
    **opts,
) -> float:
    """
    Infimum of the FW functional over a terminal or running-maximum event.

    ``terminal_ge c``: the free-end minimizer is used if it already ends in
    the event, otherwise pinned minimizations to ``c + level_span * s`` for
    ``levels`` values of ``s`` in ``[0, 1]``.  ``sup_ge c``: the path is pinned
    to ``c`` at a hitting node and runs free afterwards; the hitting node
    ranges over (at most ``max_hit_nodes``) grid nodes.  Each minimization
    starts from a straight line, so for non-convex drifts the result is a
    local infimum.
    """
    ev = _as_event(event)
    if constraints.pin_end is not None:
        raise ValueError("the end point is determined by the event; pin_end must be None")
    x0 = 0.0 if constraints.pin_start is None else float(constraints.pin_start)
    if ev.kind == "always":
        return 0.0
    c = ev.level
    if ev.kind == "terminal_ge":
        free_val, free_end = _free_end_fw(drift, grid, x0, **opts)
        if free_end >= c:
            return free_val
        targets = c + level_span * np.linspace(0.0, 1.0, max(1, int(levels)))
        return min(pmap(lambda b: _pinned_fw(drift, grid, x0, float(b), **opts), targets))
    # running maximum
    if x0 >= c:
        return 0.0
    n = grid.n_intervals
    ks = np.unique(np.linspace(1, n, min(n, max_hit_nodes)).round().astype(int))

    def cost(k: int) -> float:
        head = TimeGrid(k * grid.dt, k)
        val = _pinned_fw(drift, head, x0, c, **opts)
        if k < n:
            tail = TimeGrid((n - k) * grid.dt, n - k)
            val += _free_end_fw(drift, tail, c, **opts)[0]
        return val

    return min(pmap(cost, [int(k) for k in ks]))


# -- Girsanov reweighting ------------------------------------------------------


@dataclass(frozen=True)
class WeightCheck:
    mean: float
    se: float
    count: int
    eps: float
    scheme: str

    @property
    def z_score(self) -> float:
        return (self.mean - 1.0) / self.se if self.se > 0 else 0.0


def girsanov_weight_check(
    drift: DriftModel,
    eps: float,
    grid: TimeGrid,
    count: int,
    seed: Seed,
    scheme: str = "ito_left",
) -> WeightCheck:
    """
    Sample mean and standard error of ``exp(log density)`` under ``eps B``.

    The density is that of the SDE law relative to the scaled Wiener measure,
    so the mean should be 1.  Per-chunk sums use compensated summation.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    ens = simulate(preset_drift("zero"), eps, grid, count, seed)

    def moments(lo, hi, paths):
        w = np.exp(log_density_array(drift, paths, grid.dt, eps, scheme))
        return math.fsum(w), math.fsum(w * w)

    parts = ens.map_chunks(moments)
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    mean = s1 / count
    var = max(s2 / count - mean * mean, 0.0) * count / max(count - 1, 1)
    return WeightCheck(mean, math.sqrt(var / count), int(count), float(eps), scheme)
