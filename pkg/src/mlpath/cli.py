"""
Command-line front end.

``mlpath run CONFIG [--out DIR]`` validates a JSON config, runs the
experiment, and writes ``<prefix>record.json`` plus CSV data files.
``mlpath plotdata RECORD`` turns a record into long-format plot data.

Exit codes: 0 success, 2 invalid config, 3 numerical failure.  Failures
print a JSON error record on stderr (and write ``<prefix>error.json`` when
an output directory is known).
"""
from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import config_echo, parse_config
from .functionals import fw_objective, fw_sde, om_correction, om_objective, om_sde
from .measure import DiscretePath, GaussianMeasureSpec, sample
from .models import AlgebraicSolveError, AlgebraicSystem, algebraic_fw, algebraic_solve, harmonic_weights
from .montecarlo import PathEvent, fw_infimum_over_event, ldp_rate, simulate, small_ball_ladder
from .variational import (
    Constraints,
    DomainError,
    eps_sweep,
    gamma_diagnostic,
    minimize,
    multi_start,
    straight_line,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


def _num(x) -> float | None:
    """JSON-safe float: non-finite values become ``None``."""
    x = float(x)
    return x if math.isfinite(x) else None


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])


def _finite_or_fail(label: str, *values) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NumericalFailure(f"{label} is not finite ({v!r})")


# -- experiment runners: each returns (results payload, {filename: (header, rows)})


def _run_evaluate(cfg):
    grid = cfg.grid.build()
    drift = cfg.model.build()
    z = cfg.path.build(grid)
    om = om_sde(drift, z, cfg.eps, start=cfg.start)
    fw = fw_sde(drift, z, start=cfg.start)
    corr = om_correction(drift, z)
    _finite_or_fail("functional value", om.value, fw.value)
    gap = cfg.eps**2 * om.value - fw.value
    results = {
        "om": om.value,
        "fw": fw.value,
        "gap": gap,
        "om_correction": corr,
        "om_components": {k: _num(v) for k, v in sorted(om.components.items())},
    }
    rows = [["om", om.value], ["fw", fw.value], ["gap", gap], ["om_correction", corr]]
    return results, {"values.csv": (["quantity", "value"], rows)}


def _smooth_starts(grid, constraints, count: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    base = straight_line(grid, constraints)
    t = grid.nodes / grid.horizon
    # sine modes vanish at both ends (pinned end) or only at the start
    half = 1.0 if constraints.pin_end is not None else 0.5
    starts = [base]
    for k in range(count):
        v = base.values + rng.normal() * np.sin(np.pi * (k % 3 + half) * t)
        v[0] = base.values[0]
        if constraints.pin_end is not None:
            v[-1] = base.values[-1]
        starts.append(DiscretePath(grid, v))
    return starts


def _run_minimize(cfg):
    grid = cfg.grid.build()
    drift = cfg.model.build()
    cons = cfg.constraints.build()
    start = 0.0 if cons.pin_start is None else cons.pin_start
    if cfg.eps is None:
        obj = fw_objective(drift, grid, start if cons.pin_start is not None else None)
    else:
        obj = om_objective(drift, grid, cfg.eps, start if cons.pin_start is not None else None)
    starts = _smooth_starts(grid, cons, cfg.extra_starts, cfg.seed)
    labels = ["straight_line"] + [f"perturbed{k}" for k in range(cfg.extra_starts)]
    minima = multi_start(obj, starts, cons, labels=labels, tol=cfg.tol, max_iter=cfg.max_iter)
    for m in minima:
        _finite_or_fail("minimum value", m.value)
    results = {
        "functional": "fw" if cfg.eps is None else "eps2_om",
        "minima": [
            {
                "label": m.start_label,
                "value": m.value,
                "grad_norm": m.grad_norm,
                "iterations": m.iterations,
                "converged": m.converged,
            }
            for m in minima
        ],
    }
    rows = [[i, t, v] for i, m in enumerate(minima) for t, v in zip(grid.nodes.tolist(), m.path.values.tolist())]
    return results, {"minima.csv": (["minimum_id", "t", "value"], rows)}


def _run_eps_sweep(cfg):
    grid = cfg.grid.build()
    drift = cfg.model.build()
    cons = cfg.constraints.build()
    res = eps_sweep(
        drift, grid, cons, cfg.eps_list, fw_reference_factor=cfg.fw_reference_factor,
        tol=cfg.tol, max_iter=cfg.max_iter,
    )
    start = 0.0 if cons.pin_start is None else cons.pin_start
    rows = []
    entries = []
    for (eps, m), dist in zip(res.entries, res.distances):
        om_value = om_sde(drift, m.path, eps, start=start).value
        _finite_or_fail("OM value", om_value)
        rows.append([eps, om_value, m.grad_norm, m.iterations, dist])
        entries.append(
            {
                "eps": eps,
                "om_value": om_value,
                "eps2_om": m.value,
                "grad_norm": m.grad_norm,
                "iterations": m.iterations,
                "converged": m.converged,
                "dist_to_fw_mode": dist,
            }
        )
    results = {
        "entries": entries,
        "fw_mode": {"value": res.fw_mode.value, "grad_norm": res.fw_mode.grad_norm, "converged": res.fw_mode.converged},
    }
    files = {"sweep.csv": (["eps", "om_value", "grad_norm", "iterations", "dist_to_fw_mode"], rows)}
    if res.reference is not None:
        results["reference"] = {
            "factor": cfg.fw_reference_factor,
            "value": res.reference.value,
            "converged": res.reference.converged,
            "distances": res.reference_distances,
        }
        files["reference.csv"] = (["eps", "dist_to_fine_fw_mode"], list(zip(res.eps, res.reference_distances)))
    return results, files


def _run_gamma(cfg):
    grid = cfg.grid.build()
    drift = cfg.model.build()
    cons = cfg.constraints.build()
    start = 0.0 if cons.pin_start is None else cons.pin_start
    pin = start if cons.pin_start is not None else None
    fw = fw_objective(drift, grid, pin)
    mode = minimize(fw, straight_line(grid, cons), cons)
    report = gamma_diagnostic(
        lambda e: om_objective(drift, grid, e, pin),
        mode.path,
        cfg.radii,
        cfg.eps_list,
        probes=cfg.probes,
        seed=cfg.seed,
        limit=fw,
        free=cons.free_mask(grid.n_nodes),
    )
    results = {
        "fw_mode_value": mode.value,
        "eps": report.eps,
        "recovery_values": report.recovery_values,
        "recovery_limit": report.recovery_limit,
        "recovery_gap": report.recovery_gap,
        "rows": [
            {"radius": r.radius, "infima": r.infima, "liminf": r.liminf, "limsup": r.limsup, "slack": r.slack}
            for r in report.rows
        ],
    }
    rows = [[r.radius, e, v] for r in report.rows for e, v in zip(report.eps, r.infima)]
    return results, {"gamma.csv": (["radius", "eps", "neighborhood_inf"], rows)}


def _run_smallball(cfg):
    grid = cfg.grid.build()
    drift = cfg.model.build()
    z1, z2 = cfg.z1.build(grid), cfg.z2.build(grid)
    ens = simulate(drift, cfg.eps, grid, cfg.count, cfg.seed, x0=cfg.start)
    ladder = small_ball_ladder(ens, z1, z2, cfg.deltas)
    om1 = om_sde(drift, z1, cfg.eps, start=cfg.start).value
    om2 = om_sde(drift, z2, cfg.eps, start=cfg.start).value
    prediction = math.exp(om2 - om1) if math.isfinite(om1) and math.isfinite(om2) else None
    results = {
        "om_prediction": prediction,
        "ladder": [
            {
                "delta": r.delta,
                "point": _num(r.point),
                "ci_low": _num(r.ci_low),
                "ci_high": _num(r.ci_high),
                "hits1": r.hits1,
                "hits2": r.hits2,
                "both": r.both,
                "count": r.count,
                "flags": list(r.flags),
            }
            for r in ladder
        ],
    }
    rows = [
        [r.delta, _num(r.point), _num(r.ci_low), _num(r.ci_high), r.hits1, r.hits2, r.count, ";".join(r.flags)]
        for r in ladder
    ]
    return results, {"smallball.csv": (["delta", "point", "ci_low", "ci_high", "hits1", "hits2", "count", "flags"], rows)}


def _run_ldp(cfg):
    grid = cfg.grid.build()
    drift = cfg.model.build()
    event = PathEvent(cfg.event.kind, cfg.event.level)
    est = ldp_rate(drift, event, cfg.eps_list, cfg.count, cfg.seed, grid=grid, x0=cfg.start)
    inf_fw = fw_infimum_over_event(drift, event, Constraints(pin_start=cfg.start), grid=cfg.fw_grid.build())
    _finite_or_fail("FW infimum", inf_fw)
    results = {
        "eps": est.eps,
        "p_hat": est.p_hat,
        "hits": est.hits,
        "count": est.count,
        "rates": [_num(r) for r in est.rates],
        "se": [_num(s) for s in est.se],
        "extrapolated": _num(est.extrapolated),
        "extrapolated_se": _num(est.extrapolated_se),
        "basis": list(est.basis),
        "flags": list(est.flags),
        "seeds": est.seeds,
        "inf_fw": inf_fw,
    }
    rows = [[e, p, h, _num(r), _num(s)] for e, p, h, r, s in zip(est.eps, est.p_hat, est.hits, est.rates, est.se)]
    return results, {"ldp.csv": (["eps", "p_hat", "hits", "eps2_log_p", "se"], rows)}


def _run_algebraic(cfg):
    weights = harmonic_weights(cfg.truncation)
    system = AlgebraicSystem(weights, cfg.map.build())
    phi = np.full(cfg.truncation, cfg.phi) if not isinstance(cfg.phi, list) else np.array(cfg.phi)
    value, z = algebraic_fw(system, phi)
    _finite_or_fail("FW value", value)
    results = {"fw": value}
    rows = [[n + 1, float(p), float(zn)] for n, (p, zn) in enumerate(zip(phi, z.values))]
    files = {"algebraic.csv": (["n", "phi", "z"], rows)}
    if cfg.eps is not None:
        noise = sample(GaussianMeasureSpec.diagonal(weights), cfg.seed, 1)[0]
        x = algebraic_solve(system, noise, cfg.eps)
        residual = np.max(np.abs(x.values - system.f(x.values) - cfg.eps * noise.values))
        results["solve"] = {"eps": cfg.eps, "max_residual": float(residual)}
        files["solution.csv"] = (["n", "noise", "x"], [[n + 1, float(a), float(b)] for n, (a, b) in enumerate(zip(noise.values, x.values))])
    return results, files


RUNNERS = {
    "evaluate": _run_evaluate,
    "minimize": _run_minimize,
    "eps_sweep": _run_eps_sweep,
    "gamma": _run_gamma,
    "mc_smallball": _run_smallball,
    "mc_ldp": _run_ldp,
    "algebraic": _run_algebraic,
}


def execute(cfg, out_dir) -> dict:
    """Run ``cfg``, write its files into ``out_dir`` and return the run record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = cfg.output.prefix
    t0 = time.perf_counter()
    with np.errstate(all="ignore"):
        results, files = RUNNERS[cfg.kind](cfg)
    elapsed = time.perf_counter() - t0
    names = []
    for name, (header, rows) in files.items():
        _write_csv(out / f"{prefix}{name}", header, rows)
        names.append(f"{prefix}{name}")
    record = {
        "kind": cfg.kind,
        "config": config_echo(cfg),
        "version": __version__,
        "seeds": {"seed": cfg.seed},
        "wall_clock_seconds": elapsed,
        "files": names,
        "results": results,
    }
    with open(out / f"{prefix}record.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return record


# -- plot data -----------------------------------------------------------------


def plot_rows(record: dict) -> list:
    """Long-format rows ``(series, x, y, y_err)``; empty for non-plottable kinds."""
    kind = record.get("kind")
    res = record.get("results") or {}
    rows = []
    if kind == "eps_sweep" and res.get("entries"):
        for e in res["entries"]:
            rows.append(("distance", e["eps"], e["dist_to_fw_mode"], None))
        for e in res["entries"]:
            rows.append(("eps2_om", e["eps"], e["eps2_om"], None))
    elif kind == "mc_ldp" and res.get("eps"):
        for e, r, s in zip(res["eps"], res["rates"], res["se"]):
            if r is not None:
                rows.append(("eps2_log_p", e, r, s))
        for e in res["eps"]:
            rows.append(("neg_inf_fw", e, -res["inf_fw"], None))
    elif kind == "mc_smallball" and res.get("ladder"):
        for r in res["ladder"]:
            if r["point"] is not None and r["ci_low"] is not None and r["ci_high"] is not None:
                rows.append(("ratio", r["delta"], r["point"], 0.5 * (r["ci_high"] - r["ci_low"])))
        if res.get("om_prediction") is not None:
            for r in res["ladder"]:
                rows.append(("om_prediction", r["delta"], res["om_prediction"], None))
    elif kind == "gamma" and res.get("rows"):
        for row in res["rows"]:
            for e, v in zip(res["eps"], row["infima"]):
                rows.append((f"neighborhood_inf[r={row['radius']!r}]", e, v, None))
        for e, v in zip(res["eps"], res["recovery_values"]):
            rows.append(("recovery", e, v, None))
    return rows


def emit_plotdata(record: dict, out_path) -> bool:
    rows = plot_rows(record)
    if not rows:
        return False
    _write_csv(Path(out_path), ["series", "x", "y", "y_err"], [[s, float(x), float(y), None if e is None else float(e)] for s, x, y, e in rows])
    return True


# -- click commands ------------------------------------------------------------


def _fail(code: int, kind: str, message: str, details=None, out_dir=None, prefix="") -> None:
    err = {"error": kind, "message": message, "exit_code": code}
    if details is not None:
        err["details"] = details
    text = json.dumps(err, sort_keys=True)
    click.echo(text, err=True)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / f"{prefix}error.json").write_text(text + "\n")
        except OSError:
            pass
    sys.exit(code)


@click.group()
@click.version_option(__version__, prog_name="mlpath")
def main():
    """Most-likely-path functionals: run experiments and emit data."""


@main.command()
@click.argument("config_file", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: config 'output.directory' or ./mlpath_out).")
def run(config_file, out_dir):
    """Run the experiment described by CONFIG_FILE."""
    try:
        with open(config_file, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        _fail(EXIT_CONFIG, "config_unreadable", str(exc))
    try:
        cfg = parse_config(text)
    except ValidationError as exc:
        details = [
            {"field": ".".join(str(p) for p in e["loc"]), "message": e["msg"]} for e in exc.errors()
        ]
        msg = "; ".join(f"{d['field'] or '<root>'}: {d['message']}" for d in details)
        _fail(EXIT_CONFIG, "invalid_config", msg, details, out_dir)
    out_dir = out_dir or cfg.output.directory or "mlpath_out"
    try:
        record = execute(cfg, out_dir)
    except DomainError as exc:
        _fail(EXIT_NUMERIC, "numerical_failure", str(exc), None, out_dir, cfg.output.prefix)
    except (ValueError, TypeError) as exc:
        # model construction rejected the parameters (e.g. a preset argument)
        _fail(EXIT_CONFIG, "invalid_config", str(exc), None, out_dir, cfg.output.prefix)
    except (NumericalFailure, AlgebraicSolveError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _fail(EXIT_NUMERIC, "numerical_failure", str(exc), None, out_dir, cfg.output.prefix)
    click.echo(str(Path(out_dir) / f"{cfg.output.prefix}record.json"))


@main.command()
@click.argument("record_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="CSV to write (default: plotdata.csv next to the record).")
def plotdata(record_file, out_path):
    """Write long-format plot data (series, x, y, y_err) for RECORD_FILE."""
    with open(record_file, "r", encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            _fail(EXIT_CONFIG, "invalid_record", str(exc))
    if out_path is None:
        out_path = os.path.join(os.path.dirname(os.path.abspath(record_file)), "plotdata.csv")
    if emit_plotdata(record, out_path):
        click.echo(out_path)
    else:
        click.echo(f"notice: nothing to plot for kind {record.get('kind')!r}", err=True)


if __name__ == "__main__":
    main()
