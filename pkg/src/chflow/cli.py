"""``chflow`` command line: simulate, equilibrium, stability, sweep, calibrate, diagnose."""

from __future__ import annotations

import datetime as _dt
import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import framework as fw
from .calibration import (
    DataError,
    GridSpec,
    calibration_report,
    grid_search,
    load_experiment,
    net_flow_diagnostic,
    write_diagnostic_csv,
    write_report,
)
from .equilibrium import ConvergenceError, detect_fixed_point, mpe_residual, solve_due, solve_sue
from .feasible_set import InfeasibleFlowError
from .logit import LOGIT, LogitParams, logit_jacobian, sue_stability
from .network import ScenarioError, load_scenario
from .ntp import NTP, BoundaryEquilibriumError, NtpParams, ntp_jacobian, stability_eq_gamma, stability_neq_gamma
from .stability import Axis, SweepInterrupted, SweepSetup, classify, perturb_and_simulate, sweep

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

log = logging.getLogger("chflow")

CONFIG_ERRORS = (ScenarioError, DataError, InfeasibleFlowError, BoundaryEquilibriumError, ValueError, OSError)


class Ctx:
    def __init__(self, no_meta: bool):
        self.no_meta = no_meta

    def header(self, command: str, **fields) -> str | None:
        if self.no_meta:
            return None
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        extra = " ".join(f"{k}={v}" for k, v in fields.items() if v is not None)
        return f"chflow {__version__} {command} {extra} generated={stamp}".replace("  ", " ")


def dynamic_options(f):
    opts = [
        click.option("--scenario", default="braess", show_default=True, help="Scenario JSON path or bundled name."),
        click.option("--dynamic", type=click.Choice(["ntp", "logit"]), default="ntp", show_default=True),
        click.option("--k", "k", type=click.IntRange(1, 3), default=2, show_default=True, help="Number of classes."),
        click.option("--alpha", type=float, default=None, help="Inertia (default 1 for ntp, 0.5 for logit)."),
        click.option("--gamma", type=float, default=0.2, show_default=True),
        click.option("--alpha-hat", type=float, default=None),
        click.option("--gamma-hat", type=float, default=None),
        click.option("--theta", type=float, default=0.1, show_default=True),
        click.option("--theta-hat", type=float, default=None),
        click.option("--p0", type=float, default=None, help="0-step share (default: equal shares)."),
        click.option("--p1", type=float, default=None, help="1-step share when k = 3."),
        click.option("--tol", type=float, default=None, help="Solver / detection tolerance."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def out_option(f):
    return click.option(
        "--out", type=click.Path(file_okay=False, path_type=Path), default=Path("."), show_default=True
    )(f)


def build_profile(k: int, p0, p1) -> fw.ClassProfile:
    if p0 is None:
        return fw.ClassProfile([1.0 / k] * k)
    if k == 3 and p1 is None:
        p1 = (1.0 - p0) / 2
    return fw.ClassProfile.from_levels(k, p0, p1)


def build_params(dynamic, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat):
    if dynamic == "ntp":
        return NtpParams(1.0 if alpha is None else alpha, gamma, alpha_hat, gamma_hat)
    return LogitParams(0.5 if alpha is None else alpha, theta, alpha_hat, theta_hat)


def reference_equilibrium(network, dynamic, params, tol):
    if dynamic == "ntp":
        return solve_due(network, tol or 1e-8)
    return solve_sue(network, params.theta, tol or 1e-10)


def guarded(f):
    """Map library errors onto exit codes with a one-line diagnostic."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except fw.DivergenceError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DIVERGED)
        except ConvergenceError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DIVERGED)
        except CONFIG_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)

    return wrapper


@click.group()
@click.version_option(__version__)
@click.option("--no-meta", is_flag=True, help="Omit the timestamped header line from outputs.")
@click.pass_context
def cli(ctx, no_meta):
    """Cognitive-hierarchy day-to-day traffic dynamics."""
    level = os.environ.get("CHFLOW_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Ctx(no_meta)


@cli.command()
@dynamic_options
@click.option("--horizon", type=click.IntRange(min=1), default=60, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--init", "init", type=click.Choice(["random", "due", "uniform"]), default="random", show_default=True)
@click.option("--start-at-due", is_flag=True, help="Shorthand for --init due.")
@click.option("--inits", type=click.IntRange(min=1), default=1, show_default=True, help="Number of random starts.")
@out_option
@click.pass_obj
@guarded
def simulate(obj, scenario, dynamic, k, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat, p0, p1, tol,
             horizon, seed, init, start_at_due, inits, out):
    """Simulate day-to-day flows and write trajectory CSVs."""
    network = load_scenario(scenario)
    profile = build_profile(k, p0, p1)
    params = build_params(dynamic, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat)
    op = NTP if dynamic == "ntp" else LOGIT
    if start_at_due:
        init = "due"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    starts = []
    if init == "due":
        starts.append(reference_equilibrium(network, dynamic, params, tol).aggregate)
    elif init == "uniform":
        starts.append(network.route_demand() / np.bincount(_od_index(network))[_od_index(network)])
    else:
        for _ in range(inits):
            x = np.empty(network.n_routes)
            for g, d in zip(network.od_groups, network.demand):
                x[g] = rng.dirichlet(np.ones(len(g))) * d
            starts.append(x)
    summary = []
    for i, x0 in enumerate(starts):
        state = fw.ClassFlowState.proportional(profile, x0)
        traj = fw.simulate(op, network, profile, state, params.acting, params.predicted, horizon)
        suffix = "" if len(starts) == 1 else f"_{i}"
        head = obj.header("simulate", scenario=scenario, dynamic=dynamic, seed=seed, init=i)
        traj.write_aggregate_csv(out / f"trajectory{suffix}.csv", head, first_day=1)
        traj.write_class_csv(out / f"trajectory_classes{suffix}.csv", head)
        day = detect_fixed_point(traj, tol or 1e-8)
        summary.append(
            {
                "init": i,
                "initial": x0.tolist(),
                "final": traj.aggregate[-1].tolist(),
                "fixed_point_day": day,
                "final_residual": mpe_residual(network, traj.final, profile, params),
            }
        )
    _write_json(out / "simulate_summary.json", {"seed": seed, "runs": summary})
    click.echo(f"wrote {len(starts)} trajectory set(s) to {out}")


def _od_index(network):
    idx = np.empty(network.n_routes, dtype=int)
    for w, g in enumerate(network.od_groups):
        idx[g] = w
    return idx


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)


@cli.command()
@dynamic_options
@out_option
@click.pass_obj
@guarded
def equilibrium(obj, scenario, dynamic, k, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat, p0, p1, tol, out):
    """Solve the DUE (ntp) or SUE (logit) and write equilibrium.json."""
    network = load_scenario(scenario)
    params = build_params(dynamic, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat)
    res = reference_equilibrium(network, dynamic, params, tol)
    out.mkdir(parents=True, exist_ok=True)
    res.write_json(out / "equilibrium.json")
    click.echo(json.dumps(res.to_dict()))


@cli.command()
@dynamic_options
@click.option("--jacobian", "jacobian_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Classify a matrix from JSON (list of rows) instead of a scenario.")
@click.option("--unit-tol", type=float, default=1e-6, show_default=True)
@click.option("--rank-tol", type=float, default=1e-8, show_default=True)
@out_option
@click.pass_obj
@guarded
def stability(obj, scenario, dynamic, k, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat, p0, p1, tol,
              jacobian_file, unit_tol, rank_tol, out):
    """Classify local stability at the equilibrium (or of a given Jacobian)."""
    out.mkdir(parents=True, exist_ok=True)
    extra = {}
    if jacobian_file:
        J = np.asarray(json.loads(Path(jacobian_file).read_text()), dtype=float)
    else:
        network = load_scenario(scenario)
        profile = build_profile(k, p0, p1)
        params = build_params(dynamic, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat)
        x = reference_equilibrium(network, dynamic, params, tol).aggregate
        state = fw.ClassFlowState.proportional(profile, x)
        extra["equilibrium"] = x.tolist()
        if dynamic == "ntp":
            J = ntp_jacobian(network, state, profile, params).JP
            extra["analytic"] = _ntp_analytic(network, x, profile, params)
        else:
            J = logit_jacobian(network, state, profile, params)
            extra["analytic"] = sue_stability(network, x, profile, params).to_dict()
    report = classify(J, unit_tol, rank_tol)
    report.write_json(out / "stability.json", extra)
    click.echo(report.classification)


def _ntp_analytic(network, x, profile, params):
    if params.alpha != 1 or params.alpha_hat != 1:
        return {"skipped": "analytic criteria assume alpha = alpha_hat = 1"}
    try:
        if params.gamma_hat == params.gamma:
            return stability_eq_gamma(network, x, params.gamma).to_dict()
        if profile.size == 2:
            return stability_neq_gamma(network, x, params.gamma, params.gamma_hat).to_dict()
    except BoundaryEquilibriumError as exc:
        return {"skipped": str(exc)}
    return {"skipped": "no analytic criterion for this configuration"}


@cli.command(name="sweep")
@dynamic_options
@click.option("--axis", "axes", multiple=True, required=True, help="name:start:stop:step (give exactly two).")
@click.option("--mode", type=click.Choice(["analytic", "jacobian", "empirical"]), default="jacobian", show_default=True)
@click.option("--eps", type=float, default=0.1, show_default=True, help="Perturbation size (empirical mode).")
@click.option("--horizon", type=click.IntRange(min=1), default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@out_option
@click.pass_obj
@guarded
def sweep_cmd(obj, scenario, dynamic, k, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat, p0, p1, tol,
              axes, mode, eps, horizon, seed, jobs, out):
    """Stability verdicts over a two-parameter grid (region CSV)."""
    if len(axes) != 2:
        raise click.UsageError("give exactly two --axis options")
    parsed = tuple(Axis.parse(a) for a in axes)
    network = load_scenario(scenario)
    base = {"gamma": gamma, "theta": theta}
    base["alpha"] = (1.0 if dynamic == "ntp" else 0.5) if alpha is None else alpha
    for name, v in (("alpha_hat", alpha_hat), ("gamma_hat", gamma_hat), ("theta_hat", theta_hat)):
        if v is not None:
            base[name] = v
    default_profile = build_profile(k, p0, p1)
    base["p0"] = default_profile[0]
    if k == 3:
        base["p1"] = default_profile[1]
    setup = SweepSetup(dynamic, mode, k, base, network, eps=eps, horizon=horizon, seed=seed, tol=tol or 1e-6)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "region.csv"
    head = obj.header("sweep", scenario=scenario, dynamic=dynamic, mode=mode, seed=seed)
    try:
        region = sweep(setup, parsed, jobs)
    except SweepInterrupted as exc:
        exc.partial.write_csv(path, head)
        click.echo(f"interrupted; partial results in {path}", err=True)
        sys.exit(130)
    region.write_csv(path, head)
    for (i, j), err in sorted(region.errors.items()):
        click.echo(f"point ({i}, {j}) failed: {err}", err=True)
    click.echo(f"wrote {region.shape[0] * region.shape[1]} points to {path}")


def _range(text: str) -> tuple:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise click.BadParameter(f"expected start:stop:step, got {text!r}") from exc
    return lo, hi, step


@cli.command()
@click.option("--scenario", default="braess", show_default=True)
@click.option("--data", "data_path", type=click.Path(dir_okay=False), required=True)
@click.option("--k-levels", "k_levels", type=click.IntRange(1, 3), multiple=True, default=(1, 2), show_default=True)
@click.option("--days", type=int, default=None, help="Calibrate on days 1..M (default: all).")
@click.option("--gamma-range", default="0.01:1.0:0.002", show_default=True)
@click.option("--p0-range", default="0.01:1.0:0.01", show_default=True)
@click.option("--p1-range", default="0.01:1.0:0.01", show_default=True)
@click.option("--share-step", type=float, default=0.05, show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@out_option
@click.pass_obj
@guarded
def calibrate(obj, scenario, data_path, k_levels, days, gamma_range, p0_range, p1_range, share_step, jobs, out):
    """Grid-search CH-NTP parameters against observed day-to-day counts."""
    network = load_scenario(scenario)
    data = load_experiment(data_path)
    grid = GridSpec(_range(gamma_range), _range(p0_range), _range(p1_range), share_step)
    results = [grid_search(network, data, days, k, grid, jobs) for k in sorted(set(k_levels))]
    report = calibration_report(results, data)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "calibration.json")
    for r in results:
        click.echo(f"K={r.k_levels}: gamma={r.gamma:g} p={tuple(round(p, 6) for p in r.proportions)} rmse={r.rmse:.6g}")


@cli.command()
@click.option("--scenario", default="braess", show_default=True)
@click.option("--data", "data_path", type=click.Path(dir_okay=False), required=True)
@out_option
@click.pass_obj
@guarded
def diagnose(obj, scenario, data_path, out):
    """Net flow per route against the previous day's cost ranking."""
    network = load_scenario(scenario)
    data = load_experiment(data_path)
    rows = net_flow_diagnostic(data, network)
    out.mkdir(parents=True, exist_ok=True)
    write_diagnostic_csv(rows, out / "diagnostic.csv", obj.header("diagnose", scenario=scenario))
    click.echo(f"wrote {len(rows)} rows to {out / 'diagnostic.csv'}")


@cli.command(name="perturb")
@dynamic_options
@click.option("--eps", type=float, default=0.1, show_default=True)
@click.option("--horizon", type=click.IntRange(min=1), default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@out_option
@click.pass_obj
@guarded
def perturb(obj, scenario, dynamic, k, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat, p0, p1, tol,
            eps, horizon, seed, out):
    """Perturb the equilibrium and report where the dynamic settles."""
    network = load_scenario(scenario)
    profile = build_profile(k, p0, p1)
    params = build_params(dynamic, alpha, gamma, alpha_hat, gamma_hat, theta, theta_hat)
    x = reference_equilibrium(network, dynamic, params, tol).aggregate
    res = perturb_and_simulate(network, x, profile, params, eps, horizon, seed)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "perturb.json", {"seed": seed, "eps": eps, **res.to_dict()})
    res.trajectory.write_aggregate_csv(out / "perturb_trajectory.csv", obj.header("perturb", seed=seed))
    click.echo(res.verdict)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="chflow", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
