"""Command-line entry point: ``python -m age_sir_analyst <command>``.

Exit codes: 0 on success, 1 on bad input, 2 on numerical failure.
"""

import json
import logging
import math
import os
import sys
from typing import Any, Dict, List, Optional

import click
import numpy as np
import pandas as pd

from . import dataio
from .ctmc_sim import SimMode, ensemble, init_network, simulate
from .errors import InputError, NumericalError
from .estimation import daily_new_cases, estimate_per_phase, fitted_trajectory
from .experiments import convergence_sweep, converse_gap, edge_age_distribution, edge_density_check
from .model_core import Trajectory, integrate_ode
from .phase_detect import PhaseConfig, detect_phases
from .settings import get_settings

logger = logging.getLogger(__name__)


class RunContext:
    def __init__(self, seed: Optional[int], out: str, emit: str, n_jobs: int, progress: bool):
        self.seed = seed
        self.out = out
        self.emit = emit
        self.n_jobs = n_jobs
        self.progress = progress

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def seed_for(self, scenario: dataio.Scenario) -> int:
        return scenario.seed if self.seed is None else self.seed

    def report(self, summary: Dict[str, Any], table: Optional[pd.DataFrame] = None) -> None:
        if self.emit == "csv" and table is not None:
            click.echo(table.to_csv(index=False, float_format=dataio.FLOAT_FORMAT), nl=False)
        else:
            click.echo(json.dumps(summary, indent=2, default=_jsonable))


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _stride(dt: float, sample_dt: float) -> int:
    """ODE steps per output sample; the sampling interval must be a whole number of steps."""
    if dt <= 0:
        raise InputError(f"ODE step must be positive, got {dt:g}")
    ratio = sample_dt / dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * ratio:
        raise InputError(f"sample_dt {sample_dt:g} is not a whole multiple of the ODE step {dt:g}")
    return stride


def _given(value: Any, default: Any) -> Any:
    return default if value is None else value



def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from exc


pass_run = click.make_pass_decorator(RunContext)
scenario_option = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                               help="Scenario JSON.")


@click.group()
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="Overrides the scenario seed.")
@click.option("--out", default="results", show_default=True, type=click.Path(file_okay=False),
              help="Directory for output files.")
@click.option("--emit", type=click.Choice(["json", "csv"]), default="json", show_default=True,
              help="Format of the summary printed to stdout.")
@click.option("--n-jobs", type=int, default=None, help="Parallel workers for ensembles and window fits.")
@click.option("--progress/--no-progress", default=False, help="Show progress bars.")
@click.option("--log-level", default=None, help="Logging level (default from AGE_SIR_LOG_LEVEL).")
@click.pass_context
def main(ctx: click.Context, seed, out, emit, n_jobs, progress, log_level) -> None:
    """Age-structured SIR models on a dynamic contact network."""
    settings = get_settings()
    logging.basicConfig(
        level=(log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx.obj = RunContext(seed, out, emit, n_jobs if n_jobs is not None else settings.n_jobs, progress)


@main.command()
@scenario_option
@click.option("--t-end", type=float, default=None)
@click.option("--dt", type=float, default=None, help="RK4 step (default: scenario ode_dt).")
@pass_run
def ode(run_ctx: RunContext, config_path, t_end, dt) -> None:
    """Integrate the mean-field ODE for a scenario."""
    scenario = dataio.load_scenario(config_path)
    dt = _given(dt, scenario.ode_dt)
    stride = _stride(dt, scenario.sample_dt)
    traj = integrate_ode(scenario.to_params(), scenario.initial_state(), _given(t_end, scenario.t_end), dt)
    traj = Trajectory(traj.times[::stride], traj.values[::stride])
    path = dataio.write_trajectory_csv(traj, run_ctx.path("ode.csv"))
    run_ctx.report({"trajectory": path, "samples": len(traj), "final_s": traj.final.s}, traj.to_frame())


@main.command(name="simulate")
@scenario_option
@click.option("--mode", type=click.Choice([m.value for m in SimMode]), default=None)
@click.option("--t-end", type=float, default=None)
@click.option("--sample-dt", type=float, default=None)
@pass_run
def simulate_cmd(run_ctx: RunContext, config_path, mode, t_end, sample_dt) -> None:
    """One exact run of the network chain; writes the trajectory and the event log."""
    scenario = dataio.load_scenario(config_path)
    params = scenario.to_params()
    seed = run_ctx.seed_for(scenario)
    state = init_network(params, scenario.initial_infected, seed, mode=_given(mode, scenario.mode),
                         initial_recovered=scenario.initial_recovered)
    traj, events = simulate(state, params, _given(t_end, scenario.t_end), _given(sample_dt, scenario.sample_dt))
    traj_path = dataio.write_trajectory_csv(traj, run_ctx.path("trajectory.csv"))
    log_path = dataio.write_event_log(events, run_ctx.path("events.csv"))
    run_ctx.report({"trajectory": traj_path, "events": log_path, "n_events": len(events), "seed": seed},
                   traj.to_frame())


@main.command(name="ensemble")
@scenario_option
@click.option("--runs", "M", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--mode", type=click.Choice([m.value for m in SimMode]), default=None)
@click.option("--t-end", type=float, default=None)
@click.option("--sample-dt", type=float, default=None)
@pass_run
def ensemble_cmd(run_ctx: RunContext, config_path, M, mode, t_end, sample_dt) -> None:
    """M independent runs; writes the mean trajectory, variances and final states."""
    scenario = dataio.load_scenario(config_path)
    seed = run_ctx.seed_for(scenario)
    result = ensemble(scenario.to_params(), scenario.initial_infected, M, _given(t_end, scenario.t_end),
                      _given(sample_dt, scenario.sample_dt), seed, mode=_given(mode, scenario.mode),
                      initial_recovered=scenario.initial_recovered, n_jobs=run_ctx.n_jobs,
                      progress=run_ctx.progress)
    mean_path = dataio.write_trajectory_csv(result.mean, run_ctx.path("ensemble_mean.csv"))
    variance = result.mean.to_frame()
    variance.iloc[:, 1:] = result.variance.transpose(0, 2, 1).reshape(len(result.times), -1)
    var_path = dataio.write_table_csv(variance, run_ctx.path("ensemble_variance.csv"))
    finals = pd.DataFrame(result.finals.transpose(0, 2, 1).reshape(M, -1), columns=variance.columns[1:])
    finals.insert(0, "seed", result.seeds)
    finals_path = dataio.write_table_csv(finals, run_ctx.path("ensemble_finals.csv"))
    run_ctx.report({"mean": mean_path, "variance": var_path, "finals": finals_path, "base_seed": seed},
                   result.mean.to_frame())


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False), help="Trajectory CSV.")
@click.option("--phases", "phases_path", default=None, type=click.Path(dir_okay=False),
              help="Phases JSON; omitted means a single phase.")
@click.option("--lambda-reg", type=float, default=None)
@pass_run
def estimate(run_ctx: RunContext, data_path, phases_path, lambda_reg) -> None:
    """Per-phase NNLS estimates of A and gamma."""
    settings = get_settings()
    data = dataio.read_trajectory_csv(data_path)
    boundaries = dataio.read_phase_boundaries(phases_path) if phases_path else []
    lam = settings.lambda_reg if lambda_reg is None else lambda_reg
    estimates = estimate_per_phase(data, boundaries, lam, tol=settings.nnls_tol)
    payload = [e.to_dict() for e in estimates]
    est_path = dataio.write_json(payload, run_ctx.path("estimates.json"))
    fitted, error = fitted_trajectory(data, estimates)
    fit_path = dataio.write_trajectory_csv(fitted, run_ctx.path("fitted.csv"))
    table = pd.DataFrame([{k: v for k, v in e.items() if k not in ("A", "gamma")} for e in payload])
    run_ctx.report({"estimates": est_path, "fitted": fit_path, "fit_mse": error, "phases": payload}, table)


@main.command(name="detect-phases")
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False), help="Trajectory CSV.")
@click.option("--w", type=int, default=None, help="Window length, days.")
@click.option("--dp", type=int, default=None, help="Window step, days.")
@click.option("--eps", type=float, default=None, help="Constraint radius factor.")
@click.option("--delta", type=float, default=None, help="Error-ratio threshold.")
@click.option("--min-phase", type=int, default=None, help="Merge phases of at most this many days.")
@pass_run
def detect_phases_cmd(run_ctx: RunContext, data_path, w, dp, eps, delta, min_phase) -> None:
    """Sliding-window detection of contact-rate phase boundaries."""
    settings = get_settings()
    try:
        cfg = PhaseConfig.from_settings(settings, w=w, dp=dp, eps=eps, delta=delta, min_phase=min_phase)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    phases = detect_phases(dataio.read_trajectory_csv(data_path), cfg, n_jobs=run_ctx.n_jobs,
                           tol=settings.nnls_tol)
    payload = phases.to_dict()
    path = dataio.write_json(payload, run_ctx.path("phases.json"))
    run_ctx.report({"phases": path, **payload}, pd.DataFrame(payload["windows"]))


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False),
              help="Cumulative case-count CSV.")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="Preprocess JSON with populations.")
@click.option("--recovery-days", "T_R", type=int, default=None)
@click.option("--smoothing-window", type=int, default=None)
@pass_run
def preprocess(run_ctx: RunContext, data_path, config_path, T_R, smoothing_window) -> None:
    """Smooth cumulative counts, split them into S, I, R fractions and derive daily new cases."""
    cfg = dataio.load_preprocess_config(config_path, T_R=T_R, smoothing_window=smoothing_window)
    result = dataio.preprocess(data_path, cfg)
    path = dataio.write_trajectory_csv(result.trajectory, run_ctx.path("trajectory.csv"))
    cases = pd.DataFrame(daily_new_cases(result.trajectory, cfg.populations), columns=result.raw.groups)
    cases.insert(0, "day", result.trajectory.times[:-1])
    cases_path = dataio.write_table_csv(cases, run_ctx.path("new_cases.csv"))
    run_ctx.report({"trajectory": path, "new_cases": cases_path, "days": len(result.trajectory),
                    "first_date": str(result.raw.dates[0].date())}, result.trajectory.to_frame())


@main.group()
def experiment() -> None:
    """Monte-Carlo checks of the chain against the ODE."""


@experiment.command()
@scenario_option
@click.option("--n-list", default="100,400,1600", show_default=True, help="Population sizes.")
@click.option("--lambda-scale", type=float, default=10.0, show_default=True, help="lambda = scale * sqrt(n).")
@click.option("--runs", "M", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--t-end", type=float, default=None)
@click.option("--sample-dt", type=float, default=0.5, show_default=True)
@pass_run
def converge(run_ctx: RunContext, config_path, n_list, lambda_scale, M, t_end, sample_dt) -> None:
    """Mean-square distance to the ODE as n and lambda grow."""
    scenario = dataio.load_scenario(config_path)
    table = convergence_sweep(
        scenario.to_params(), scenario.initial_state(), _int_list(n_list),
        lambda n: lambda_scale * math.sqrt(n), M, _given(t_end, scenario.t_end), sample_dt,
        base_seed=run_ctx.seed_for(scenario), mode=scenario.mode, n_jobs=run_ctx.n_jobs,
        progress=run_ctx.progress,
    )
    path = dataio.write_table_csv(table, run_ctx.path("converge.csv"))
    run_ctx.report({"table": path, "rows": table.to_dict(orient="records")}, table)


@experiment.command()
@scenario_option
@click.option("--n", type=click.IntRange(min=1), default=None, help="Population (default: sum of group sizes).")
@click.option("--runs", "M", type=click.IntRange(min=2), default=200, show_default=True)
@click.option("--t1", type=float, required=True)
@click.option("--t2", type=float, required=True)
@click.option("--group", type=int, default=None, help="1-based group; omitted means all groups.")
@click.option("--sample-dt", type=float, default=0.5, show_default=True)
@pass_run
def converse(run_ctx: RunContext, config_path, n, M, t1, t2, group, sample_dt) -> None:
    """Gap between simulated and ODE susceptible fraction at a fixed edge-update rate."""
    scenario = dataio.load_scenario(config_path)
    result = converse_gap(
        scenario.to_params(), scenario.initial_state(), n or sum(scenario.group_sizes), M, t1, t2,
        sample_dt=sample_dt, base_seed=run_ctx.seed_for(scenario),
        group=None if group is None else group - 1, mode=scenario.mode, n_jobs=run_ctx.n_jobs,
        progress=run_ctx.progress,
    )
    path = dataio.write_table_csv(result.table, run_ctx.path("converse.csv"))
    run_ctx.report({"table": path, "gap": result.gap, "stderr": result.stderr, "z": result.z,
                    "seed": result.seed}, result.table)


@experiment.command(name="edge-age")
@scenario_option
@click.option("--t", "t", type=float, required=True, help="Observation time.")
@click.option("--samples", type=click.IntRange(min=1), default=10_000, show_default=True)
@click.option("--pair", default=None, help="Track one ordered pair 'a,b' instead of pooling all pairs.")
@pass_run
def edge_age(run_ctx: RunContext, config_path, t, samples, pair) -> None:
    """Time since the last edge update, against its exponential-with-atom law."""
    scenario = dataio.load_scenario(config_path)
    chosen = tuple(_int_list(pair)) if pair else None
    if chosen is not None and len(chosen) != 2:
        raise click.BadParameter("--pair needs exactly two node indices")
    result = edge_age_distribution(scenario.to_params(), chosen, t, samples,
                                   base_seed=run_ctx.seed_for(scenario), progress=run_ctx.progress)
    table = pd.DataFrame({"age": result.ages, "at_horizon": result.at_horizon})
    path = dataio.write_table_csv(table, run_ctx.path("edge_age.csv"))
    summary = {
        "samples": path, "ks": result.ks, "critical": result.critical, "passed": result.passed,
        "atom_mass": result.atom_mass, "atom_expected": result.atom_expected, "atom_z": result.atom_z,
        "seed": result.seed,
    }
    dataio.write_json(summary, run_ctx.path("edge_age.json"))
    run_ctx.report(summary, table)


@experiment.command(name="edge-density")
@scenario_option
@click.option("--t", "t", type=float, default=0.0, show_default=True, help="Observation time.")
@click.option("--samples", type=click.IntRange(min=1), default=100, show_default=True)
@pass_run
def edge_density(run_ctx: RunContext, config_path, t, samples) -> None:
    """Directed-edge count per group block against rho_ij / n."""
    scenario = dataio.load_scenario(config_path)
    table = edge_density_check(scenario.to_params(), t, samples, base_seed=run_ctx.seed_for(scenario),
                               progress=run_ctx.progress)
    path = dataio.write_table_csv(table, run_ctx.path("edge_density.csv"))
    run_ctx.report({"table": path, "all_within": bool(table["within"].all())}, table)


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map failures to exit codes instead of raising."""
    try:
        main.main(args=argv, prog_name="age-sir-analyst", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 2
    return 0
