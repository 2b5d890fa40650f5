"""
Command line surface of the planner, registered on the Flask CLI.
"""

import json
from functools import wraps
from pathlib import Path

import click
from flask import current_app
from flask.cli import with_appcontext

from app.errors import PlannerError, StructuralError
from app.models import SCENARIO_PRESETS
from app.services import dataset_service, experiment_service
from app.services.feasibility_service import validate_schedule
from app.services.instance_generator import generate_instance
from app.services.milp_service import build_model
from app.services.schedule_service import cost_report, decode, energy_flow_report
from app.services.solver_service import export_model, solver_identity
from app.services.timeline_service import timeline_for
from app.utils.serializers import (
    error_payload,
    serialize_cost_report,
    serialize_instance_summary,
    serialize_model_summary,
    serialize_validation_report,
    serialize_violations,
    success_payload,
)
from app.utils.validators import parse_hhmm, validate_instance

SWEEP_CHOICES = ("battery-cost", "tariff-margin", "projection", "grid")


def planner_errors(f):
    """
    Turns a PlannerError into a one-line diagnostic on stderr and the error's exit code.
    """

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except PlannerError as e:
            current_app.logger.warning(f"{type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            click.get_current_context().exit(e.exit_code)

    return decorated_function


def input_options(f):
    """Input file options shared by every command that reads an instance."""
    options = [
        click.option("--instance-dir", type=click.Path(file_okay=False), help="Directory written by `gen`."),
        click.option("--trips", type=click.Path(dir_okay=False)),
        click.option("--tariff", type=click.Path(dir_okay=False)),
        click.option("--solar", type=click.Path(dir_okay=False)),
        click.option("--fleet", type=click.Path(dir_okay=False)),
        click.option("--infrastructure", type=click.Path(dir_okay=False)),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def solver_options(f):
    options = [
        click.option("--max-seconds", type=float, help="Solver time limit."),
        click.option("--gap", "rel_gap_frac", type=float, help="Relative MIP gap to stop at."),
        click.option("--threads", type=int),
        click.option("--solver", type=click.Choice(["highs", "cbc"])),
        click.option("--cbc-path"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _parse_windows(ctx, param, values):
    windows = []
    for text in values:
        start, _, end = text.partition("-")
        minutes = (parse_hhmm(start), parse_hhmm(end))
        if None in minutes:
            raise click.BadParameter(f"`{text}` is not an HH:MM-HH:MM window")
        windows.append(list(minutes))
    return windows or None


def scenario_options(default):
    """
    Preset plus the scenario knobs, folded into a single `scenario` keyword holding the
    arguments of dataset_service.scenario_setting.
    """

    def decorator(f):
        @wraps(f)
        def folded(*args, scenario, scenario_file, margin, min_session, windows, consistent, **kwargs):
            setting = {
                "preset": scenario,
                "scenario_file": scenario_file,
                "tariff_margin_frac": margin,
                "min_session_minutes": min_session,
                "discharge_windows": windows,
                "literal_loss_accounting": False if consistent else None,
            }
            return f(*args, scenario=setting, **kwargs)

        options = [
            click.option("--scenario", type=click.Choice(list(SCENARIO_PRESETS)), default=default, show_default=True),
            click.option(
                "--scenario-file",
                type=click.Path(dir_okay=False),
                help="JSON object of scenario fields laid over the preset.",
            ),
            click.option("--margin", type=float, help="Sell price as a fraction of the purchase price."),
            click.option("--min-session", type=float, help="Minimum session length in minutes."),
            click.option(
                "--window",
                "windows",
                multiple=True,
                callback=_parse_windows,
                help="Discharge window as HH:MM-HH:MM; repeat for several.",
            ),
            click.option("--consistent", is_flag=True, help="Book discharge losses on the grid side."),
        ]
        for option in reversed(options):
            folded = option(folded)
        return folded

    return decorator


json_option = click.option("--json", "as_json", is_flag=True, help="Print a JSON payload.")


def _load(instance_dir=None, scenario=None, **values):
    """Run config plus instance, from an instance directory or the individual files."""
    if scenario is not None:
        values["scenario"] = dataset_service.scenario_setting(**scenario)
    config = dataset_service.run_config_from_app(current_app.config, **values)
    config.scenario_config()
    if instance_dir:
        instance = dataset_service.load_instance(instance_dir)
    else:
        instance = dataset_service.parse_inputs(config)
    return config, instance


def _emit(as_json, payload, lines):
    if as_json:
        click.echo(json.dumps(payload, indent=2, default=str))
    else:
        for line in lines:
            click.echo(line)


@click.command("validate")
@input_options
@json_option
@with_appcontext
@planner_errors
def validate_command(instance_dir, trips, tariff, solar, fleet, infrastructure, as_json):
    """Check an instance and list every problem found."""
    _, instance = _load(
        instance_dir, trips=trips, tariff=tariff, solar=solar, fleet=fleet, infrastructure=infrastructure
    )
    report = validate_instance(instance)
    data = {"instance": serialize_instance_summary(instance), "report": serialize_validation_report(report)}
    if report.ok:
        _emit(as_json, success_payload(data, "Instance is valid"), [f"{instance!r}: valid"])
        return
    message = f"{len(report)} issue(s), {len(report.fatal)} fatal"
    _emit(
        as_json,
        error_payload(message, errors=data["report"]["issues"], exit_code=StructuralError.exit_code),
        [str(issue) for issue in report],
    )
    raise StructuralError(message)


@click.command("build")
@input_options
@scenario_options("basic")
@click.option("--output", "-o", type=click.Path(dir_okay=False), help="Model file (.mps or .lp).")
@json_option
@with_appcontext
@planner_errors
def build_command(instance_dir, trips, tariff, solar, fleet, infrastructure, scenario, output, as_json):
    """Build the model and write it as an MPS or LP file without solving."""
    config, instance = _load(
        instance_dir,
        trips=trips,
        tariff=tariff,
        solar=solar,
        fleet=fleet,
        infrastructure=infrastructure,
        scenario=scenario,
    )
    scenario_config = config.scenario_config()
    timeline = timeline_for(instance, scenario_config)
    model = build_model(instance, timeline, scenario_config)
    path = Path(output) if output else config.output_dir / f"{scenario_config.name}.mps"
    path.parent.mkdir(parents=True, exist_ok=True)
    export_model(model, path)
    summary = serialize_model_summary(model)
    summary["path"] = str(path)
    _emit(
        as_json,
        success_payload(summary, "Model written"),
        [f"{model!r}", f"written to {path}"],
    )


@click.command("solve")
@input_options
@scenario_options("basic")
@solver_options
@click.option("--run-dir", type=click.Path(file_okay=False), help="Defaults to OUTPUT_DIR/<scenario>-<hash>.")
@json_option
@with_appcontext
@planner_errors
def solve_command(
    instance_dir,
    trips,
    tariff,
    solar,
    fleet,
    infrastructure,
    scenario,
    max_seconds,
    rel_gap_frac,
    threads,
    solver,
    cbc_path,
    run_dir,
    as_json,
):
    """Solve one scenario and write schedule, flows and cost reports to a run directory."""
    config, instance = _load(
        instance_dir,
        trips=trips,
        tariff=tariff,
        solar=solar,
        fleet=fleet,
        infrastructure=infrastructure,
        scenario=scenario,
        max_seconds=max_seconds,
        rel_gap_frac=rel_gap_frac,
        threads=threads,
        solver=solver,
        cbc_path=cbc_path,
    )
    scenario_config = config.scenario_config()
    limits = config.solve_limits()
    result = experiment_service.run_pipeline(
        instance, scenario_config, limits, backend=config.solver, cbc_path=config.cbc_path
    )
    if not run_dir:
        run_dir = config.output_dir / f"{scenario_config.name}-{instance.fingerprint()}"
    run_dir = Path(run_dir)
    if instance_dir:
        inputs = {"instance_dir": instance_dir}
    else:
        inputs = {name: config.input_path(name) for name in dataset_service.DEFAULT_FILES}
    manifest = dataset_service.make_manifest(
        instance,
        scenario_config,
        limits,
        solver_identity(config.solver, config.cbc_path),
        inputs=inputs,
        status=result.raw.status,
    )
    dataset_service.write_run(
        run_dir,
        instance,
        result.timeline,
        result.raw,
        manifest,
        schedule=result.schedule,
        costs=result.costs,
        flows=result.flows,
    )
    costs = serialize_cost_report(result.costs)
    _emit(
        as_json,
        success_payload(
            {"run_dir": str(run_dir), "costs": costs, "violations": serialize_violations(result.violations)},
            f"Solved {scenario_config.name}: {result.raw.status}",
        ),
        [
            f"{scenario_config.name}: {result.raw.status}, total {costs['total_eur']} EUR",
            f"outputs in {run_dir}",
        ],
    )


@click.command("report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@json_option
@with_appcontext
@planner_errors
def report_command(run_dir, as_json):
    """Re-derive schedule and reports from a saved solution."""
    instance, scenario, raw, manifest = dataset_service.load_run(run_dir)
    timeline = timeline_for(instance, scenario)
    model = build_model(instance, timeline, scenario)
    schedule = decode(model, raw)
    costs = cost_report(schedule, instance, scenario, raw)
    flows = energy_flow_report(schedule)
    violations = validate_schedule(instance, timeline, scenario, schedule)
    dataset_service.write_run(
        run_dir, instance, timeline, raw, manifest, schedule=schedule, costs=costs, flows=flows
    )
    data = {
        "costs": serialize_cost_report(costs),
        "flows": flows.to_dict(),
        "violations": serialize_violations(violations),
    }
    lines = [f"{key}: {value}" for key, value in data["costs"].items()]
    lines += [str(v) for v in violations]
    _emit(as_json, success_payload(data, f"Report for {scenario.name}"), lines)


@click.command("sweep")
@click.argument("kind", type=click.Choice(SWEEP_CHOICES))
@input_options
@solver_options
@scenario_options("all")
@click.option("--from", "start", type=float, default=0.40, show_default=True, help="First margin.")
@click.option("--to", "stop", type=float, default=1.10, show_default=True, help="Last margin.")
@click.option("--step", type=float, default=0.05, show_default=True)
@click.option("--years", help="Comma-separated years for battery-cost and projection sweeps.")
@click.option("--with-battery-cost", is_flag=True, help="Projection years also use that year's battery cost.")
@click.option("--workers", type=int, help="Parallel solves (SWEEP_WORKERS by default).")
@click.option("--output", "-o", type=click.Path(dir_okay=False), help="Result CSV.")
@with_appcontext
@planner_errors
def sweep_command(
    kind,
    instance_dir,
    trips,
    tariff,
    solar,
    fleet,
    infrastructure,
    max_seconds,
    rel_gap_frac,
    threads,
    solver,
    cbc_path,
    scenario,
    start,
    stop,
    step,
    years,
    with_battery_cost,
    workers,
    output,
):
    """Re-solve the baseline over battery costs, tariff margins, projections or the variation grid."""
    config, instance = _load(
        instance_dir,
        trips=trips,
        tariff=tariff,
        solar=solar,
        fleet=fleet,
        infrastructure=infrastructure,
        scenario=scenario,
        max_seconds=max_seconds,
        rel_gap_frac=rel_gap_frac,
        threads=threads,
        solver=solver,
        cbc_path=cbc_path,
    )
    workers = workers or current_app.config["SWEEP_WORKERS"]
    common = {
        "limits": config.solve_limits(),
        "scenario": config.scenario_config(),
        "backend": config.solver,
        "cbc_path": config.cbc_path,
        "workers": workers,
    }
    selected_years = [int(y) for y in years.split(",")] if years else None

    if kind == "tariff-margin":
        table = experiment_service.sweep_tariff_margin(
            instance, experiment_service.margin_grid(start, stop, step), **common
        )
    elif kind == "battery-cost":
        costs = dataset_service.load_battery_costs()
        if selected_years:
            costs = {year: costs[year] for year in selected_years if year in costs}
        table = experiment_service.sweep_battery_cost(instance, costs, **common)
    elif kind == "projection":
        tables = experiment_service.ProjectionTables.bundled()
        battery_costs = dataset_service.load_battery_costs() if with_battery_cost else None
        table = experiment_service.project_scenarios(
            instance, tables, years=selected_years, battery_costs=battery_costs, **common
        )
    else:
        table = experiment_service.run_grid(instance, **common)

    path = Path(output) if output else config.output_dir / f"sweep-{kind}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    failed = int(table["error"].notna().sum())
    current_app.logger.info(f"Sweep {kind}: {len(table)} points, {failed} failed")
    click.echo(f"{len(table)} rows written to {path}")


@click.command("gen")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--buses", type=int, default=28, show_default=True)
@click.option("--trips", "n_trips", type=int, default=232, show_default=True)
@click.option("--output", "-o", type=click.Path(file_okay=False), required=True)
@with_appcontext
@planner_errors
def gen_command(seed, buses, n_trips, output):
    """Generate a synthetic instance directory."""
    instance = generate_instance(seed, buses, n_trips)
    dataset_service.write_instance(instance, output)
    click.echo(f"{instance!r} written to {output}")


def register_commands(app):
    for command in (
        validate_command,
        build_command,
        solve_command,
        report_command,
        sweep_command,
        gen_command,
    ):
        app.cli.add_command(command)
