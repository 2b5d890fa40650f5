import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import pandas as pd

from app.errors import InfeasibleError, ParameterError, PlannerError, StructuralError
from app.models import SCENARIO_PRESETS, get_scenario
from app.services import dataset_service
from app.services.feasibility_service import validate_schedule
from app.services.milp_service import build_model
from app.services.schedule_service import cost_report, decode, energy_flow_report
from app.services.solver_service import INFEASIBLE, UNBOUNDED, SolveLimits, solve
from app.services.timeline_service import timeline_for
from app.utils.validators import validate_instance, validate_scenario

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = ["Total", "Charging", "Revenue", "Degradation", "Peak", "Peak kW", "Gap", "CPU"]
FLOW_COLUMNS = ["grid_import_kwh", "pv_to_bus_kwh", "ess_to_bus_kwh", "ess_to_grid_kwh", "v2g_export_kwh"]

BATTERY_COST = "battery_cost"
TARIFF_MARGIN = "tariff_margin"
PROJECTION = "projection"
GRID = "grid"
SWEEP_KINDS = (BATTERY_COST, TARIFF_MARGIN, PROJECTION, GRID)

PROJECTION_SCENARIOS = ("positive", "conservative", "pessimistic")

# buses x charger efficiency x PV area x ESS capacity
GRID_PRESET = {
    "buses": (28, 10),
    "efficiency": (0.82, 0.92),
    "pv_area_m2": (1876.6, 938.3),
    "ess_capacity_kwh": (1228.0, 614.0),
}


@dataclass(frozen=True)
class PipelineResult:
    scenario: object
    timeline: object
    model: object
    raw: object
    schedule: object
    costs: object
    flows: object
    violations: tuple = ()


def run_pipeline(instance, scenario, limits=None, backend="highs", cbc_path=None, timeline=None):
    """
    Validates, builds, solves, decodes and reports one scenario on one instance.

    Raises
    ------
    StructuralError
        The instance or scenario has fatal validation issues.
    InfeasibleError
        The solver proves the model infeasible or unbounded.
    PlannerError
        The solver stopped without any feasible solution.
    """
    report = validate_instance(instance)
    if report.fatal:
        raise StructuralError(f"Instance is not usable: {report.fatal[0]}")
    scenario_report = validate_scenario(scenario)
    if not scenario_report.ok:
        raise StructuralError(f"Scenario `{scenario.name}` is not usable: {scenario_report.issues[0]}")
    for issue in report:
        logger.warning(f"{issue}")

    timeline = timeline or timeline_for(instance, scenario)
    model = build_model(instance, timeline, scenario)
    raw = solve(model, limits, backend=backend, cbc_path=cbc_path)
    if raw.status in (INFEASIBLE, UNBOUNDED):
        raise InfeasibleError(f"Scenario `{scenario.name}` is {raw.status}: {raw.message}")
    if not raw.has_values:
        raise PlannerError(f"Scenario `{scenario.name}` stopped with status `{raw.status}` and no solution")

    schedule = decode(model, raw)
    violations = tuple(validate_schedule(instance, timeline, scenario, schedule))
    for violation in violations:
        logger.warning(f"{scenario.name}: {violation}")
    return PipelineResult(
        scenario=scenario,
        timeline=timeline,
        model=model,
        raw=raw,
        schedule=schedule,
        costs=cost_report(schedule, instance, scenario, raw),
        flows=energy_flow_report(schedule),
        violations=violations,
    )


def comparison_row(result):
    """One line of the scenario comparison table."""
    costs = result.costs
    return {
        "Total": costs.total_eur,
        "Charging": costs.charging_eur,
        "Revenue": costs.revenue_eur,
        "Degradation": costs.degradation_eur,
        "Peak": costs.peak_eur,
        "Peak kW": costs.peak_kw,
        "Gap": costs.mip_gap,
        "CPU": costs.solve_seconds,
    }


def _point(instance, scenario, limits, backend, cbc_path):
    """Solves one sweep point and flattens it into a row; failures become an `error` entry."""
    row = {"scenario": scenario.name, "status": None, "violations": None, "error": None}
    try:
        result = run_pipeline(instance, scenario, limits, backend, cbc_path)
    except PlannerError as e:
        logger.warning(f"Point `{scenario.name}` failed: {e}")
        row["status"] = "failed"
        row["error"] = str(e)
        return row
    row.update(comparison_row(result))
    row["status"] = result.raw.status
    row["violations"] = len(result.violations)
    row["v2g_revenue_eur"] = result.costs.v2g_revenue_eur
    row["ess_revenue_eur"] = result.costs.ess_revenue_eur
    flows = result.flows.to_dict()
    row.update({name: flows.get(name) for name in FLOW_COLUMNS})
    return row


def _point_task(args):
    return _point(*args)


def run_points(tasks, workers=1):
    """
    Solves independent (instance, scenario, limits, backend, cbc_path) points.
    Rows come back in task order whatever the completion order.
    """
    tasks = list(tasks)
    if workers is None or workers <= 1 or len(tasks) <= 1:
        return [_point_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_point_task, tasks))


# Scenario comparison


def run_scenarios(instance, scenarios, limits=None, backend="highs", cbc_path=None):
    """
    Runs the full pipeline once per scenario. Scenarios with the same
    minimum session length and discharge windows share one timeline.

    Returns
    -------
    results: dict
        Scenario name to PipelineResult, or to the PlannerError that stopped it.
    table: pandas.DataFrame
        One row per scenario with the comparison columns, status and error.
    """
    results = {}
    rows = []
    timelines = {}
    for scenario in scenarios:
        try:
            # the timeline depends on the session length and the window edges only
            key = (scenario.min_session_minutes, tuple(scenario.window_breakpoints))
            if key not in timelines:
                timelines[key] = timeline_for(instance, scenario)
            result = run_pipeline(instance, scenario, limits, backend, cbc_path, timeline=timelines[key])
        except PlannerError as e:
            logger.warning(f"Scenario `{scenario.name}` failed: {e}")
            results[scenario.name] = e
            rows.append({"scenario": scenario.name, "status": "failed", "error": str(e)})
            continue
        results[scenario.name] = result
        rows.append(
            {"scenario": scenario.name, **comparison_row(result), "status": result.raw.status, "error": None}
        )
    table = pd.DataFrame(rows, columns=["scenario"] + COMPARISON_COLUMNS + ["status", "error"])
    return results, table


def gap_tolerance(first, second):
    """Cost slack allowed between two reports solved to a relative gap."""
    return (first.mip_gap or 0.0) * abs(first.total_eur) + (second.mip_gap or 0.0) * abs(
        second.total_eur
    )


def at_most(first, second):
    """True when `first` costs no more than `second`, up to their combined gaps."""
    return first.total_eur <= second.total_eur + gap_tolerance(first, second) + 1e-6


def nesting_holds(results):
    """all <= pp_v2g_dc <= basic (ex post) on a run_scenarios result mapping."""
    basic, middle, full = (results.get(name) for name in ("basic", "pp_v2g_dc", "all"))
    if not all(isinstance(r, PipelineResult) for r in (basic, middle, full)):
        return False
    return at_most(full.costs, middle.costs) and at_most(middle.costs, basic.costs)


# Sweeps


@dataclass(frozen=True)
class SweepSpec:
    """
    One family of re-solves: `points` are battery costs keyed by year, tariff margins,
    (year, projection scenario) pairs or grid labels, depending on `kind`.
    """

    kind: str
    points: tuple
    base_scenario: object = field(default_factory=lambda: get_scenario("all"))
    limits: SolveLimits = field(default_factory=SolveLimits)

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ParameterError(f"Unknown sweep `{self.kind}`; expected one of: {', '.join(SWEEP_KINDS)}")
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise ParameterError(f"Sweep `{self.kind}` has no points")
        if len(set(self.points)) != len(self.points):
            raise ParameterError(f"Sweep `{self.kind}` repeats a point")


def margin_grid(start=0.40, stop=1.10, step=0.05):
    """Evenly spaced margins from `start` to `stop` inclusive."""
    if step <= 0 or stop < start:
        raise ParameterError(f"Bad margin grid {start}..{stop} step {step}")
    count = int(round((stop - start) / step)) + 1
    return [round(start + n * step, 10) for n in range(count)]


def with_battery_cost(instance, eur_per_kwh):
    buses = tuple(replace(bus, replacement_cost_eur_per_kwh=eur_per_kwh) for bus in instance.buses)
    return instance.with_changes(buses=buses)


def sweep_battery_cost(
    instance, battery_costs, limits=None, scenario=None, backend="highs", cbc_path=None, workers=1
):
    """
    Re-solves the baseline once per projected battery cost.

    Params
    ------
    battery_costs: dict
        {year: replacement cost in EUR/kWh}.

    Returns
    -------
    pandas.DataFrame
        year, battery cost, total, degradation, V2G revenue, gap, time, status.
    """
    scenario = scenario or get_scenario("all")
    spec = SweepSpec(BATTERY_COST, tuple(sorted(battery_costs)), scenario, limits or SolveLimits())
    tasks = [
        (with_battery_cost(instance, battery_costs[year]), spec.base_scenario, spec.limits, backend, cbc_path)
        for year in spec.points
    ]
    rows = run_points(tasks, workers)
    for year, row in zip(spec.points, rows):
        row["year"] = year
        row["battery_cost_eur_per_kwh"] = battery_costs[year]
    columns = [
        "year",
        "battery_cost_eur_per_kwh",
        "Total",
        "Degradation",
        "v2g_revenue_eur",
        "Gap",
        "CPU",
        "status",
        "violations",
        "error",
    ]
    return pd.DataFrame(rows).reindex(columns=columns)


def sweep_tariff_margin(
    instance, margins, limits=None, scenario=None, backend="highs", cbc_path=None, workers=1
):
    """Re-solves the baseline once per sell margin; one row per margin in the given order."""
    scenario = scenario or get_scenario("all")
    spec = SweepSpec(TARIFF_MARGIN, tuple(margins), scenario, limits or SolveLimits())
    tasks = [
        (
            instance,
            spec.base_scenario.with_changes(tariff_margin_frac=margin, name=f"{scenario.name}@{margin:.2f}"),
            spec.limits,
            backend,
            cbc_path,
        )
        for margin in spec.points
    ]
    rows = run_points(tasks, workers)
    for margin, row in zip(spec.points, rows):
        row["margin"] = margin
    columns = ["margin"] + COMPARISON_COLUMNS + FLOW_COLUMNS + ["status", "violations", "error"]
    return pd.DataFrame(rows).reindex(columns=columns)


@dataclass(frozen=True)
class ProjectionTables:
    """
    Projected sell margins per (year, scenario), split into the energy-only share and the
    green-certificate bonus. The margin actually used is their sum.
    """

    energy: dict
    gc_bonus: dict

    def __post_init__(self):
        for key, value in {**self.energy, **self.gc_bonus}.items():
            if value < 0:
                raise ParameterError(f"Negative margin for {key}")
        if set(self.energy) != set(self.gc_bonus):
            raise ParameterError("Energy and certificate tables cover different (year, scenario) pairs")

    @classmethod
    def from_frame(cls, frame):
        energy, bonus = {}, {}
        for row in frame.itertuples(index=False):
            key = (int(row.year), str(row.scenario))
            energy[key] = float(row.energy_margin_frac)
            bonus[key] = float(row.gc_bonus_frac)
        return cls(energy=energy, gc_bonus=bonus)

    @classmethod
    def bundled(cls):
        return cls.from_frame(dataset_service.load_margin_projections())

    @property
    def years(self):
        return sorted({year for year, _ in self.energy})

    @property
    def scenarios(self):
        return sorted({name for _, name in self.energy})

    def _lookup(self, table, year, scenario):
        try:
            return table[(year, scenario)]
        except KeyError:
            raise ParameterError(f"No projection for {scenario} in {year}")

    def energy_margin(self, year, scenario):
        return self._lookup(self.energy, year, scenario)

    def bonus(self, year, scenario):
        return self._lookup(self.gc_bonus, year, scenario)

    def combined(self, year, scenario):
        return self.energy_margin(year, scenario) + self.bonus(year, scenario)

    def gc_share(self, year, scenario):
        """Fraction of discharge revenue owed to certificates."""
        combined = self.combined(year, scenario)
        return self.bonus(year, scenario) / combined if combined else 0.0


def battery_cost_for_year(battery_costs, year):
    """The latest tabulated cost at or before `year` (the earliest one before the table starts)."""
    known = sorted(battery_costs)
    earlier = [y for y in known if y <= year]
    return battery_costs[earlier[-1] if earlier else known[0]]


def project_scenarios(
    instance,
    tables,
    limits=None,
    years=None,
    scenarios=PROJECTION_SCENARIOS,
    battery_costs=None,
    scenario=None,
    backend="highs",
    cbc_path=None,
    workers=1,
):
    """
    Re-solves the baseline for every (year, projection scenario) pair with that pair's margin.

    When `battery_costs` is given, each year also uses the battery cost in force that year.
    Discharge revenue is split into an energy part and a certificate part in proportion to
    the two margin components.

    Raises
    ------
    ParameterError
        A requested (year, scenario) pair is missing from the tables.
    """
    base = scenario or get_scenario("all")
    years = list(years) if years is not None else tables.years
    points = tuple((year, name) for year in years for name in scenarios)
    spec = SweepSpec(PROJECTION, points, base, limits or SolveLimits())

    tasks = []
    for year, name in spec.points:
        margin = tables.combined(year, name)
        point_instance = instance
        if battery_costs:
            point_instance = with_battery_cost(instance, battery_cost_for_year(battery_costs, year))
        point_scenario = base.with_changes(tariff_margin_frac=margin, name=f"{name}-{year}")
        tasks.append((point_instance, point_scenario, spec.limits, backend, cbc_path))

    rows = run_points(tasks, workers)
    for (year, name), row in zip(spec.points, rows):
        share = tables.gc_share(year, name)
        revenue = row.get("Revenue") or 0.0
        row.update(
            {
                "year": year,
                "projection": name,
                "margin": tables.combined(year, name),
                "energy_margin": tables.energy_margin(year, name),
                "gc_bonus": tables.bonus(year, name),
                "gc_share": share,
                "energy_revenue_eur": revenue * (1.0 - share),
                "gc_revenue_eur": revenue * share,
            }
        )
    columns = [
        "year",
        "projection",
        "margin",
        "energy_margin",
        "gc_bonus",
        "Total",
        "Revenue",
        "energy_revenue_eur",
        "gc_revenue_eur",
        "gc_share",
        "Gap",
        "CPU",
        "status",
        "violations",
        "error",
    ]
    return pd.DataFrame(rows).reindex(columns=columns)


# Instance variations


def variation_label(n_buses, efficiency, pv_area_m2, ess_capacity_kwh):
    return f"{n_buses}B-{round(efficiency * 100)}E-{int(pv_area_m2)}PV-{int(ess_capacity_kwh)}ESS"


def vary_instance(instance, n_buses, efficiency, pv_area_m2, ess_capacity_kwh):
    """
    Copy of an instance keeping the first `n_buses` buses and their trips, with every
    charger at `efficiency` and the overnight depot's PV area and ESS capacity replaced.
    """
    if n_buses > len(instance.buses):
        raise ParameterError(f"Instance has {len(instance.buses)} buses, variation asks for {n_buses}")
    buses = tuple(sorted(instance.buses, key=lambda b: b.id)[:n_buses])
    kept = {bus.id for bus in buses}
    overnight = instance.overnight_depot
    depots = []
    for depot in instance.depots:
        chargers = tuple(
            replace(c, charge_efficiency_frac=efficiency, discharge_efficiency_frac=efficiency)
            for c in depot.chargers
        )
        changes = {"chargers": chargers}
        if depot.id == overnight.id:
            changes.update(pv_area_m2=pv_area_m2, ess_capacity_kwh=ess_capacity_kwh)
        depots.append(replace(depot, **changes))
    trips = tuple(trip for trip in instance.trips if trip.bus_id in kept)
    return instance.with_changes(buses=buses, depots=tuple(depots), trips=trips)


def grid_variations(instance, preset=None):
    """(label, instance) for every combination of the grid preset."""
    preset = preset or GRID_PRESET
    variations = []
    for n_buses in preset["buses"]:
        for efficiency in preset["efficiency"]:
            for pv_area in preset["pv_area_m2"]:
                for ess in preset["ess_capacity_kwh"]:
                    label = variation_label(n_buses, efficiency, pv_area, ess)
                    variations.append((label, vary_instance(instance, n_buses, efficiency, pv_area, ess)))
    return variations


def run_grid(instance, limits=None, scenario=None, preset=None, backend="highs", cbc_path=None, workers=1):
    """Solves the baseline on every grid variation; one row per label."""
    scenario = scenario or get_scenario("all")
    variations = grid_variations(instance, preset)
    spec = SweepSpec(GRID, tuple(label for label, _ in variations), scenario, limits or SolveLimits())
    tasks = [(varied, spec.base_scenario, spec.limits, backend, cbc_path) for _, varied in variations]
    rows = run_points(tasks, workers)
    for label, row in zip(spec.points, rows):
        row["label"] = label
    columns = ["label"] + COMPARISON_COLUMNS + ["status", "violations", "error"]
    return pd.DataFrame(rows).reindex(columns=columns)


def preset_scenarios(names=None):
    return [get_scenario(name) for name in (names or SCENARIO_PRESETS)]
