import itertools
import logging
from dataclasses import dataclass, field

from app.errors import ParameterError
from app.services import milp_service as milp
from app.services.solver_service import INFEASIBLE, OPTIMAL, STATUSES_WITH_VALUES, SolveLimits, solve

logger = logging.getLogger(__name__)

MAX_FREE_BINARIES = 20

SESSION_MODES = (
    (milp.CHARGE, milp.CHARGE_START, milp.CHARGE_CONT, milp.CHARGE_STOP),
    (milp.DISCHARGE, milp.DISCHARGE_START, milp.DISCHARGE_CONT, milp.DISCHARGE_STOP),
)


@dataclass(frozen=True)
class OracleResult:
    status: str
    objective_value: float | None = None
    assignment: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    enumerated: int = 0
    lp_solves: int = 0


def free_binaries(model):
    """Charger assignment binaries not fixed by bounds."""
    return [
        var
        for family in (milp.CHARGE, milp.DISCHARGE)
        for var in model.variables.family(family)
        if var.upper > var.lower
    ]


def derive_session_indicators(model, assignment):
    """
    Start, continuation and stop indicators implied by an assignment of charger binaries.
    Returns None when a bus would hold two chargers in one slot.
    """
    registry, timeline = model.variables, model.timeline
    final = timeline.final_event
    derived = {}
    for bus in model.instance.buses:
        for binary, start, cont, stop in SESSION_MODES:
            plugged = []
            for e in timeline.event_indices:
                total = sum(
                    assignment.get(registry[registry.column(binary, *key)].name, 0)
                    for key in model.slots
                    if key[1] == bus.id and key[3] == e
                )
                if total > 1:
                    return None
                plugged.append(total)
            for e in timeline.event_indices:
                now = plugged[e - 1]
                before = plugged[e - 2] if e > 1 else 0
                after = plugged[e] if e < final else 0
                continuing = 1 if (e > 1 and now and before) else 0
                following = 1 if (e < final and now and after) else 0
                derived[registry[registry.column(cont, bus.id, e)].name] = continuing
                derived[registry[registry.column(start, bus.id, e)].name] = now - continuing
                stop_value = 1 if e == final else now - following
                derived[registry[registry.column(stop, bus.id, e)].name] = stop_value
    return derived


def _binary_rows(model):
    integer = {var.column for var in model.variables if var.integer}
    return [row for row in model.constraints if all(col in integer for col, _ in row.terms)]


def brute_force_oracle(
    instance, timeline, scenario, limits=None, backend="highs", cbc_path=None, max_binaries=MAX_FREE_BINARIES
):
    """Exact optimum of a tiny instance, independent of branch and bound."""
    model = milp.build_model(instance, timeline, scenario)
    return enumerate_model(model, limits, backend, cbc_path, max_binaries)


def enumerate_model(model, limits=None, backend="highs", cbc_path=None, max_binaries=MAX_FREE_BINARIES):
    """
    Exact optimum of a tiny model by enumeration.

    Every assignment of the free charger binaries is expanded into its session indicators
    (and each peak level when the scenario chooses one), screened against the rows that
    involve binaries only, and the remaining continuous problem is solved with all
    binaries fixed.

    Raises
    ------
    ParameterError
        More than `max_binaries` free charger binaries.
    """
    limits = limits or SolveLimits(max_seconds=60, rel_gap_frac=0.0)
    free = free_binaries(model)
    if len(free) > max_binaries:
        raise ParameterError(
            f"Oracle refuses {len(free)} free binaries (limit {max_binaries})"
        )
    registry = model.variables
    screening = _binary_rows(model)
    fixed_integers = {var.name: var.lower for var in registry if var.integer and var.upper == var.lower}

    if model.scenario.enable_peak_cost:
        levels = registry.family(milp.PEAK_LEVEL)
        peak_choices = [{lv.name: 1 if lv is choice else 0 for lv in levels} for choice in levels]
    else:
        peak_choices = [{var.name: 0 for var in registry.family(milp.PEAK_LEVEL)}]

    best = None
    enumerated = 0
    lp_solves = 0
    for bits in itertools.product((0, 1), repeat=len(free)):
        assignment = dict(fixed_integers)
        assignment.update({var.name: bit for var, bit in zip(free, bits)})
        derived = derive_session_indicators(model, assignment)
        if derived is None:
            continue
        assignment.update(derived)
        for peak in peak_choices:
            enumerated += 1
            candidate = dict(assignment)
            candidate.update(peak)
            vector = [0.0] * len(registry)
            for name, value in candidate.items():
                vector[registry.column_of(name)] = value
            if any(row.violation(vector) > 1e-9 for row in screening):
                continue
            overrides = {name: (value, value) for name, value in candidate.items()}
            lp_solves += 1
            raw = solve(model, limits, backend=backend, cbc_path=cbc_path, overrides=overrides)
            if raw.status not in STATUSES_WITH_VALUES:
                continue
            if best is None or raw.objective_value < best[0] - 1e-12:
                best = (raw.objective_value, candidate, raw.values)

    logger.info(f"Oracle enumerated {enumerated} assignments, solved {lp_solves} residual problems")
    if best is None:
        return OracleResult(INFEASIBLE, enumerated=enumerated, lp_solves=lp_solves)
    objective, candidate, values = best
    chosen = {name: value for name, value in candidate.items() if value}
    return OracleResult(OPTIMAL, objective, chosen, values, enumerated, lp_solves)
