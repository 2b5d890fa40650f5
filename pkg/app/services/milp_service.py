import logging
import math
from collections import Counter, defaultdict, namedtuple
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from app.errors import StructuralError
from app.utils.energy_utils import DegradationParams, solar_yield

logger = logging.getLogger(__name__)

INF = math.inf

# variable families
CHARGE = "charge"
DISCHARGE = "discharge"
CHARGE_MIN = "charge_min"
DISCHARGE_MIN = "discharge_min"
CHARGE_START = "charge_start"
DISCHARGE_START = "discharge_start"
CHARGE_CONT = "charge_cont"
DISCHARGE_CONT = "discharge_cont"
CHARGE_STOP = "charge_stop"
DISCHARGE_STOP = "discharge_stop"
PEAK_LEVEL = "peak_level"
SOC = "soc"
GRID_BUY = "grid_buy"
GRID_SELL = "grid_sell"
DEGRADATION = "degradation"
PV_TO_BUS = "pv_to_bus"
ESS_TO_BUS = "ess_to_bus"
PV_TO_ESS = "pv_to_ess"
ESS_LEVEL = "ess_level"
ESS_EXPORT = "ess_export"

BINARY_FAMILIES = (
    CHARGE,
    DISCHARGE,
    CHARGE_START,
    DISCHARGE_START,
    CHARGE_CONT,
    DISCHARGE_CONT,
    CHARGE_STOP,
    DISCHARGE_STOP,
    PEAK_LEVEL,
)

OBJECTIVE_GROUPS = ("peak", "charging", "selling", "degradation")

LE, GE, EQ = "<=", ">=", "=="

MatrixForm = namedtuple(
    "MatrixForm", ["c", "A", "row_lower", "row_upper", "lower", "upper", "integrality"]
)


@dataclass(frozen=True)
class Variable:
    column: int
    name: str
    family: str
    key: tuple
    lower: float = 0.0
    upper: float = INF
    integer: bool = False


@dataclass(frozen=True)
class Constraint:
    name: str
    family: str
    terms: tuple
    sense: str
    rhs: float

    def activity(self, values):
        return sum(coef * values[col] for col, coef in self.terms)

    def violation(self, values):
        """How far `values` are from satisfying the row (0 when satisfied)."""
        lhs = self.activity(values)
        if self.sense == LE:
            return max(0.0, lhs - self.rhs)
        if self.sense == GE:
            return max(0.0, self.rhs - lhs)
        return abs(lhs - self.rhs)


class VariableRegistry:
    """Columns of a model, addressable by name or by (family, key)."""

    def __init__(self):
        self._variables = []
        self._by_key = {}
        self._by_name = {}
        self._families = defaultdict(list)

    def add(self, family, key, name, lower=0.0, upper=INF, integer=False):
        if name in self._by_name:
            raise StructuralError(f"Variable `{name}` registered twice")
        column = len(self._variables)
        var = Variable(column, name, family, tuple(key), lower, upper, integer)
        self._variables.append(var)
        self._by_key[(family, var.key)] = column
        self._by_name[name] = column
        self._families[family].append(column)
        return column

    def column(self, family, *key):
        return self._by_key.get((family, tuple(key)))

    def column_of(self, name):
        return self._by_name[name]

    def __getitem__(self, column):
        return self._variables[column]

    def set_bounds(self, column, lower, upper):
        self._variables[column] = replace(self._variables[column], lower=lower, upper=upper)

    def fix(self, column, value=0.0):
        self.set_bounds(column, value, value)

    def family(self, family):
        return [self._variables[col] for col in self._families.get(family, [])]

    def families(self):
        return list(self._families)

    def __len__(self):
        return len(self._variables)

    def __iter__(self):
        return iter(self._variables)

    @property
    def names(self):
        return [var.name for var in self._variables]


class MilpModel:
    """
    Solver-agnostic mixed-integer model: columns, linear rows and a minimization objective.
    Built once by `build_model`; read-only afterwards.
    """

    def __init__(self, instance, timeline, scenario):
        self.instance = instance
        self.timeline = timeline
        self.scenario = scenario
        self.variables = VariableRegistry()
        self.constraints = []
        self.objective = {}
        self.objective_groups = {}
        self.metadata = {}
        # (depot_id, bus_id, charger_index, e) tuples where a bus may use a charger
        self.slots = []
        self._frozen = False

    def _guard(self):
        if self._frozen:
            raise StructuralError("Model is read-only once built")

    def add_constraint(self, family, suffix, terms, sense, rhs):
        self._guard()
        merged = defaultdict(float)
        for col, coef in terms:
            if col is None:
                continue
            merged[col] += coef
        row = Constraint(
            name=f"{family}_{suffix}" if suffix else family,
            family=family,
            terms=tuple((col, coef) for col, coef in merged.items() if coef != 0.0),
            sense=sense,
            rhs=float(rhs),
        )
        self.constraints.append(row)
        return row

    def add_objective_term(self, group, column, coef):
        self._guard()
        if column is None or coef == 0.0:
            return
        self.objective[column] = self.objective.get(column, 0.0) + coef
        bucket = self.objective_groups.setdefault(group, {})
        bucket[column] = bucket.get(column, 0.0) + coef

    def freeze(self):
        self._frozen = True
        return self

    @property
    def num_variables(self):
        return len(self.variables)

    @property
    def num_constraints(self):
        return len(self.constraints)

    def family_counts(self):
        return Counter(row.family for row in self.constraints)

    def constraint_count(self, family):
        return sum(1 for row in self.constraints if row.family == family)

    def rows(self, family):
        return [row for row in self.constraints if row.family == family]

    def bounds(self, overrides=None):
        """Column bounds as arrays, with optional {name: (lower, upper)} overrides."""
        lower = np.array([var.lower for var in self.variables], dtype=float)
        upper = np.array([var.upper for var in self.variables], dtype=float)
        for name, (lo, hi) in (overrides or {}).items():
            col = self.variables.column_of(name)
            lower[col], upper[col] = lo, hi
        return lower, upper

    def to_matrix(self, overrides=None):
        n = self.num_variables
        c = np.zeros(n)
        for col, coef in self.objective.items():
            c[col] = coef
        rows, cols, data = [], [], []
        row_lower = np.empty(len(self.constraints))
        row_upper = np.empty(len(self.constraints))
        for i, row in enumerate(self.constraints):
            for col, coef in row.terms:
                rows.append(i)
                cols.append(col)
                data.append(coef)
            row_lower[i] = -INF if row.sense == LE else row.rhs
            row_upper[i] = INF if row.sense == GE else row.rhs
        A = sparse.csr_matrix((data, (rows, cols)), shape=(len(self.constraints), n))
        lower, upper = self.bounds(overrides)
        integrality = np.array([1 if var.integer else 0 for var in self.variables])
        return MatrixForm(c, A, row_lower, row_upper, lower, upper, integrality)

    def evaluate_objective(self, values):
        return sum(coef * values[col] for col, coef in self.objective.items())

    def evaluate_group(self, group, values):
        return sum(coef * values[col] for col, coef in self.objective_groups.get(group, {}).items())

    def violated_rows(self, values, tolerance=1e-6):
        return [row for row in self.constraints if row.violation(values) > tolerance]

    def value_vector(self, named_values):
        """Dense column vector from a {name: value} mapping; missing names read as 0."""
        vector = np.zeros(self.num_variables)
        for name, value in named_values.items():
            vector[self.variables.column_of(name)] = value
        return vector

    def __repr__(self):
        return (
            f"<MilpModel {self.scenario.name}: {self.num_variables} variables, "
            f"{self.num_constraints} constraints>"
        )


def _bus_label(model, bus_id):
    return f"b{model.instance.bus_position(bus_id) + 1}"


def _depot_label(model, depot_id):
    return f"d{model.instance.depot_position(depot_id) + 1}"


def _chargers(instance):
    for depot in instance.depots:
        for charger in depot.chargers:
            yield depot, charger


def _charger(model, depot_id, charger_index):
    return model._charger_lookup[(depot_id, charger_index)]


def _register_variables(model):
    instance, timeline, scenario = model.instance, model.timeline, model.scenario
    registry = model.variables
    final = timeline.final_event
    model._charger_lookup = {
        (depot.id, charger.charger_index): charger for depot, charger in _chargers(instance)
    }

    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        for depot, charger in _chargers(instance):
            dl = _depot_label(model, depot.id)
            for e in timeline.presence_events(bus.id, depot.id):
                slot = timeline.slot(e)
                key = (depot.id, bus.id, charger.charger_index, e)
                suffix = f"{dl}_{bl}_c{charger.charger_index}_e{e}"
                model.slots.append(key)
                registry.add(CHARGE, key, f"{CHARGE}_{suffix}", 0, 1, True)
                registry.add(DISCHARGE, key, f"{DISCHARGE}_{suffix}", 0, 1, True)
                registry.add(CHARGE_MIN, key, f"{CHARGE_MIN}_{suffix}", 0, slot)
                registry.add(DISCHARGE_MIN, key, f"{DISCHARGE_MIN}_{suffix}", 0, slot)
        for e in timeline.event_indices:
            suffix = f"{bl}_e{e}"
            for family in (
                CHARGE_START,
                DISCHARGE_START,
                CHARGE_CONT,
                DISCHARGE_CONT,
                CHARGE_STOP,
                DISCHARGE_STOP,
            ):
                registry.add(family, (bus.id, e), f"{family}_{suffix}", 0, 1, True)
            registry.add(SOC, (bus.id, e), f"{SOC}_{suffix}")
            registry.add(DEGRADATION, (bus.id, e), f"{DEGRADATION}_{suffix}")

    for level in instance.peak_ladder.levels:
        registry.add(PEAK_LEVEL, (level.index,), f"{PEAK_LEVEL}_l{level.index}", 0, 1, True)

    for depot in instance.depots:
        dl = _depot_label(model, depot.id)
        for e in timeline.event_indices:
            suffix = f"{dl}_e{e}"
            for family in (GRID_BUY, GRID_SELL, PV_TO_BUS, ESS_TO_BUS, PV_TO_ESS, ESS_LEVEL, ESS_EXPORT):
                registry.add(family, (depot.id, e), f"{family}_{suffix}")

    # disabled features are variable fixings, never structural changes
    if not scenario.enable_v2g:
        for var in registry.family(DISCHARGE) + registry.family(DISCHARGE_MIN):
            registry.fix(var.column)
    if not scenario.enable_degradation:
        for var in registry.family(DEGRADATION):
            registry.fix(var.column)
    if not scenario.enable_peak_cost:
        for var in registry.family(PEAK_LEVEL):
            registry.fix(var.column)
    for depot in instance.depots:
        has_ess = scenario.enable_pv_ess and depot.has_ess
        has_pv = scenario.enable_pv_ess and depot.pv_area_m2 > 0
        for e in timeline.event_indices:
            if not has_pv:
                registry.fix(registry.column(PV_TO_BUS, depot.id, e))
            if not has_ess:
                for family in (ESS_TO_BUS, PV_TO_ESS, ESS_LEVEL, ESS_EXPORT):
                    registry.fix(registry.column(family, depot.id, e))
            else:
                if not timeline.theta(e) or not has_pv:
                    registry.fix(registry.column(PV_TO_ESS, depot.id, e))
                if e == final:
                    # energy drawn from storage in the last slot is never booked
                    registry.fix(registry.column(ESS_TO_BUS, depot.id, e))
                    registry.fix(registry.column(PV_TO_ESS, depot.id, e))


def _slots_by(model, *positions):
    """Groups registered slot tuples by the given key positions."""
    groups = defaultdict(list)
    for key in model.slots:
        groups[tuple(key[p] for p in positions)].append(key)
    return groups


def _index_slots(model):
    model._by_bus_event = _slots_by(model, 1, 3)
    model._by_depot_event = _slots_by(model, 0, 3)
    model._by_charger_event = _slots_by(model, 0, 2, 3)
    model._by_event = _slots_by(model, 3)


def purchase_price(model, e):
    return model.instance.tariff.purchase_price(model.timeline.start(e))


def sell_price(model, e):
    margin = model.scenario.sell_margin(model.instance.tariff)
    return margin * purchase_price(model, e)


def pv_yield(model, depot, e):
    timeline = model.timeline
    irradiance = model.instance.solar.average_irradiance(timeline.start(e), timeline.slot(e))
    area = depot.pv_area_m2 if model.scenario.enable_pv_ess else 0.0
    return solar_yield(irradiance, area, timeline.slot(e))


def trip_drain(model, bus_id, e):
    trip_id = model.timeline.trip_at[bus_id][e - 1]
    if trip_id is None:
        return 0.0
    trip = model._trips[trip_id]
    return trip.kwh_per_km * trip.speed_kmh * model.timeline.slot(e) / 60.0


def _charge_energy_terms(model, keys):
    terms = []
    for key in keys:
        charger = _charger(model, key[0], key[2])
        terms.append((model.variables.column(CHARGE_MIN, *key), charger.battery_charge_kw / 60.0))
    return terms


def _discharge_energy_terms(model, keys, grid_side=False):
    terms = []
    for key in keys:
        charger = _charger(model, key[0], key[2])
        power = charger.discharge_power_kw if grid_side else charger.battery_discharge_kw
        terms.append((model.variables.column(DISCHARGE_MIN, *key), power / 60.0))
    return terms


def _sum_columns(model, family, keys, coef=1.0):
    return [(model.variables.column(family, *key), coef) for key in keys]


def add_objective(model, scenario):
    """Peak level price, energy purchases, energy sales and battery wear, filtered by toggles."""
    instance, timeline, registry = model.instance, model.timeline, model.variables
    if scenario.enable_peak_cost:
        for level in instance.peak_ladder.levels:
            model.add_objective_term(
                "peak", registry.column(PEAK_LEVEL, level.index), level.daily_price_eur
            )
    selling = scenario.enable_v2g or scenario.enable_pv_ess
    for depot in instance.depots:
        for e in timeline.event_indices:
            model.add_objective_term(
                "charging", registry.column(GRID_BUY, depot.id, e), purchase_price(model, e)
            )
            if selling:
                model.add_objective_term(
                    "selling", registry.column(GRID_SELL, depot.id, e), -sell_price(model, e)
                )
    if scenario.enable_degradation:
        for var in registry.family(DEGRADATION):
            model.add_objective_term("degradation", var.column, 1.0)


def add_assignment_constraints(model):
    instance, timeline, registry = model.instance, model.timeline, model.variables
    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        for e in timeline.event_indices:
            keys = model._by_bus_event.get((bus.id, e), [])
            on_trip = 1 if timeline.trip_at[bus.id][e - 1] is not None else 0
            model.add_constraint(
                "bus_single_activity",
                f"{bl}_e{e}",
                _sum_columns(model, CHARGE, keys) + _sum_columns(model, DISCHARGE, keys),
                LE,
                1 - on_trip,
            )
    for depot, charger in _chargers(instance):
        dl = _depot_label(model, depot.id)
        for e in timeline.event_indices:
            keys = model._by_charger_event.get((depot.id, charger.charger_index, e), [])
            model.add_constraint(
                "charger_occupancy",
                f"{dl}_c{charger.charger_index}_e{e}",
                _sum_columns(model, CHARGE, keys) + _sum_columns(model, DISCHARGE, keys),
                LE,
                1,
            )
    # slots exist only where the bus is present, so each row is implied by bus_single_activity;
    # kept so the family counts match the closed forms
    for key in model.slots:
        depot_id, bus_id, n, e = key
        model.add_constraint(
            "presence_gate",
            f"{_depot_label(model, depot_id)}_{_bus_label(model, bus_id)}_c{n}_e{e}",
            [(registry.column(CHARGE, *key), 1.0), (registry.column(DISCHARGE, *key), 1.0)],
            LE,
            timeline.present(depot_id, bus_id, e),
        )
    for depot in instance.depots:
        dl = _depot_label(model, depot.id)
        for e in timeline.event_indices:
            keys = model._by_depot_event.get((depot.id, e), [])
            model.add_constraint(
                "depot_charger_count",
                f"{dl}_e{e}",
                _sum_columns(model, CHARGE, keys) + _sum_columns(model, DISCHARGE, keys),
                LE,
                len(depot.chargers),
            )


def add_energy_balance(model):
    instance, timeline, scenario, registry = (
        model.instance,
        model.timeline,
        model.scenario,
        model.variables,
    )
    final = timeline.final_event
    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        for e in timeline.event_indices:
            if e == final:
                continue
            keys = model._by_bus_event.get((bus.id, e), [])
            terms = [(registry.column(SOC, bus.id, e + 1), 1.0), (registry.column(SOC, bus.id, e), -1.0)]
            terms += [(col, -coef) for col, coef in _charge_energy_terms(model, keys)]
            terms += _discharge_energy_terms(model, keys)
            model.add_constraint(
                "battery_balance", f"{bl}_e{e}", terms, EQ, -trip_drain(model, bus.id, e)
            )
    grid_side = not scenario.literal_loss_accounting
    for depot in instance.depots:
        dl = _depot_label(model, depot.id)
        for e in timeline.event_indices:
            keys = model._by_depot_event.get((depot.id, e), [])
            terms = _charge_energy_terms(model, keys) + [
                (registry.column(GRID_BUY, depot.id, e), -1.0),
                (registry.column(PV_TO_BUS, depot.id, e), -1.0),
                (registry.column(ESS_TO_BUS, depot.id, e), -1.0),
            ]
            model.add_constraint("grid_purchase", f"{dl}_e{e}", terms, EQ, 0.0)
            terms = _discharge_energy_terms(model, keys, grid_side=grid_side) + [
                (registry.column(ESS_EXPORT, depot.id, e), 1.0),
                (registry.column(GRID_SELL, depot.id, e), -1.0),
            ]
            model.add_constraint("grid_sale", f"{dl}_e{e}", terms, EQ, 0.0)


def add_soc_bounds(model):
    instance, timeline, registry = model.instance, model.timeline, model.variables
    final = timeline.final_event
    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        for e in timeline.event_indices:
            col = registry.column(SOC, bus.id, e)
            model.add_constraint("battery_min", f"{bl}_e{e}", [(col, 1.0)], GE, bus.min_energy_kwh)
            model.add_constraint("battery_max", f"{bl}_e{e}", [(col, 1.0)], LE, bus.max_energy_kwh)
        model.add_constraint(
            "battery_initial",
            bl,
            [(registry.column(SOC, bus.id, 1), 1.0)],
            EQ,
            bus.initial_energy_kwh,
        )
        model.add_constraint(
            "battery_final",
            bl,
            [(registry.column(SOC, bus.id, final), 1.0)],
            GE,
            bus.end_energy_kwh,
        )


def add_ess_constraints(model):
    """Storage limits, balance and anchors for every depot with a storage system."""
    instance, timeline, scenario, registry = (
        model.instance,
        model.timeline,
        model.scenario,
        model.variables,
    )
    if not scenario.enable_pv_ess:
        return
    final = timeline.final_event
    for depot in instance.depots:
        if not depot.has_ess:
            continue
        dl = _depot_label(model, depot.id)
        capacity = depot.ess_capacity_kwh
        floor = depot.ess_min_kwh
        for e in timeline.event_indices:
            level = registry.column(ESS_LEVEL, depot.id, e)
            export = registry.column(ESS_EXPORT, depot.id, e)
            model.add_constraint("ess_max", f"{dl}_e{e}", [(level, 1.0)], LE, capacity)
            model.add_constraint("ess_min", f"{dl}_e{e}", [(level, 1.0)], GE, floor)
            model.add_constraint("ess_export_cap", f"{dl}_e{e}", [(export, 1.0)], LE, capacity)
            if e == final:
                continue
            theta = timeline.theta(e)
            model.add_constraint(
                "ess_balance",
                f"{dl}_e{e}",
                [
                    (registry.column(ESS_LEVEL, depot.id, e + 1), 1.0),
                    (level, -1.0),
                    (registry.column(PV_TO_ESS, depot.id, e), -float(theta)),
                    (registry.column(ESS_TO_BUS, depot.id, e), float(1 - theta)),
                    (export, 1.0),
                ],
                EQ,
                0.0,
            )
        model.add_constraint(
            "ess_final", dl, [(registry.column(ESS_LEVEL, depot.id, final), 1.0)], GE, floor
        )
        model.add_constraint(
            "ess_final_export", dl, [(registry.column(ESS_EXPORT, depot.id, final), 1.0)], EQ, 0.0
        )
        model.add_constraint(
            "ess_initial", dl, [(registry.column(ESS_LEVEL, depot.id, 1), 1.0)], EQ, floor
        )


def add_degradation(model, scenario):
    if not scenario.enable_degradation:
        return
    instance, timeline, registry = model.instance, model.timeline, model.variables
    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        coefficient = DegradationParams.for_bus(bus).coefficient_eur_per_kwh
        for e in timeline.event_indices:
            keys = model._by_bus_event.get((bus.id, e), [])
            terms = [(registry.column(DEGRADATION, bus.id, e), 1.0)]
            if scenario.literal_loss_accounting:
                slot_hours = timeline.slot(e) / 60.0
                for key in keys:
                    charger = _charger(model, key[0], key[2])
                    terms.append(
                        (
                            registry.column(DISCHARGE, *key),
                            -coefficient * charger.discharge_power_kw * slot_hours,
                        )
                    )
            else:
                terms += [
                    (col, -coefficient * coef) for col, coef in _discharge_energy_terms(model, keys)
                ]
            model.add_constraint("degradation", f"{bl}_e{e}", terms, EQ, 0.0)


def add_duration_linking(model):
    """Big-M links between assignment binaries and minutes, with M the slot length."""
    timeline, registry = model.timeline, model.variables
    for key in model.slots:
        depot_id, bus_id, n, e = key
        slot = timeline.slot(e)
        suffix = f"{_depot_label(model, depot_id)}_{_bus_label(model, bus_id)}_c{n}_e{e}"
        for binary, minutes, prefix in (
            (CHARGE, CHARGE_MIN, "charge"),
            (DISCHARGE, DISCHARGE_MIN, "discharge"),
        ):
            b = registry.column(binary, *key)
            m = registry.column(minutes, *key)
            model.add_constraint(
                f"{prefix}_duration_lower", suffix, [(m, 1.0), (b, -slot)], GE, 1 - slot
            )
            model.add_constraint(f"{prefix}_duration_upper", suffix, [(m, 1.0), (b, -slot)], LE, 0.0)


def add_min_session_constraints(model, scenario):
    instance, timeline, registry = model.instance, model.timeline, model.variables
    final = timeline.final_event
    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        for e in timeline.event_indices:
            span = range(e, min(e + timeline.v(e) - 1, final) + 1)
            keys = [key for f in span for key in model._by_bus_event.get((bus.id, f), [])]
            for minutes, binary, start, prefix in (
                (CHARGE_MIN, CHARGE, CHARGE_START, "charge"),
                (DISCHARGE_MIN, DISCHARGE, DISCHARGE_START, "discharge"),
            ):
                lam = registry.column(start, bus.id, e)
                model.add_constraint(
                    f"min_{prefix}_minutes",
                    f"{bl}_e{e}",
                    _sum_columns(model, minutes, keys) + [(lam, -scenario.min_session_minutes)],
                    GE,
                    0.0,
                )
                model.add_constraint(
                    f"min_{prefix}_slots",
                    f"{bl}_e{e}",
                    _sum_columns(model, binary, keys) + [(lam, -float(timeline.v(e)))],
                    GE,
                    0.0,
                )
        if scenario.single_overnight_connection:
            first = timeline.last_return[bus.id]
            model.add_constraint(
                "single_overnight_session",
                bl,
                [(registry.column(CHARGE_START, bus.id, e), 1.0) for e in range(first, final + 1)],
                LE,
                1,
            )


def add_pv_constraints(model):
    instance, timeline, scenario, registry = (
        model.instance,
        model.timeline,
        model.scenario,
        model.variables,
    )
    if not scenario.enable_pv_ess:
        return
    for depot in instance.depots:
        dl = _depot_label(model, depot.id)
        for e in timeline.event_indices:
            keys = model._by_depot_event.get((depot.id, e), [])
            supply = pv_yield(model, depot, e)
            mu = registry.column(PV_TO_BUS, depot.id, e)
            pi = registry.column(PV_TO_ESS, depot.id, e)
            z = registry.column(ESS_TO_BUS, depot.id, e)
            demand = _charge_energy_terms(model, keys)
            model.add_constraint("pv_supply_cap", f"{dl}_e{e}", [(mu, 1.0)], LE, supply)
            model.add_constraint(
                "pv_demand_cap",
                f"{dl}_e{e}",
                [(mu, 1.0)] + [(col, -coef) for col, coef in demand],
                LE,
                0.0,
            )
            model.add_constraint("pv_split_cap", f"{dl}_e{e}", [(mu, 1.0), (pi, 1.0)], LE, supply)
            night = 1 - timeline.theta(e)
            model.add_constraint(
                "ess_night_only",
                f"{dl}_e{e}",
                [(z, 1.0)] + [(col, -night * coef) for col, coef in demand],
                LE,
                0.0,
            )


def add_session_transition_constraints(model):
    """Start, continuation and stop indicators, and charger stickiness within a session."""
    instance, timeline, registry = model.instance, model.timeline, model.variables
    final = timeline.final_event
    modes = (
        ("charge", CHARGE, CHARGE_START, CHARGE_CONT, CHARGE_STOP),
        ("discharge", DISCHARGE, DISCHARGE_START, DISCHARGE_CONT, DISCHARGE_STOP),
    )
    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        for prefix, binary, start, cont, stop in modes:
            for e in timeline.event_indices:
                now = _sum_columns(model, binary, model._by_bus_event.get((bus.id, e), []))
                v = registry.column(cont, bus.id, e)
                suffix = f"{bl}_e{e}"
                if e > 1:
                    before = _sum_columns(
                        model, binary, model._by_bus_event.get((bus.id, e - 1), [])
                    )
                    model.add_constraint(
                        f"{prefix}_cont_prev",
                        suffix,
                        [(v, 1.0)] + [(col, -1.0) for col, _ in before],
                        LE,
                        0.0,
                    )
                model.add_constraint(
                    f"{prefix}_cont_now", suffix, [(v, 1.0)] + [(col, -1.0) for col, _ in now], LE, 0.0
                )
                if e > 1:
                    model.add_constraint(
                        f"{prefix}_cont_both",
                        suffix,
                        [(v, 1.0)] + [(col, -1.0) for col, _ in now + before],
                        GE,
                        -1.0,
                    )
                model.add_constraint(
                    f"{prefix}_start",
                    suffix,
                    [(registry.column(start, bus.id, e), 1.0), (v, 1.0)]
                    + [(col, -1.0) for col, _ in now],
                    EQ,
                    0.0,
                )
                a = registry.column(stop, bus.id, e)
                if e == final:
                    model.add_constraint(f"{prefix}_stop_final", bl, [(a, 1.0)], EQ, 1.0)
                    continue
                model.add_constraint(
                    f"{prefix}_stop",
                    suffix,
                    [(a, 1.0), (registry.column(cont, bus.id, e + 1), 1.0)]
                    + [(col, -1.0) for col, _ in now],
                    EQ,
                    0.0,
                )
            model.add_constraint(
                f"{prefix}_cont_initial",
                bl,
                [(registry.column(cont, bus.id, 1), 1.0)],
                EQ,
                0.0,
            )

    for key in model.slots:
        depot_id, bus_id, n, e = key
        if e == final:
            continue
        suffix = f"{_depot_label(model, depot_id)}_{_bus_label(model, bus_id)}_c{n}_e{e}"
        following = (depot_id, bus_id, n, e + 1)
        for prefix, binary, stop in (
            ("charge", CHARGE, CHARGE_STOP),
            ("discharge", DISCHARGE, DISCHARGE_STOP),
        ):
            model.add_constraint(
                f"{prefix}_same_charger",
                suffix,
                [
                    (registry.column(stop, bus_id, e), 1.0),
                    (registry.column(binary, *following), 1.0),
                    (registry.column(binary, *key), -1.0),
                ],
                GE,
                0.0,
            )


def add_start_gating(model):
    """A session may only start where the bus is present and some bus moves at that depot."""
    instance, timeline, registry = model.instance, model.timeline, model.variables
    for bus in instance.buses:
        bl = _bus_label(model, bus.id)
        for e in timeline.event_indices:
            gate = sum(
                timeline.present(depot.id, bus.id, e) * timeline.moves(depot.id, e)
                for depot in instance.depots
            )
            model.add_constraint(
                "session_start_gate",
                f"{bl}_e{e}",
                [
                    (registry.column(CHARGE_START, bus.id, e), 1.0),
                    (registry.column(DISCHARGE_START, bus.id, e), 1.0),
                ],
                LE,
                min(gate, 1),
            )


def add_peak_power_constraints(model, scenario):
    instance, timeline, registry = model.instance, model.timeline, model.variables
    ladder = instance.peak_ladder
    levels = [(registry.column(PEAK_LEVEL, lv.index), lv) for lv in ladder.levels]
    if scenario.enable_peak_cost:
        model.add_constraint("peak_level_choice", "", [(col, 1.0) for col, _ in levels], EQ, 1.0)
    for e in timeline.event_indices:
        slot = timeline.slot(e)
        draw = []
        net = []
        for key in model._by_event.get((e,), []):
            charger = _charger(model, key[0], key[2])
            draw.append((registry.column(CHARGE, *key), charger.battery_charge_kw))
            net.append((registry.column(DISCHARGE, *key), -charger.battery_discharge_kw))
        if scenario.enable_peak_cost:
            offsets = []
            for depot in instance.depots:
                offsets.append((registry.column(PV_TO_BUS, depot.id, e), -60.0 / slot))
                offsets.append((registry.column(ESS_TO_BUS, depot.id, e), -60.0 / slot))
            model.add_constraint(
                "peak_level_bound",
                f"e{e}",
                draw + offsets + [(col, -lv.power_kw) for col, lv in levels],
                LE,
                0.0,
            )
        model.add_constraint("grid_power_cap", f"e{e}", draw + net, LE, ladder.hard_cap_kw)


def restrict_discharge_windows(model, scenario):
    """
    Fixes bus discharging to zero in every slot not fully inside a discharge window, and in
    the last slot, whose energy is never carried into a tracked battery level.
    """
    if not scenario.enable_v2g:
        return
    timeline, registry = model.timeline, model.variables
    final = timeline.final_event
    for key in model.slots:
        e = key[3]
        event = timeline.event(e)
        if e == final or not scenario.window_contains(event.start_minute, event.end_minute):
            registry.fix(registry.column(DISCHARGE, *key))
            registry.fix(registry.column(DISCHARGE_MIN, *key))


def build_model(instance, timeline, scenario):
    """
    Builds the day-ahead charging model for one scenario.

    Params
    ------
    instance: ProblemInstance
        A validated instance.
    timeline: EventTimeline
        Timeline of `instance`.
    scenario: ScenarioConfig
        Feature toggles; disabled cost groups drop out of the objective and disabled
        features fix their variables to zero.

    Returns
    -------
    MilpModel
        Read-only model carrying the instance fingerprint and scenario in `metadata`.
    """
    if len(timeline) == 0:
        raise StructuralError("Timeline has no events")
    if not instance.peak_ladder.levels:
        raise StructuralError("Peak ladder has no levels")
    for trip in instance.trips:
        if trip.kwh_per_km is None:
            raise StructuralError(f"Trip `{trip.id}` has neither a speed nor a consumption rate")

    model = MilpModel(instance, timeline, scenario)
    model._trips = {trip.id: trip for trip in instance.trips}
    _register_variables(model)
    _index_slots(model)

    add_objective(model, scenario)
    add_assignment_constraints(model)
    add_energy_balance(model)
    add_soc_bounds(model)
    add_ess_constraints(model)
    add_degradation(model, scenario)
    add_duration_linking(model)
    add_min_session_constraints(model, scenario)
    add_pv_constraints(model)
    add_session_transition_constraints(model)
    add_start_gating(model)
    add_peak_power_constraints(model, scenario)
    restrict_discharge_windows(model, scenario)

    model.metadata = {
        "instance_hash": instance.fingerprint(),
        "scenario": scenario.name,
        "literal_loss_accounting": scenario.literal_loss_accounting,
        "events": len(timeline),
        "variables": model.num_variables,
        "constraints": model.num_constraints,
        "charger_slots": len(model.slots),
    }
    for family, count in sorted(model.family_counts().items()):
        logger.debug(f"{scenario.name}: {family} x{count}")
    logger.info(f"Built {model!r}")
    return model.freeze()
