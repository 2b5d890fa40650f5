import logging
from dataclasses import asdict, dataclass, field, replace

import pandas as pd

from app.errors import DecodeError
from app.services import milp_service as milp
from app.services.solver_service import SNAP_TOLERANCE
from app.utils.energy_utils import DegradationParams

logger = logging.getLogger(__name__)

IDLE = "idle"
TRIP = "trip"
CHARGE = "charge"
DISCHARGE = "discharge"


@dataclass(frozen=True)
class BusAction:
    bus_id: str
    event: int
    kind: str = IDLE
    trip_id: str | None = None
    depot_id: int | None = None
    charger_index: int | None = None
    minutes: float = 0.0
    soc_kwh: float = 0.0
    degradation_eur: float = 0.0


@dataclass(frozen=True)
class DepotFlow:
    depot_id: int
    event: int
    grid_buy_kwh: float = 0.0
    grid_sell_kwh: float = 0.0
    pv_yield_kwh: float = 0.0
    pv_to_bus_kwh: float = 0.0
    pv_to_ess_kwh: float = 0.0
    ess_to_bus_kwh: float = 0.0
    ess_export_kwh: float = 0.0
    ess_level_kwh: float = 0.0


@dataclass(frozen=True)
class Schedule:
    """
    Operational plan decoded from a solution: one action per (bus, event), one flow record
    per (depot, event), and the chosen peak level (None when the scenario does not choose).
    """

    instance: object
    timeline: object
    scenario: object
    actions: tuple
    depot_flows: tuple
    peak_level: int | None = None
    _actions: dict = field(default=None, init=False, repr=False, compare=False)
    _flows: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "depot_flows", tuple(self.depot_flows))
        object.__setattr__(self, "_actions", {(a.bus_id, a.event): a for a in self.actions})
        object.__setattr__(self, "_flows", {(f.depot_id, f.event): f for f in self.depot_flows})

    def action(self, bus_id, e):
        return self._actions[(bus_id, e)]

    def flow(self, depot_id, e):
        return self._flows[(depot_id, e)]

    def soc(self, bus_id):
        return [self.action(bus_id, e).soc_kwh for e in self.timeline.event_indices]

    def with_action(self, bus_id, e, **changes):
        updated = replace(self.action(bus_id, e), **changes)
        actions = [updated if (a.bus_id, a.event) == (bus_id, e) else a for a in self.actions]
        return replace(self, actions=tuple(actions))

    def with_flow(self, depot_id, e, **changes):
        updated = replace(self.flow(depot_id, e), **changes)
        flows = [updated if (f.depot_id, f.event) == (depot_id, e) else f for f in self.depot_flows]
        return replace(self, depot_flows=tuple(flows))

    def with_peak_level(self, level):
        return replace(self, peak_level=level)

    def to_frame(self):
        """Per (bus, event) long format."""
        rows = []
        for a in self.actions:
            event = self.timeline.event(a.event)
            row = asdict(a)
            row["minute"] = event.start_minute
            row["slot_minutes"] = event.slot_minutes
            rows.append(row)
        columns = [
            "bus_id",
            "event",
            "minute",
            "slot_minutes",
            "kind",
            "trip_id",
            "depot_id",
            "charger_index",
            "minutes",
            "soc_kwh",
            "degradation_eur",
        ]
        return pd.DataFrame(rows, columns=columns)

    def depot_frame(self):
        rows = []
        for f in self.depot_flows:
            row = asdict(f)
            row["minute"] = self.timeline.start(f.event)
            rows.append(row)
        frame = pd.DataFrame(rows)
        if not frame.empty:
            frame = frame[["depot_id", "event", "minute"] + [c for c in frame if c.endswith("kwh")]]
        return frame


@dataclass(frozen=True)
class CostReport:
    total_eur: float
    charging_eur: float
    revenue_eur: float
    degradation_eur: float
    peak_eur: float
    peak_kw: float
    peak_level: int | None
    mip_gap: float | None
    solve_seconds: float | None
    v2g_revenue_eur: float = 0.0
    ess_revenue_eur: float = 0.0
    peak_ex_post: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class EnergyFlowReport:
    grid_import_kwh: float
    pv_production_kwh: float
    pv_to_bus_kwh: float
    pv_to_ess_kwh: float
    pv_curtailed_kwh: float
    ess_to_bus_kwh: float
    ess_to_grid_kwh: float
    v2g_export_kwh: float
    ess_initial_kwh: float
    ess_residual_kwh: float
    bus_charging_kwh: float

    @property
    def pv_used_share(self):
        return self.pv_to_bus_kwh / self.pv_production_kwh if self.pv_production_kwh else 0.0

    @property
    def pv_stored_share(self):
        return self.pv_to_ess_kwh / self.pv_production_kwh if self.pv_production_kwh else 0.0

    @property
    def pv_curtailed_share(self):
        return self.pv_curtailed_kwh / self.pv_production_kwh if self.pv_production_kwh else 0.0

    @property
    def ess_bus_share(self):
        outflow = self.ess_to_bus_kwh + self.ess_to_grid_kwh
        return self.ess_to_bus_kwh / outflow if outflow else 0.0

    @property
    def ess_export_share(self):
        outflow = self.ess_to_bus_kwh + self.ess_to_grid_kwh
        return self.ess_to_grid_kwh / outflow if outflow else 0.0

    def to_dict(self):
        data = asdict(self)
        for share in (
            "pv_used_share",
            "pv_stored_share",
            "pv_curtailed_share",
            "ess_bus_share",
            "ess_export_share",
        ):
            data[share] = getattr(self, share)
        return data


def _value(raw, var):
    return raw.values.get(var.name, 0.0)


def _check_integrality(model, raw):
    for var in model.variables:
        if not var.integer:
            continue
        value = _value(raw, var)
        if abs(value - round(value)) > SNAP_TOLERANCE:
            raise DecodeError(f"Binary `{var.name}` has fractional value {value}")


def decode(model, raw):
    """
    Maps a solution back onto buses, chargers and depots.

    Raises
    ------
    DecodeError
        The solution carries no values, a binary is fractional beyond the snap tolerance, or
        a bus is assigned to more than one charger in a slot.
    """
    if not raw.has_values:
        raise DecodeError(f"Solution with status `{raw.status}` has no values to decode")
    _check_integrality(model, raw)
    instance, timeline, scenario, registry = (
        model.instance,
        model.timeline,
        model.scenario,
        model.variables,
    )

    def value(family, *key):
        col = registry.column(family, *key)
        return raw.values.get(registry[col].name, 0.0) if col is not None else 0.0

    assigned = {}
    for key in model.slots:
        depot_id, bus_id, n, e = key
        for binary, minutes, kind in (
            (milp.CHARGE, milp.CHARGE_MIN, CHARGE),
            (milp.DISCHARGE, milp.DISCHARGE_MIN, DISCHARGE),
        ):
            if round(value(binary, *key)) == 1:
                if (bus_id, e) in assigned:
                    raise DecodeError(f"Bus `{bus_id}` holds two chargers at event {e}")
                assigned[(bus_id, e)] = (kind, depot_id, n, value(minutes, *key))

    actions = []
    for bus in instance.buses:
        for e in timeline.event_indices:
            soc = value(milp.SOC, bus.id, e)
            wear = value(milp.DEGRADATION, bus.id, e)
            trip_id = timeline.trip_at[bus.id][e - 1]
            if (bus.id, e) in assigned:
                kind, depot_id, n, minutes = assigned[(bus.id, e)]
                actions.append(
                    BusAction(bus.id, e, kind, None, depot_id, n, minutes, soc, wear)
                )
            elif trip_id is not None:
                actions.append(BusAction(bus.id, e, TRIP, trip_id, soc_kwh=soc, degradation_eur=wear))
            else:
                actions.append(
                    BusAction(
                        bus.id,
                        e,
                        IDLE,
                        depot_id=timeline.depot_at[bus.id][e - 1],
                        soc_kwh=soc,
                        degradation_eur=wear,
                    )
                )

    flows = []
    for depot in instance.depots:
        for e in timeline.event_indices:
            flows.append(
                DepotFlow(
                    depot.id,
                    e,
                    grid_buy_kwh=value(milp.GRID_BUY, depot.id, e),
                    grid_sell_kwh=value(milp.GRID_SELL, depot.id, e),
                    pv_yield_kwh=milp.pv_yield(model, depot, e),
                    pv_to_bus_kwh=value(milp.PV_TO_BUS, depot.id, e),
                    pv_to_ess_kwh=value(milp.PV_TO_ESS, depot.id, e),
                    ess_to_bus_kwh=value(milp.ESS_TO_BUS, depot.id, e),
                    ess_export_kwh=value(milp.ESS_EXPORT, depot.id, e),
                    ess_level_kwh=value(milp.ESS_LEVEL, depot.id, e),
                )
            )

    peak_level = None
    if scenario.enable_peak_cost:
        chosen = [lv.index for lv in instance.peak_ladder.levels if round(value(milp.PEAK_LEVEL, lv.index)) == 1]
        peak_level = chosen[0] if chosen else None

    schedule = Schedule(instance, timeline, scenario, tuple(actions), tuple(flows), peak_level)
    logger.debug(f"Decoded {len(assigned)} charger assignments for {scenario.name}")
    return schedule


def _charger(instance, depot_id, charger_index):
    depot = instance.depot_by_id(depot_id)
    for charger in depot.chargers:
        if charger.charger_index == charger_index:
            return charger
    raise DecodeError(f"Depot {depot_id} has no charger {charger_index}")


def grid_draw_kw(schedule, e):
    """Simultaneous grid draw of an event: full charging power less PV and storage offsets."""
    instance, timeline = schedule.instance, schedule.timeline
    draw = 0.0
    for bus in instance.buses:
        action = schedule.action(bus.id, e)
        if action.kind == CHARGE:
            draw += _charger(instance, action.depot_id, action.charger_index).battery_charge_kw
    slot = timeline.slot(e)
    for depot in instance.depots:
        flow = schedule.flow(depot.id, e)
        draw -= 60.0 * (flow.pv_to_bus_kwh + flow.ess_to_bus_kwh) / slot
    return draw


def peak_draw_kw(schedule):
    draws = [grid_draw_kw(schedule, e) for e in schedule.timeline.event_indices]
    return max([0.0] + draws)


def degradation_cost(schedule):
    """Battery wear recomputed from discharge actions."""
    instance, timeline, scenario = schedule.instance, schedule.timeline, schedule.scenario
    if not scenario.enable_degradation:
        return 0.0
    total = 0.0
    for bus in instance.buses:
        coefficient = DegradationParams.for_bus(bus).coefficient_eur_per_kwh
        for e in timeline.event_indices:
            action = schedule.action(bus.id, e)
            if action.kind != DISCHARGE:
                continue
            charger = _charger(instance, action.depot_id, action.charger_index)
            if scenario.literal_loss_accounting:
                energy = charger.discharge_power_kw * timeline.slot(e) / 60.0
            else:
                energy = charger.battery_discharge_kw * action.minutes / 60.0
            total += coefficient * energy
    return total


def cost_report(schedule, instance, scenario, raw=None):
    """
    Recomputes the cost groups from the schedule itself.

    The peak cost is the chosen level's price when the scenario optimizes it, and otherwise
    the ex-post ladder price of the highest simultaneous grid draw.
    """
    timeline = schedule.timeline
    tariff = instance.tariff
    margin = scenario.sell_margin(tariff)

    charging = 0.0
    v2g_revenue = 0.0
    ess_revenue = 0.0
    for flow in schedule.depot_flows:
        price = tariff.purchase_price(timeline.start(flow.event))
        charging += price * flow.grid_buy_kwh
        sell = margin * price
        ess_revenue += sell * flow.ess_export_kwh
        v2g_revenue += sell * (flow.grid_sell_kwh - flow.ess_export_kwh)
    revenue = v2g_revenue + ess_revenue

    degradation = degradation_cost(schedule)
    peak_kw = peak_draw_kw(schedule)
    ladder = instance.peak_ladder
    if scenario.enable_peak_cost and schedule.peak_level is not None:
        level = next(lv for lv in ladder.levels if lv.index == schedule.peak_level)
        peak_cost, peak_level, ex_post = level.daily_price_eur, level.index, False
    else:
        level, peak_cost = ladder.level_for(peak_kw)
        peak_level, ex_post = level.index, True

    total = charging - revenue + degradation + peak_cost
    return CostReport(
        total_eur=total,
        charging_eur=charging,
        revenue_eur=revenue,
        degradation_eur=degradation,
        peak_eur=peak_cost,
        peak_kw=peak_kw,
        peak_level=peak_level,
        mip_gap=raw.achieved_gap_frac if raw is not None else None,
        solve_seconds=raw.solve_seconds if raw is not None else None,
        v2g_revenue_eur=v2g_revenue,
        ess_revenue_eur=ess_revenue,
        peak_ex_post=ex_post,
    )


def energy_flow_report(schedule):
    """Day totals of every energy path between grid, PV, storage and buses."""
    instance, timeline = schedule.instance, schedule.timeline
    totals = dict.fromkeys(
        (
            "grid_buy_kwh",
            "grid_sell_kwh",
            "pv_yield_kwh",
            "pv_to_bus_kwh",
            "pv_to_ess_kwh",
            "ess_to_bus_kwh",
            "ess_export_kwh",
        ),
        0.0,
    )
    for flow in schedule.depot_flows:
        for name in totals:
            totals[name] += getattr(flow, name)

    ess_depots = [d for d in instance.depots if d.has_ess and schedule.scenario.enable_pv_ess]
    ess_initial = sum(schedule.flow(d.id, 1).ess_level_kwh for d in ess_depots)
    ess_residual = sum(schedule.flow(d.id, timeline.final_event).ess_level_kwh for d in ess_depots)

    charged = 0.0
    for action in schedule.actions:
        if action.kind == CHARGE:
            charger = _charger(instance, action.depot_id, action.charger_index)
            charged += charger.battery_charge_kw * action.minutes / 60.0

    pv = totals["pv_yield_kwh"]
    return EnergyFlowReport(
        grid_import_kwh=totals["grid_buy_kwh"],
        pv_production_kwh=pv,
        pv_to_bus_kwh=totals["pv_to_bus_kwh"],
        pv_to_ess_kwh=totals["pv_to_ess_kwh"],
        pv_curtailed_kwh=max(0.0, pv - totals["pv_to_bus_kwh"] - totals["pv_to_ess_kwh"]),
        ess_to_bus_kwh=totals["ess_to_bus_kwh"],
        ess_to_grid_kwh=totals["ess_export_kwh"],
        v2g_export_kwh=totals["grid_sell_kwh"] - totals["ess_export_kwh"],
        ess_initial_kwh=ess_initial,
        ess_residual_kwh=ess_residual,
        bus_charging_kwh=charged,
    )
