"""
Independent feasibility check of a decoded schedule.

Every rule is re-derived here from the instance, the timeline parameters and the schedule
alone; nothing is read back from the optimization model.
"""

import logging
from dataclasses import dataclass

from app.utils.energy_utils import degradation_coefficient, solar_yield

logger = logging.getLogger(__name__)

ENERGY_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Violation:
    family: str
    subject: str
    message: str
    amount: float = 0.0

    def __str__(self):
        return f"[{self.family}] {self.subject}: {self.message}"


class _Checker:
    def __init__(self, instance, timeline, scenario, schedule, tolerance):
        self.instance = instance
        self.timeline = timeline
        self.scenario = scenario
        self.schedule = schedule
        self.tolerance = tolerance
        self.violations = []
        self.chargers = {
            (depot.id, charger.charger_index): charger
            for depot in instance.depots
            for charger in depot.chargers
        }
        self.trips = {trip.id: trip for trip in instance.trips}

    def flag(self, family, subject, message, amount=0.0):
        self.violations.append(Violation(family, subject, message, float(amount)))

    def close(self, lhs, rhs):
        return abs(lhs - rhs) <= self.tolerance * max(1.0, abs(lhs), abs(rhs))

    def at_most(self, lhs, rhs):
        return lhs <= rhs + self.tolerance * max(1.0, abs(rhs))

    # per-slot quantities

    def charge_energy(self, action):
        charger = self.chargers[(action.depot_id, action.charger_index)]
        return charger.charge_efficiency_frac * charger.charge_power_kw * action.minutes / 60.0

    def discharge_energy(self, action, grid_side=False):
        charger = self.chargers[(action.depot_id, action.charger_index)]
        power = charger.discharge_power_kw
        if not grid_side:
            power = power / charger.discharge_efficiency_frac
        return power * action.minutes / 60.0

    def trip_energy(self, bus_id, e):
        start = self.timeline.start(e)
        for trip in self.trips.values():
            if trip.bus_id == bus_id and trip.depart_minute <= start < trip.arrive_minute:
                return trip.kwh_per_km * trip.speed_kmh * self.timeline.slot(e) / 60.0
        return 0.0

    def solar_supply(self, depot, e):
        if not self.scenario.enable_pv_ess:
            return 0.0
        start, slot = self.timeline.start(e), self.timeline.slot(e)
        irradiance = self.instance.solar.average_irradiance(start, slot)
        return solar_yield(irradiance, depot.pv_area_m2, slot)

    def min_slots(self, e):
        events = list(self.timeline.event_indices)
        total = 0.0
        count = 0
        for f in events[e - 1 :]:
            total += self.timeline.slot(f)
            count += 1
            if total >= self.scenario.min_session_minutes:
                break
        return count

    # rule groups

    def check_actions(self):
        timeline, scenario = self.timeline, self.scenario
        occupied = {}
        final = timeline.final_event
        for bus in self.instance.buses:
            for e in timeline.event_indices:
                action = self.schedule.action(bus.id, e)
                subject = f"bus {bus.id} event {e}"
                if action.kind not in ("charge", "discharge"):
                    if action.minutes > self.tolerance:
                        self.flag("duration", subject, f"{action.minutes} minutes while not plugged in")
                    continue
                if timeline.trip_at[bus.id][e - 1] is not None:
                    self.flag("bus_single_activity", subject, f"{action.kind} while serving a trip")
                if (action.depot_id, action.charger_index) not in self.chargers:
                    self.flag("presence_gate", subject, "unknown charger")
                    continue
                if timeline.depot_at[bus.id][e - 1] != action.depot_id:
                    self.flag("presence_gate", subject, f"not present at depot {action.depot_id}")
                slot_key = (action.depot_id, action.charger_index, e)
                if slot_key in occupied:
                    self.flag(
                        "charger_occupancy",
                        f"depot {action.depot_id} charger {action.charger_index} event {e}",
                        f"used by {occupied[slot_key]} and {bus.id}",
                    )
                occupied[slot_key] = bus.id
                slot = timeline.slot(e)
                if action.minutes < 1 - self.tolerance or action.minutes > slot + self.tolerance:
                    self.flag(
                        "duration",
                        subject,
                        f"{action.minutes} minutes outside [1, {slot}]",
                        action.minutes,
                    )
                if action.kind == "discharge":
                    event = timeline.event(e)
                    allowed = (
                        scenario.enable_v2g
                        and e != final
                        and scenario.window_contains(event.start_minute, event.end_minute)
                    )
                    if not allowed:
                        self.flag("discharge_window", subject, "discharging outside a window")
        for depot in self.instance.depots:
            for e in timeline.event_indices:
                used = sum(1 for (j, _, f) in occupied if j == depot.id and f == e)
                if used > len(depot.chargers):
                    self.flag("depot_charger_count", f"depot {depot.id} event {e}", f"{used} sessions")

    def check_battery(self):
        timeline = self.timeline
        final = timeline.final_event
        for bus in self.instance.buses:
            soc = self.schedule.soc(bus.id)
            subject = f"bus {bus.id}"
            if not self.close(soc[0], bus.initial_energy_kwh):
                self.flag("battery_initial", subject, f"starts at {soc[0]:.6f} kWh", soc[0])
            if not self.at_most(bus.end_energy_kwh, soc[final - 1]):
                self.flag("battery_final", subject, f"ends at {soc[final - 1]:.6f} kWh", soc[final - 1])
            for e in timeline.event_indices:
                level = soc[e - 1]
                if not self.at_most(bus.min_energy_kwh, level):
                    self.flag("battery_min", f"{subject} event {e}", f"{level:.6f} kWh below floor", level)
                if not self.at_most(level, bus.max_energy_kwh):
                    self.flag("battery_max", f"{subject} event {e}", f"{level:.6f} kWh above ceiling", level)
                if e == final:
                    continue
                action = self.schedule.action(bus.id, e)
                expected = level - self.trip_energy(bus.id, e)
                if action.kind == "charge":
                    expected += self.charge_energy(action)
                elif action.kind == "discharge":
                    expected -= self.discharge_energy(action)
                if not self.close(soc[e], expected):
                    self.flag(
                        "battery_balance",
                        f"{subject} event {e}",
                        f"next level {soc[e]:.6f} kWh, expected {expected:.6f}",
                        soc[e] - expected,
                    )

    def check_depots(self):
        timeline, scenario = self.timeline, self.scenario
        final = timeline.final_event
        grid_side = not scenario.literal_loss_accounting
        for depot in self.instance.depots:
            has_ess = scenario.enable_pv_ess and depot.has_ess
            for e in timeline.event_indices:
                flow = self.schedule.flow(depot.id, e)
                subject = f"depot {depot.id} event {e}"
                for name in (
                    "grid_buy_kwh",
                    "grid_sell_kwh",
                    "pv_to_bus_kwh",
                    "pv_to_ess_kwh",
                    "ess_to_bus_kwh",
                    "ess_export_kwh",
                    "ess_level_kwh",
                ):
                    if getattr(flow, name) < -self.tolerance:
                        self.flag("non_negative", subject, f"{name} is negative", getattr(flow, name))
                actions = [
                    self.schedule.action(bus.id, e)
                    for bus in self.instance.buses
                    if self.schedule.action(bus.id, e).depot_id == depot.id
                ]
                charged = sum(self.charge_energy(a) for a in actions if a.kind == "charge")
                sold = sum(
                    self.discharge_energy(a, grid_side) for a in actions if a.kind == "discharge"
                )
                supplied = flow.grid_buy_kwh + flow.pv_to_bus_kwh + flow.ess_to_bus_kwh
                if not self.close(charged, supplied):
                    self.flag("grid_purchase", subject, f"charged {charged:.6f} != supplied {supplied:.6f}", charged - supplied)
                if not self.close(sold + flow.ess_export_kwh, flow.grid_sell_kwh):
                    self.flag(
                        "grid_sale",
                        subject,
                        f"sold {flow.grid_sell_kwh:.6f} != exported {sold + flow.ess_export_kwh:.6f}",
                        flow.grid_sell_kwh - sold - flow.ess_export_kwh,
                    )

                supply = self.solar_supply(depot, e)
                theta = timeline.theta(e)
                if not self.at_most(flow.pv_to_bus_kwh, supply):
                    self.flag("pv_supply_cap", subject, "PV use exceeds yield", flow.pv_to_bus_kwh)
                if not self.at_most(flow.pv_to_bus_kwh, charged):
                    self.flag("pv_demand_cap", subject, "PV use exceeds charging", flow.pv_to_bus_kwh)
                if not self.at_most(flow.pv_to_bus_kwh + flow.pv_to_ess_kwh, supply):
                    self.flag("pv_split_cap", subject, "PV split exceeds yield")
                if not self.at_most(flow.ess_to_bus_kwh, (1 - theta) * charged):
                    self.flag("ess_night_only", subject, "storage feeds buses in a sunny slot", flow.ess_to_bus_kwh)

                if not has_ess:
                    for name in ("pv_to_ess_kwh", "ess_to_bus_kwh", "ess_export_kwh", "ess_level_kwh"):
                        if abs(getattr(flow, name)) > self.tolerance:
                            self.flag("ess_absent", subject, f"{name} without storage", getattr(flow, name))
                    continue
                capacity, floor = depot.ess_capacity_kwh, depot.ess_min_kwh
                level = flow.ess_level_kwh
                if not self.at_most(floor, level) or not self.at_most(level, capacity):
                    self.flag("ess_bounds", subject, f"level {level:.6f} outside [{floor}, {capacity}]", level)
                if not self.at_most(flow.ess_export_kwh, capacity):
                    self.flag("ess_export_cap", subject, "export exceeds capacity", flow.ess_export_kwh)
                if e == final:
                    if abs(flow.ess_export_kwh) > self.tolerance:
                        self.flag("ess_final_export", subject, "export in the last slot", flow.ess_export_kwh)
                    if not self.at_most(floor, level):
                        self.flag("ess_final", subject, "ends below floor", level)
                    continue
                nxt = self.schedule.flow(depot.id, e + 1).ess_level_kwh
                expected = (
                    level
                    + flow.pv_to_ess_kwh * theta
                    - flow.ess_to_bus_kwh * (1 - theta)
                    - flow.ess_export_kwh
                )
                if not self.close(nxt, expected):
                    self.flag("ess_balance", subject, f"next level {nxt:.6f}, expected {expected:.6f}", nxt - expected)
            if has_ess:
                start = self.schedule.flow(depot.id, 1).ess_level_kwh
                if not self.close(start, depot.ess_min_kwh):
                    self.flag("ess_initial", f"depot {depot.id}", f"starts at {start:.6f} kWh", start)

            if not scenario.enable_pv_ess:
                for e in timeline.event_indices:
                    flow = self.schedule.flow(depot.id, e)
                    if abs(flow.pv_to_bus_kwh) > self.tolerance:
                        self.flag("pv_disabled", f"depot {depot.id} event {e}", "PV used while disabled")

    def check_degradation(self):
        timeline, scenario = self.timeline, self.scenario
        for bus in self.instance.buses:
            coefficient = degradation_coefficient(bus)
            for e in timeline.event_indices:
                action = self.schedule.action(bus.id, e)
                expected = 0.0
                if scenario.enable_degradation and action.kind == "discharge":
                    charger = self.chargers[(action.depot_id, action.charger_index)]
                    if scenario.literal_loss_accounting:
                        expected = coefficient * charger.discharge_power_kw * timeline.slot(e) / 60.0
                    else:
                        expected = coefficient * self.discharge_energy(action)
                if not self.close(action.degradation_eur, expected):
                    self.flag(
                        "degradation",
                        f"bus {bus.id} event {e}",
                        f"wear {action.degradation_eur:.6f} EUR, expected {expected:.6f}",
                        action.degradation_eur - expected,
                    )

    def check_sessions(self):
        timeline, scenario = self.timeline, self.scenario
        events = list(timeline.event_indices)
        for bus in self.instance.buses:
            starts_after_return = 0
            last_return = self._last_return(bus)
            for kind in ("charge", "discharge"):
                plugged = [self.schedule.action(bus.id, e) for e in events]
                active = [a.kind == kind for a in plugged]
                for e in events:
                    i = e - 1
                    subject = f"bus {bus.id} event {e}"
                    starting = active[i] and (i == 0 or not active[i - 1])
                    if i + 1 < len(events) and active[i] and active[i + 1]:
                        here, there = plugged[i], plugged[i + 1]
                        if (here.depot_id, here.charger_index) != (there.depot_id, there.charger_index):
                            self.flag(f"{kind}_same_charger", subject, "switches charger mid-session")
                    if not starting:
                        continue
                    if not self._may_start(bus, e):
                        self.flag("session_start_gate", subject, f"{kind} starts without a bus movement")
                    span = events[i : i + self.min_slots(e)]
                    minutes = sum(plugged[f - 1].minutes for f in span if active[f - 1])
                    if minutes < scenario.min_session_minutes - self.tolerance:
                        self.flag(f"min_{kind}_minutes", subject, f"session of {minutes} minutes", minutes)
                    if not all(active[f - 1] for f in span):
                        self.flag(f"min_{kind}_slots", subject, f"session shorter than {len(span)} slots")
                    if kind == "charge" and e >= last_return:
                        starts_after_return += 1
            if scenario.single_overnight_connection and starts_after_return > 1:
                self.flag(
                    "single_overnight_session",
                    f"bus {bus.id}",
                    f"{starts_after_return} charging sessions after the last return",
                )

    def _last_return(self, bus):
        trips = [t for t in self.trips.values() if t.bus_id == bus.id]
        if not trips:
            return 1
        arrival = max(t.arrive_minute for t in trips)
        for e in self.timeline.event_indices:
            if self.timeline.start(e) == arrival:
                return e
        return self.timeline.final_event

    def _may_start(self, bus, e):
        depot_id = self.timeline.depot_at[bus.id][e - 1]
        if depot_id is None:
            return False
        minute = self.timeline.start(e)
        if e == 1 and self.instance.start_depot_id(bus) == depot_id:
            return True
        for trip in self.trips.values():
            if trip.depart_minute == minute and trip.depart_depot_id == depot_id:
                return True
            if trip.arrive_minute == minute and trip.arrive_depot_id == depot_id:
                return True
        return False

    def check_power(self):
        timeline, scenario = self.timeline, self.scenario
        ladder = self.instance.peak_ladder
        level = None
        if scenario.enable_peak_cost:
            level = next((lv for lv in ladder.levels if lv.index == self.schedule.peak_level), None)
            if level is None:
                self.flag("peak_level_choice", "peak", "no peak level chosen")
        for e in timeline.event_indices:
            draw = 0.0
            net = 0.0
            for bus in self.instance.buses:
                action = self.schedule.action(bus.id, e)
                if action.kind not in ("charge", "discharge") or action.depot_id is None:
                    continue
                charger = self.chargers.get((action.depot_id, action.charger_index))
                if charger is None:
                    continue
                if action.kind == "charge":
                    power = charger.charge_efficiency_frac * charger.charge_power_kw
                    draw += power
                    net += power
                else:
                    net -= charger.discharge_power_kw / charger.discharge_efficiency_frac
            if not self.at_most(net, ladder.hard_cap_kw):
                self.flag("grid_power_cap", f"event {e}", f"{net:.3f} kW above cap", net)
            if level is not None:
                slot = timeline.slot(e)
                for depot in self.instance.depots:
                    flow = self.schedule.flow(depot.id, e)
                    draw -= 60.0 * (flow.pv_to_bus_kwh + flow.ess_to_bus_kwh) / slot
                if not self.at_most(draw, level.power_kw):
                    self.flag("peak_level_bound", f"event {e}", f"{draw:.3f} kW above level {level.index}", draw)


def validate_schedule(instance, timeline, scenario, schedule, tolerance=ENERGY_TOLERANCE):
    """
    Re-checks every enabled rule of the charging model against a schedule.

    Params
    ------
    tolerance: float
        Absolute tolerance on energy quantities, scaled up for magnitudes above 1.
        Logical rules (exclusivity, presence, windows) are checked exactly.

    Returns
    -------
    list of Violation
        Empty iff the schedule is feasible.
    """
    checker = _Checker(instance, timeline, scenario, schedule, tolerance)
    checker.check_actions()
    checker.check_battery()
    checker.check_depots()
    checker.check_degradation()
    checker.check_sessions()
    checker.check_power()
    if checker.violations:
        logger.warning(f"Schedule for {scenario.name} has {len(checker.violations)} violations")
    return checker.violations
