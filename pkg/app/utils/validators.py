import re
from dataclasses import dataclass

HHMM_PATTERN = r"^([01]?\d|2[0-4]):([0-5]\d)$"

# relative tolerance between stated and implied trip speed
SPEED_TOLERANCE = 0.05


def parse_hhmm(text: str) -> int | None:
    """
    Converts an `HH:MM` clock time into minutes after midnight.
    Accepts `24:00` as the end of the day. Returns `None` for anything else.
    """
    if not text:
        return None
    match = re.match(HHMM_PATTERN, str(text).strip())
    if not match:
        return None
    minutes = int(match.group(1)) * 60 + int(match.group(2))
    if minutes > 1440:
        return None
    return minutes


def format_hhmm(minutes: int) -> str:
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def is_fraction(value) -> bool:
    return value is not None and 0.0 <= value <= 1.0


@dataclass(frozen=True)
class Issue:
    subject: str
    message: str
    fatal: bool = False

    def __str__(self):
        prefix = "FATAL " if self.fatal else ""
        return f"{prefix}{self.subject}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple = ()

    @property
    def ok(self):
        return not self.issues

    @property
    def fatal(self):
        return tuple(issue for issue in self.issues if issue.fatal)

    def about(self, subject):
        return [issue for issue in self.issues if issue.subject == subject]

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return iter(self.issues)


def _check_bus(bus, issues):
    subject = f"bus {bus.id}"
    if bus.battery_capacity_kwh <= 0:
        issues.append(Issue(subject, "battery capacity must be positive"))
    if not (0.0 <= bus.soc_min_frac < bus.soc_max_frac <= 1.0):
        issues.append(
            Issue(subject, f"SOC bounds {bus.soc_min_frac}..{bus.soc_max_frac} are not ordered")
        )
    if not (bus.soc_min_frac <= bus.soc_initial_frac <= bus.soc_max_frac):
        issues.append(Issue(subject, f"initial SOC {bus.soc_initial_frac} outside bounds"))
    if not (bus.soc_min_frac <= bus.soc_end_frac <= bus.soc_max_frac):
        issues.append(Issue(subject, f"end SOC {bus.soc_end_frac} outside bounds"))
    if bus.cycle_life <= 0:
        issues.append(Issue(subject, "cycle life must be positive"))
    if bus.replacement_cost_eur_per_kwh < 0:
        issues.append(Issue(subject, "replacement cost must be non-negative"))
    if not bus.lifetime_throughput_kwh or bus.lifetime_throughput_kwh <= 0:
        issues.append(Issue(subject, "lifetime throughput must be positive"))


def _check_depot(depot, issues):
    subject = f"depot {depot.id}"
    if not is_fraction(depot.ess_soc_min_frac):
        issues.append(Issue(subject, "ESS minimum SOC must lie in [0, 1]"))
    if depot.pv_area_m2 < 0:
        issues.append(Issue(subject, "PV area must be non-negative"))
    if depot.ess_capacity_kwh < 0:
        issues.append(Issue(subject, "ESS capacity must be non-negative"))
    seen = set()
    for charger in depot.chargers:
        charger_subject = f"{subject} charger {charger.charger_index}"
        if charger.depot_id != depot.id:
            issues.append(Issue(charger_subject, f"listed under depot {charger.depot_id}"))
        if charger.charger_index in seen:
            issues.append(Issue(charger_subject, "duplicate charger index", fatal=True))
        seen.add(charger.charger_index)
        for label, eff in (
            ("charge", charger.charge_efficiency_frac),
            ("discharge", charger.discharge_efficiency_frac),
        ):
            if not (0.0 < eff <= 1.0):
                issues.append(Issue(charger_subject, f"{label} efficiency {eff} outside (0, 1]"))
        if charger.charge_power_kw <= 0 or charger.discharge_power_kw <= 0:
            issues.append(Issue(charger_subject, "charger powers must be positive"))


def _check_trip(trip, instance, issues):
    subject = f"trip {trip.id}"
    if instance.bus_position(trip.bus_id) is None:
        issues.append(Issue(subject, f"unknown bus `{trip.bus_id}`", fatal=True))
    for depot_id in (trip.depart_depot_id, trip.arrive_depot_id):
        if instance.depot_position(depot_id) is None:
            issues.append(Issue(subject, f"unknown depot `{depot_id}`", fatal=True))
    if trip.arrive_minute <= trip.depart_minute:
        issues.append(
            Issue(subject, f"arrives at {trip.arrive_minute} before departing at {trip.depart_minute}")
        )
        return
    if trip.depart_minute < 0 or trip.arrive_minute > instance.horizon_minutes:
        issues.append(Issue(subject, "runs outside the planning horizon", fatal=True))
    if trip.distance_km < 0:
        issues.append(Issue(subject, "distance must be non-negative"))
    if trip.avg_speed_kmh is None and trip.consumption_rate_kwh_per_km is None:
        issues.append(Issue(subject, "needs an average speed or a consumption rate"))
    if trip.avg_speed_kmh is not None and not trip.speed_overridden:
        implied = trip.implied_speed_kmh
        if trip.avg_speed_kmh <= 0:
            issues.append(Issue(subject, "average speed must be positive"))
        elif implied and abs(trip.avg_speed_kmh - implied) > SPEED_TOLERANCE * implied:
            issues.append(
                Issue(
                    subject,
                    f"average speed {trip.avg_speed_kmh:.2f} km/h disagrees with "
                    f"distance/duration ({implied:.2f} km/h)",
                )
            )
    if trip.consumption_rate_kwh_per_km is not None and trip.consumption_rate_kwh_per_km < 0:
        issues.append(Issue(subject, "consumption rate must be non-negative"))


def _check_bus_chains(instance, issues):
    for bus in instance.buses:
        trips = instance.trips_for_bus(bus.id)
        for previous, current in zip(trips, trips[1:]):
            if current.depart_minute < previous.arrive_minute:
                issues.append(
                    Issue(f"trip {current.id}", f"overlaps trip {previous.id} of bus {bus.id}")
                )
            if current.depart_depot_id != previous.arrive_depot_id:
                issues.append(
                    Issue(
                        f"trip {current.id}",
                        f"departs from depot {current.depart_depot_id} but bus {bus.id} "
                        f"arrived at depot {previous.arrive_depot_id}",
                    )
                )
        if not trips and instance.start_depot_id(bus) is None:
            issues.append(Issue(f"bus {bus.id}", "has no trips and no home depot", fatal=True))


def _check_profiles(instance, issues):
    tariff = instance.tariff
    if any(price <= 0 for price in tariff.prices_eur_per_kwh):
        issues.append(Issue("tariff", "purchase prices must be positive"))
    if tariff.sell_margin_frac < 0:
        issues.append(Issue("tariff", "sell margin must be non-negative"))
    if len(tariff.prices_eur_per_kwh) * 60 < instance.horizon_minutes:
        issues.append(Issue("tariff", "does not cover the horizon", fatal=True))
    solar = instance.solar
    if any(value < 0 for value in solar.irradiance_w_per_m2):
        issues.append(Issue("solar", "irradiance must be non-negative"))
    if len(solar.irradiance_w_per_m2) * 60 < instance.horizon_minutes:
        issues.append(Issue("solar", "does not cover the horizon", fatal=True))


def _check_ladder(ladder, issues):
    levels = ladder.levels
    if not levels:
        issues.append(Issue("peak ladder", "has no levels", fatal=True))
        return
    for lower, upper in zip(levels, levels[1:]):
        if upper.power_kw <= lower.power_kw:
            issues.append(Issue("peak ladder", f"power not increasing at level {upper.index}"))
        if upper.daily_price_eur < lower.daily_price_eur:
            issues.append(Issue("peak ladder", f"price decreasing at level {upper.index}"))
    if levels[-1].power_kw > ladder.hard_cap_kw:
        issues.append(Issue("peak ladder", "top level exceeds the hard cap"))


def validate_instance(instance) -> ValidationReport:
    """
    Checks a problem instance against every invariant of its types.

    Params
    ------
    instance: ProblemInstance
        The instance to check. It is not modified.

    Returns
    -------
    ValidationReport
        One issue per violation; empty iff the instance is well-formed. Dangling references
        and other problems that make a timeline impossible are flagged `fatal`.
    """
    issues = []
    if instance.horizon_minutes <= 0:
        issues.append(Issue("instance", "horizon must be positive", fatal=True))

    bus_ids = [bus.id for bus in instance.buses]
    for duplicate in sorted({b for b in bus_ids if bus_ids.count(b) > 1}):
        issues.append(Issue(f"bus {duplicate}", "duplicate bus id", fatal=True))
    depot_ids = [depot.id for depot in instance.depots]
    for duplicate in sorted({d for d in depot_ids if depot_ids.count(d) > 1}):
        issues.append(Issue(f"depot {duplicate}", "duplicate depot id", fatal=True))
    trip_ids = [trip.id for trip in instance.trips]
    for duplicate in sorted({t for t in trip_ids if trip_ids.count(t) > 1}):
        issues.append(Issue(f"trip {duplicate}", "duplicate trip id", fatal=True))

    for bus in instance.buses:
        _check_bus(bus, issues)
    for depot in instance.depots:
        _check_depot(depot, issues)
    for trip in instance.trips:
        _check_trip(trip, instance, issues)
    _check_bus_chains(instance, issues)
    _check_profiles(instance, issues)
    _check_ladder(instance.peak_ladder, issues)
    return ValidationReport(tuple(issues))


def validate_scenario(scenario) -> ValidationReport:
    """Checks the discharge windows and session settings of a scenario."""
    issues = []
    if scenario.min_session_minutes <= 0:
        issues.append(Issue("scenario", "minimum session length must be positive"))
    if scenario.tariff_margin_frac is not None and scenario.tariff_margin_frac < 0:
        issues.append(Issue("scenario", "tariff margin must be non-negative"))
    windows = sorted(scenario.discharge_windows)
    for start, end in windows:
        if not (0 <= start < end <= 1440):
            issues.append(Issue("scenario", f"discharge window [{start}, {end}) is malformed"))
    for (_, first_end), (second_start, _) in zip(windows, windows[1:]):
        if second_start < first_end:
            issues.append(Issue("scenario", "discharge windows overlap"))
    return ValidationReport(tuple(issues))
