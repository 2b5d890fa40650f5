import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from app.utils.energy_utils import consumption_rate

MINUTES_PER_DAY = 1440


def _freeze(values):
    return tuple(values) if values is not None else ()


@dataclass(frozen=True)
class BusSpec:
    id: str
    battery_capacity_kwh: float
    soc_min_frac: float = 0.25
    soc_max_frac: float = 0.85
    soc_initial_frac: float = 0.50
    soc_end_frac: float = 0.50
    cycle_life: int = 4000
    replacement_cost_eur_per_kwh: float = 128.47
    lifetime_throughput_kwh: float | None = None
    home_depot_id: int | None = None

    def __post_init__(self):
        # full-cycle-equivalent throughput unless given explicitly
        if self.lifetime_throughput_kwh is None:
            object.__setattr__(
                self,
                "lifetime_throughput_kwh",
                float(self.cycle_life) * float(self.battery_capacity_kwh),
            )

    @property
    def min_energy_kwh(self):
        return self.battery_capacity_kwh * self.soc_min_frac

    @property
    def max_energy_kwh(self):
        return self.battery_capacity_kwh * self.soc_max_frac

    @property
    def initial_energy_kwh(self):
        return self.battery_capacity_kwh * self.soc_initial_frac

    @property
    def end_energy_kwh(self):
        return self.battery_capacity_kwh * self.soc_end_frac


@dataclass(frozen=True)
class ChargerSpec:
    depot_id: int
    charger_index: int
    charge_efficiency_frac: float = 0.92
    charge_power_kw: float = 150.0
    discharge_efficiency_frac: float = 0.92
    discharge_power_kw: float = 120.0

    @property
    def battery_charge_kw(self):
        """Power reaching the battery while charging."""
        return self.charge_efficiency_frac * self.charge_power_kw

    @property
    def battery_discharge_kw(self):
        """Power leaving the battery while discharging at full rate."""
        return self.discharge_power_kw / self.discharge_efficiency_frac


@dataclass(frozen=True)
class DepotSpec:
    id: int
    name: str = ""
    chargers: tuple = ()
    ess_capacity_kwh: float = 0.0
    ess_soc_min_frac: float = 0.20
    pv_area_m2: float = 0.0
    is_overnight_depot: bool = False

    def __post_init__(self):
        object.__setattr__(self, "chargers", _freeze(self.chargers))

    @property
    def has_ess(self):
        return self.ess_capacity_kwh > 0

    @property
    def ess_min_kwh(self):
        return self.ess_soc_min_frac * self.ess_capacity_kwh

    def __repr__(self):
        return f"<Depot {self.id} {self.name!r} ({len(self.chargers)} chargers)>"


@dataclass(frozen=True)
class Trip:
    id: str
    bus_id: str
    depart_depot_id: int
    arrive_depot_id: int
    depart_minute: int
    arrive_minute: int
    distance_km: float
    avg_speed_kmh: float | None = None
    consumption_rate_kwh_per_km: float | None = None
    speed_overridden: bool = False

    @property
    def duration_minutes(self):
        return self.arrive_minute - self.depart_minute

    @property
    def implied_speed_kmh(self):
        if self.duration_minutes <= 0:
            return None
        return self.distance_km / (self.duration_minutes / 60.0)

    @property
    def speed_kmh(self):
        if self.avg_speed_kmh is not None:
            return self.avg_speed_kmh
        return self.implied_speed_kmh

    @property
    def kwh_per_km(self):
        """
        Consumption rate of the trip.
        A rate given with the trip wins over the speed-based estimate.
        """
        if self.consumption_rate_kwh_per_km is not None:
            return self.consumption_rate_kwh_per_km
        speed = self.speed_kmh
        if not speed:
            return None
        return consumption_rate(speed / 3.6)

    @property
    def energy_kwh(self):
        """Energy drawn over the whole trip as the balance constraint sees it."""
        return self.kwh_per_km * self.speed_kmh * self.duration_minutes / 60.0

    def __repr__(self):
        return (
            f"<Trip {self.id} bus={self.bus_id} "
            f"{self.depart_depot_id}->{self.arrive_depot_id} "
            f"{self.depart_minute}-{self.arrive_minute}>"
        )


@dataclass(frozen=True)
class TariffProfile:
    """Hour-indexed purchase prices in EUR/kWh. Sell price is a fixed fraction of purchase."""

    prices_eur_per_kwh: tuple
    sell_margin_frac: float = 0.75

    def __post_init__(self):
        object.__setattr__(
            self, "prices_eur_per_kwh", tuple(float(p) for p in self.prices_eur_per_kwh)
        )

    def purchase_price(self, minute):
        return self.prices_eur_per_kwh[(minute // 60) % len(self.prices_eur_per_kwh)]

    def sell_price(self, minute, margin_frac=None):
        margin = self.sell_margin_frac if margin_frac is None else margin_frac
        return margin * self.purchase_price(minute)

    def breakpoints(self, horizon_minutes):
        return [60 * h for h in range(len(self.prices_eur_per_kwh)) if 60 * h < horizon_minutes]


@dataclass(frozen=True)
class SolarProfile:
    """Hour-indexed irradiance in W/m2."""

    irradiance_w_per_m2: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "irradiance_w_per_m2", tuple(float(v) for v in self.irradiance_w_per_m2)
        )

    def irradiance(self, minute):
        return self.irradiance_w_per_m2[(minute // 60) % len(self.irradiance_w_per_m2)]

    def average_irradiance(self, start_minute, slot_minutes):
        total = sum(self.irradiance(m) for m in range(start_minute, start_minute + slot_minutes))
        return total / slot_minutes

    def breakpoints(self, horizon_minutes):
        return [60 * h for h in range(len(self.irradiance_w_per_m2)) if 60 * h < horizon_minutes]


@dataclass(frozen=True)
class PeakLevel:
    index: int
    power_kw: float
    daily_price_eur: float


@dataclass(frozen=True)
class PeakLadder:
    levels: tuple
    hard_cap_kw: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "levels", _freeze(self.levels))

    def level_for(self, draw_kw):
        """
        Returns the cheapest level covering a given grid draw.

        Params
        ------
        draw_kw: float
            Highest simultaneous grid draw of the day.

        Returns
        -------
        level: PeakLevel
            The least level whose power is at least `draw_kw` (the top level when none is).
        cost: float
            Daily price of that level, or the top level's per-kW rate applied to the draw when
            the draw exceeds the ladder.
        """
        tolerance = 1e-6
        for level in self.levels:
            if level.power_kw + tolerance >= draw_kw:
                return level, level.daily_price_eur
        top = self.levels[-1]
        return top, draw_kw * top.daily_price_eur / top.power_kw


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    enable_peak_cost: bool = False
    enable_v2g: bool = False
    enable_degradation: bool = False
    enable_pv_ess: bool = False
    min_session_minutes: float = 5.0
    discharge_windows: tuple = ((420, 600), (1080, 1260))
    tariff_margin_frac: float | None = None
    single_overnight_connection: bool = True
    # sold energy carries the 1/eta factor and wear is billed on full-slot power
    literal_loss_accounting: bool = True

    def __post_init__(self):
        object.__setattr__(
            self,
            "discharge_windows",
            tuple(tuple(int(v) for v in window) for window in self.discharge_windows),
        )

    def with_changes(self, **changes):
        return replace(self, **changes)

    def window_contains(self, start_minute, end_minute):
        """True if [start, end) lies entirely inside one discharge window."""
        return any(lo <= start_minute and end_minute <= hi for lo, hi in self.discharge_windows)

    def sell_margin(self, tariff):
        if self.tariff_margin_frac is not None:
            return self.tariff_margin_frac
        return tariff.sell_margin_frac

    @property
    def window_breakpoints(self):
        return sorted({edge for window in self.discharge_windows for edge in window})


SCENARIO_PRESETS = {
    "basic": ScenarioConfig(name="basic"),
    "pp_v2g_dc": ScenarioConfig(
        name="pp_v2g_dc",
        enable_peak_cost=True,
        enable_v2g=True,
        enable_degradation=True,
    ),
    "all": ScenarioConfig(
        name="all",
        enable_peak_cost=True,
        enable_v2g=True,
        enable_degradation=True,
        enable_pv_ess=True,
    ),
}


def get_scenario(name):
    """Looks up a preset scenario by name (basic | pp_v2g_dc | all)."""
    try:
        return SCENARIO_PRESETS[name]
    except KeyError:
        from app.errors import ParameterError

        known = ", ".join(SCENARIO_PRESETS)
        raise ParameterError(f"Unknown scenario `{name}`; expected one of: {known}")


@dataclass(frozen=True)
class ProblemInstance:
    buses: tuple
    depots: tuple
    trips: tuple
    tariff: TariffProfile
    solar: SolarProfile
    peak_ladder: PeakLadder
    horizon_minutes: int = MINUTES_PER_DAY
    _lookup: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", _freeze(self.buses))
        object.__setattr__(self, "depots", _freeze(self.depots))
        object.__setattr__(self, "trips", _freeze(self.trips))
        object.__setattr__(
            self,
            "_lookup",
            {
                "bus": {bus.id: pos for pos, bus in enumerate(self.buses)},
                "depot": {depot.id: pos for pos, depot in enumerate(self.depots)},
            },
        )

    def bus_position(self, bus_id):
        return self._lookup["bus"].get(bus_id)

    def depot_position(self, depot_id):
        return self._lookup["depot"].get(depot_id)

    def depot_by_id(self, depot_id):
        pos = self.depot_position(depot_id)
        return self.depots[pos] if pos is not None else None

    def trips_for_bus(self, bus_id):
        return sorted(
            (trip for trip in self.trips if trip.bus_id == bus_id),
            key=lambda trip: (trip.depart_minute, trip.arrive_minute),
        )

    @property
    def overnight_depot(self):
        for depot in self.depots:
            if depot.is_overnight_depot:
                return depot
        return self.depots[0] if self.depots else None

    def start_depot_id(self, bus):
        """Where a bus sits at the start of the day."""
        trips = self.trips_for_bus(bus.id)
        if trips:
            return trips[0].depart_depot_id
        if bus.home_depot_id is not None:
            return bus.home_depot_id
        overnight = self.overnight_depot
        return overnight.id if overnight else None

    def with_changes(self, **changes):
        return replace(self, **changes)

    def fingerprint(self):
        """Stable short hash of every field, used to tie outputs back to their inputs."""
        payload = {
            "buses": [asdict(bus) for bus in self.buses],
            "depots": [asdict(depot) for depot in self.depots],
            "trips": [asdict(trip) for trip in self.trips],
            "tariff": asdict(self.tariff),
            "solar": asdict(self.solar),
            "peak_ladder": asdict(self.peak_ladder),
            "horizon_minutes": self.horizon_minutes,
        }
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __repr__(self):
        return (
            f"<ProblemInstance {len(self.buses)} buses, {len(self.depots)} depots, "
            f"{len(self.trips)} trips, horizon {self.horizon_minutes} min>"
        )
