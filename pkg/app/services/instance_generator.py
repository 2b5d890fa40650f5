import logging

import numpy as np

from app.errors import GenerationError
from app.models import MINUTES_PER_DAY, BusSpec, ProblemInstance, Trip
from app.services import dataset_service
from app.utils.energy_utils import consumption_rate

logger = logging.getLogger(__name__)

SERVICE_START_MINUTE = 330
SERVICE_END_MINUTE = 1410
MEAN_SPEED_KMH = 16.68
SPEED_SPREAD_KMH = 2.0
SPEED_RANGE_KMH = (12.0, 22.0)
REVENUE_DISTANCE_KM = 7.84
DISTANCE_SPREAD_FRAC = 0.10
DEADHEAD_DISTANCE_KM = (2.0, 3.0)
LAYOVER_MINUTES = (5, 15)


def _bundled_components():
    config = dataset_service.build_run_config()
    infrastructure = dataset_service.load_infrastructure(config.input_path("infrastructure"))
    tariff = dataset_service.load_tariff(
        config.input_path("tariff"), sell_margin_frac=infrastructure.sell_margin_frac
    )
    solar = dataset_service.load_solar(config.input_path("solar"))
    return infrastructure, tariff, solar


def _pick_terminals(depots, overnight):
    terminals = sorted((d for d in depots if d.id != overnight.id), key=lambda d: d.id)
    if len(terminals) < 2:
        raise GenerationError(
            f"Need an overnight depot and two terminals, got {len(depots)} depots"
        )
    # the last terminal is the one served by pull-out and pull-in deadheads
    return terminals[-1], terminals[-2]


def _split_revenue_trips(rng, n_revenue, n_buses):
    counts = np.full(n_buses, n_revenue // n_buses, dtype=int)
    extra = n_revenue % n_buses
    if extra:
        counts[rng.choice(n_buses, size=extra, replace=False)] += 1
    return counts


def _draw_leg(rng, distance_km):
    speed = float(np.clip(rng.normal(MEAN_SPEED_KMH, SPEED_SPREAD_KMH), *SPEED_RANGE_KMH))
    duration = max(1, int(round(distance_km / speed * 60.0)))
    return distance_km, duration


def _plan_legs(rng, n_revenue, near, far, overnight):
    """(origin, destination, is deadhead, distance, duration, layover after) per leg of one block."""
    stops = [overnight.id, near.id]
    here = near.id
    for _ in range(n_revenue):
        here = far.id if here == near.id else near.id
        stops.append(here)
    stops.append(overnight.id)

    legs = []
    for n, (origin, destination) in enumerate(zip(stops, stops[1:])):
        deadhead = origin == overnight.id or destination == overnight.id
        if deadhead:
            distance = rng.uniform(*DEADHEAD_DISTANCE_KM)
            if far.id in (origin, destination):
                distance += REVENUE_DISTANCE_KM
        else:
            spread = rng.uniform(1.0 - DISTANCE_SPREAD_FRAC, 1.0 + DISTANCE_SPREAD_FRAC)
            distance = REVENUE_DISTANCE_KM * spread
        distance, duration = _draw_leg(rng, round(float(distance), 2))
        last = n == len(stops) - 2
        layover = 0 if last else int(rng.integers(LAYOVER_MINUTES[0], LAYOVER_MINUTES[1] + 1))
        legs.append((origin, destination, deadhead, distance, duration, layover))
    return legs


def _best_charge_kw(depot):
    return max((c.battery_charge_kw for c in depot.chargers), default=0.0)


def _check_energy(bus, legs, start, depots_by_id, horizon):
    """
    Coarse servability check: the block must fit in the usable battery window plus what the
    terminal chargers can add during layovers, and the day's total draw must be recoverable
    from layover and depot charging.
    """
    drawn = 0.0
    recharge = 0.0
    for _, destination, _, distance, duration, layover in legs:
        drawn += consumption_rate(distance / (duration / 60.0) / 3.6) * distance
        recharge += layover * _best_charge_kw(depots_by_id[destination]) / 60.0
    usable = bus.initial_energy_kwh - bus.min_energy_kwh
    if drawn > usable + recharge:
        raise GenerationError(
            f"Bus {bus.id} needs {drawn:.1f} kWh but can hold {usable:.1f} kWh "
            f"plus {recharge:.1f} kWh of layover charging"
        )
    end = start + sum(duration + layover for *_, duration, layover in legs)
    overnight = depots_by_id[legs[0][0]]
    depot_minutes = start + (horizon - end)
    needed = drawn + bus.end_energy_kwh - bus.initial_energy_kwh
    if needed > recharge + depot_minutes * _best_charge_kw(overnight) / 60.0:
        raise GenerationError(f"Bus {bus.id} cannot recover {needed:.1f} kWh before the day ends")


def generate_instance(
    seed,
    n_buses,
    n_trips,
    depots=None,
    bus_defaults=None,
    service_start=SERVICE_START_MINUTE,
    service_end=SERVICE_END_MINUTE,
    horizon_minutes=MINUTES_PER_DAY,
):
    """
    Generates a deterministic synthetic line.

    Each bus pulls out from the overnight depot to the nearer terminal, runs revenue trips
    back and forth between the two terminals and pulls in again. `n_trips` counts deadheads
    as well as revenue trips, so every bus gets at least its pull-out and pull-in. Speeds
    are drawn around 16.68 km/h and revenue trips around 7.84 km, which puts trip energy
    near 17.7 kWh; each trip's stated speed is exactly its distance over its duration.

    Params
    ------
    seed: int
        Seed of the random generator; the same seed always gives the same instance.
    n_buses, n_trips: int
        Fleet size and total number of trips.
    depots: tuple[DepotSpec]
        One overnight depot and at least two terminals. Defaults to the bundled depots.
    bus_defaults: dict
        BusSpec fields shared by every bus. Defaults to the bundled fleet defaults.

    Raises
    ------
    GenerationError
        Non-positive sizes, fewer trips than pull-outs and pull-ins, a block longer than
        the service window, or a block the batteries and chargers cannot serve.
    """
    if n_buses < 1 or n_trips < 1:
        raise GenerationError(f"Need at least one bus and one trip, got {n_buses} and {n_trips}")
    if n_trips < 2 * n_buses:
        raise GenerationError(
            f"{n_trips} trips cannot give each of {n_buses} buses a pull-out and a pull-in"
        )
    if not (0 <= service_start < service_end <= horizon_minutes):
        raise GenerationError(f"Bad service window {service_start}-{service_end}")

    infrastructure, tariff, solar = _bundled_components()
    depots = tuple(depots) if depots is not None else infrastructure.depots
    if bus_defaults is None:
        bus_defaults = dataset_service.load_bus_defaults()
    overnight = next((d for d in depots if d.is_overnight_depot), None)
    if overnight is None:
        raise GenerationError("No overnight depot among the given depots")
    near, far = _pick_terminals(depots, overnight)
    depots_by_id = {d.id: d for d in depots}

    rng = np.random.default_rng(seed)
    counts = _split_revenue_trips(rng, n_trips - 2 * n_buses, n_buses)
    width = max(2, len(str(n_buses)))
    trip_width = max(3, len(str(n_trips)))

    buses, trips = [], []
    revenue_no = deadhead_no = 0
    window = service_end - service_start
    for k in range(n_buses):
        bus = BusSpec(**{"home_depot_id": overnight.id, **bus_defaults, "id": f"B{k + 1:0{width}d}"})
        legs = _plan_legs(rng, int(counts[k]), near, far, overnight)
        block = sum(duration + layover for *_, duration, layover in legs)
        slack = window - block
        if slack < 0:
            raise GenerationError(
                f"Bus {bus.id} needs {block} minutes for {len(legs)} trips; "
                f"the service window is {window} minutes"
            )
        start = service_start + int(slack * (k + rng.uniform()) / n_buses)
        _check_energy(bus, legs, start, depots_by_id, horizon_minutes)

        minute = start
        for origin, destination, deadhead, distance, duration, layover in legs:
            if deadhead:
                deadhead_no += 1
                trip_id = f"D{deadhead_no:0{trip_width}d}"
            else:
                revenue_no += 1
                trip_id = f"T{revenue_no:0{trip_width}d}"
            trips.append(
                Trip(
                    id=trip_id,
                    bus_id=bus.id,
                    depart_depot_id=origin,
                    arrive_depot_id=destination,
                    depart_minute=minute,
                    arrive_minute=minute + duration,
                    distance_km=distance,
                    avg_speed_kmh=distance / (duration / 60.0),
                )
            )
            minute += duration + layover
        buses.append(bus)

    instance = ProblemInstance(
        buses=tuple(buses),
        depots=depots,
        trips=tuple(trips),
        tariff=tariff,
        solar=solar,
        peak_ladder=infrastructure.peak_ladder,
        horizon_minutes=horizon_minutes,
    )
    logger.info(f"Generated {instance!r} from seed {seed}")
    return instance
