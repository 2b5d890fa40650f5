import logging
from collections import namedtuple
from dataclasses import dataclass, field

import pandas as pd

from app.errors import ParameterError, StructuralError

logger = logging.getLogger(__name__)

BUS_ARRIVAL = "bus_arrival"
BUS_DEPARTURE = "bus_departure"
PRICE_CHANGE = "price_change"
SOLAR_CHANGE = "solar_change"
HORIZON_END = "horizon_end"

KIND_ORDER = (BUS_ARRIVAL, BUS_DEPARTURE, PRICE_CHANGE, SOLAR_CHANGE, HORIZON_END)

Presence = namedtuple(
    "Presence", ["depot_at", "trip_at", "movement", "last_return", "final_event"]
)


@dataclass(frozen=True)
class Event:
    index: int
    start_minute: int
    slot_minutes: int
    kinds: frozenset = frozenset()

    @property
    def end_minute(self):
        return self.start_minute + self.slot_minutes

    def describe_kinds(self):
        return "|".join(kind for kind in KIND_ORDER if kind in self.kinds)


@dataclass(frozen=True)
class EventTimeline:
    """
    Ordered events of one planning day and every indicator derived from them.
    Event indices are 1-based; `depot_at[bus_id][e - 1]` is the depot the bus sits at
    during slot e (None while it is on a trip).
    """

    events: tuple
    horizon_minutes: int
    depot_at: dict
    trip_at: dict
    movement: frozenset
    sun: tuple
    min_slots: tuple
    capped_min_slots: frozenset
    last_return: dict
    tau_m: float
    sun_threshold: float = 0.0
    _by_bus_depot: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        index = {}
        for bus_id, depots in self.depot_at.items():
            for e, depot_id in enumerate(depots, start=1):
                if depot_id is not None:
                    index.setdefault((bus_id, depot_id), []).append(e)
        object.__setattr__(self, "_by_bus_depot", index)

    def __len__(self):
        return len(self.events)

    @property
    def event_indices(self):
        return range(1, len(self.events) + 1)

    @property
    def final_event(self):
        return len(self.events)

    def event(self, e):
        return self.events[e - 1]

    def slot(self, e):
        return self.events[e - 1].slot_minutes

    def start(self, e):
        return self.events[e - 1].start_minute

    def present(self, depot_id, bus_id, e):
        return 1 if self.depot_at[bus_id][e - 1] == depot_id else 0

    def serving(self, bus_id, trip_id, e):
        return 1 if self.trip_at[bus_id][e - 1] == trip_id else 0

    def moves(self, depot_id, e):
        return 1 if (depot_id, e) in self.movement else 0

    def theta(self, e):
        return self.sun[e - 1]

    def v(self, e):
        return self.min_slots[e - 1]

    def presence_events(self, bus_id, depot_id):
        """Events at which the bus sits at the depot."""
        return self._by_bus_depot.get((bus_id, depot_id), [])

    def to_frame(self):
        """One row per event: index, minute, slot length and kind flags."""
        return pd.DataFrame(
            {
                "event": [ev.index for ev in self.events],
                "minute": [ev.start_minute for ev in self.events],
                "slot_minutes": [ev.slot_minutes for ev in self.events],
                "kinds": [ev.describe_kinds() for ev in self.events],
                "sun": list(self.sun),
                "min_slots": list(self.min_slots),
            }
        )

    def __repr__(self):
        return f"<EventTimeline {len(self.events)} events over {self.horizon_minutes} min>"


def _check_trip_times(instance):
    for trip in instance.trips:
        if trip.depart_minute < 0 or trip.arrive_minute > instance.horizon_minutes:
            raise StructuralError(
                f"Trip `{trip.id}` runs from {trip.depart_minute} to {trip.arrive_minute}, "
                f"outside the {instance.horizon_minutes}-minute horizon"
            )
        if trip.arrive_minute <= trip.depart_minute:
            raise StructuralError(f"Trip `{trip.id}` arrives before it departs")


def build_events(instance, extra_breakpoints=()):
    """
    Merges every breakpoint of the day into an ordered event list.

    Trip departures and arrivals, hourly tariff and solar changes and any extra
    breakpoints (discharge-window edges) each open a slot; coinciding minutes merge into a
    single event carrying all their kinds. The horizon end is flagged on the last event.
    """
    horizon = instance.horizon_minutes
    if horizon <= 0:
        raise StructuralError("Planning horizon must be positive")
    _check_trip_times(instance)

    kinds = {0: set()}

    def mark(minute, kind):
        if 0 <= minute < horizon:
            kinds.setdefault(int(minute), set()).add(kind)

    for minute in instance.tariff.breakpoints(horizon):
        mark(minute, PRICE_CHANGE)
    for minute in instance.solar.breakpoints(horizon):
        mark(minute, SOLAR_CHANGE)
    for minute in extra_breakpoints:
        mark(minute, PRICE_CHANGE)
    for trip in instance.trips:
        mark(trip.depart_minute, BUS_DEPARTURE)
        mark(trip.arrive_minute, BUS_ARRIVAL)

    minutes = sorted(kinds)
    events = []
    for position, minute in enumerate(minutes):
        end = minutes[position + 1] if position + 1 < len(minutes) else horizon
        flags = set(kinds[minute])
        if position == len(minutes) - 1:
            flags.add(HORIZON_END)
        events.append(Event(position + 1, minute, end - minute, frozenset(flags)))
    return events


def compute_min_slots(events, tau_m):
    """
    Number of consecutive slots, starting with each event's own, needed to reach `tau_m`
    minutes.

    Returns
    -------
    min_slots: tuple
        V per event, 1-based order.
    capped: frozenset
        Events too close to the horizon end to ever reach `tau_m`; their V is the count of
        remaining slots.
    """
    if tau_m is None or tau_m <= 0:
        raise ParameterError(f"Minimum session length must be positive, got {tau_m}")
    slots = [ev.slot_minutes for ev in events]
    min_slots = []
    capped = set()
    for start in range(len(slots)):
        total = 0.0
        count = 0
        for length in slots[start:]:
            total += length
            count += 1
            if total >= tau_m:
                break
        else:
            capped.add(start + 1)
        min_slots.append(count)
    return tuple(min_slots), frozenset(capped)


def _event_at(events, minute):
    for ev in events:
        if ev.start_minute == minute:
            return ev.index
    return None


def compute_presence(instance, events):
    """
    Locates every bus during every slot.

    A bus waits at the departure depot of its first trip until it leaves, at the arrival
    depot of each trip until its next departure, and at its start depot all day when it
    has no trips. Slots starting inside [depart, arrive) of a trip are trip slots.
    """
    depot_at = {}
    trip_at = {}
    movement = set()
    last_return = {}

    for bus in instance.buses:
        trips = instance.trips_for_bus(bus.id)
        depots = []
        serving = []
        for ev in events:
            minute = ev.start_minute
            on_trip = next(
                (t for t in trips if t.depart_minute <= minute < t.arrive_minute), None
            )
            if on_trip is not None:
                depots.append(None)
                serving.append(on_trip.id)
                continue
            serving.append(None)
            arrived = [t for t in trips if t.arrive_minute <= minute]
            if arrived:
                depots.append(arrived[-1].arrive_depot_id)
            else:
                depots.append(instance.start_depot_id(bus))
        depot_at[bus.id] = tuple(depots)
        trip_at[bus.id] = tuple(serving)

        # the start location counts as an arrival so parked buses may start a session
        start_depot = instance.start_depot_id(bus)
        if start_depot is not None and events:
            movement.add((start_depot, 1))
        for trip in trips:
            for minute, depot_id in (
                (trip.depart_minute, trip.depart_depot_id),
                (trip.arrive_minute, trip.arrive_depot_id),
            ):
                e = _event_at(events, minute)
                if e is not None:
                    movement.add((depot_id, e))

        if trips:
            e = _event_at(events, trips[-1].arrive_minute)
            last_return[bus.id] = e if e is not None else len(events)
        else:
            last_return[bus.id] = 1

    return Presence(depot_at, trip_at, frozenset(movement), last_return, len(events))


def compute_sun(instance, events, sun_threshold=0.0):
    return tuple(
        1
        if instance.solar.average_irradiance(ev.start_minute, ev.slot_minutes) > sun_threshold
        else 0
        for ev in events
    )


def build_timeline(instance, tau_m=5.0, extra_breakpoints=(), sun_threshold=0.0):
    """
    Builds the event timeline of an instance.

    Params
    ------
    instance: ProblemInstance
        A validated instance.
    tau_m: float
        Minimum session length in minutes, used for the per-event minimum slot counts.
    extra_breakpoints: iterable of int
        Additional minutes that must start an event, typically discharge-window edges.
    sun_threshold: float
        Slot-average irradiance (W/m2) above which a slot counts as sunny.

    Returns
    -------
    EventTimeline
    """
    events = build_events(instance, extra_breakpoints)
    presence = compute_presence(instance, events)
    min_slots, capped = compute_min_slots(events, tau_m)
    sun = compute_sun(instance, events, sun_threshold)
    timeline = EventTimeline(
        events=tuple(events),
        horizon_minutes=instance.horizon_minutes,
        depot_at=presence.depot_at,
        trip_at=presence.trip_at,
        movement=presence.movement,
        sun=sun,
        min_slots=min_slots,
        capped_min_slots=capped,
        last_return=presence.last_return,
        tau_m=tau_m,
        sun_threshold=sun_threshold,
    )
    if capped:
        logger.debug(f"Minimum session length capped at events {sorted(capped)}")
    logger.debug(f"Built {timeline!r}")
    return timeline


def timeline_for(instance, scenario, sun_threshold=0.0):
    """Timeline with the scenario's session length and its discharge windows as breakpoints."""
    return build_timeline(
        instance,
        tau_m=scenario.min_session_minutes,
        extra_breakpoints=scenario.window_breakpoints,
        sun_threshold=sun_threshold,
    )
