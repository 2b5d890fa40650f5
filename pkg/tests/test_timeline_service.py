from dataclasses import replace

import pytest

from app.errors import ParameterError, StructuralError
from app.models import BusSpec, ScenarioConfig
from app.services.timeline_service import (
    BUS_ARRIVAL,
    BUS_DEPARTURE,
    HORIZON_END,
    PRICE_CHANGE,
    SOLAR_CHANGE,
    build_timeline,
    compute_min_slots,
    timeline_for,
)


def test_events_merge_breakpoints(tiny_instance):
    timeline = build_timeline(tiny_instance)
    assert [ev.start_minute for ev in timeline.events] == [0, 60, 90, 120]
    assert [ev.slot_minutes for ev in timeline.events] == [60, 30, 30, 60]
    assert [ev.index for ev in timeline.events] == [1, 2, 3, 4]
    assert sum(ev.slot_minutes for ev in timeline.events) == tiny_instance.horizon_minutes

    assert timeline.event(2).kinds == {PRICE_CHANGE, SOLAR_CHANGE, BUS_DEPARTURE}
    assert timeline.event(3).kinds == {BUS_ARRIVAL}
    assert HORIZON_END in timeline.event(4).kinds
    assert HORIZON_END not in timeline.event(3).kinds
    assert timeline.final_event == 4


def test_window_edges_become_events(tiny_instance):
    scenario = ScenarioConfig(discharge_windows=((30, 45),))
    timeline = timeline_for(tiny_instance, scenario)
    assert [ev.start_minute for ev in timeline.events] == [0, 30, 45, 60, 90, 120]


def test_edges_beyond_horizon_are_ignored(tiny_instance):
    # preset windows all start after the three-hour horizon
    timeline = timeline_for(tiny_instance, ScenarioConfig())
    assert len(timeline) == 4


def test_presence_and_trips(tiny_instance):
    timeline = build_timeline(tiny_instance)
    assert timeline.depot_at["B1"] == (1, None, 1, 1)
    assert timeline.trip_at["B1"] == (None, "T1", None, None)
    assert timeline.presence_events("B1", 1) == [1, 3, 4]
    assert timeline.present(1, "B1", 2) == 0
    assert timeline.serving("B1", "T1", 2) == 1


def test_movement_and_last_return(tiny_instance):
    timeline = build_timeline(tiny_instance)
    assert timeline.movement == {(1, 1), (1, 2), (1, 3)}
    assert timeline.moves(1, 4) == 0
    assert timeline.last_return["B1"] == 3


def test_bus_without_trips_waits_at_home(tiny_instance):
    idle = BusSpec(id="B2", battery_capacity_kwh=100.0, home_depot_id=1)
    instance = tiny_instance.with_changes(buses=tiny_instance.buses + (idle,))
    timeline = build_timeline(instance)
    assert timeline.depot_at["B2"] == (1, 1, 1, 1)
    assert timeline.last_return["B2"] == 1


def test_arrival_at_horizon_returns_last_event(tiny_instance):
    late = replace(tiny_instance.trips[0], depart_minute=150, arrive_minute=180, avg_speed_kmh=10.0)
    timeline = build_timeline(tiny_instance.with_changes(trips=(late,)))
    assert [ev.start_minute for ev in timeline.events] == [0, 60, 120, 150]
    assert timeline.last_return["B1"] == len(timeline)
    assert timeline.depot_at["B1"][-1] is None


def test_sun_flags(tiny_instance):
    timeline = build_timeline(tiny_instance)
    assert timeline.sun == (0, 1, 1, 0)
    assert build_timeline(tiny_instance, sun_threshold=600.0).sun == (0, 0, 0, 0)


def test_min_slots_and_capping(tiny_instance):
    timeline = build_timeline(tiny_instance, tau_m=45.0)
    assert timeline.min_slots == (1, 2, 2, 1)
    assert not timeline.capped_min_slots

    timeline = build_timeline(tiny_instance, tau_m=90.0)
    assert timeline.min_slots == (2, 3, 2, 1)
    assert timeline.capped_min_slots == {4}


def test_compute_min_slots_rejects_bad_tau(tiny_instance):
    events = build_timeline(tiny_instance).events
    with pytest.raises(ParameterError):
        compute_min_slots(events, 0)


def test_trip_outside_horizon_is_structural(tiny_instance):
    late = replace(tiny_instance.trips[0], arrive_minute=200)
    with pytest.raises(StructuralError):
        build_timeline(tiny_instance.with_changes(trips=(late,)))


def test_to_frame(tiny_instance):
    frame = build_timeline(tiny_instance).to_frame()
    assert list(frame.columns) == ["event", "minute", "slot_minutes", "kinds", "sun", "min_slots"]
    assert frame.loc[3, "kinds"] == "price_change|solar_change|horizon_end"


def test_generated_timeline_covers_horizon(generated_instance):
    timeline = timeline_for(generated_instance, ScenarioConfig())
    minutes = [ev.start_minute for ev in timeline.events]
    assert minutes == sorted(set(minutes))
    assert minutes[0] == 0
    assert sum(ev.slot_minutes for ev in timeline.events) == 1440
    for edge in (420, 600, 1080, 1260):
        assert edge in minutes
    for trip in generated_instance.trips:
        assert trip.depart_minute in minutes
        assert trip.arrive_minute in minutes
