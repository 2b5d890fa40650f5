import pytest

from app.errors import ParameterError
from app.models import BusSpec, ChargerSpec, DepotSpec, Trip, get_scenario
from app.services.milp_service import build_model
from app.services.oracle_service import (
    brute_force_oracle,
    derive_session_indicators,
    enumerate_model,
    free_binaries,
)
from app.services.schedule_service import decode
from app.services.solver_service import OPTIMAL, solve
from app.services.timeline_service import timeline_for
from app.utils.energy_utils import degradation_coefficient
from app.utils.validators import validate_instance


def _model(instance, scenario):
    return build_model(instance, timeline_for(instance, scenario), scenario)


def test_free_binaries_skip_fixed_columns(tiny_instance, window_scenario):
    assert len(free_binaries(_model(tiny_instance, get_scenario("basic")))) == 3
    # discharging is open in the first slot only
    assert len(free_binaries(_model(tiny_instance, window_scenario))) == 4


def test_derive_session_indicators(tiny_instance):
    model = _model(tiny_instance, get_scenario("basic"))
    derived = derive_session_indicators(
        model, {"charge_d1_b1_c1_e3": 1, "charge_d1_b1_c1_e4": 1}
    )
    assert derived["charge_start_b1_e3"] == 1
    assert derived["charge_cont_b1_e4"] == 1
    assert derived["charge_start_b1_e4"] == 0
    assert derived["charge_stop_b1_e3"] == 0
    assert derived["charge_stop_b1_e4"] == 1
    assert derived["charge_stop_b1_e2"] == 0
    assert derived["discharge_stop_b1_e4"] == 1


def test_two_chargers_in_one_slot_is_rejected(make_instance):
    chargers = (ChargerSpec(depot_id=1, charger_index=1), ChargerSpec(depot_id=1, charger_index=2))
    model = _model(make_instance(chargers=chargers), get_scenario("basic"))
    assignment = {"charge_d1_b1_c1_e1": 1, "charge_d1_b1_c2_e1": 1}
    assert derive_session_indicators(model, assignment) is None


@pytest.mark.parametrize("name", ["basic", "pp_v2g_dc", "all"])
def test_oracle_matches_branch_and_bound(solar_instance, exact_limits, name):
    scenario = get_scenario(name)
    model = _model(solar_instance, scenario)
    exact = enumerate_model(model, exact_limits)
    raw = solve(model, exact_limits)
    assert exact.status == OPTIMAL
    assert exact.objective_value == pytest.approx(raw.objective_value, rel=1e-6, abs=1e-6)
    assert exact.lp_solves <= exact.enumerated


def test_oracle_matches_with_discharge_window(solar_instance, exact_limits, window_scenario):
    timeline = timeline_for(solar_instance, window_scenario)
    exact = brute_force_oracle(solar_instance, timeline, window_scenario, exact_limits)
    raw = solve(build_model(solar_instance, timeline, window_scenario), exact_limits)
    assert exact.objective_value == pytest.approx(raw.objective_value, rel=1e-6, abs=1e-6)


def test_oracle_refuses_large_models(tiny_instance):
    model = _model(tiny_instance, get_scenario("basic"))
    with pytest.raises(ParameterError):
        enumerate_model(model, max_binaries=2)


def _trip(id, bus_id, depart, arrive, distance_km, start=1, end=1):
    return Trip(id, bus_id, start, end, depart, arrive, distance_km, consumption_rate_kwh_per_km=1.5)


def _shared_charger(make_instance):
    buses = (
        BusSpec(id="B1", battery_capacity_kwh=100.0, home_depot_id=1),
        BusSpec(id="B2", battery_capacity_kwh=100.0, home_depot_id=1),
    )
    trips = (_trip("T1", "B1", 60, 90, 5.0), _trip("T2", "B2", 30, 120, 9.0))
    return make_instance(buses=buses, trips=trips, ess_capacity_kwh=20.0, pv_area_m2=50.0)


def _two_chargers(make_instance):
    chargers = (ChargerSpec(depot_id=1, charger_index=1), ChargerSpec(depot_id=1, charger_index=2))
    return make_instance(chargers=chargers, pv_area_m2=100.0, ess_capacity_kwh=50.0)


def _storage_only(make_instance):
    return make_instance(ess_capacity_kwh=50.0)


def _evening_tariff(make_instance):
    return make_instance(
        ess_capacity_kwh=50.0, pv_area_m2=100.0, prices=(0.30, 0.05, 0.25), irradiance=(200.0, 800.0, 0.0)
    )


def _two_depots(make_instance):
    trips = (_trip("T1", "B1", 60, 90, 5.0, end=2), _trip("T2", "B1", 120, 150, 5.0, start=2))
    instance = make_instance(trips=trips, ess_capacity_kwh=30.0, pv_area_m2=80.0)
    terminal = DepotSpec(
        id=2, name="Terminal", chargers=(ChargerSpec(depot_id=2, charger_index=1),), pv_area_m2=40.0
    )
    return instance.with_changes(depots=instance.depots + (terminal,))


SMALL_FLEETS = {
    "shared_charger": _shared_charger,
    "two_chargers": _two_chargers,
    "storage_only": _storage_only,
    "evening_tariff": _evening_tariff,
    "two_depots": _two_depots,
}


@pytest.mark.parametrize("name", ["basic", "pp_v2g_dc", "all"])
@pytest.mark.parametrize("fleet", sorted(SMALL_FLEETS))
def test_oracle_matches_on_small_fleets(make_instance, exact_limits, fleet, name):
    instance = SMALL_FLEETS[fleet](make_instance)
    assert validate_instance(instance).ok
    scenario = get_scenario(name)
    model = _model(instance, scenario)
    assert 0 < len(free_binaries(model)) <= 6
    exact = enumerate_model(model, exact_limits)
    raw = solve(model, exact_limits)
    assert exact.status == OPTIMAL
    assert exact.objective_value == pytest.approx(raw.objective_value, abs=1e-4)


@pytest.mark.parametrize("wear", [True, False])
def test_wear_cost_blocks_thin_arbitrage(make_instance, exact_limits, wear):
    # selling at 0.75 x 0.16 and buying back at 0.10 leaves 0.02 EUR per kWh
    instance = make_instance(trips=(_trip("T1", "B1", 60, 90, 5.0),), prices=(0.16, 0.10, 0.10))
    assert degradation_coefficient(instance.buses[0]) == pytest.approx(0.032118, abs=1e-6)
    scenario = get_scenario("all").with_changes(
        name="arbitrage", discharge_windows=((0, 60),), tariff_margin_frac=0.75, enable_degradation=wear
    )
    model = _model(instance, scenario)
    exact = enumerate_model(model, exact_limits)
    raw = solve(model, exact_limits)
    assert exact.objective_value == pytest.approx(raw.objective_value, abs=1e-4)

    exported = sum(flow.grid_sell_kwh for flow in decode(model, raw).depot_flows)
    if wear:
        assert exported == pytest.approx(0.0, abs=1e-6)
    else:
        assert exported > 1.0
