import pytest

from app.errors import StructuralError
from app.models import PeakLadder, get_scenario
from app.services import milp_service as milp
from app.services.instance_generator import generate_instance
from app.services.timeline_service import timeline_for
from app.utils.energy_utils import degradation_coefficient


def _build(instance, scenario):
    return milp.build_model(instance, timeline_for(instance, scenario), scenario)


def _var(model, name):
    return model.variables[model.variables.column_of(name)]


def test_variable_names_and_count(tiny_instance):
    model = _build(tiny_instance, get_scenario("basic"))
    names = set(model.variables.names)
    assert model.num_variables == 74
    assert len(model.slots) == 3
    assert {"charge_d1_b1_c1_e1", "charge_d1_b1_c1_e3", "charge_d1_b1_c1_e4"} <= names
    # the bus is on its trip during event 2
    assert "charge_d1_b1_c1_e2" not in names
    assert {"soc_b1_e4", "charge_start_b1_e2", "peak_level_l2", "grid_buy_d1_e4", "ess_export_d1_e1"} <= names
    assert _var(model, "charge_d1_b1_c1_e1").integer
    assert _var(model, "charge_min_d1_b1_c1_e1").upper == 60
    assert _var(model, "charge_min_d1_b1_c1_e3").upper == 30


def test_family_counts_basic(tiny_instance):
    model = _build(tiny_instance, get_scenario("basic"))
    counts = model.family_counts()
    expected = {
        "bus_single_activity": 4,
        "charger_occupancy": 4,
        "presence_gate": 3,
        "depot_charger_count": 4,
        "battery_balance": 3,
        "grid_purchase": 4,
        "grid_sale": 4,
        "battery_min": 4,
        "battery_max": 4,
        "battery_initial": 1,
        "battery_final": 1,
        "charge_duration_lower": 3,
        "discharge_duration_upper": 3,
        "min_charge_minutes": 4,
        "min_discharge_slots": 4,
        "single_overnight_session": 1,
        "charge_cont_prev": 3,
        "charge_cont_now": 4,
        "charge_start": 4,
        "charge_stop": 3,
        "charge_stop_final": 1,
        "charge_same_charger": 2,
        "session_start_gate": 4,
        "grid_power_cap": 4,
    }
    for family, count in expected.items():
        assert counts[family] == count, family
    for absent in ("degradation", "ess_balance", "pv_supply_cap", "peak_level_choice", "peak_level_bound"):
        assert counts.get(absent, 0) == 0, absent


def test_full_scenario_adds_families_without_new_variables(solar_instance):
    basic = _build(solar_instance, get_scenario("basic"))
    full = _build(solar_instance, get_scenario("all"))
    assert full.num_variables == basic.num_variables
    assert full.variables.names == basic.variables.names

    counts = full.family_counts()
    assert counts["degradation"] == 4
    assert counts["peak_level_choice"] == 1
    assert counts["peak_level_bound"] == 4
    assert counts["ess_balance"] == 3
    assert counts["ess_initial"] == 1
    assert counts["ess_final_export"] == 1
    assert counts["pv_supply_cap"] == 4
    assert counts["ess_night_only"] == 4


def test_disabled_features_are_fixed(tiny_instance):
    model = _build(tiny_instance, get_scenario("basic"))
    for family in (milp.DISCHARGE, milp.DISCHARGE_MIN, milp.DEGRADATION, milp.PEAK_LEVEL, milp.PV_TO_BUS):
        for var in model.variables.family(family):
            assert var.lower == var.upper == 0.0, var.name
    for var in model.variables.family(milp.CHARGE):
        assert (var.lower, var.upper) == (0, 1)


def test_discharge_only_inside_windows(tiny_instance, window_scenario):
    model = _build(tiny_instance, window_scenario)
    # event 1 lies in [0, 60); event 3 does not; event 4 is the last slot
    assert _var(model, "discharge_d1_b1_c1_e1").upper == 1
    assert _var(model, "discharge_d1_b1_c1_e3").upper == 0
    assert _var(model, "discharge_d1_b1_c1_e4").upper == 0
    assert _var(model, "discharge_min_d1_b1_c1_e3").upper == 0


def test_preset_windows_leave_short_day_without_discharge(tiny_instance):
    model = _build(tiny_instance, get_scenario("pp_v2g_dc"))
    assert all(var.upper == 0 for var in model.variables.family(milp.DISCHARGE))


def test_final_slot_storage_draw_is_fixed(solar_instance):
    model = _build(solar_instance, get_scenario("all"))
    assert _var(model, "ess_to_bus_d1_e4").upper == 0
    assert _var(model, "pv_to_ess_d1_e4").upper == 0
    # no sun in the first slot
    assert _var(model, "pv_to_ess_d1_e1").upper == 0
    assert _var(model, "pv_to_ess_d1_e2").upper == milp.INF


def test_objective_groups_follow_toggles(tiny_instance):
    basic = _build(tiny_instance, get_scenario("basic"))
    assert set(basic.objective_groups) == {"charging"}
    col = basic.variables.column_of("grid_buy_d1_e1")
    assert basic.objective[col] == pytest.approx(0.10)

    full = _build(tiny_instance, get_scenario("all"))
    assert set(full.objective_groups) == {"peak", "charging", "selling", "degradation"}
    sell = full.variables.column_of("grid_sell_d1_e3")
    assert full.objective[sell] == pytest.approx(-0.75 * 0.20)
    level = full.variables.column_of("peak_level_l2")
    assert full.objective[level] == 20.0


def test_margin_override_changes_sale_price(tiny_instance):
    scenario = get_scenario("all").with_changes(tariff_margin_frac=1.1)
    model = _build(tiny_instance, scenario)
    sell = model.variables.column_of("grid_sell_d1_e1")
    assert model.objective[sell] == pytest.approx(-1.1 * 0.10)


def test_battery_balance_carries_trip_drain(tiny_instance):
    model = _build(tiny_instance, get_scenario("basic"))
    rows = {row.name: row for row in model.rows("battery_balance")}
    assert rows["battery_balance_b1_e2"].rhs == pytest.approx(-tiny_instance.trips[0].energy_kwh)
    assert rows["battery_balance_b1_e1"].rhs == 0.0

    row = rows["battery_balance_b1_e1"]
    terms = dict(row.terms)
    charge_min = model.variables.column_of("charge_min_d1_b1_c1_e1")
    assert terms[charge_min] == pytest.approx(-138.0 / 60.0)


def test_degradation_rows_use_full_slot_power(tiny_instance, window_scenario):
    model = _build(tiny_instance, window_scenario)
    row = next(r for r in model.rows("degradation") if r.name == "degradation_b1_e1")
    terms = dict(row.terms)
    discharge = model.variables.column_of("discharge_d1_b1_c1_e1")
    coefficient = degradation_coefficient(tiny_instance.buses[0])
    assert terms[discharge] == pytest.approx(-coefficient * 120.0 * 1.0)

    corrected = window_scenario.with_changes(literal_loss_accounting=False)
    model = _build(tiny_instance, corrected)
    row = next(r for r in model.rows("degradation") if r.name == "degradation_b1_e1")
    discharge_min = model.variables.column_of("discharge_min_d1_b1_c1_e1")
    assert dict(row.terms)[discharge_min] == pytest.approx(-coefficient * 120.0 / 0.92 / 60.0)


def test_metadata_and_read_only(tiny_instance):
    model = _build(tiny_instance, get_scenario("basic"))
    assert model.metadata["instance_hash"] == tiny_instance.fingerprint()
    assert model.metadata["events"] == 4
    assert model.metadata["charger_slots"] == 3
    with pytest.raises(StructuralError):
        model.add_constraint("extra", "", [], milp.LE, 0.0)


def test_matrix_form_shapes(tiny_instance):
    model = _build(tiny_instance, get_scenario("all"))
    form = model.to_matrix()
    assert form.A.shape == (model.num_constraints, model.num_variables)
    assert len(form.c) == model.num_variables
    assert form.integrality.sum() == sum(1 for var in model.variables if var.integer)


def test_empty_ladder_is_structural(tiny_instance):
    instance = tiny_instance.with_changes(peak_ladder=PeakLadder(levels=()))
    with pytest.raises(StructuralError):
        _build(instance, get_scenario("basic"))


def test_generated_instance_builds(generated_instance):
    model = _build(generated_instance, get_scenario("all"))
    counts = model.family_counts()
    n_events = model.metadata["events"]
    assert counts["bus_single_activity"] == 3 * n_events
    assert counts["charger_occupancy"] == 7 * n_events
    assert counts["depot_charger_count"] == 3 * n_events
    assert counts["presence_gate"] == len(model.slots)


def test_presence_gate_rows_are_implied_by_single_activity(generated_instance):
    model = _build(generated_instance, get_scenario("all"))
    covers = [
        ({col for col, _ in row.terms}, row.rhs)
        for row in model.constraints
        if row.family == "bus_single_activity"
    ]
    gates = [row for row in model.constraints if row.family == "presence_gate"]
    assert len(gates) == len(model.slots)
    for row in gates:
        columns = {col for col, _ in row.terms}
        assert any(columns <= cover and rhs <= row.rhs for cover, rhs in covers)


@pytest.mark.slow
def test_full_size_fleet_builds():
    instance = generate_instance(seed=0, n_buses=28, n_trips=232)
    model = _build(instance, get_scenario("all"))
    assert model.metadata["events"] == len(timeline_for(instance, get_scenario("all")))
    assert model.num_variables == model.metadata["variables"]
    assert model.family_counts()["bus_single_activity"] == 28 * model.metadata["events"]
