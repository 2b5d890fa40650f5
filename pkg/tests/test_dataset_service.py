import json

import pytest

from app.errors import InputError, ParameterError
from app.services import dataset_service as ds
from app.utils.serializers import deserialize_scenario


def _write(path, text):
    path.write_text(text)
    return path


def _bundled_config():
    return ds.build_run_config()


def test_bundled_tariff_and_solar():
    config = _bundled_config()
    tariff = ds.load_tariff(config.input_path("tariff"))
    assert len(tariff.prices_eur_per_kwh) == 24
    assert tariff.prices_eur_per_kwh[18] == pytest.approx(0.1356)
    assert tariff.sell_margin_frac == 0.75

    solar = ds.load_solar(config.input_path("solar"))
    assert len(solar.irradiance_w_per_m2) == 24
    assert solar.irradiance(0) == 0.0
    assert max(solar.irradiance_w_per_m2) > 0


def test_bundled_infrastructure():
    infra = ds.load_infrastructure(_bundled_config().input_path("infrastructure"))
    assert infra.horizon_minutes == 1440
    assert infra.sell_margin_frac == 0.75

    levels = infra.peak_ladder.levels
    assert len(levels) == 10
    assert (levels[-1].power_kw, levels[-1].daily_price_eur) == (1000.0, 135.21)
    assert infra.peak_ladder.hard_cap_kw == 1000.0

    marly = infra.depots[0]
    assert marly.is_overnight_depot
    assert marly.ess_capacity_kwh == 1228.0
    assert marly.pv_area_m2 == pytest.approx(1876.6)
    assert [c.charge_power_kw for c in marly.chargers] == [150.0] * 3
    assert all(c.depot_id == 1 for c in marly.chargers)
    assert [len(d.chargers) for d in infra.depots] == [3, 2, 2]
    assert infra.depots[1].chargers[0].discharge_power_kw == 240.0


def test_bundled_inputs_parse_into_a_valid_instance():
    instance = ds.parse_inputs(_bundled_config())
    assert [bus.id for bus in instance.buses] == ["B01", "B02"]
    assert len(instance.trips) == 10
    rated = next(trip for trip in instance.trips if trip.id == "T003")
    assert rated.kwh_per_km == 2.30
    assert instance.buses[0].battery_capacity_kwh == 491.0


def test_template_fleet_ids():
    path = _bundled_config().input_path("fleet")
    assert [bus.id for bus in ds.load_fleet(path)][:3] == ["B01", "B02", "B03"]
    assert len(ds.load_fleet(path)) == 28
    assert [bus.id for bus in ds.load_fleet(path, bus_ids=["X2", "X1"])] == ["X1", "X2"]


def test_template_fleet_too_small(tmp_path):
    path = _write(tmp_path / "fleet.json", json.dumps({"fleet_size": 1, "bus_defaults": {"battery_capacity_kwh": 100}}))
    with pytest.raises(InputError) as excinfo:
        ds.load_fleet(path, bus_ids=["A", "B"])
    assert excinfo.value.column == "fleet_size"


def test_explicit_fleet_merges_defaults(tmp_path):
    data = {
        "bus_defaults": {"battery_capacity_kwh": 300.0},
        "buses": [{"id": "A"}, {"id": "B", "battery_capacity_kwh": 400.0}],
    }
    buses = ds.load_fleet(_write(tmp_path / "fleet.json", json.dumps(data)))
    assert [(b.id, b.battery_capacity_kwh) for b in buses] == [("A", 300.0), ("B", 400.0)]


def test_fleet_unknown_key_names_column(tmp_path):
    data = {"buses": [{"id": "A", "battery_capacity_kwh": 300.0, "colour": "red"}]}
    with pytest.raises(InputError) as excinfo:
        ds.load_fleet(_write(tmp_path / "fleet.json", json.dumps(data)))
    assert excinfo.value.column == "colour"


def test_malformed_json_reports_line(tmp_path):
    path = _write(tmp_path / "infrastructure.json", '{\n  "depots": [\n    {"id": 1,,}\n  ]\n}\n')
    with pytest.raises(InputError) as excinfo:
        ds.load_infrastructure(path)
    assert excinfo.value.line == 3


def test_tariff_hours_must_be_contiguous(tmp_path):
    path = _write(tmp_path / "tariff.csv", "hour,eur_per_kwh\n0,0.1\n2,0.2\n")
    with pytest.raises(InputError) as excinfo:
        ds.load_tariff(path)
    assert (excinfo.value.line, excinfo.value.column) == (3, "hour")


def test_tariff_price_must_be_positive(tmp_path):
    path = _write(tmp_path / "tariff.csv", "hour,eur_per_kwh\n0,0.1\n1,0\n")
    with pytest.raises(InputError) as excinfo:
        ds.load_tariff(path)
    assert (excinfo.value.line, excinfo.value.column) == (3, "eur_per_kwh")


def test_trips_missing_column(tmp_path):
    path = _write(tmp_path / "trips.csv", "trip_id,bus_id\nT1,B1\n")
    with pytest.raises(InputError) as excinfo:
        ds.load_trips(path)
    assert excinfo.value.line == 1
    assert excinfo.value.column == "from_depot"


def test_trips_bad_cell_reports_line_and_column(tmp_path):
    header = "trip_id,bus_id,from_depot,to_depot,dep_hhmm,arr_hhmm,distance_km,speed_kmh\n"
    path = _write(
        tmp_path / "trips.csv",
        header + "T1,B1,1,2,06:00,06:30,7.8,15.6\nT2,B1,2,1,6h40,07:10,7.8,15.6\n",
    )
    with pytest.raises(InputError) as excinfo:
        ds.load_trips(path)
    assert (excinfo.value.line, excinfo.value.column) == (3, "dep_hhmm")
    assert str(path) in str(excinfo.value)


def test_trips_need_speed_or_rate(tmp_path):
    header = "trip_id,bus_id,from_depot,to_depot,dep_hhmm,arr_hhmm,distance_km,speed_kmh,kwh_per_km\n"
    path = _write(tmp_path / "trips.csv", header + "T1,B1,1,2,06:00,06:30,7.8,,\n")
    with pytest.raises(InputError) as excinfo:
        ds.load_trips(path)
    assert (excinfo.value.line, excinfo.value.column) == (2, "speed_kmh")


def test_trips_optional_columns(tmp_path):
    header = "trip_id,bus_id,from_depot,to_depot,dep_hhmm,arr_hhmm,distance_km,kwh_per_km,speed_override\n"
    path = _write(tmp_path / "trips.csv", header + "T1,B1,1,2,06:00,06:30,7.8,2.1,yes\n")
    (trip,) = ds.load_trips(path)
    assert trip.avg_speed_kmh is None
    assert trip.kwh_per_km == 2.1
    assert trip.speed_overridden
    assert (trip.depart_minute, trip.arrive_minute) == (360, 390)


def test_battery_costs_and_projections():
    costs = ds.load_battery_costs()
    assert costs[2023] == pytest.approx(128.47)
    assert costs[2050] == pytest.approx(78.10)

    frame = ds.load_margin_projections()
    assert len(frame) == 18
    row = frame[(frame.year == 2030) & (frame.scenario == "pessimistic")].iloc[0]
    assert row.energy_margin_frac == pytest.approx(0.60)
    assert row.gc_bonus_frac == pytest.approx(0.15)


def test_run_config_defaults_and_validation(tmp_path):
    config = ds.build_run_config(scenario="all", max_seconds=None)
    assert config.max_seconds == 14400.0
    assert config.scenario_config().enable_pv_ess
    assert config.input_path("trips").name == "sample_trips.csv"
    assert config.solve_limits().rel_gap_frac == 0.01

    with pytest.raises(ParameterError):
        ds.build_run_config(scenario="nope")
    with pytest.raises(ParameterError):
        ds.build_run_config(rel_gap_frac=1.5)
    with pytest.raises(ParameterError):
        ds.build_run_config(trips=tmp_path / "missing.csv")
    with pytest.raises(ParameterError):
        ds.build_run_config(colour="red")


def test_run_config_from_app(app, tmp_path):
    config = ds.run_config_from_app(app.config, solver="highs", max_seconds=5)
    assert config.max_seconds == 5
    assert config.rel_gap_frac == 0.0
    assert str(config.output_dir) == str(tmp_path / "runs")


def test_run_config_accepts_custom_scenario():
    config = ds.build_run_config(scenario={"name": "custom", "enable_v2g": True, "discharge_windows": [[0, 60]]})
    scenario = config.scenario_config()
    assert scenario.enable_v2g
    assert scenario.discharge_windows == ((0, 60),)


def test_scenario_setting_overlays(tmp_path):
    assert ds.scenario_setting("all") == "all"
    assert ds.scenario_setting("all", tariff_margin_frac=None) == "all"

    data = ds.scenario_setting("basic", tariff_margin_frac=0.9, discharge_windows=[[0, 60]])
    scenario = ds.build_run_config(scenario=data).scenario_config()
    assert (scenario.name, scenario.tariff_margin_frac) == ("basic", 0.9)
    assert scenario.discharge_windows == ((0, 60),)
    assert not scenario.enable_v2g

    path = _write(tmp_path / "scenario.json", json.dumps({"enable_v2g": True, "paper_literal_mode": False}))
    data = ds.scenario_setting("basic", path, min_session_minutes=15.0)
    scenario = ds.build_run_config(scenario=data).scenario_config()
    assert scenario.enable_v2g
    assert not scenario.literal_loss_accounting
    assert scenario.min_session_minutes == 15.0

    with pytest.raises(InputError):
        ds.scenario_setting("basic", _write(tmp_path / "list.json", "[1, 2]"))
    with pytest.raises(InputError):
        ds.scenario_setting("basic", tmp_path / "missing.json")


def test_scenario_alias_key():
    scenario = deserialize_scenario({"name": "old", "paper_literal_mode": False})
    assert scenario.literal_loss_accounting is False
    same = deserialize_scenario({"paper_literal_mode": True, "literal_loss_accounting": True})
    assert same.literal_loss_accounting is True
    with pytest.raises(ParameterError):
        deserialize_scenario({"paper_literal_mode": False, "literal_loss_accounting": True})


def test_instance_round_trip(tmp_path, tiny_instance):
    paths = ds.write_instance(tiny_instance, tmp_path / "instance")
    assert set(paths) == set(ds.DEFAULT_FILES)
    loaded = ds.load_instance(tmp_path / "instance")
    assert loaded.fingerprint() == tiny_instance.fingerprint()


def test_generated_instance_round_trip(tmp_path, generated_instance):
    ds.write_instance(generated_instance, tmp_path / "generated")
    loaded = ds.load_instance(tmp_path / "generated")
    assert loaded.fingerprint() == generated_instance.fingerprint()


def test_load_instance_missing_directory(tmp_path):
    with pytest.raises(InputError):
        ds.load_instance(tmp_path / "nowhere")
