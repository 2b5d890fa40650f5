import os
import sys

import pytest

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

os.environ.setdefault("SOLVER_BACKEND", "highs")
os.environ.setdefault("SWEEP_WORKERS", "1")
os.environ.setdefault("LOG_LEVEL", "WARNING")

from app import create_app
from app.models import (
    BusSpec,
    ChargerSpec,
    DepotSpec,
    PeakLadder,
    PeakLevel,
    ProblemInstance,
    ScenarioConfig,
    SolarProfile,
    TariffProfile,
    Trip,
)
from app.services.instance_generator import generate_instance
from app.services.solver_service import SolveLimits


@pytest.fixture
def app(tmp_path):
    app = create_app(
        {
            "TESTING": True,
            "OUTPUT_DIR": str(tmp_path / "runs"),
            "SOLVER_MAX_SECONDS": 60.0,
            "SOLVER_REL_GAP": 0.0,
        }
    )
    with app.app_context():
        yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def exact_limits():
    return SolveLimits(max_seconds=60, rel_gap_frac=0.0)


@pytest.fixture
def make_instance():
    """
    Builds a three-hour instance with one depot, one charger and one bus serving a single
    round trip from 01:00 to 01:30. Keyword arguments replace whole components.
    """

    def _make_instance(
        buses=None,
        trips=None,
        chargers=None,
        ess_capacity_kwh=0.0,
        pv_area_m2=0.0,
        prices=(0.10, 0.20, 0.15),
        irradiance=(0.0, 500.0, 0.0),
        hard_cap_kw=200.0,
    ):
        if buses is None:
            buses = (BusSpec(id="B1", battery_capacity_kwh=100.0, home_depot_id=1),)
        if trips is None:
            trips = (
                Trip(
                    id="T1",
                    bus_id="B1",
                    depart_depot_id=1,
                    arrive_depot_id=1,
                    depart_minute=60,
                    arrive_minute=90,
                    distance_km=5.0,
                    avg_speed_kmh=10.0,
                ),
            )
        if chargers is None:
            chargers = (ChargerSpec(depot_id=1, charger_index=1),)
        depot = DepotSpec(
            id=1,
            name="Depot",
            chargers=chargers,
            ess_capacity_kwh=ess_capacity_kwh,
            pv_area_m2=pv_area_m2,
            is_overnight_depot=True,
        )
        ladder = PeakLadder(
            levels=(PeakLevel(1, 100.0, 10.0), PeakLevel(2, 200.0, 20.0)),
            hard_cap_kw=hard_cap_kw,
        )
        return ProblemInstance(
            buses=buses,
            depots=(depot,),
            trips=trips,
            tariff=TariffProfile(prices_eur_per_kwh=prices),
            solar=SolarProfile(irradiance_w_per_m2=irradiance),
            peak_ladder=ladder,
            horizon_minutes=180,
        )

    return _make_instance


@pytest.fixture
def tiny_instance(make_instance):
    return make_instance()


@pytest.fixture
def solar_instance(make_instance):
    """The tiny instance with 100 m2 of PV and a 50 kWh storage at its depot."""
    return make_instance(ess_capacity_kwh=50.0, pv_area_m2=100.0)


@pytest.fixture
def window_scenario():
    """Every feature on, with one discharge window over the first hour."""
    return ScenarioConfig(
        name="window",
        enable_peak_cost=True,
        enable_v2g=True,
        enable_degradation=True,
        enable_pv_ess=True,
        discharge_windows=((0, 60),),
    )


@pytest.fixture(scope="session")
def generated_instance():
    """Three buses on the bundled depots; deterministic."""
    return generate_instance(seed=7, n_buses=3, n_trips=12)
