import pytest
from hypothesis import given
from hypothesis import strategies as st

from app.errors import ParameterError
from app.models import BusSpec
from app.utils.energy_utils import (
    DegradationParams,
    consumption_rate,
    degradation_coefficient,
    sell_price,
    solar_yield,
)


def test_consumption_rate_reference_point():
    # 16.68 km/h is 4.63 m/s
    assert consumption_rate(4.63) == pytest.approx(2.2581, abs=1e-4)


def test_consumption_rate_rejects_non_positive_speed():
    with pytest.raises(ParameterError):
        consumption_rate(0.0)
    with pytest.raises(ParameterError):
        consumption_rate(None)


@given(
    st.floats(min_value=0.5, max_value=20.0),
    st.floats(min_value=0.5, max_value=20.0),
    st.floats(min_value=0.0, max_value=1.0),
)
def test_consumption_rate_is_convex(a, b, t):
    mid = t * a + (1 - t) * b
    expected = t * consumption_rate(a) + (1 - t) * consumption_rate(b)
    assert consumption_rate(mid) <= expected + 1e-9


@given(st.floats(min_value=0.01, max_value=60.0))
def test_consumption_rate_never_negative(speed):
    assert consumption_rate(speed) >= 0.0


def test_solar_yield():
    assert solar_yield(500.0, 100.0, 30) == pytest.approx(25.0)
    assert solar_yield(0.0, 1876.6, 60) == 0.0


def test_sell_price():
    assert sell_price(0.2, 0.75) == pytest.approx(0.15)
    with pytest.raises(ParameterError):
        sell_price(0.2, -0.1)


def test_degradation_coefficient_reference_values():
    bus = BusSpec(id="B1", battery_capacity_kwh=491.0)
    assert degradation_coefficient(bus) == pytest.approx(0.032118, abs=1e-6)

    cheaper = BusSpec(id="B1", battery_capacity_kwh=491.0, replacement_cost_eur_per_kwh=78.10)
    assert degradation_coefficient(cheaper) == pytest.approx(0.019525, abs=1e-6)


def test_degradation_params():
    params = DegradationParams.for_bus(BusSpec(id="B7", battery_capacity_kwh=491.0))
    assert params.bus_id == "B7"
    assert "B7" in repr(params)
    with pytest.raises(ParameterError):
        DegradationParams("B1", -1.0)


def test_degradation_coefficient_needs_throughput():
    bus = BusSpec(id="B1", battery_capacity_kwh=491.0, lifetime_throughput_kwh=0.0)
    with pytest.raises(ParameterError):
        degradation_coefficient(bus)
