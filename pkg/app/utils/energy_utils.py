import numpy as np

from app.errors import ParameterError

# quadratic fit of consumption (kWh/km) against average speed (m/s)
CONSUMPTION_COEFFICIENTS = (0.01005, -0.3113, 3.484)


def consumption_rate(avg_speed_m_per_s):
    """
    Estimates the consumption rate of a bus trip from its average speed.

    Params
    ------
    avg_speed_m_per_s: float
        Average speed over the trip in m/s.

    Returns
    -------
    float
        Consumption rate in kWh/km, never negative.
    """
    if avg_speed_m_per_s is None or avg_speed_m_per_s <= 0:
        raise ParameterError(f"Average speed must be positive, got {avg_speed_m_per_s}")
    a, b, c = CONSUMPTION_COEFFICIENTS
    rate = np.polyval([a, b, c], float(avg_speed_m_per_s))
    return float(max(rate, 0.0))


def solar_yield(irradiance_w_per_m2, pv_area_m2, slot_minutes):
    """PV energy (kWh) produced over a slot of the given length."""
    return irradiance_w_per_m2 * pv_area_m2 * (slot_minutes / 60.0) / 1000.0


def sell_price(purchase_price, margin_frac):
    if margin_frac < 0:
        raise ParameterError(f"Tariff margin must be non-negative, got {margin_frac}")
    return margin_frac * purchase_price


def degradation_coefficient(bus):
    """
    Wear cost per kWh discharged from a bus battery.

    Params
    ------
    bus: BusSpec
        Bus whose replacement cost, capacity and lifetime throughput are used.

    Returns
    -------
    float
        Cost in EUR per kWh: replacement cost x capacity / lifetime throughput.
    """
    throughput = bus.lifetime_throughput_kwh
    if not throughput or throughput <= 0:
        raise ParameterError(f"Bus `{bus.id}` has no positive lifetime throughput")
    return bus.replacement_cost_eur_per_kwh * bus.battery_capacity_kwh / throughput


class DegradationParams:
    """Per-bus wear coefficient, computed once per model build."""

    def __init__(self, bus_id, coefficient_eur_per_kwh):
        if coefficient_eur_per_kwh < 0:
            raise ParameterError(f"Negative wear coefficient for bus `{bus_id}`")
        self.bus_id = bus_id
        self.coefficient_eur_per_kwh = coefficient_eur_per_kwh

    @classmethod
    def for_bus(cls, bus):
        return cls(bus.id, degradation_coefficient(bus))

    def __repr__(self):
        return f"<DegradationParams {self.bus_id} {self.coefficient_eur_per_kwh:.6f} EUR/kWh>"
