"""
Serialization helpers
Standardized payloads for everything the planner prints or writes as JSON
"""

from dataclasses import asdict, fields

from app.errors import ParameterError
from app.models import ScenarioConfig

SCENARIO_KEY_ALIASES = {"paper_literal_mode": "literal_loss_accounting"}

# Standard Payloads


def success_payload(data=None, message="Success"):
    """
    Create a standardized success payload.
    """
    return {
        "status": "success",
        "message": message,
        "data": data,
    }


def error_payload(message="An error occurred", errors=None, exit_code=None):
    """
    Create a standardized error payload.
    """
    payload = {
        "status": "error",
        "message": message,
    }

    if errors:
        payload["errors"] = errors
    if exit_code is not None:
        payload["exit_code"] = exit_code

    return payload


# Serialization Helpers


def serialize_scenario(scenario):
    data = asdict(scenario)
    data["discharge_windows"] = [list(window) for window in scenario.discharge_windows]
    return data


def deserialize_scenario(data):
    """
    Build a ScenarioConfig from a plain mapping, rejecting unknown keys.
    Older key names in SCENARIO_KEY_ALIASES are accepted and renamed.
    """
    data = dict(data)
    for alias, name in SCENARIO_KEY_ALIASES.items():
        if alias in data:
            if name in data and data[name] != data[alias]:
                raise ParameterError(f"Scenario sets both `{alias}` and `{name}`")
            data[name] = data.pop(alias)
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ParameterError(f"Unknown scenario fields: {', '.join(unknown)}")
    return ScenarioConfig(**data)


def serialize_validation_report(report):
    return {
        "ok": report.ok,
        "fatal": len(report.fatal),
        "issues": [
            {"subject": issue.subject, "message": issue.message, "fatal": issue.fatal}
            for issue in report
        ],
    }


def serialize_violations(violations):
    return [
        {
            "family": v.family,
            "subject": v.subject,
            "message": v.message,
            "amount": v.amount,
        }
        for v in violations
    ]


def serialize_cost_report(report):
    """
    Serialize a CostReport with euro amounts rounded to the cent for display.
    """
    data = report.to_dict()
    for key, value in data.items():
        if key.endswith("_eur") and value is not None:
            data[key] = round(value, 2)
    return data


def serialize_instance_summary(instance):
    return {
        "fingerprint": instance.fingerprint(),
        "buses": len(instance.buses),
        "depots": [
            {
                "id": depot.id,
                "name": depot.name,
                "chargers": len(depot.chargers),
                "ess_capacity_kwh": depot.ess_capacity_kwh,
                "pv_area_m2": depot.pv_area_m2,
                "overnight": depot.is_overnight_depot,
            }
            for depot in instance.depots
        ],
        "trips": len(instance.trips),
        "horizon_minutes": instance.horizon_minutes,
    }


def serialize_model_summary(model):
    """
    Serialize the size of a built model.
    """
    return {
        "instance_hash": model.metadata.get("instance_hash"),
        "scenario": model.metadata.get("scenario"),
        "events": model.metadata.get("events"),
        "variables": model.metadata.get("variables"),
        "constraints": model.metadata.get("constraints"),
        "families": dict(sorted(model.family_counts().items())),
    }
