import json
import logging
import re
from collections import namedtuple
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.errors import InputError, ParameterError
from app.models import (
    MINUTES_PER_DAY,
    SCENARIO_PRESETS,
    BusSpec,
    ChargerSpec,
    DepotSpec,
    PeakLadder,
    PeakLevel,
    ProblemInstance,
    SolarProfile,
    TariffProfile,
    Trip,
    get_scenario,
)
from app.services.solver_service import RawSolution, SolveLimits
from app.utils.serializers import (
    SCENARIO_KEY_ALIASES,
    deserialize_scenario,
    serialize_cost_report,
    serialize_scenario,
)
from app.utils.validators import format_hhmm, parse_hhmm

logger = logging.getLogger(__name__)

BUNDLED_DATA_DIR = Path(__file__).resolve().parent.parent / "data"

DEFAULT_FILES = {
    "trips": "sample_trips.csv",
    "tariff": "tariff.csv",
    "solar": "solar.csv",
    "fleet": "fleet.json",
    "infrastructure": "infrastructure.json",
}
BATTERY_COSTS_FILE = "battery_costs.csv"
MARGIN_PROJECTIONS_FILE = "margin_projections.csv"

TRIP_COLUMNS = ("trip_id", "bus_id", "from_depot", "to_depot", "dep_hhmm", "arr_hhmm", "distance_km")
TRIP_OPTIONAL_COLUMNS = ("speed_kmh", "kwh_per_km", "speed_override")

RUN_FILES = (
    "timeline.csv",
    "schedule.csv",
    "depot_flows.csv",
    "costs.json",
    "flows.json",
    "solution.json",
    "manifest.json",
)
INSTANCE_DIR = "instance"

TRUE_WORDS = {"1", "true", "yes", "y"}
FALSE_WORDS = {"", "0", "false", "no", "n"}

Infrastructure = namedtuple(
    "Infrastructure", ["depots", "peak_ladder", "sell_margin_frac", "horizon_minutes"]
)


# CSV cells


def _read_csv(path, required, optional=()):
    """
    Reads a CSV as strings. Row `i` of the frame sits on line `i + 2` of the file.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except FileNotFoundError:
        raise InputError("file not found", path=path)
    except pd.errors.EmptyDataError:
        raise InputError("file is empty", path=path, line=1)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise InputError(f"malformed CSV ({e})", path=path, line=int(match.group(1)) if match else None)

    frame.columns = [str(c).strip() for c in frame.columns]
    for column in required:
        if column not in frame.columns:
            raise InputError("missing required column", path=path, line=1, column=column)
    unknown = [c for c in frame.columns if c not in required and c not in optional]
    if unknown:
        logger.warning(f"{path.name}: ignoring unknown columns {', '.join(unknown)}")
    return frame


def _rows(frame):
    """(line number, row) pairs, skipping blank lines."""
    for position, (_, row) in enumerate(frame.iterrows()):
        if all(str(value).strip() == "" for value in row.values):
            continue
        yield position + 2, row


def _text(row, column):
    if column not in row.index:
        return ""
    return str(row[column]).strip()


def _float_cell(path, line, row, column, required=True, minimum=None, strict=False):
    text = _text(row, column)
    if text == "":
        if required:
            raise InputError("value is required", path=path, line=line, column=column)
        return None
    try:
        value = float(text)
    except ValueError:
        raise InputError(f"`{text}` is not a number", path=path, line=line, column=column)
    if minimum is not None and (value < minimum or (strict and value == minimum)):
        bound = ">" if strict else ">="
        raise InputError(f"{value} must be {bound} {minimum}", path=path, line=line, column=column)
    return value


def _int_cell(path, line, row, column):
    text = _text(row, column)
    try:
        return int(text)
    except ValueError:
        raise InputError(f"`{text}` is not an integer", path=path, line=line, column=column)


def _hhmm_cell(path, line, row, column):
    text = _text(row, column)
    minutes = parse_hhmm(text)
    if minutes is None:
        raise InputError(f"`{text}` is not an HH:MM time", path=path, line=line, column=column)
    return minutes


def _bool_cell(path, line, row, column):
    text = _text(row, column).lower()
    if text in TRUE_WORDS:
        return True
    if text in FALSE_WORDS:
        return False
    raise InputError(f"`{text}` is not a yes/no flag", path=path, line=line, column=column)


# Profiles


def _load_hourly(path, value_column, minimum, strict):
    frame = _read_csv(path, ("hour", value_column))
    values = []
    for line, row in _rows(frame):
        hour = _int_cell(path, line, row, "hour")
        if hour != len(values):
            raise InputError(
                f"expected hour {len(values)}, found {hour}", path=path, line=line, column="hour"
            )
        values.append(_float_cell(path, line, row, value_column, minimum=minimum, strict=strict))
    if not values:
        raise InputError("no hourly rows", path=path, line=2)
    return values


def load_tariff(path, sell_margin_frac=0.75):
    """Hourly purchase prices from a (hour, eur_per_kwh) CSV."""
    prices = _load_hourly(path, "eur_per_kwh", minimum=0.0, strict=True)
    return TariffProfile(prices_eur_per_kwh=prices, sell_margin_frac=sell_margin_frac)


def load_solar(path):
    """Hourly irradiance from a (hour, w_per_m2) CSV."""
    return SolarProfile(irradiance_w_per_m2=_load_hourly(path, "w_per_m2", minimum=0.0, strict=False))


# Structured config files


def _read_json(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise InputError("file not found", path=path)
    except json.JSONDecodeError as e:
        raise InputError(e.msg, path=path, line=e.lineno, column=str(e.colno))


def _build(cls, data, path, where, skip=()):
    """Instantiates a dataclass from a mapping, naming the offending key on failure."""
    known = {f.name for f in fields(cls) if f.init} - set(skip)
    unknown = sorted(set(data) - known)
    if unknown:
        raise InputError(f"{where}: unknown key", path=path, column=unknown[0])
    try:
        return cls(**data)
    except TypeError as e:
        raise InputError(f"{where}: {e}", path=path)


def _require(data, key, path, where):
    if key not in data:
        raise InputError(f"{where}: missing key", path=path, column=key)
    return data[key]


def load_bus_defaults(path=None):
    """The `bus_defaults` block of a fleet file (bundled fleet by default)."""
    path = Path(path) if path else BUNDLED_DATA_DIR / DEFAULT_FILES["fleet"]
    defaults = _read_json(path).get("bus_defaults", {})
    _build(BusSpec, {**defaults, "id": "_"}, path, "bus_defaults")
    return dict(defaults)


def load_fleet(path, bus_ids=None):
    """
    Reads the fleet file.

    The file either lists every bus under `buses` (each entry merged over `bus_defaults`), or
    is a template with `fleet_size` and `bus_defaults`; a template yields one bus per id in
    `bus_ids` (or `B01..Bnn` when no ids are given).

    Raises
    ------
    InputError
        Malformed JSON, unknown keys, or more referenced buses than the template fleet holds.
    """
    data = _read_json(path)
    defaults = data.get("bus_defaults", {})
    if "buses" in data:
        buses = []
        for position, entry in enumerate(data["buses"]):
            merged = {**defaults, **entry}
            _require(merged, "id", path, f"buses[{position}]")
            buses.append(_build(BusSpec, merged, path, f"buses[{position}]"))
        return tuple(buses)

    size = int(_require(data, "fleet_size", path, "fleet"))
    if bus_ids is None:
        width = max(2, len(str(size)))
        bus_ids = [f"B{n:0{width}d}" for n in range(1, size + 1)]
    bus_ids = sorted(bus_ids)
    if len(bus_ids) > size:
        raise InputError(
            f"trips reference {len(bus_ids)} buses but the fleet holds {size}",
            path=path,
            column="fleet_size",
        )
    return tuple(_build(BusSpec, {**defaults, "id": bus_id}, path, f"bus {bus_id}") for bus_id in bus_ids)


def load_infrastructure(path):
    """Depots with their chargers, ESS and PV, the peak ladder, sell margin and horizon."""
    data = _read_json(path)
    ladder_data = _require(data, "peak_ladder", path, "infrastructure")
    levels = tuple(
        _build(PeakLevel, level, path, f"peak_ladder.levels[{n}]")
        for n, level in enumerate(_require(ladder_data, "levels", path, "peak_ladder"))
    )
    ladder = PeakLadder(levels=levels, hard_cap_kw=float(ladder_data.get("hard_cap_kw", 1000.0)))

    depots = []
    for position, entry in enumerate(_require(data, "depots", path, "infrastructure")):
        where = f"depots[{position}]"
        depot_id = int(_require(entry, "id", path, where))
        charger_defaults = entry.get("charger_defaults", {})
        chargers = tuple(
            _build(
                ChargerSpec,
                {**charger_defaults, **charger, "depot_id": depot_id},
                path,
                f"{where}.chargers[{n}]",
            )
            for n, charger in enumerate(entry.get("chargers", []))
        )
        depot_fields = {
            k: v for k, v in entry.items() if k not in ("chargers", "charger_defaults")
        }
        depots.append(_build(DepotSpec, {**depot_fields, "chargers": chargers}, path, where))

    return Infrastructure(
        depots=tuple(depots),
        peak_ladder=ladder,
        sell_margin_frac=float(data.get("sell_margin_frac", 0.75)),
        horizon_minutes=int(data.get("horizon_minutes", MINUTES_PER_DAY)),
    )


# Trips


def load_trips(path):
    """
    Reads a trips CSV. Every row needs a speed or a consumption rate; a missing rate is
    derived from the speed.
    """
    frame = _read_csv(path, TRIP_COLUMNS, TRIP_OPTIONAL_COLUMNS)
    trips = []
    for line, row in _rows(frame):
        for column in ("trip_id", "bus_id"):
            if not _text(row, column):
                raise InputError("value is required", path=path, line=line, column=column)
        speed = _float_cell(path, line, row, "speed_kmh", required=False, minimum=0.0, strict=True)
        rate = _float_cell(path, line, row, "kwh_per_km", required=False, minimum=0.0)
        if speed is None and rate is None:
            raise InputError(
                "either speed_kmh or kwh_per_km is required", path=path, line=line, column="speed_kmh"
            )
        trips.append(
            Trip(
                id=_text(row, "trip_id"),
                bus_id=_text(row, "bus_id"),
                depart_depot_id=_int_cell(path, line, row, "from_depot"),
                arrive_depot_id=_int_cell(path, line, row, "to_depot"),
                depart_minute=_hhmm_cell(path, line, row, "dep_hhmm"),
                arrive_minute=_hhmm_cell(path, line, row, "arr_hhmm"),
                distance_km=_float_cell(path, line, row, "distance_km", minimum=0.0),
                avg_speed_kmh=speed,
                consumption_rate_kwh_per_km=rate,
                speed_overridden=_bool_cell(path, line, row, "speed_override"),
            )
        )
    return tuple(trips)


# Experiment tables


def load_battery_costs(path=None):
    """Projected battery replacement cost per year as a {year: eur_per_kwh} mapping."""
    path = Path(path) if path else BUNDLED_DATA_DIR / BATTERY_COSTS_FILE
    frame = _read_csv(path, ("year", "eur_per_kwh"))
    costs = {}
    for line, row in _rows(frame):
        year = _int_cell(path, line, row, "year")
        if year in costs:
            raise InputError(f"duplicate year {year}", path=path, line=line, column="year")
        costs[year] = _float_cell(path, line, row, "eur_per_kwh", minimum=0.0)
    return costs


def load_margin_projections(path=None):
    """
    Sell-margin projections as a frame with one row per (year, scenario), splitting the
    energy-only margin from the green-certificate bonus.
    """
    path = Path(path) if path else BUNDLED_DATA_DIR / MARGIN_PROJECTIONS_FILE
    columns = ("year", "scenario", "energy_margin_frac", "gc_bonus_frac")
    frame = _read_csv(path, columns)
    records = []
    for line, row in _rows(frame):
        scenario = _text(row, "scenario")
        if not scenario:
            raise InputError("value is required", path=path, line=line, column="scenario")
        records.append(
            {
                "year": _int_cell(path, line, row, "year"),
                "scenario": scenario,
                "energy_margin_frac": _float_cell(path, line, row, "energy_margin_frac", minimum=0.0),
                "gc_bonus_frac": _float_cell(path, line, row, "gc_bonus_frac", minimum=0.0),
            }
        )
    return pd.DataFrame.from_records(records, columns=list(columns))


# Run configuration


class RunConfig(BaseModel):
    """
    Everything one pipeline run needs: input files, scenario, solver limits and output place.
    Input paths left unset fall back to the files in `data_dir` (the bundled data by default).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    # ── Inputs ─────────────────────────────────────────────
    trips: Path | None = None
    tariff: Path | None = None
    solar: Path | None = None
    fleet: Path | None = None
    infrastructure: Path | None = None
    data_dir: Path | None = None

    # ── Scenario ───────────────────────────────────────────
    scenario: str | dict = "basic"

    # ── Solver ─────────────────────────────────────────────
    max_seconds: float = Field(14400.0, gt=0)
    rel_gap_frac: float = Field(0.01, ge=0, lt=1)
    threads: int | None = Field(None, gt=0)
    solver: Literal["highs", "cbc"] = "highs"
    cbc_path: str | None = None

    # ── Outputs ────────────────────────────────────────────
    output_dir: Path = Path("runs")

    @field_validator("trips", "tariff", "solar", "fleet", "infrastructure")
    @classmethod
    def _file_exists(cls, path):
        if path is not None and not path.is_file():
            raise ValueError(f"file not found: {path}")
        return path

    @field_validator("data_dir")
    @classmethod
    def _dir_exists(cls, path):
        if path is not None and not path.is_dir():
            raise ValueError(f"directory not found: {path}")
        return path

    @field_validator("scenario")
    @classmethod
    def _known_scenario(cls, value):
        if isinstance(value, str) and value not in SCENARIO_PRESETS:
            known = ", ".join(SCENARIO_PRESETS)
            raise ValueError(f"unknown scenario `{value}`; expected one of: {known}")
        return value

    def input_path(self, name):
        explicit = getattr(self, name)
        if explicit is not None:
            return explicit
        path = (self.data_dir or BUNDLED_DATA_DIR) / DEFAULT_FILES[name]
        if not path.is_file():
            raise InputError(f"no {name} file given and no default found", path=path)
        return path

    def scenario_config(self):
        if isinstance(self.scenario, str):
            return get_scenario(self.scenario)
        return deserialize_scenario(self.scenario)

    def solve_limits(self):
        return SolveLimits(
            max_seconds=self.max_seconds, rel_gap_frac=self.rel_gap_frac, threads=self.threads
        )


def build_run_config(**values):
    """
    RunConfig from keyword values, dropping unset ones.

    Raises
    ------
    ParameterError
        The values do not validate.
    """
    try:
        return RunConfig(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ParameterError(f"Invalid run configuration: {problems}")


def run_config_from_app(config, **values):
    """RunConfig seeded from the Flask app config (DATA_DIR, OUTPUT_DIR, SOLVER_*)."""
    defaults = {
        "data_dir": config.get("DATA_DIR"),
        "output_dir": config.get("OUTPUT_DIR"),
        "solver": config.get("SOLVER_BACKEND"),
        "cbc_path": config.get("CBC_PATH"),
        "max_seconds": config.get("SOLVER_MAX_SECONDS"),
        "rel_gap_frac": config.get("SOLVER_REL_GAP"),
        "threads": config.get("SOLVER_THREADS"),
    }
    defaults.update({k: v for k, v in values.items() if v is not None})
    return build_run_config(**defaults)


def scenario_setting(preset, scenario_file=None, **overrides):
    """
    Scenario value for a RunConfig: the preset name itself, or a mapping once a scenario file
    or any override is given. File keys replace the preset's and overrides replace both.

    Raises
    ------
    InputError
        The scenario file is missing, malformed or not a JSON object.
    ParameterError
        Unknown preset.
    """
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if scenario_file is None and not overrides:
        return preset
    data = serialize_scenario(get_scenario(preset))
    if scenario_file is not None:
        loaded = _read_json(scenario_file)
        if not isinstance(loaded, dict):
            raise InputError("expected a JSON object of scenario fields", path=Path(scenario_file))
        data.update({SCENARIO_KEY_ALIASES.get(k, k): v for k, v in loaded.items()})
    data.update(overrides)
    logger.debug(f"Scenario {data['name']} from `{preset}` with {sorted(overrides)}")
    return data


def parse_inputs(config):
    """
    Loads every input file named by a RunConfig into one ProblemInstance.

    Raises
    ------
    InputError
        A file is missing or violates its schema; the error names file, line and column.
    """
    trips = load_trips(config.input_path("trips"))
    infrastructure = load_infrastructure(config.input_path("infrastructure"))
    bus_ids = sorted({trip.bus_id for trip in trips})
    buses = load_fleet(config.input_path("fleet"), bus_ids=bus_ids or None)
    tariff = load_tariff(config.input_path("tariff"), sell_margin_frac=infrastructure.sell_margin_frac)
    solar = load_solar(config.input_path("solar"))

    instance = ProblemInstance(
        buses=buses,
        depots=infrastructure.depots,
        trips=trips,
        tariff=tariff,
        solar=solar,
        peak_ladder=infrastructure.peak_ladder,
        horizon_minutes=infrastructure.horizon_minutes,
    )
    logger.info(f"Loaded {instance!r} ({instance.fingerprint()})")
    return instance


# Instance round trip


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=str)
        handle.write("\n")


def trips_frame(trips):
    rows = [
        {
            "trip_id": trip.id,
            "bus_id": trip.bus_id,
            "from_depot": trip.depart_depot_id,
            "to_depot": trip.arrive_depot_id,
            "dep_hhmm": format_hhmm(trip.depart_minute),
            "arr_hhmm": format_hhmm(trip.arrive_minute),
            "distance_km": trip.distance_km,
            "speed_kmh": trip.avg_speed_kmh,
            "kwh_per_km": trip.consumption_rate_kwh_per_km,
            "speed_override": 1 if trip.speed_overridden else 0,
        }
        for trip in trips
    ]
    return pd.DataFrame(rows, columns=list(TRIP_COLUMNS + TRIP_OPTIONAL_COLUMNS))


def write_instance(instance, directory):
    """
    Writes an instance as the five input files `parse_inputs` reads back.
    Returns the {name: path} mapping of the written files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / filename for name, filename in DEFAULT_FILES.items()}
    paths["trips"] = directory / "trips.csv"

    trips_frame(instance.trips).to_csv(paths["trips"], index=False)
    pd.DataFrame(
        {
            "hour": range(len(instance.tariff.prices_eur_per_kwh)),
            "eur_per_kwh": instance.tariff.prices_eur_per_kwh,
        }
    ).to_csv(paths["tariff"], index=False)
    pd.DataFrame(
        {
            "hour": range(len(instance.solar.irradiance_w_per_m2)),
            "w_per_m2": instance.solar.irradiance_w_per_m2,
        }
    ).to_csv(paths["solar"], index=False)

    _write_json(paths["fleet"], {"buses": [asdict(bus) for bus in instance.buses]})

    depots = []
    for depot in instance.depots:
        entry = asdict(depot)
        entry["chargers"] = [
            {k: v for k, v in asdict(charger).items() if k != "depot_id"} for charger in depot.chargers
        ]
        depots.append(entry)
    _write_json(
        paths["infrastructure"],
        {
            "horizon_minutes": instance.horizon_minutes,
            "sell_margin_frac": instance.tariff.sell_margin_frac,
            "peak_ladder": {
                "hard_cap_kw": instance.peak_ladder.hard_cap_kw,
                "levels": [asdict(level) for level in instance.peak_ladder.levels],
            },
            "depots": depots,
        },
    )
    logger.debug(f"Wrote instance {instance.fingerprint()} to {directory}")
    return paths


def load_instance(directory):
    """Reads back an instance written by `write_instance`."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError("instance directory not found", path=directory)
    config = build_run_config(
        trips=directory / "trips.csv",
        tariff=directory / DEFAULT_FILES["tariff"],
        solar=directory / DEFAULT_FILES["solar"],
        fleet=directory / DEFAULT_FILES["fleet"],
        infrastructure=directory / DEFAULT_FILES["infrastructure"],
    )
    return parse_inputs(config)


# Run directory


def make_manifest(instance, scenario, limits, solver, inputs=None, status=None):
    return {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "instance_hash": instance.fingerprint(),
        "scenario": serialize_scenario(scenario),
        "limits": limits.to_dict(),
        "solver": solver,
        "status": status,
        "inputs": {name: str(path) for name, path in (inputs or {}).items()},
        "instance_dir": INSTANCE_DIR,
        "files": list(RUN_FILES),
    }


def write_run(run_dir, instance, timeline, raw, manifest, schedule=None, costs=None, flows=None):
    """
    Writes one run directory: the instance copy, timeline, schedule, depot flows, cost and
    flow reports, raw solution and manifest. Schedule files are skipped when the solve
    produced no values.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_instance(instance, run_dir / INSTANCE_DIR)
    timeline.to_frame().to_csv(run_dir / "timeline.csv", index=False)
    if schedule is not None:
        schedule.to_frame().to_csv(run_dir / "schedule.csv", index=False)
        schedule.depot_frame().to_csv(run_dir / "depot_flows.csv", index=False)
    if costs is not None:
        _write_json(run_dir / "costs.json", serialize_cost_report(costs))
    if flows is not None:
        _write_json(run_dir / "flows.json", flows.to_dict())
    _write_json(run_dir / "solution.json", raw.to_dict())
    _write_json(run_dir / "manifest.json", manifest)
    logger.info(f"Wrote run outputs to {run_dir}")
    return run_dir


def load_run(run_dir):
    """
    Reads back what `report` needs from a run directory.

    Returns
    -------
    (instance, scenario, raw, manifest)

    Raises
    ------
    InputError
        A file is missing, or the stored instance no longer matches the manifest's hash.
    """
    run_dir = Path(run_dir)
    manifest = _read_json(run_dir / "manifest.json")
    raw = RawSolution.from_dict(_read_json(run_dir / "solution.json"))
    instance = load_instance(run_dir / manifest.get("instance_dir", INSTANCE_DIR))
    if instance.fingerprint() != manifest.get("instance_hash"):
        raise InputError(
            "stored instance does not match the manifest hash",
            path=run_dir / "manifest.json",
            column="instance_hash",
        )
    try:
        scenario = deserialize_scenario(manifest["scenario"])
    except KeyError:
        raise InputError("missing key", path=run_dir / "manifest.json", column="scenario")
    return instance, scenario, raw, manifest
