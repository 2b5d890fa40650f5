import json
import logging
import math
import os
import re
import shutil
import subprocess
import tempfile
import time
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from app.errors import InputError, ParameterError, SolverEnvironmentError
from app.services.milp_service import EQ, GE, LE, MatrixForm

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
GAP_LIMIT = "gap_limit"
TIME_LIMIT = "time_limit"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ERROR = "error"

STATUSES_WITH_VALUES = (OPTIMAL, GAP_LIMIT, TIME_LIMIT)

SNAP_TOLERANCE = 1e-6
MPS_NAME_LENGTH = 8

ImportedModel = namedtuple("ImportedModel", ["column_names", "row_names", "matrix"])


@dataclass(frozen=True)
class SolveLimits:
    max_seconds: float = 14400.0
    rel_gap_frac: float = 0.01
    threads: int | None = None

    def __post_init__(self):
        if self.max_seconds is None or self.max_seconds <= 0:
            raise ParameterError(f"Solver time limit must be positive, got {self.max_seconds}")
        if not (0.0 <= self.rel_gap_frac < 1.0):
            raise ParameterError(f"Relative gap must lie in [0, 1), got {self.rel_gap_frac}")
        if self.threads is not None and self.threads <= 0:
            raise ParameterError(f"Thread count must be positive, got {self.threads}")

    @classmethod
    def from_config(cls, config):
        threads = config.get("SOLVER_THREADS")
        return cls(
            max_seconds=float(config.get("SOLVER_MAX_SECONDS", 14400)),
            rel_gap_frac=float(config.get("SOLVER_REL_GAP", 0.01)),
            threads=int(threads) if threads else None,
        )

    def to_dict(self):
        return {
            "max_seconds": self.max_seconds,
            "rel_gap_frac": self.rel_gap_frac,
            "threads": self.threads,
        }


@dataclass(frozen=True)
class RawSolution:
    status: str
    objective_value: float | None = None
    best_bound: float | None = None
    achieved_gap_frac: float | None = None
    values: dict = field(default_factory=dict)
    solve_seconds: float = 0.0
    solver: str = ""
    message: str = ""

    @property
    def has_values(self):
        return self.status in STATUSES_WITH_VALUES and bool(self.values)

    def value(self, name, default=0.0):
        return self.values.get(name, default)

    def to_dict(self):
        return {
            "status": self.status,
            "objective_value": self.objective_value,
            "best_bound": self.best_bound,
            "achieved_gap_frac": self.achieved_gap_frac,
            "solve_seconds": self.solve_seconds,
            "solver": self.solver,
            "message": self.message,
            "values": self.values,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            status=data["status"],
            objective_value=data.get("objective_value"),
            best_bound=data.get("best_bound"),
            achieved_gap_frac=data.get("achieved_gap_frac"),
            values={name: float(v) for name, v in (data.get("values") or {}).items()},
            solve_seconds=float(data.get("solve_seconds") or 0.0),
            solver=data.get("solver", ""),
            message=data.get("message", ""),
        )

    def __repr__(self):
        return (
            f"<RawSolution {self.status} obj={self.objective_value} "
            f"gap={self.achieved_gap_frac} {self.solve_seconds:.2f}s>"
        )


def snap_integers(model, vector):
    """Rounds integer columns lying within the snap tolerance of an integer."""
    snapped = np.array(vector, dtype=float)
    for var in model.variables:
        if var.integer:
            nearest = round(snapped[var.column])
            if abs(snapped[var.column] - nearest) <= SNAP_TOLERANCE:
                snapped[var.column] = float(nearest)
    return snapped


def relative_gap(objective, bound):
    if objective is None or bound is None:
        return None
    if not (math.isfinite(objective) and math.isfinite(bound)):
        return None
    return abs(objective - bound) / max(abs(objective), 1e-10)


# export


def _mps_number(value):
    """Shortest representation of `value` fitting the 12-character fixed MPS field."""
    for digits in range(12, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= 12:
            return text
    return f"{value:.6e}"


def mangled_names(model):
    """Fixed-format MPS names for every column and row, with the reverse mapping."""
    columns = [f"C{i + 1:07d}" for i in range(model.num_variables)]
    rows = [f"R{i + 1:07d}" for i in range(model.num_constraints)]
    mapping = {
        "columns": {short: var.name for short, var in zip(columns, model.variables)},
        "rows": {short: row.name for short, row in zip(rows, model.constraints)},
    }
    return columns, rows, mapping


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".names.json")


def _needs_mangling(model):
    names = model.variables.names + [row.name for row in model.constraints]
    return any(len(name) > MPS_NAME_LENGTH or " " in name for name in names)


def write_mps(model, path, overrides=None):
    path = Path(path)
    if _needs_mangling(model):
        columns, rows, mapping = mangled_names(model)
        sidecar_path(path).write_text(json.dumps(mapping, indent=2, sort_keys=True))
    else:
        columns = model.variables.names
        rows = [row.name for row in model.constraints]

    sense_code = {LE: "L", GE: "G", EQ: "E"}
    by_column = [[] for _ in range(model.num_variables)]
    for i, row in enumerate(model.constraints):
        for col, coef in row.terms:
            by_column[col].append((rows[i], coef))

    lines = [f"NAME          {model.metadata.get('scenario', 'MODEL')[:8]}", "ROWS", " N  COST"]
    for i, row in enumerate(model.constraints):
        lines.append(f" {sense_code[row.sense]}  {rows[i]}")

    lines.append("COLUMNS")
    in_integer_block = False
    for var in model.variables:
        if var.integer != in_integer_block:
            kind = "'INTORG'" if var.integer else "'INTEND'"
            lines.append(f"    MARKER    'MARKER'                 {kind}")
            in_integer_block = var.integer
        entries = []
        if var.column in model.objective:
            entries.append(("COST", model.objective[var.column]))
        entries += by_column[var.column]
        if not entries:
            # a column must appear at least once to be declared
            entries.append(("COST", 0.0))
        name = columns[var.column]
        for row_name, coef in entries:
            lines.append(f"    {name:<8}  {row_name:<8}  {_mps_number(coef):>12}")
    if in_integer_block:
        lines.append("    MARKER    'MARKER'                 'INTEND'")

    lines.append("RHS")
    for i, row in enumerate(model.constraints):
        if row.rhs != 0.0:
            lines.append(f"    RHS       {rows[i]:<8}  {_mps_number(row.rhs):>12}")

    lines.append("BOUNDS")
    lower, upper = model.bounds(overrides)
    for var in model.variables:
        name = columns[var.column]
        lo, hi = lower[var.column], upper[var.column]
        if lo == hi:
            lines.append(f" FX BND       {name:<8}  {_mps_number(lo):>12}")
            continue
        if var.integer and lo == 0.0 and hi == 1.0:
            lines.append(f" BV BND       {name:<8}")
            continue
        if lo != 0.0:
            if math.isinf(lo):
                lines.append(f" MI BND       {name:<8}")
            else:
                lines.append(f" LO BND       {name:<8}  {_mps_number(lo):>12}")
        if not math.isinf(hi):
            lines.append(f" UP BND       {name:<8}  {_mps_number(hi):>12}")
    lines.append("ENDATA")
    path.write_text("\n".join(lines) + "\n")
    return path


def _lp_terms(terms, names):
    pieces = []
    for col, coef in terms:
        sign = "-" if coef < 0 else "+"
        pieces.append(f"{sign} {abs(coef):.15g} {names[col]}")
    chunks = [" ".join(pieces[i : i + 6]) for i in range(0, len(pieces), 6)]
    return "\n   ".join(chunks)


def write_lp(model, path, overrides=None):
    path = Path(path)
    names = model.variables.names
    sense_text = {LE: "<=", GE: ">=", EQ: "="}
    objective = sorted(model.objective.items())
    lines = ["\\ " + json.dumps(model.metadata, sort_keys=True), "Minimize"]
    lines.append(" obj: " + (_lp_terms(objective, names) if objective else f"0 {names[0]}"))
    lines.append("Subject To")
    for row in model.constraints:
        body = _lp_terms(row.terms, names) if row.terms else f"0 {names[0]}"
        lines.append(f" {row.name}: {body} {sense_text[row.sense]} {row.rhs:.15g}")
    lines.append("Bounds")
    lower, upper = model.bounds(overrides)
    for var in model.variables:
        lo, hi = lower[var.column], upper[var.column]
        if lo == hi:
            lines.append(f" {var.name} = {lo:.15g}")
        elif math.isinf(hi):
            if lo != 0.0:
                lines.append(f" {var.name} >= {lo:.15g}")
        else:
            lines.append(f" {lo:.15g} <= {var.name} <= {hi:.15g}")
    integers = [var.name for var in model.variables if var.integer]
    if integers:
        lines.append("Generals")
        lines.extend(f" {name}" for name in integers)
    lines.append("End")
    path.write_text("\n".join(lines) + "\n")
    return path


def export_model(model, path, overrides=None):
    """
    Writes a model to disk as fixed-format MPS (`.mps`) or LP (`.lp`), chosen by suffix.
    Long MPS names are replaced by C/R serials listed in a `<file>.names.json` sidecar.
    """
    suffix = Path(path).suffix.lower()
    if suffix == ".mps":
        written = write_mps(model, path, overrides)
    elif suffix == ".lp":
        written = write_lp(model, path, overrides)
    else:
        raise ParameterError(f"Unknown model file format `{suffix}`; use .mps or .lp")
    logger.info(f"Exported {model!r} to {written}")
    return written


def read_mps(path):
    """
    Parses a fixed-format MPS file written by `write_mps` back into matrix form, restoring
    the original names from the sidecar file when one exists.
    """
    path = Path(path)
    mapping = {"columns": {}, "rows": {}}
    if sidecar_path(path).exists():
        mapping = json.loads(sidecar_path(path).read_text())

    section = None
    row_sense = {}
    row_order = []
    objective_row = None
    column_order = []
    entries = {}
    rhs = {}
    bounds = {}
    integers = set()
    in_integer_block = False

    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip() or raw.startswith("*"):
            continue
        if not raw.startswith(" "):
            section = raw.split()[0]
            continue
        fields = raw.split()
        if section == "ROWS":
            sense, name = fields
            if sense == "N":
                objective_row = name
            else:
                row_sense[name] = {"L": LE, "G": GE, "E": EQ}[sense]
                row_order.append(name)
        elif section == "COLUMNS":
            if len(fields) >= 3 and fields[1] == "'MARKER'":
                in_integer_block = fields[2] == "'INTORG'"
                continue
            column = fields[0]
            if column not in entries:
                entries[column] = {}
                column_order.append(column)
                bounds[column] = [0.0, math.inf]
                if in_integer_block:
                    integers.add(column)
            for row_name, value in zip(fields[1::2], fields[2::2]):
                entries[column][row_name] = entries[column].get(row_name, 0.0) + float(value)
        elif section == "RHS":
            for row_name, value in zip(fields[1::2], fields[2::2]):
                rhs[row_name] = float(value)
        elif section == "BOUNDS":
            kind, column = fields[0], fields[2]
            value = float(fields[3]) if len(fields) > 3 else None
            if column not in bounds:
                raise InputError(f"bound on unknown column `{column}`", path, number)
            if kind == "FX":
                bounds[column] = [value, value]
            elif kind == "BV":
                bounds[column] = [0.0, 1.0]
                integers.add(column)
            elif kind == "UP":
                bounds[column][1] = value
            elif kind == "LO":
                bounds[column][0] = value
            elif kind == "MI":
                bounds[column][0] = -math.inf
            else:
                raise InputError(f"unsupported bound type `{kind}`", path, number)

    col_index = {name: i for i, name in enumerate(column_order)}
    row_index = {name: i for i, name in enumerate(row_order)}
    c = np.zeros(len(column_order))
    rows, cols, data = [], [], []
    for column, coefs in entries.items():
        for row_name, value in coefs.items():
            if row_name == objective_row:
                c[col_index[column]] += value
            elif value != 0.0:
                rows.append(row_index[row_name])
                cols.append(col_index[column])
                data.append(value)
    A = sparse.csr_matrix((data, (rows, cols)), shape=(len(row_order), len(column_order)))
    row_lower = np.array(
        [-math.inf if row_sense[r] == LE else rhs.get(r, 0.0) for r in row_order]
    )
    row_upper = np.array([math.inf if row_sense[r] == GE else rhs.get(r, 0.0) for r in row_order])
    lower = np.array([bounds[col][0] for col in column_order])
    upper = np.array([bounds[col][1] for col in column_order])
    integrality = np.array([1 if col in integers else 0 for col in column_order])
    return ImportedModel(
        column_names=[mapping["columns"].get(col, col) for col in column_order],
        row_names=[mapping["rows"].get(row, row) for row in row_order],
        matrix=MatrixForm(c, A, row_lower, row_upper, lower, upper, integrality),
    )


# adapters


class HighsAdapter:
    """In-process HiGHS through `scipy.optimize.milp`."""

    name = "highs"

    def __init__(self):
        try:
            import scipy
            from scipy.optimize import Bounds, LinearConstraint, milp
        except ImportError as exc:
            raise SolverEnvironmentError(
                f"scipy with HiGHS is not importable: {exc}", config_key="SOLVER_BACKEND"
            )
        self._milp = milp
        self._bounds = Bounds
        self._constraint = LinearConstraint
        self.identity = f"highs (scipy {scipy.__version__})"

    def solve(self, model, limits, overrides=None):
        form = model.to_matrix(overrides)
        options = {
            "disp": False,
            "time_limit": float(limits.max_seconds),
            "mip_rel_gap": float(limits.rel_gap_frac),
        }
        if limits.threads:
            logger.debug("HiGHS thread count is managed by scipy; ignoring SOLVER_THREADS")
        constraints = None
        if form.A.shape[0]:
            constraints = self._constraint(form.A, form.row_lower, form.row_upper)
        started = time.perf_counter()
        result = self._milp(
            form.c,
            integrality=form.integrality,
            bounds=self._bounds(form.lower, form.upper),
            constraints=constraints,
            options=options,
        )
        seconds = time.perf_counter() - started
        return self._to_solution(model, result, seconds)

    def _to_solution(self, model, result, seconds):
        x = getattr(result, "x", None)
        gap = getattr(result, "mip_gap", None)
        bound = getattr(result, "mip_dual_bound", None)
        if result.status == 0:
            status = GAP_LIMIT if gap is not None and gap > 1e-9 else OPTIMAL
        elif result.status == 1:
            status = TIME_LIMIT
        elif result.status == 2:
            status = INFEASIBLE
        elif result.status == 3:
            status = UNBOUNDED
        else:
            status = ERROR
        if x is None or status not in STATUSES_WITH_VALUES:
            return RawSolution(
                status=status,
                solve_seconds=seconds,
                solver=self.identity,
                message=str(result.message),
            )
        values = snap_integers(model, x)
        objective = float(result.fun)
        if bound is None or not math.isfinite(bound):
            bound = objective
        if gap is None:
            gap = relative_gap(objective, bound)
        return RawSolution(
            status=status,
            objective_value=objective,
            best_bound=float(bound),
            achieved_gap_frac=float(gap) if gap is not None else None,
            values=dict(zip(model.variables.names, (float(v) for v in values))),
            solve_seconds=seconds,
            solver=self.identity,
            message=str(result.message),
        )


class CbcAdapter:
    """CBC run as a subprocess on an exported MPS file."""

    name = "cbc"

    def __init__(self, cbc_path=None):
        binary = cbc_path or shutil.which("cbc")
        if not binary or not (os.path.exists(binary) or shutil.which(binary)):
            raise SolverEnvironmentError(
                f"CBC binary not found ({cbc_path or 'cbc'})", config_key="CBC_PATH"
            )
        self.binary = binary
        self.identity = f"cbc ({binary})"

    def solve(self, model, limits, overrides=None):
        with tempfile.TemporaryDirectory(prefix="planner-cbc-") as workdir:
            mps = write_mps(model, Path(workdir) / "model.mps", overrides)
            solution_file = Path(workdir) / "solution.txt"
            command = [
                self.binary,
                str(mps),
                "sec",
                str(limits.max_seconds),
                "ratio",
                str(limits.rel_gap_frac),
            ]
            if limits.threads:
                command += ["threads", str(limits.threads)]
            command += ["solve", "solution", str(solution_file)]
            started = time.perf_counter()
            try:
                completed = subprocess.run(
                    command,
                    capture_output=True,
                    text=True,
                    timeout=limits.max_seconds + 60,
                )
            except FileNotFoundError as exc:
                raise SolverEnvironmentError(f"Cannot start CBC: {exc}", config_key="CBC_PATH")
            except subprocess.TimeoutExpired:
                return RawSolution(
                    status=TIME_LIMIT,
                    solve_seconds=time.perf_counter() - started,
                    solver=self.identity,
                    message="CBC did not return within its time limit",
                )
            seconds = time.perf_counter() - started
            if completed.returncode != 0 or not solution_file.exists():
                logger.warning(f"CBC exited with code {completed.returncode}")
                return RawSolution(
                    status=ERROR,
                    solve_seconds=seconds,
                    solver=self.identity,
                    message=completed.stderr.strip() or completed.stdout[-500:],
                )
            text = solution_file.read_text()
        return self._parse(model, text, completed.stdout, seconds)

    def _parse(self, model, solution_text, stdout, seconds):
        lines = solution_text.splitlines()
        header = lines[0].strip().lower() if lines else ""
        if header.startswith("optimal"):
            status = OPTIMAL
        elif "infeasible" in header:
            status = INFEASIBLE
        elif "unbounded" in header:
            status = UNBOUNDED
        elif "stopped on time" in header:
            status = TIME_LIMIT
        elif "stopped on ratio" in header or "stopped on gap" in header:
            status = GAP_LIMIT
        else:
            status = ERROR
        if status not in STATUSES_WITH_VALUES:
            return RawSolution(status=status, solve_seconds=seconds, solver=self.identity, message=header)

        _, _, mapping = mangled_names(model)
        names = mapping["columns"] if _needs_mangling(model) else None
        vector = np.zeros(model.num_variables)
        for line in lines[1:]:
            fields = line.replace("**", " ").split()
            if len(fields) < 3:
                continue
            name = names.get(fields[1], fields[1]) if names else fields[1]
            vector[model.variables.column_of(name)] = float(fields[2])
        vector = snap_integers(model, vector)

        objective = model.evaluate_objective(vector)
        match = re.search(r"Objective value:\s*([-\d.eE+]+)", stdout)
        if match:
            objective = float(match.group(1))
        bound = objective
        match = re.search(r"Lower bound:\s*([-\d.eE+]+)", stdout)
        if match:
            bound = float(match.group(1))
        gap = relative_gap(objective, bound)
        if status == OPTIMAL and gap and gap > 1e-9:
            status = GAP_LIMIT
        return RawSolution(
            status=status,
            objective_value=objective,
            best_bound=bound,
            achieved_gap_frac=gap,
            values=dict(zip(model.variables.names, (float(v) for v in vector))),
            solve_seconds=seconds,
            solver=self.identity,
            message=header,
        )


def get_adapter(backend="highs", cbc_path=None):
    if backend == "highs":
        return HighsAdapter()
    if backend == "cbc":
        return CbcAdapter(cbc_path)
    raise SolverEnvironmentError(f"Unknown solver backend `{backend}`", config_key="SOLVER_BACKEND")


def solve(model, limits=None, backend="highs", cbc_path=None, overrides=None):
    """
    Solves a model with the configured backend.

    Params
    ------
    model: MilpModel
    limits: SolveLimits
        Time limit and relative gap; the first one reached stops the search.
    backend: str
        `highs` (in-process) or `cbc` (subprocess).
    overrides: dict
        Optional {variable name: (lower, upper)} bounds applied for this solve only.

    Returns
    -------
    RawSolution
        Integer columns within 1e-6 of an integer are snapped.
    """
    limits = limits or SolveLimits()
    adapter = get_adapter(backend, cbc_path)
    solution = adapter.solve(model, limits, overrides)
    if solution.has_values:
        recomputed = model.evaluate_objective([solution.values[n] for n in model.variables.names])
        if abs(recomputed - solution.objective_value) > 1e-6 * max(1.0, abs(recomputed)):
            logger.warning(
                f"Reported objective {solution.objective_value} differs from recomputed {recomputed}"
            )
    logger.info(
        f"Solved {model.metadata.get('scenario')}: {solution.status}, "
        f"objective {solution.objective_value}, gap {solution.achieved_gap_frac}, "
        f"{solution.solve_seconds:.2f}s"
    )
    return solution


def solver_identity(backend="highs", cbc_path=None):
    try:
        return get_adapter(backend, cbc_path).identity
    except SolverEnvironmentError:
        return backend
