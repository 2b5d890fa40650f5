import logging
import os
from pathlib import Path

from dotenv import load_dotenv
from flask import Flask

load_dotenv()

BUNDLED_DATA_DIR = Path(__file__).resolve().parent / "data"


def _optional_int(value):
    return int(value) if value not in (None, "") else None


def create_app(config=None):
    app = Flask(__name__)

    # Solver configuration
    app.config["SOLVER_BACKEND"] = os.getenv("SOLVER_BACKEND", "highs")
    app.config["CBC_PATH"] = os.getenv("CBC_PATH") or None
    app.config["SOLVER_MAX_SECONDS"] = float(os.getenv("SOLVER_MAX_SECONDS", 14400))
    app.config["SOLVER_REL_GAP"] = float(os.getenv("SOLVER_REL_GAP", 0.01))
    app.config["SOLVER_THREADS"] = _optional_int(os.getenv("SOLVER_THREADS"))

    # Experiments and files
    app.config["SWEEP_WORKERS"] = int(os.getenv("SWEEP_WORKERS", 1))
    app.config["OUTPUT_DIR"] = os.getenv("OUTPUT_DIR", "runs")
    app.config["DATA_DIR"] = os.getenv("DATA_DIR") or str(BUNDLED_DATA_DIR)
    app.config["LOG_LEVEL"] = os.getenv("LOG_LEVEL", "INFO").upper()

    if config:
        app.config.update(config)

    # every planner module logs under the `app` logger
    app.logger.setLevel(getattr(logging, app.config["LOG_LEVEL"], logging.INFO))

    from .commands import register_commands

    register_commands(app)

    return app
