import os
import re
from pathlib import Path
from datetime import timedelta


DATA_DIR = os.getenv("MLDKIT_DATA_DIR", "data")
RESULTS_DIR = Path(DATA_DIR).joinpath("results")
SCENARIO_DIR = Path(DATA_DIR).joinpath("scenarios")

LOG_LEVEL = os.getenv("MLDKIT_LOG_LEVEL", "INFO").upper()

EPS = float(os.getenv("MLDKIT_EPS", "1e-6"))
TIME_LIMIT = os.getenv("MLDKIT_TIME_LIMIT", "150s")
MAX_ITERS = int(os.getenv("MLDKIT_MAX_ITERS", "200000"))
PARALLEL = int(os.getenv("MLDKIT_PARALLEL", "1"))

FRACTION = float(os.getenv("MLDKIT_FRACTION", "0.3"))
SCENARIO_COUNT = int(os.getenv("MLDKIT_SCENARIOS", "1000"))
SEED = int(os.getenv("MLDKIT_SEED", "0"))

TIMEDELTA_REGEX = r"((?P<hours>\d+(\.\d+)?)h)?" r"((?P<minutes>\d+(\.\d+)?)m)?" r"((?P<seconds>\d+(\.\d+)?)s?)?$"
TIMEDELTA_PATTERN = re.compile(TIMEDELTA_REGEX, re.IGNORECASE)


def parse_delta(delta: str) -> timedelta:
    """Parses a human readable duration (1h30m, 2m, 90s, 150) into a datetime.timedelta.
    Delta includes:
    * Xh hours
    * Xm minutes
    * Xs seconds (a bare number is read as seconds)
    """
    match = TIMEDELTA_PATTERN.match(delta.strip())
    if match and any(match.groupdict().values()):
        parts = {k: float(v) for k, v in match.groupdict().items() if v}
        return timedelta(**parts)
    else:
        raise ValueError(f"Unrecognized duration: {delta}")


TIME_LIMIT_SECONDS = parse_delta(TIME_LIMIT).total_seconds()


def print_config():
    print("Data directory: {}".format(DATA_DIR))
    print("Solver tolerance: {}".format(EPS))
    print("Solver time limit: {}".format(TIME_LIMIT))
    print("Solver iteration limit: {}".format(MAX_ITERS))
    print("Batch workers: {}".format(PARALLEL))
