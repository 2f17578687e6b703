import os
import json
import logging

from typing import Any, Optional
from pathlib import Path
from datetime import datetime

from config import LOG_LEVEL

logging.basicConfig(level=LOG_LEVEL, format="[%(asctime)s] [%(levelname)s] %(message)s")


logger = logging.getLogger(__name__)


def get_timestamp_str() -> str:
    """Get current timestamp as string."""
    return datetime.now().strftime("%Y-%m-%d-%H-%M-%S")


def ensure_directory(directory: str) -> None:
    """Ensure directory exists."""
    try:
        Path(directory).mkdir(parents=True, exist_ok=True)
    except Exception as e:
        logger.error(f"Error creating directory: {str(e)}", exc_info=True)


def default_output(directory: Path, prefix: str, suffix: str) -> str:
    """Timestamped output path under directory, created on demand."""
    ensure_directory(str(directory))
    return str(directory.joinpath(f"{prefix}-{get_timestamp_str()}{suffix}"))


def write_json(filename: str, payload: Any) -> None:
    """Write payload as JSON, creating the parent directory if needed.

    Keys keep insertion order so identical payloads give identical bytes.
    """
    parent = os.path.dirname(filename)
    if parent:
        ensure_directory(parent)
    with open(filename, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    logger.info(f"Saved {filename}")


def read_json(filename: str) -> Optional[Any]:
    with open(filename, "r") as f:
        return json.load(f)


def cpu_count() -> int:
    count = os.cpu_count()
    if count is None or count <= 2:
        return 1
    return count - 1
