import hashlib
import logging
import os
import time
from datetime import datetime, timezone
from enum import Enum, auto
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
from dotenv import dotenv_values, load_dotenv

load_dotenv()

LOGGER_NAME = "cscrl"


def configure_logging():
    """Configure logging with appropriate formatting and handlers based on environment.

    Returns:
        logging.Logger: Configured logger instance for the application.
    """
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()

    VALID_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
    if log_level not in VALID_LOG_LEVELS:
        log_level = "INFO"

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, log_level))

    # Avoid duplicate handlers if already configured
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


logger = configure_logging()


def get_formatted_timestamp() -> str:
    """Current time as ISO 8601 with UTC timezone."""
    return datetime.now(timezone.utc).isoformat()


def log_event(
    event_type: str, data: Optional[Dict[str, Any]] = None, state: Optional["RunState"] = None
) -> str:
    """Log a run event with structured data.

    Args:
        event_type: The type of event being logged (e.g. 'PRETRAIN_STEP').
        data: Event-specific key/value pairs.
        state: Optional run state to stamp on the line.

    Returns:
        The formatted message, for callers that also persist it.
    """
    log_message = f"event={event_type}, timestamp={get_formatted_timestamp()}"
    if state is not None:
        log_message += f", state={state.name}"

    data_str = ", ".join(f"{k}='{v}'" for k, v in (data or {}).items())
    if data_str:
        log_message += f", {data_str}"

    logger.info(log_message)
    return log_message


class RunState(Enum):
    """Lifecycle of a training or analysis run."""

    IDLE = auto()
    RUNNING = auto()
    COMPLETED = auto()
    FAILED = auto()


class RunSession:
    """Tracks state transitions and wall-clock timing of one run."""

    def __init__(self, name: str):
        self.name = name
        self.start_time: Optional[float] = None
        self.end_time: Optional[float] = None
        self._state = RunState.IDLE
        self._metadata: Dict[str, Any] = {}

    @property
    def state(self) -> RunState:
        return self._state

    @property
    def metadata(self) -> Dict[str, Any]:
        """Get a copy of the run metadata."""
        return self._metadata.copy()

    def set_state(self, new_state: RunState, **metadata) -> None:
        """Transition to a new state, storing optional metadata.

        Repeated transitions to the current state are ignored.
        """
        if self._state == new_state:
            return

        old_state = self._state
        self._state = new_state
        if metadata:
            self._metadata.update(metadata)

        if new_state == RunState.RUNNING:
            self.start_time = time.time()
            self.end_time = None
        elif new_state in (RunState.COMPLETED, RunState.FAILED) and self.start_time:
            self.end_time = time.time()

        logger.info(
            f"Run state changed ({self.name}): {old_state.name} -> {new_state.name}"
            + (f" | {metadata}" if metadata else "")
        )

    def get_duration(self) -> Optional[float]:
        """Run duration in seconds, or None if the run has not finished."""
        if self.start_time is not None and self.end_time is not None:
            return self.end_time - self.start_time
        return None

    def get_duration_formatted(self) -> str:
        """Human-readable duration such as "2 minutes 5 seconds" or "unknown"."""
        duration = self.get_duration()
        if duration is None:
            return "unknown"
        if duration < 60:
            return f"{duration:.1f} seconds"

        total_seconds = int(duration)
        hours = total_seconds // 3600
        minutes = (total_seconds % 3600) // 60
        seconds = total_seconds % 60

        parts = []
        if hours > 0:
            parts.append(f"{hours} hour{'s' if hours != 1 else ''}")
        if minutes > 0:
            parts.append(f"{minutes} minute{'s' if minutes != 1 else ''}")
        if seconds > 0:
            parts.append(f"{seconds} second{'s' if seconds != 1 else ''}")
        return " ".join(parts)


def configure_threads() -> int:
    """Apply the CSCRL_THREADS cap to torch. 0 or unset keeps torch's default."""
    raw = os.getenv("CSCRL_THREADS", "0").strip() or "0"
    try:
        threads = int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer CSCRL_THREADS={raw!r}")
        threads = 0
    if threads > 0:
        torch.set_num_threads(threads)
    return torch.get_num_threads()


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat `key = value` config file. Dashes in keys become underscores."""
    values = dotenv_values(path)
    return {
        key.strip().replace("-", "_"): (value or "").strip()
        for key, value in values.items()
    }


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
