"""
src/rcwbc/config.py
Runtime settings and logging setup.
Features:
- Loads settings from the environment, then ./.env, then ~/.env.
- Maps RCWBC_LOG_LEVEL onto loguru levels.
- Rotating file sink next to the stderr sink.
"""
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv
from loguru import logger

LOG_LEVELS = {
    "error": "ERROR",
    "warn": "WARNING",
    "warning": "WARNING",
    "info": "INFO",
    "debug": "DEBUG",
}


@dataclass(frozen=True)
class Settings:
    log_level: str = "INFO"
    log_file: str | None = "rcwbc.log"
    workers: int = 1


def load_settings() -> Settings:
    """
    Priority: Env Var > Local .env > Home Dir .env
    load_dotenv never overrides variables that are already set.
    """
    load_dotenv(Path.cwd() / ".env")
    home_env = Path.home() / ".env"
    if home_env.exists():
        load_dotenv(home_env)

    raw_level = os.getenv("RCWBC_LOG_LEVEL", "info").strip().lower()
    level = LOG_LEVELS.get(raw_level)
    if level is None:
        logger.warning(f"Unknown RCWBC_LOG_LEVEL '{raw_level}', using info")
        level = "INFO"

    log_file = os.getenv("RCWBC_LOG_FILE", "rcwbc.log").strip() or None

    try:
        workers = max(1, int(os.getenv("RCWBC_WORKERS", "1")))
    except ValueError:
        logger.warning("RCWBC_WORKERS is not an integer, using 1")
        workers = 1

    return Settings(log_level=level, log_file=log_file, workers=workers)


def configure_logging(settings: Settings):
    logger.remove()
    logger.add(sys.stderr, level=settings.log_level)
    if settings.log_file:
        logger.add(settings.log_file, rotation="1 MB", level="DEBUG")
    logger.debug(f"Logging configured at {settings.log_level}")
