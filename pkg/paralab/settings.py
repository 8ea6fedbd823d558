import logging
import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel

# Load environment variables from .env if present
load_dotenv()

logger = logging.getLogger(__name__)


class Settings(BaseModel):
    max_points: int = 4096
    nonnormal_max_points: int = 512
    condition_limit: float = 1e8
    metric_exhaustive_max: int = 512
    threads: int = 1
    log_level: str = "INFO"


_settings: Optional[Settings] = None


def setup() -> None:
    """Read the PARALAB_* environment variables into the shared settings object."""
    global _settings

    try:
        _settings = Settings(
            max_points=int(os.getenv("PARALAB_MAX_POINTS", "4096")),
            nonnormal_max_points=int(os.getenv("PARALAB_NONNORMAL_MAX_POINTS", "512")),
            condition_limit=float(os.getenv("PARALAB_CONDITION_LIMIT", "1e8")),
            metric_exhaustive_max=int(os.getenv("PARALAB_METRIC_EXHAUSTIVE_MAX", "512")),
            threads=int(os.getenv("PARALAB_THREADS", "1")),
            log_level=os.getenv("PARALAB_LOG_LEVEL", "INFO").upper(),
        )
    except ValueError as e:
        # Malformed numbers in the environment fall back to defaults
        logger.warning("ignoring malformed PARALAB_* environment value: %s", e)
        _settings = Settings()


def get_settings() -> Settings:
    if _settings is None:
        setup()
    return _settings


def reset() -> None:
    global _settings
    _settings = None
