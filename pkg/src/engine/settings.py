"""
Runtime settings read from the environment (optionally via a `.env` file).
"""
import logging
import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

# --- Environment Variables ---
WORKERS_ENV = "SPARSEFLASH_WORKERS"
LOG_LEVEL_ENV = "SPARSEFLASH_LOG_LEVEL"


class Settings(BaseModel):
    workers: int = Field(default=1, ge=1)
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _upper(cls, value: str) -> str:
        level = value.upper()
        if level not in logging.getLevelNamesMapping():
            raise ValueError(f"unknown log level {value!r}")
        return level


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Loads `.env` (if present) and builds the settings once per process."""
    load_dotenv()
    return Settings(
        workers=int(os.getenv(WORKERS_ENV, "1")),
        log_level=os.getenv(LOG_LEVEL_ENV, "INFO"),
    )


def reset_settings() -> None:
    get_settings.cache_clear()
