"""
HLSIRM - Configuration

Process-level settings come from the environment (prefix ``HLSIRM_``) or a
``.env`` file. Run-level settings live in a JSON run-config document that is
validated by ``models.schemas.RunConfig``.
"""
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from models.schemas import RunConfig
from utils.errors import ConfigurationError
from utils.helpers import canonical_json, short_hash


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="HLSIRM_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )

    # Application
    APP_NAME: str = "hlsirm"
    APP_VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"

    # Runs
    DEFAULT_SEED: int = 20240101
    DEFAULT_THREADS: int = 1
    DEFAULT_OUT_DIR: str = "out"

    # Console
    PROGRESS_BAR: bool = True


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


settings = get_settings()


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Load and validate a run-config document.

    ``overrides`` holds command-line values (seed, threads, out); entries that
    are None are ignored so the document value (or default) wins.
    """
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"Config file is not valid JSON: {exc}", details={"path": str(path)})
        if not isinstance(document, dict):
            raise ConfigurationError("Config document must be a JSON object", details={"path": str(path)})

    document.setdefault("seed", settings.DEFAULT_SEED)
    document.setdefault("threads", settings.DEFAULT_THREADS)
    document.setdefault("out", settings.DEFAULT_OUT_DIR)
    for key, value in (overrides or {}).items():
        if value is not None:
            document[key] = value

    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        errors = [
            {"field": " -> ".join(str(loc) for loc in err["loc"]), "message": err["msg"]}
            for err in exc.errors()
        ]
        raise ConfigurationError("Invalid run config", details={"errors": errors})


def config_fingerprint(config: RunConfig) -> str:
    """Stable fingerprint of a validated run config."""
    return short_hash(canonical_json(config.model_dump(mode="json")))
