import os
from pathlib import Path
from dotenv import load_dotenv

from swirs.errors import ConfigError

# Load environment variables
load_dotenv()

_TRUE_VALUES = {"1", "true", "yes", "on"}


def _env_int(name: str, default: str) -> int:
    raw = os.getenv(name, default)
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}", field=name)


class Settings:
    """Process settings for the SWIRS toolkit, read from the environment."""

    # Worker pool
    WORKERS: int = 4

    # Logging
    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    FILE_LOGGING: bool = True

    # Output
    OUTPUT_DIR: str = "output"

    def __init__(self):
        """Read settings from the environment at construction time."""
        self.WORKERS = _env_int("SWIRS_WORKERS", "4")
        if self.WORKERS < 1:
            raise ConfigError("SWIRS_WORKERS must be at least 1", field="SWIRS_WORKERS")
        self.LOG_DIR = os.getenv("SWIRS_LOG_DIR", "logs")
        self.LOG_LEVEL = os.getenv("SWIRS_LOG_LEVEL", "INFO").upper()
        self.FILE_LOGGING = os.getenv("SWIRS_FILE_LOGGING", "true").strip().lower() in _TRUE_VALUES
        self.OUTPUT_DIR = os.getenv("SWIRS_OUTPUT_DIR", "output")

    def ensure_directories(self):
        """Create the log and output directories if they don't exist."""
        if self.FILE_LOGGING:
            Path(self.LOG_DIR).mkdir(parents=True, exist_ok=True)
        Path(self.OUTPUT_DIR).mkdir(parents=True, exist_ok=True)
