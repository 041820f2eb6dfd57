import logging
import logging.handlers
from pathlib import Path
from datetime import datetime
from typing import Optional
import sys

SERVICES = [
    'main',
    'model_service',
    'stability_service',
    'control_service',
    'network_service',
    'scenario_service',
]

FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logging(settings=None, level: Optional[str] = None) -> logging.Logger:
    """Setup console and rotating-file logging for all services.

    Args:
        settings: A ``Settings`` instance; file logging is skipped when it is
            None or when ``settings.FILE_LOGGING`` is false.
        level: Console level override (e.g. from ``--log-level``).

    Returns:
        The configured root logger.
    """
    console_level = (level or (settings.LOG_LEVEL if settings else "INFO")).upper()

    # Configure root logger
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)

    # Clear existing handlers so repeated calls don't duplicate output
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(FORMAT, datefmt=DATE_FORMAT)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(console_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    for service in SERVICES:
        service_logger = logging.getLogger(service)
        service_logger.setLevel(logging.DEBUG)
        for handler in list(service_logger.handlers):
            service_logger.removeHandler(handler)
            handler.close()

    if settings is not None and settings.FILE_LOGGING:
        logs_dir = Path(settings.LOG_DIR)
        logs_dir.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now().strftime('%Y%m%d')

        # File handler for all logs
        file_handler = logging.handlers.RotatingFileHandler(
            logs_dir / f"all_services_{stamp}.log",
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

        # Error file handler
        error_handler = logging.handlers.RotatingFileHandler(
            logs_dir / f"errors_{stamp}.log",
            maxBytes=5*1024*1024,  # 5MB
            backupCount=3
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(formatter)
        root_logger.addHandler(error_handler)

        # Service-specific files
        for service in SERVICES:
            service_handler = logging.handlers.RotatingFileHandler(
                logs_dir / f"{service}_{stamp}.log",
                maxBytes=5*1024*1024,  # 5MB
                backupCount=3
            )
            service_handler.setLevel(logging.DEBUG)
            service_handler.setFormatter(formatter)
            logging.getLogger(service).addHandler(service_handler)

    # Set specific log levels for external libraries
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('numexpr').setLevel(logging.WARNING)
    logging.getLogger('asyncio').setLevel(logging.WARNING)

    return root_logger


def get_logger(name: str) -> logging.Logger:
    """Get a logger for a specific service."""
    return logging.getLogger(name)
