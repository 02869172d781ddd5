"""
Centralized helper methods.

This module provides centralized utility functions shared by the
pipeline modules, including logging setup, stable hashing of requests
and loading of JSON run configuration files.
"""
import hashlib
import json
import logging
import os
from typing import Any, Dict

# Logger config env attribution
_LOG_LEVELS = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR,
    'CRITICAL': logging.CRITICAL
}


def _setup_logging():
    """Private logger setup function.

    This function configures the logging settings based on the
    environment variable 'LOG_LEVEL'. The default log level is
    set to 'WARNING'.

    Parameters
    ----------
    None

    Returns
    -------
    None
    """
    log_level_str = os.getenv('LOG_LEVEL', 'WARNING').upper()
    log_level = _LOG_LEVELS.get(log_level_str, logging.WARNING)

    logging.basicConfig(
        level=log_level,
        format=(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        ),
        handlers=[logging.StreamHandler()])


class ConfigFileError(ValueError):
    """Exception raised when a run configuration file cannot be used.

    Raised for unreadable files, invalid JSON or a top level value
    that is not an object.
    """
    pass


def stable_hash(*parts: str, length: int = 16) -> str:
    """Hash text parts into a short hex digest stable across processes.

    Parameters
    ----------
    *parts : str
        Text fragments, joined with newlines before hashing.
    length : int, default=16
        Number of hex characters kept.

    Returns
    -------
    str
        Prefix of the sha256 hex digest.
    """
    digest = hashlib.sha256("\n".join(parts).encode("utf8")).hexdigest()
    return digest[:length]


def load_json_config(path: str) -> Dict[str, Any]:
    """Load a JSON run configuration file.

    Parameters
    ----------
    path : str
        Path to the configuration document.

    Returns
    -------
    dict
        The decoded top level object.

    Raises
    ------
    ConfigFileError
        If the file is missing, is not valid JSON or is not an object.
    """
    try:
        with open(path, encoding="utf8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigFileError(f"Cannot read config file '{path}': {e}")
    except json.JSONDecodeError as e:
        raise ConfigFileError(
            f"Config file '{path}' is not valid JSON: {e.msg} at line {e.lineno}"
        )
    if not isinstance(data, dict):
        raise ConfigFileError(
            f"Config file '{path}' must contain a JSON object"
        )
    return data
