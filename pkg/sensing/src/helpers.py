""" Configuration and logging helpers shared by the sensing and experiment packages. """

import logging
import os
import sys
from functools import lru_cache
from typing import Any

import yaml

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@lru_cache(maxsize=1)
def load_config() -> dict[str, Any]:
    """
    Reads sensing/config.yaml once per process.

    The file holds the numerical defaults of the library (operator truncation,
    beampattern synthesis, FIM step control, harness failure limits) and the
    log level.

    Returns:
        dict[str, Any]: The parsed file.

    Raises:
        FileNotFoundError: If the packaged file is missing.
    """
    config_path = os.path.abspath(
        os.path.join(os.path.dirname(__file__), "../config.yaml")
    )

    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    with open(config_path, "r", encoding="utf-8") as file:
        return yaml.safe_load(file)


def config_section(section: str) -> dict[str, Any]:
    """
    Returns one section of the package configuration.

    Args:
        section (str): Top-level key in config.yaml (e.g. "crlb").

    Returns:
        dict[str, Any]: The section, or an empty dict when it is absent.
    """
    return load_config().get(section, {}) or {}


def configure_logger(name: str) -> logging.Logger:
    """
    Module logger writing to stderr at the configured level.

    Command results go to stdout; everything logged goes to stderr.

    Args:
        name (str): Usually the module's __name__.

    Returns:
        logging.Logger: Logger with a single stderr handler.
    """
    logger = logging.getLogger(name)
    logger.setLevel(config_section("logging").get("level", "INFO"))

    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)

    return logger
