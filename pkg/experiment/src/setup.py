""" Setup module for resolving the run environment of the isac-coop commands. """

import os
from typing import Optional

from dotenv import load_dotenv

from experiment.scenario_loader import Scenario, load_scenario
from sensing.src.exceptions import ConfigurationError
from sensing.src.parallel import default_threads

THREADS_VARIABLE = "ISAC_COOP_THREADS"


def resolve_threads(threads: Optional[int]) -> int:
    """
    Resolves the worker count from the flag, the environment or the machine.

    Args:
        threads (Optional[int]): Value of --threads, if given.

    Raises:
        ConfigurationError: If the flag or ISAC_COOP_THREADS is not a positive integer.

    Returns:
        int: The worker count.
    """
    if threads is not None:
        if threads < 1:
            raise ConfigurationError(f"--threads must be >= 1, got {threads}")
        return threads

    load_dotenv()
    value = os.getenv(THREADS_VARIABLE)
    if not value:
        return default_threads()

    try:
        resolved = int(value)
    except ValueError:
        raise ConfigurationError(  # pylint: disable=W0707
            f"{THREADS_VARIABLE} must be an integer, got '{value}'"
        )
    if resolved < 1:
        raise ConfigurationError(f"{THREADS_VARIABLE} must be >= 1, got {resolved}")
    return resolved


def prepare_scenario(path: str, scale: Optional[float] = None) -> Scenario:
    """
    Loads a scenario and applies the desk-scale factor.

    Args:
        path (str): Scenario file.
        scale (Optional[float]): Value of --scale, if given.

    Returns:
        Scenario: The validated (and possibly scaled) scenario.
    """
    scenario = load_scenario(path)
    return scenario if scale is None else scenario.scaled(scale)
