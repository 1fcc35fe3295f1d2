import os

import numpy as np
import pytest

from experiment.harness import symbol_source
from sensing.otfs_core import DelayDopplerFrame, OtfsParams

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "..", "experiment", "scenarios")
TABLE_ONE = os.path.abspath(os.path.join(SCENARIO_DIR, "table_one.yaml"))


def make_params(M=8, N=4, n_tx=4, n_rx=2, p_t=1.0, n0=4.0e-20) -> OtfsParams:
    """Waveform with the bundled 1 MHz / 60 GHz numerology and a custom frame size."""
    return OtfsParams(
        M=M,
        N=N,
        delta_f=1.0e6,
        T=1.0e-6,
        f_c=60.0e9,
        n_tx=n_tx,
        n_rx=n_rx,
        p_t=p_t,
        n0=n0,
    )


def random_frame(rng: np.random.Generator, M: int, N: int) -> DelayDopplerFrame:
    """Complex Gaussian frame (not unit modulus)."""
    return DelayDopplerFrame(
        rng.standard_normal((M, N)) + 1j * rng.standard_normal((M, N))
    )


@pytest.fixture
def rng():
    """Fixture to provide a seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    """Fixture to provide an 8 x 4 frame with two receive antennas."""
    return make_params()


@pytest.fixture
def small_frame(small_params):
    """Fixture to provide a QPSK frame matching small_params."""
    return symbol_source(7, small_params.M, small_params.N)


@pytest.fixture
def table_one_path():
    """Fixture to provide the bundled three-BS scenario file."""
    return TABLE_ONE
