""" CSV rasters, CSV tables, binary dumps and run manifests. """

import os
from typing import Any

import numpy as np
import pandas as pd
import yaml

from sensing.estimator import EstimateRecord, RoiGrid
from sensing.src.helpers import configure_logger

FLOAT_FORMAT = "%.17g"
RASTER_HEADER = ["x_min", "y_min", "dx", "dy", "nx", "ny"]

logger = configure_logger(__name__)


def write_raster(path: str, grid: RoiGrid, values: np.ndarray) -> str:
    """
    Writes a map as a headered CSV raster.

    Line 1 names the header fields, line 2 holds their values, then ny rows
    of nx values follow (row iy at y_min + iy dy), 17 significant digits.

    Args:
        path (str): Output file.
        grid (RoiGrid): Pixel grid of the map.
        values (np.ndarray): Map values, shape (ny, nx).

    Returns:
        str: The path written.
    """
    ny, nx = grid.shape
    header = pd.DataFrame(
        [[grid.x_min, grid.y_min, grid.dx, grid.dy, nx, ny]], columns=RASTER_HEADER
    ).astype({"nx": int, "ny": int})

    with open(path, "w", encoding="utf-8", newline="") as f:
        header.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        pd.DataFrame(np.asarray(values, dtype=float)).to_csv(
            f,
            header=False,
            index=False,
            float_format=FLOAT_FORMAT,
            na_rep="nan",
            lineterminator="\n",
        )
    logger.info("Raster written to %s (%d x %d)", path, nx, ny)
    return path


def read_raster(path: str) -> tuple[RoiGrid, np.ndarray]:
    """Reads a raster written by write_raster, bit-exactly."""
    header = pd.read_csv(path, nrows=1, float_precision="round_trip")
    x_min, y_min, dx, dy = (float(header[c].iloc[0]) for c in RASTER_HEADER[:4])
    nx, ny = int(header["nx"].iloc[0]), int(header["ny"].iloc[0])

    values = pd.read_csv(
        path, skiprows=2, header=None, float_precision="round_trip"
    ).to_numpy(dtype=float)
    grid = RoiGrid(
        x_min=x_min,
        x_max=x_min + (nx - 1) * dx,
        y_min=y_min,
        y_max=y_min + (ny - 1) * dy,
        dx=dx,
        dy=dy,
    )
    return grid, values.reshape(ny, nx)


def write_table(path: str, table: pd.DataFrame) -> str:
    """Writes a result table as CSV with 17 significant digits."""
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Table written to %s (%d rows)", path, len(table))
    return path


def estimate_table(record: EstimateRecord) -> pd.DataFrame:
    """One row per BS with its estimates and the fused position."""
    return pd.DataFrame(
        [
            {
                "bs_index": estimate.index,
                "f_d_hz": estimate.f_D,
                "tau_s": estimate.tau,
                "range_m": estimate.range,
                "phi_rad": estimate.phi,
                "h_real": estimate.h.real,
                "h_imag": estimate.h.imag,
                "beta": estimate.beta,
                "phase_rad": estimate.phase,
                "x_hat_m": record.position[0],
                "y_hat_m": record.position[1],
                "objective": record.objective,
            }
            for estimate in record.per_bs
        ]
    )


def write_array(path: str, array: np.ndarray) -> str:
    """Binary dump (.npy) of a complex array."""
    np.save(path, np.asarray(array), allow_pickle=False)
    return path


def read_array(path: str) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def write_manifest(path: str, manifest: dict[str, Any]) -> str:
    """Writes a YAML manifest, keys in insertion order."""
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=False, default_flow_style=None)
    logger.info("Manifest written to %s", path)
    return path


def read_manifest(path: str) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def ensure_directory(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
