import numpy as np
import pandas as pd
import pytest

from experiment.src.plotting import raster_plot, rmse_plot, write_script
from experiment.src.serialization import (
    estimate_table,
    read_array,
    read_manifest,
    read_raster,
    write_array,
    write_manifest,
    write_raster,
    write_table,
)
from sensing.estimator import BsEstimate, EstimateRecord, RoiGrid


@pytest.fixture
def grid():
    """Fixture to provide a 3 x 4 RoI grid."""
    return RoiGrid(46.3, 46.36, 10.0, 10.02, 0.02, 0.01)


def test_raster_round_trip_is_bit_exact(tmp_path, grid, rng):
    """Test header layout and exact values, including -inf and NaN pixels."""
    values = rng.standard_normal(grid.shape) * 1e-17
    values[0, 0] = -np.inf
    values[2, 3] = np.nan
    path = write_raster(str(tmp_path / "map.csv"), grid, values)

    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0] == "x_min,y_min,dx,dy,nx,ny"
    assert lines[1].endswith(",4,3")
    assert len(lines) == 2 + 3

    read_grid, read_values = read_raster(path)
    assert read_grid.shape == grid.shape
    assert (read_grid.x_min, read_grid.dy) == (grid.x_min, grid.dy)
    np.testing.assert_array_equal(read_values, values)


def test_table_uses_seventeen_digits(tmp_path):
    """Test that table floats survive a write/read cycle exactly."""
    table = pd.DataFrame({"n_bs": [1, 2], "peb_m": [0.1 + 0.2, 1 / 3]})
    path = write_table(str(tmp_path / "t.csv"), table)

    read = pd.read_csv(path, float_precision="round_trip")
    pd.testing.assert_frame_equal(read, table)


def test_estimate_table_rows():
    """Test one row per BS with the shared fused position."""
    record = EstimateRecord(
        per_bs=(
            BsEstimate(1, 100.0, 2.0e-7, 0.3, 1e-6 + 2e-6j),
            BsEstimate(2, -50.0, 3.0e-7, -0.1, -1e-6j),
        ),
        position=(48.3, 48.34),
        objective=2.5,
    )
    table = estimate_table(record)

    assert table["bs_index"].tolist() == [1, 2]
    assert (table["x_hat_m"] == 48.3).all() and (table["y_hat_m"] == 48.34).all()
    assert table["h_imag"].iloc[0] == 2e-6
    assert table["range_m"].iloc[0] == pytest.approx(2.0e-7 * 299_792_458.0 / 2)


def test_array_and_manifest_files(tmp_path):
    """Test the binary dump of complex samples and the ordered YAML manifest."""
    array = np.array([1 + 2j, -3.5j, 1e-300])
    read = read_array(write_array(str(tmp_path / "rx.npy"), array))
    np.testing.assert_array_equal(read, array)
    assert read.dtype == np.complex128

    manifest = {"seed": 3, "bs": [{"index": 1, "h": [0.5, -0.25]}], "noiseless": False}
    path = write_manifest(str(tmp_path / "manifest.yaml"), manifest)
    assert read_manifest(path) == manifest
    with open(path, "r", encoding="utf-8") as f:
        assert f.readline().startswith("seed:")


def test_plot_scripts(tmp_path):
    """Test that the plot scripts reference the CSVs they draw."""
    raster = raster_plot("radar_map_fused.csv", "fused", 46.3, 46.3, 0.02, 0.02)
    rmse = rmse_plot("rmse.csv", [1, 2, 3])
    path = write_script(str(tmp_path / "plot.gp"), [raster, rmse])

    with open(path, "r", encoding="utf-8") as f:
        script = f.read()
    assert script.startswith("set datafile separator ','")
    assert "'radar_map_fused.csv' skip 2 matrix" in script
    assert "set output 'radar_map_fused.png'" in script
    assert script.count("'rmse.csv'") == 6
