from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import experiment.harness as harness
from experiment.harness import (
    EXTRA_COLUMNS,
    QPSK,
    RMSE_COLUMNS,
    CoarseSettings,
    ExperimentPlan,
    run_experiment,
    stream_seed,
    symbol_source,
    synthesize_receptions,
)
from experiment.scenario_loader import load_scenario
from sensing.estimator import RoiGrid
from sensing.src.exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    ExperimentAbortedError,
)
from tests.conftest import TABLE_ONE


@pytest.fixture(scope="module")
def tiny_scenario():
    """Fixture to provide the bundled scenario at 16 x 8 with an 11 x 11 RoI."""
    scenario = load_scenario(TABLE_ONE).scaled(1 / 6)
    scene = replace(scenario.scene, roi=RoiGrid(0.0, 1.0, 0.0, 1.0, 0.1, 0.1))
    return replace(scenario, scene=scene)


@pytest.fixture
def tiny_plan(tiny_scenario):
    """Fixture to provide a two-trial, one-waypoint, noiseless plan."""
    return ExperimentPlan(
        scene=tiny_scenario.scene,
        waypoints=((40.0, 40.0),),
        n_trials=2,
        bs_subsets=((1,), (1, 2)),
        seed=11,
        coarse=tiny_scenario.coarse,
        noiseless=True,
    )


def test_symbol_source_is_unit_qpsk_and_reproducible():
    """Test the alphabet, unit energy and per-seed determinism of the symbol source."""
    frame = symbol_source(3, 32, 16)

    assert frame.symbols.shape == (32, 16)
    assert np.allclose(np.abs(frame.symbols), 1.0)
    assert np.isin(np.round(frame.symbols, 12), np.round(QPSK, 12)).all()
    assert abs(frame.mean_energy() - 1.0) < 1e-12
    np.testing.assert_array_equal(frame.symbols, symbol_source(3, 32, 16).symbols)
    assert not np.array_equal(frame.symbols, symbol_source(4, 32, 16).symbols)


def test_stream_seeds_are_distinct_per_key():
    """Test that different keys give different streams and equal keys the same one."""
    states = {
        key: tuple(stream_seed(5, *key).generate_state(4))
        for key in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (0,)]
    }

    assert len(set(states.values())) == len(states)
    assert tuple(stream_seed(5, 0, 0, 1).generate_state(4)) == states[(0, 0, 1)]
    assert tuple(stream_seed(6, 0, 0, 1).generate_state(4)) != states[(0, 0, 1)]


def test_synthesize_receptions_deterministic_and_independent(tiny_scenario):
    """Test bit-identical receptions per key and fresh symbols for every BS."""
    scene = tiny_scenario.scene
    sites = scene.subset([1, 2, 3])

    first = synthesize_receptions(scene, sites, 7, (0, 1, 2))
    again = synthesize_receptions(scene, sites, 7, (0, 1, 2))
    other = synthesize_receptions(scene, sites, 7, (0, 1, 3))

    assert [r.site.index for r in first] == [1, 2, 3]
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.frame.symbols, b.frame.symbols)
    assert not np.array_equal(first[0].frame.symbols, first[1].frame.symbols)
    assert not np.array_equal(first[0].y, other[0].y)


def test_coarse_settings_default_doppler_bounds(tiny_scenario):
    """Test the default +/- 2 / (N T) Doppler search bounds."""
    params = tiny_scenario.scene.params
    low, high = CoarseSettings().doppler_bounds(params)

    assert high == pytest.approx(2 / (params.N * params.T))
    assert low == -high
    explicit = CoarseSettings(doppler_range=(-1.0, 3.0))
    assert explicit.doppler_bounds(params) == (-1.0, 3.0)


def test_experiment_plan_validation(tiny_scenario):
    """Test the plan's rejection of empty or inconsistent settings."""
    scene = tiny_scenario.scene
    with pytest.raises(ConfigurationError, match="n_trials"):
        ExperimentPlan(scene, ((40.0, 40.0),), 0, ((1,),))
    with pytest.raises(ConfigurationError, match="waypoint"):
        ExperimentPlan(scene, (), 1, ((1,),))
    with pytest.raises(ConfigurationError, match="Unknown BS"):
        ExperimentPlan(scene, ((40.0, 40.0),), 1, ((1, 7),))
    with pytest.raises(ConfigurationError, match="RoI"):
        ExperimentPlan(replace(scene, roi=None), ((40.0, 40.0),), 1, ((1,),))

    plan = ExperimentPlan(scene, ([40, 40],), 1, ([1, 2],))
    assert plan.waypoints == ((40.0, 40.0),) and plan.bs_subsets == ((1, 2),)
    assert plan.roi_for((40.0, 40.0)).nearest_pixel((40.0, 40.0)) == (40.0, 40.0)


def test_run_experiment_table_layout(tiny_plan):
    """Test the row count, column order and basic sanity of a tiny run."""
    result = run_experiment(tiny_plan, threads=1, progress=False)
    table = result.table

    assert list(table.columns) == RMSE_COLUMNS + EXTRA_COLUMNS
    assert len(table) == 2
    assert table["n_bs"].tolist() == [1, 2]
    assert (table["n_failed"] == 0).all() and (table["n_trials"] == 2).all()
    assert (table["peb_m"] > 0).all()
    assert table["peb_m"].iloc[1] <= table["peb_m"].iloc[0]
    assert (table["rmse_pos_m"] < 1.0).all()
    assert result.wall_time_s > 0


def test_run_experiment_noiseless_on_pixel_within_half_step(tiny_plan):
    """Test the half-pixel quantization bound for a static target on a RoI pixel."""
    scene = tiny_plan.scene
    static = scene.with_target(replace(scene.target, velocity=(0.0, 0.0)))
    plan = replace(
        tiny_plan,
        scene=static,
        coarse=replace(tiny_plan.coarse, doppler_range=(0.0, 0.0)),
        support_halfwidth=static.params.M,
    )

    table = run_experiment(plan, threads=1, progress=False).table

    half_step = np.hypot(scene.roi.dx, scene.roi.dy) / 2
    assert (table["n_failed"] == 0).all()
    assert (table["rmse_pos_m"] <= half_step).all()


def test_run_experiment_independent_of_threads(tiny_plan):
    """Test bit-identical tables across repeated runs and thread counts."""
    single = run_experiment(tiny_plan, threads=1, progress=False).table
    repeated = run_experiment(tiny_plan, threads=1, progress=False).table
    parallel = run_experiment(tiny_plan, threads=3, progress=False).table

    pd.testing.assert_frame_equal(single, repeated, check_exact=True)
    pd.testing.assert_frame_equal(single, parallel, check_exact=True)


def test_run_experiment_aborts_on_failures(mocker, tiny_plan):
    """Test the abort once the failure rate exceeds its limit."""
    mocker.patch(
        "experiment.harness.two_stage_estimate",
        side_effect=DegenerateGeometryError("No usable RoI pixel"),
    )
    with pytest.raises(ExperimentAbortedError, match="2 of 2 trials failed"):
        run_experiment(tiny_plan, threads=1, progress=False)


def test_run_experiment_counts_failed_trials(mocker, tiny_plan):
    """Test that a failed trial is logged, counted and left out of the RMSE."""
    real_estimate = harness.two_stage_estimate
    calls = []

    def fail_first(*args, **kwargs):
        calls.append(1)
        if len(calls) == 1:
            raise DegenerateGeometryError("No usable RoI pixel")
        return real_estimate(*args, **kwargs)

    mocker.patch("experiment.harness.MAX_FAILURE_RATE", 0.5)
    mocker.patch("experiment.harness.two_stage_estimate", side_effect=fail_first)

    table = run_experiment(tiny_plan, threads=1, progress=False).table

    assert table["n_failed"].tolist() == [1, 0]
    assert table["n_trials"].tolist() == [1, 2]
    assert np.isfinite(table["rmse_pos_m"]).all()
