""" Monte Carlo RMSE experiments of the cooperative position estimator. """

import time
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from sensing.crlb import position_bound
from sensing.estimator import CoarseGrid, RoiGrid, two_stage_estimate
from sensing.otfs_core import DEFAULT_SUPPORT_HALFWIDTH, DelayDopplerFrame, OtfsParams
from sensing.scene import (
    BsSite,
    LinkBudget,
    SceneConfig,
    radial_params,
    synthesize_rx,
    to_local,
)
from sensing.src.exceptions import (
    ConfigurationError,
    ExperimentAbortedError,
    SensingError,
)
from sensing.src.helpers import config_section, configure_logger
from sensing.src.parallel import ordered_map

_CONFIG = config_section("harness")
MAX_FAILURE_RATE = float(_CONFIG.get("max_failure_rate", 0.01))
EFFICIENCY_SLACK = float(_CONFIG.get("efficiency_slack", 0.8))
COOPERATION_SLACK = float(_CONFIG.get("cooperation_slack", 0.10))

RMSE_COLUMNS = [
    "waypoint_x",
    "waypoint_y",
    "n_bs",
    "rmse_range_m",
    "crb_range_m",
    "rmse_angle_rad",
    "crb_angle_rad",
    "rmse_pos_m",
    "peb_m",
    "n_trials",
    "n_failed",
]
EXTRA_COLUMNS = [
    "rmse_range_coarse_m",
    "rmse_angle_coarse_rad",
    "se_range_m",
    "se_angle_rad",
    "se_pos_m",
    "efficient",
]

logger = configure_logger(__name__)

QPSK = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))


@dataclass(frozen=True)
class CoarseSettings:
    """
    Coarse-search resolution factors and Doppler bounds of a scenario.

    Attributes:
        c_fdopp (float): Doppler step factor.
        c_tau (float): Delay step factor.
        c_phi (float): Angle step factor.
        beamwidth (float): Angular resolution in rad.
        doppler_range (Optional[tuple[float, float]]): Search bounds in Hz;
            None means +/- 2 / (N T).
    """

    c_fdopp: float = 0.25
    c_tau: float = 1.0
    c_phi: float = 0.25
    beamwidth: float = 0.1108
    doppler_range: Optional[tuple[float, float]] = None

    def doppler_bounds(self, params: OtfsParams) -> tuple[float, float]:
        if self.doppler_range is not None:
            return self.doppler_range
        return -2 * params.doppler_resolution, 2 * params.doppler_resolution

    def grid_for(self, params: OtfsParams, roi: RoiGrid, site: BsSite) -> CoarseGrid:
        return CoarseGrid.from_roi(
            params,
            roi,
            site,
            doppler_range=self.doppler_bounds(params),
            c_fdopp=self.c_fdopp,
            c_tau=self.c_tau,
            c_phi=self.c_phi,
            beamwidth=self.beamwidth,
        )


@dataclass(frozen=True)
class ExperimentPlan:
    """
    Monte Carlo plan: one row per (waypoint, BS subset), n_trials trials each.

    Attributes:
        scene (SceneConfig): Geometry, waveform, beamformer and RoI.
        waypoints (tuple): Target positions (x, y) in m.
        n_trials (int): Trials per row.
        bs_subsets (tuple): BS index tuples, e.g. ((1,), (1, 2), (1, 2, 3)).
        seed (int): Master seed.
        coarse (CoarseSettings): Coarse-search settings.
        support_halfwidth (int): Truncation radius used by the estimator and bounds.
        noiseless (bool): Synthesize without noise.
        recentre_roi (bool): Centre the RoI on each waypoint.
    """

    scene: SceneConfig
    waypoints: tuple[tuple[float, float], ...]
    n_trials: int
    bs_subsets: tuple[tuple[int, ...], ...]
    seed: int = 0
    coarse: CoarseSettings = field(default_factory=CoarseSettings)
    support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH
    noiseless: bool = False
    recentre_roi: bool = True

    def __post_init__(self):
        if int(self.n_trials) < 1:
            raise ConfigurationError(f"n_trials must be >= 1, got {self.n_trials!r}")
        if not self.waypoints:
            raise ConfigurationError("The plan needs at least one waypoint")
        if not self.bs_subsets:
            raise ConfigurationError("The plan needs at least one BS subset")
        if self.scene.roi is None:
            raise ConfigurationError("The plan's scene must declare a RoI")
        object.__setattr__(
            self, "waypoints", tuple(tuple(map(float, w)) for w in self.waypoints)
        )
        object.__setattr__(
            self, "bs_subsets", tuple(tuple(map(int, s)) for s in self.bs_subsets)
        )
        for subset in self.bs_subsets:
            self.scene.subset(subset)

    def roi_for(self, waypoint) -> RoiGrid:
        if self.recentre_roi:
            return self.scene.roi.centered_on(waypoint)
        return self.scene.roi


@dataclass(frozen=True)
class Reception:
    """One BS's transmitted frame, received vector and link."""

    site: BsSite
    frame: DelayDopplerFrame
    y: np.ndarray
    link: LinkBudget


@dataclass(frozen=True)
class RmseResult:
    """RMSE table (fixed leading columns, one row per waypoint and subset)."""

    table: pd.DataFrame
    wall_time_s: float = 0.0


@dataclass(frozen=True)
class _TrialOutcome:
    failed: bool
    errors: tuple[float, ...] = ()


def symbol_source(seed, M: int, N: int) -> DelayDopplerFrame:
    """
    Uniform QPSK frame exp(j(pi/4 + k pi/2)), deterministic per seed.

    Args:
        seed: Anything numpy.random.default_rng accepts.
        M (int): Subcarriers.
        N (int): Time slots.

    Returns:
        DelayDopplerFrame: Unit-modulus symbols.
    """
    rng = np.random.default_rng(seed)
    return DelayDopplerFrame(QPSK[rng.integers(0, 4, size=(M, N))])


def stream_seed(seed: int, *key: int) -> np.random.SeedSequence:
    """Independent seed stream keyed by a tuple of non-negative integers."""
    return np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(int(k) for k in key)
    )


def synthesize_receptions(
    scene: SceneConfig,
    sites: Sequence[BsSite],
    seed: int,
    key: tuple[int, ...],
    noiseless: bool = False,
) -> list[Reception]:
    """
    Fresh symbols and echo for every site, each seeded by (seed, key, BS index).
    """
    receptions = []
    for site in sites:
        symbols_seed, noise_seed = stream_seed(seed, *key, site.index).spawn(2)
        frame = symbol_source(symbols_seed, scene.params.M, scene.params.N)
        y, link = synthesize_rx(
            scene.params,
            site,
            scene.target,
            scene.beamformer,
            frame,
            noise_seed,
            noiseless=noiseless,
        )
        receptions.append(Reception(site, frame, y, link))
    return receptions


def _run_trial(  # pylint: disable=R0913
    plan: ExperimentPlan,
    scene: SceneConfig,
    sites: tuple[BsSite, ...],
    roi: RoiGrid,
    key: tuple[int, ...],
    threads: Optional[int],
) -> _TrialOutcome:
    params = scene.params
    try:
        receptions = synthesize_receptions(
            scene, sites, plan.seed, key, noiseless=plan.noiseless
        )
        grids = [plan.coarse.grid_for(params, roi, site) for site in sites]
        record, _ = two_stage_estimate(
            [r.y for r in receptions],
            [r.frame for r in receptions],
            grids,
            roi,
            sites,
            params,
            plan.support_halfwidth,
            threads,
        )
    except SensingError as error:
        logger.warning("Trial %s failed: %s", key, error)
        return _TrialOutcome(failed=True)

    reference = sites[0]
    truth = radial_params(scene.target, reference, params)
    local = to_local(record.position, reference)
    implied_range = float(np.hypot(*local))
    implied_angle = float(np.arctan2(local[1], local[0]))
    coarse = record.per_bs[0]

    return _TrialOutcome(
        failed=False,
        errors=(
            implied_range - truth.r,
            implied_angle - truth.phi,
            float(np.hypot(*(np.subtract(record.position, scene.target.position)))),
            coarse.range - truth.r,
            coarse.phi - truth.phi,
        ),
    )


def _rmse(errors: np.ndarray) -> tuple[float, float]:
    """RMSE and its delta-method standard error."""
    squared = errors**2
    rmse = float(np.sqrt(np.mean(squared)))
    if squared.size < 2 or rmse == 0.0:
        return rmse, 0.0
    return rmse, float(np.std(squared, ddof=1) / (2 * rmse * np.sqrt(squared.size)))


def _warn_cooperation(table: pd.DataFrame):
    for (x, y), rows in table.groupby(["waypoint_x", "waypoint_y"], sort=False):
        ordered = rows.sort_values("n_bs")["rmse_pos_m"].to_numpy()
        for fewer, more in zip(ordered[:-1], ordered[1:]):
            if more > (1 + COOPERATION_SLACK) * fewer:
                logger.warning(
                    "Cooperation monotonicity violated at (%.3f, %.3f): "
                    "RMSE %.4f m with more BSs vs %.4f m",
                    x,
                    y,
                    more,
                    fewer,
                )


def run_experiment(
    plan: ExperimentPlan, threads: Optional[int] = 1, progress: bool = True
) -> RmseResult:
    """
    Runs every (waypoint, subset) row of the plan.

    Each trial redraws symbols, alpha phase and noise from the stream keyed
    by (seed, waypoint, subset, trial, BS); trials run in parallel and are
    reduced in trial order, so the table does not depend on threads. Range
    and angle errors refer to the first BS of each subset, using the values
    implied by the fused position; the coarse-stage errors are extra columns.

    Args:
        plan (ExperimentPlan): The plan.
        threads (Optional[int]): Worker count for trials.
        progress (bool): Show a progress bar.

    Returns:
        RmseResult: The table and the wall time.

    Raises:
        ExperimentAbortedError: If more than 1 % of the trials so far failed.
    """
    started = time.perf_counter()
    params = plan.scene.params
    rows, total_trials, total_failed = [], 0, 0

    jobs = [
        (w, s, waypoint, subset)
        for w, waypoint in enumerate(plan.waypoints)
        for s, subset in enumerate(plan.bs_subsets)
    ]
    for w, s, waypoint, subset in tqdm(
        jobs, desc="rmse", disable=not progress, leave=False
    ):
        scene = plan.scene.with_target(plan.scene.target.moved_to(waypoint))
        sites = scene.subset(subset)
        scene.check_geometry(subset)
        roi = plan.roi_for(waypoint)

        outcomes = ordered_map(
            partial(_run_trial, plan, scene, sites, roi, threads=1),
            [(w, s, t) for t in range(plan.n_trials)],
            threads,
        )
        failed = sum(outcome.failed for outcome in outcomes)
        total_trials += plan.n_trials
        total_failed += failed
        if total_failed > MAX_FAILURE_RATE * total_trials:
            raise ExperimentAbortedError(
                f"{total_failed} of {total_trials} trials failed "
                f"(limit {MAX_FAILURE_RATE:.0%}); last row at waypoint {waypoint}, "
                f"BSs {subset}"
            )

        errors = np.array(
            [o.errors for o in outcomes if not o.failed], dtype=float
        ).reshape(-1, 5)
        reference_frame = symbol_source(stream_seed(plan.seed, w), params.M, params.N)
        bound = position_bound(scene, sites, reference_frame, plan.support_halfwidth)

        rmse_range, se_range = _rmse(errors[:, 0])
        rmse_angle, se_angle = _rmse(errors[:, 1])
        rmse_pos, se_pos = _rmse(errors[:, 2])
        rows.append(
            {
                "waypoint_x": waypoint[0],
                "waypoint_y": waypoint[1],
                "n_bs": len(subset),
                "rmse_range_m": rmse_range,
                "crb_range_m": bound.reference.efim_range_m,
                "rmse_angle_rad": rmse_angle,
                "crb_angle_rad": bound.reference.efim_angle_rad,
                "rmse_pos_m": rmse_pos,
                "peb_m": bound.peb_m,
                "n_trials": plan.n_trials - failed,
                "n_failed": failed,
                "rmse_range_coarse_m": _rmse(errors[:, 3])[0],
                "rmse_angle_coarse_rad": _rmse(errors[:, 4])[0],
                "se_range_m": se_range,
                "se_angle_rad": se_angle,
                "se_pos_m": se_pos,
                "efficient": bool(rmse_pos >= EFFICIENCY_SLACK * bound.peb_m),
            }
        )
        logger.info(
            "Waypoint (%.2f, %.2f), BSs %s: RMSE %.4f m, PEB %.4f m, %d failed",
            waypoint[0],
            waypoint[1],
            subset,
            rmse_pos,
            bound.peb_m,
            failed,
        )
        if not rows[-1]["efficient"]:
            logger.warning(
                "Position RMSE %.4f m below %.1f x PEB %.4f m at (%.2f, %.2f), BSs %s",
                rmse_pos,
                EFFICIENCY_SLACK,
                bound.peb_m,
                waypoint[0],
                waypoint[1],
                subset,
            )

    table = pd.DataFrame(rows, columns=RMSE_COLUMNS + EXTRA_COLUMNS)
    _warn_cooperation(table)
    return RmseResult(table, time.perf_counter() - started)
