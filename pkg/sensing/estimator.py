""" Per-BS coarse search and cooperative radar-map fusion. """

import itertools
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from sensing.otfs_core import (
    DEFAULT_SUPPORT_HALFWIDTH,
    SPEED_OF_LIGHT,
    ChannelOperator,
    DelayDopplerFrame,
    OtfsParams,
    apply_channel_fast,
    apply_G,
    array_response,
    delayed_slots,
    doppler_weighted_tf,
    isfft_to_tf,
    receive_phase,
    shifted_subcarriers,
    support_coefficients,
    support_offsets,
)
from sensing.scene import BsSite, to_local, to_polar_many
from sensing.src.exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    UndefinedCoefficientError,
)
from sensing.src.helpers import config_section, configure_logger
from sensing.src.parallel import ordered_map

_CONFIG = config_section("estimator")
MAP_CHUNK_PIXELS = int(_CONFIG.get("map_chunk_pixels", 4096))
JOINT_SEARCH_LIMIT = int(_CONFIG.get("joint_search_limit", 1_000_000))

logger = configure_logger(__name__)


def _axis(start: float, stop: float, step: float) -> np.ndarray:
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


@dataclass(frozen=True)
class CoarseGrid:
    """
    Discrete (f_D, tau, phi) search set of one BS.

    Steps are c_fdopp / (N T), c_tau / (M delta_f) and c_phi * beamwidth;
    each axis starts at its lower bound.

    Attributes:
        params (OtfsParams): Supplies the Doppler and delay resolutions.
        doppler_range (tuple[float, float]): [f_min, f_max] in Hz.
        tau_range (tuple[float, float]): [tau_min, tau_max] in s.
        phi_range (tuple[float, float]): [phi_min, phi_max] in rad.
        c_fdopp (float): Doppler step factor in (0, 1].
        c_tau (float): Delay step factor in (0, 1].
        c_phi (float): Angle step factor in (0, 1].
        beamwidth (float): Angular resolution in rad.
    """

    params: OtfsParams
    doppler_range: tuple[float, float]
    tau_range: tuple[float, float]
    phi_range: tuple[float, float]
    c_fdopp: float = 0.25
    c_tau: float = 1.0
    c_phi: float = 0.25
    beamwidth: float = 0.1108

    def __post_init__(self):
        for name in ("c_fdopp", "c_tau", "c_phi"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigurationError(f"'{name}' must lie in (0, 1], got {value!r}")
        if not self.beamwidth > 0:
            raise ConfigurationError(
                f"Beamwidth must be positive, got {self.beamwidth!r}"
            )
        for name in ("doppler_range", "tau_range", "phi_range"):
            low, high = (float(v) for v in getattr(self, name))
            if not low <= high:
                raise ConfigurationError(f"Empty {name}: [{low!r}, {high!r}]")
            object.__setattr__(self, name, (low, high))
        if self.tau_range[0] < 0 or self.tau_range[1] >= self.params.T:
            raise ConfigurationError(
                f"Delay range {self.tau_range} must lie inside [0, T)"
            )

    @property
    def doppler_step(self) -> float:
        return self.c_fdopp * self.params.doppler_resolution

    @property
    def tau_step(self) -> float:
        return self.c_tau * self.params.delay_resolution

    @property
    def phi_step(self) -> float:
        return self.c_phi * self.beamwidth

    def doppler_values(self) -> np.ndarray:
        return _axis(*self.doppler_range, self.doppler_step)

    def tau_values(self) -> np.ndarray:
        return _axis(*self.tau_range, self.tau_step)

    def phi_values(self) -> np.ndarray:
        return _axis(*self.phi_range, self.phi_step)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (
            self.doppler_values().size,
            self.tau_values().size,
            self.phi_values().size,
        )

    @classmethod
    def from_roi(  # pylint: disable=R0913
        cls,
        params: OtfsParams,
        roi: "RoiGrid",
        site: BsSite,
        doppler_range: tuple[float, float],
        c_fdopp: float = 0.25,
        c_tau: float = 1.0,
        c_phi: float = 0.25,
        beamwidth: float = 0.1108,
    ) -> "CoarseGrid":
        """
        Grid whose delay and angle ranges cover the RoI as seen from a BS.

        Raises:
            DegenerateGeometryError: If no RoI pixel is in front of the BS.
        """
        tau, phi, valid = to_polar_many(to_local(roi.points(), site))
        if not valid.any():
            raise DegenerateGeometryError(
                f"No RoI pixel lies in front of BS {site.index}"
            )
        tau_max = min(float(np.max(tau[valid])), np.nextafter(params.T, 0.0))
        return cls(
            params=params,
            doppler_range=doppler_range,
            tau_range=(float(np.min(tau[valid])), tau_max),
            phi_range=(float(np.min(phi[valid])), float(np.max(phi[valid]))),
            c_fdopp=c_fdopp,
            c_tau=c_tau,
            c_phi=c_phi,
            beamwidth=beamwidth,
        )


@dataclass(frozen=True)
class RoiGrid:
    """
    Pixel grid of the region of interest (common frame, m).

    Pixel (iy, ix) sits at (x_min + ix dx, y_min + iy dy).
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    dx: float
    dy: float

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ConfigurationError(
                f"RoI steps must be positive, got dx={self.dx!r}, dy={self.dy!r}"
            )
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ConfigurationError("RoI bounds are empty")

    @property
    def x_values(self) -> np.ndarray:
        return _axis(self.x_min, self.x_max, self.dx)

    @property
    def y_values(self) -> np.ndarray:
        return _axis(self.y_min, self.y_max, self.dy)

    @property
    def shape(self) -> tuple[int, int]:
        """(ny, nx)."""
        return self.y_values.size, self.x_values.size

    @property
    def size(self) -> int:
        ny, nx = self.shape
        return ny * nx

    def points(self) -> np.ndarray:
        """Pixel coordinates, shape (ny, nx, 2)."""
        xs, ys = np.meshgrid(self.x_values, self.y_values, indexing="xy")
        return np.stack([xs, ys], axis=-1)

    def contains(self, point, tolerance: float = 1e-9) -> bool:
        x, y = point
        return (
            self.x_min - tolerance <= x <= self.x_max + tolerance
            and self.y_min - tolerance <= y <= self.y_max + tolerance
        )

    def nearest_pixel(self, point) -> tuple[float, float]:
        """Coordinates of the pixel closest to point."""
        ny, nx = self.shape
        ix = int(np.clip(np.rint((point[0] - self.x_min) / self.dx), 0, nx - 1))
        iy = int(np.clip(np.rint((point[1] - self.y_min) / self.dy), 0, ny - 1))
        return float(self.x_values[ix]), float(self.y_values[iy])

    def centered_on(self, point) -> "RoiGrid":
        """Same pixel count, shifted so that point is the central pixel."""
        ny, nx = self.shape
        x_min = float(point[0]) - ((nx - 1) // 2) * self.dx
        y_min = float(point[1]) - ((ny - 1) // 2) * self.dy
        return RoiGrid(
            x_min=x_min,
            x_max=x_min + (nx - 1) * self.dx,
            y_min=y_min,
            y_max=y_min + (ny - 1) * self.dy,
            dx=self.dx,
            dy=self.dy,
        )

    def rescaled(self, factor: float) -> "RoiGrid":
        """Pixel size multiplied by factor, same extent."""
        return replace(self, dx=self.dx * factor, dy=self.dy * factor)


@dataclass(frozen=True)
class RadarMap:
    """
    Objective values over the RoI, stored (ny, nx) with y outer.

    Excluded pixels hold -inf.

    Attributes:
        grid (RoiGrid): The pixel grid.
        values (np.ndarray): Map values, shape (ny, nx).
        label (Union[int, str]): BS index or "fused".
    """

    grid: RoiGrid
    values: np.ndarray
    label: Union[int, str] = "fused"

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.shape != self.grid.shape:
            raise ConfigurationError(
                f"Map shape {values.shape} does not match grid {self.grid.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def excluded(self) -> np.ndarray:
        return np.isneginf(self.values)

    def peak(self) -> tuple[tuple[float, float], float]:
        """
        Returns the best pixel and its value; ties go to the smallest x, then y.

        Raises:
            DegenerateGeometryError: If every pixel is excluded.
        """
        if self.excluded.all():
            raise DegenerateGeometryError("Every RoI pixel is excluded")
        ny = self.grid.shape[0]
        flat = int(np.argmax(self.values.T.ravel()))
        ix, iy = divmod(flat, ny)
        position = (float(self.grid.x_values[ix]), float(self.grid.y_values[iy]))
        return position, float(self.values[iy, ix])


@dataclass(frozen=True)
class BsEstimate:
    """Per-BS estimates (f_D, tau, phi, h)."""

    index: int
    f_D: float
    tau: float
    phi: float
    h: complex

    @property
    def beta(self) -> float:
        return float(abs(self.h))

    @property
    def phase(self) -> float:
        return float(np.angle(self.h))

    @property
    def range(self) -> float:
        return SPEED_OF_LIGHT * self.tau / 2.0


@dataclass(frozen=True)
class EstimateRecord:
    """Outcome of the two-stage procedure."""

    per_bs: tuple[BsEstimate, ...]
    position: tuple[float, float]
    objective: float


class CoarseEstimate(NamedTuple):
    f_D: float
    tau: float
    phi: float
    objective: float


class FusionResult(NamedTuple):
    position: tuple[float, float]
    fused: RadarMap
    per_bs: list[RadarMap]


def _check_reception(y: np.ndarray, params: OtfsParams) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128).ravel()
    expected = params.frame_size * params.n_rx
    if y.size != expected:
        raise ConfigurationError(
            f"Received vector has length {y.size}, expected M*N*N_R = {expected}"
        )
    return y


def channel_coeff_ml(
    y: np.ndarray, op: ChannelOperator, x: DelayDopplerFrame
) -> complex:
    """
    Closed-form ML channel factor h = x^H G^H y / ||G x||^2.

    Args:
        y (np.ndarray): Received vector, length M N N_R.
        op (ChannelOperator): Hypothesized (f_D, tau, phi).
        x (DelayDopplerFrame): Transmitted symbols.

    Returns:
        complex: The estimate of h.

    Raises:
        UndefinedCoefficientError: If G x = 0.
    """
    y = _check_reception(y, op.params)
    echo = apply_G(op, x)
    energy = np.vdot(echo, echo).real
    if energy == 0.0:
        raise UndefinedCoefficientError("||G x|| = 0: channel coefficient undefined")
    return complex(np.vdot(echo, y) / energy)


def single_bs_objective(
    y: np.ndarray, op: ChannelOperator, x: DelayDopplerFrame
) -> float:
    """
    Reduced ML objective |y^H G x|^2 / ||G x||^2.

    Uses y^H G x = sum_j b_j(phi) y_j^H (Psi x), so Psi x is formed once.

    Raises:
        UndefinedCoefficientError: If G x = 0.
    """
    params = op.params
    y = _check_reception(y, params)
    psi_x = apply_channel_fast(op, x)
    energy = params.n_rx * np.vdot(psi_x, psi_x).real
    if energy == 0.0:
        raise UndefinedCoefficientError("||G x|| = 0: objective undefined")

    blocks = y.reshape(params.n_rx, params.frame_size)
    projections = blocks.conj() @ psi_x
    correlation = np.dot(array_response(op.phi, params.n_rx), projections)
    return float(abs(correlation) ** 2 / energy)


class DelayAngleKernel:
    """
    Reduced objective over many (tau, phi) hypotheses at one Doppler shift.

    The shifted time-frequency copies of x are correlated once against the
    received blocks; each hypothesis then costs one small contraction over
    subcarriers and support offsets.
    """

    def __init__(  # pylint: disable=R0913
        self,
        params: OtfsParams,
        x: DelayDopplerFrame,
        y: np.ndarray,
        f_D: float,
        support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
    ):
        """
        Args:
            params (OtfsParams): Waveform parameters.
            x (DelayDopplerFrame): Transmitted symbols.
            y (np.ndarray): Received vector, length M N N_R.
            f_D (float): Doppler hypothesis in Hz.
            support_halfwidth (int): Truncation radius of the channel operator.

        Raises:
            UndefinedCoefficientError: If x is all zero.
        """
        if not np.any(x.symbols):
            raise UndefinedCoefficientError("Zero frame: objective undefined")

        self.params = params
        self.f_D = float(f_D)
        self.support_halfwidth = int(support_halfwidth)

        weighted = doppler_weighted_tf(params, x, self.f_D)
        offsets = support_offsets(params, self.support_halfwidth)
        copies = np.stack(
            [
                shifted_subcarriers(delayed_slots(weighted, slot_offset), int(offset))
                for slot_offset in (0, 1)
                for offset in offsets
            ]
        )

        blocks = _check_reception(y, params).reshape(params.n_rx, params.frame_size)
        received_tf = np.stack(
            [
                isfft_to_tf(DelayDopplerFrame.from_vector(block, params.M, params.N))
                .symbols
                for block in blocks
            ]
        )

        self._correlation = np.einsum("jnm,snm->jsm", received_tf.conj(), copies)
        self._gram = np.einsum("snm,tnm->st", copies.conj(), copies)

    def _projections(self, taus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """y_j^H Psi x per (tau, antenna) and n_rx ||Psi x||^2 per tau."""
        coefficients = support_coefficients(
            self.params, taus, self.f_D, self.support_halfwidth
        ).reshape(taus.size, -1)
        phase = receive_phase(self.params, taus)

        per_offset = np.einsum("bm,jsm->bjs", phase, self._correlation)
        projections = np.einsum("bs,bjs->bj", coefficients, per_offset)
        energy = np.einsum(
            "bs,st,bt->b", coefficients.conj(), self._gram, coefficients
        ).real
        if np.any(energy <= 0.0):
            raise UndefinedCoefficientError("||G x|| = 0 for a delay hypothesis")
        return projections, self.params.n_rx * energy

    def evaluate_pairs(self, taus, phis) -> np.ndarray:
        """Objective at the pairs (taus[b], phis[b]); shape (B,)."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        phis = np.atleast_1d(np.asarray(phis, dtype=float))
        projections, energy = self._projections(taus)
        steering = array_response(phis, self.params.n_rx)
        correlation = np.einsum("bj,bj->b", steering, projections)
        return np.abs(correlation) ** 2 / energy

    def evaluate_grid(self, taus, phis) -> np.ndarray:
        """Objective on the outer product taus x phis; shape (len(taus), len(phis))."""
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        phis = np.atleast_1d(np.asarray(phis, dtype=float))
        projections, energy = self._projections(taus)
        steering = array_response(phis, self.params.n_rx)
        correlation = projections @ steering.T
        return np.abs(correlation) ** 2 / energy[:, None]


def coarse_estimate(
    y: np.ndarray,
    x: DelayDopplerFrame,
    grid: CoarseGrid,
    support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
    threads: Optional[int] = 1,
) -> CoarseEstimate:
    """
    Exhaustive maximization of the single-BS objective over a coarse grid.

    Ties go to the smallest Doppler index, then delay, then angle.

    Args:
        y (np.ndarray): Received vector of the BS.
        x (DelayDopplerFrame): Transmitted symbols of the BS.
        grid (CoarseGrid): Search set.
        support_halfwidth (int): Truncation radius of the channel operator.
        threads (Optional[int]): Worker count for the Doppler hypotheses.

    Returns:
        CoarseEstimate: (f_D, tau, phi) of the maximum and the objective there.
    """
    dopplers = grid.doppler_values()
    taus = grid.tau_values()
    phis = grid.phi_values()

    def doppler_slice(f_D: float) -> np.ndarray:
        kernel = DelayAngleKernel(grid.params, x, y, f_D, support_halfwidth)
        return kernel.evaluate_grid(taus, phis)

    values = np.stack(ordered_map(doppler_slice, dopplers, threads))
    i_f, i_tau, i_phi = np.unravel_index(int(np.argmax(values)), values.shape)
    return CoarseEstimate(
        f_D=float(dopplers[i_f]),
        tau=float(taus[i_tau]),
        phi=float(phis[i_phi]),
        objective=float(values[i_f, i_tau, i_phi]),
    )


def _bs_map(  # pylint: disable=R0913
    y: np.ndarray,
    x: DelayDopplerFrame,
    f_D: float,
    site: BsSite,
    roi: RoiGrid,
    params: OtfsParams,
    support_halfwidth: int,
    threads: Optional[int],
) -> RadarMap:
    tau, phi, valid = to_polar_many(to_local(roi.points(), site))
    valid &= tau < params.T
    values = np.full(roi.shape, -np.inf)

    flat_valid = np.flatnonzero(valid)
    if flat_valid.size:
        kernel = DelayAngleKernel(params, x, y, f_D, support_halfwidth)
        chunks = [
            flat_valid[start : start + MAP_CHUNK_PIXELS]
            for start in range(0, flat_valid.size, MAP_CHUNK_PIXELS)
        ]
        results = ordered_map(
            lambda chunk: kernel.evaluate_pairs(tau.flat[chunk], phi.flat[chunk]),
            chunks,
            threads,
        )
        values.flat[flat_valid] = np.concatenate(results)
    return RadarMap(roi, values, label=site.index)


def fuse_position_ml(  # pylint: disable=R0913
    all_y: Sequence[np.ndarray],
    all_x: Sequence[DelayDopplerFrame],
    doppler_estimates: Sequence[float],
    roi: RoiGrid,
    sites: Sequence[BsSite],
    params: OtfsParams,
    support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
    threads: Optional[int] = 1,
) -> FusionResult:
    """
    Cooperative position estimate from summed per-BS radar maps.

    Each pixel is mapped to (tau_i, phi_i) in every BS frame and scored with
    the reduced objective at the fixed Doppler estimate; pixels behind any
    array are excluded (-inf).

    Args:
        all_y (Sequence[np.ndarray]): Received vectors, one per BS.
        all_x (Sequence[DelayDopplerFrame]): Transmitted frames, one per BS.
        doppler_estimates (Sequence[float]): Per-BS Doppler estimates in Hz.
        roi (RoiGrid): Candidate positions.
        sites (Sequence[BsSite]): The participating BSs.
        params (OtfsParams): Waveform parameters.
        support_halfwidth (int): Truncation radius of the channel operator.
        threads (Optional[int]): Worker count for pixel chunks.

    Returns:
        FusionResult: Best pixel, fused map and per-BS maps.

    Raises:
        ConfigurationError: If the per-BS inputs have different lengths.
        DegenerateGeometryError: If every pixel is excluded.
    """
    if not sites:
        raise ConfigurationError("Fusion needs at least one BS")
    if not len(all_y) == len(all_x) == len(doppler_estimates) == len(sites):
        raise ConfigurationError("Per-BS inputs must all have one entry per site")

    per_bs = [
        _bs_map(y, x, f_D, site, roi, params, support_halfwidth, threads)
        for y, x, f_D, site in zip(all_y, all_x, doppler_estimates, sites)
    ]

    fused_values = per_bs[0].values.copy()
    for radar_map in per_bs[1:]:
        fused_values = fused_values + radar_map.values
    fused = RadarMap(roi, fused_values, label="fused")

    n_excluded = int(fused.excluded.sum())
    if n_excluded == roi.size:
        raise DegenerateGeometryError(
            "Every RoI pixel lies behind at least one participating array"
        )
    if n_excluded:
        logger.warning("%d of %d RoI pixels excluded from fusion", n_excluded, roi.size)

    position, _ = fused.peak()
    return FusionResult(position, fused, per_bs)


def joint_search(
    all_y: Sequence[np.ndarray],
    all_x: Sequence[DelayDopplerFrame],
    grids: Sequence[CoarseGrid],
    support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
) -> list[CoarseEstimate]:
    """
    Exhaustive joint maximization of the summed objective over all BS tuples.

    Every combination of per-BS grid tuples is scored, so this is only usable
    on tiny grids.

    Raises:
        ConfigurationError: If the product grid exceeds the configured limit.
    """
    sizes = [int(np.prod(grid.shape)) for grid in grids]
    if int(np.prod(sizes)) > JOINT_SEARCH_LIMIT:
        raise ConfigurationError(
            f"Joint search over {int(np.prod(sizes))} combinations refused "
            f"(limit {JOINT_SEARCH_LIMIT})"
        )

    candidates, tables = [], []
    for y, x, grid in zip(all_y, all_x, grids):
        tuples = list(
            itertools.product(
                grid.doppler_values(), grid.tau_values(), grid.phi_values()
            )
        )
        candidates.append(tuples)
        tables.append(
            [
                single_bs_objective(
                    y,
                    ChannelOperator(grid.params, f_D, tau, phi, support_halfwidth),
                    x,
                )
                for f_D, tau, phi in tuples
            ]
        )

    best_total, best_choice = -np.inf, None
    for choice in itertools.product(*(range(size) for size in sizes)):
        total = sum(table[index] for table, index in zip(tables, choice))
        if total > best_total:
            best_total, best_choice = total, choice

    return [
        CoarseEstimate(*candidates[bs][index], objective=tables[bs][index])
        for bs, index in enumerate(best_choice)
    ]


def two_stage_estimate(  # pylint: disable=R0913
    all_y: Sequence[np.ndarray],
    all_x: Sequence[DelayDopplerFrame],
    grids: Sequence[CoarseGrid],
    roi: RoiGrid,
    sites: Sequence[BsSite],
    params: OtfsParams,
    support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
    threads: Optional[int] = 1,
) -> tuple[EstimateRecord, FusionResult]:
    """
    Per-BS coarse search, then position fusion at the estimated Dopplers.

    The per-BS channel factor is estimated at the coarse tuple.

    Returns:
        tuple[EstimateRecord, FusionResult]: Estimates and the radar maps.
    """
    coarse = [
        coarse_estimate(y, x, grid, support_halfwidth, threads)
        for y, x, grid in zip(all_y, all_x, grids)
    ]
    fusion = fuse_position_ml(
        all_y,
        all_x,
        [estimate.f_D for estimate in coarse],
        roi,
        sites,
        params,
        support_halfwidth,
        threads,
    )

    per_bs = tuple(
        BsEstimate(
            index=site.index,
            f_D=estimate.f_D,
            tau=estimate.tau,
            phi=estimate.phi,
            h=channel_coeff_ml(
                y,
                ChannelOperator(
                    params, estimate.f_D, estimate.tau, estimate.phi, support_halfwidth
                ),
                x,
            ),
        )
        for site, estimate, y, x in zip(sites, coarse, all_y, all_x)
    )
    _, objective = fusion.fused.peak()
    return EstimateRecord(per_bs, fusion.position, objective), fusion
