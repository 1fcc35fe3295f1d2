""" Fisher information, EFIM reduction, cooperative position FIM and PEB. """

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from sensing.otfs_core import (
    DEFAULT_SUPPORT_HALFWIDTH,
    SAMPLE_TOLERANCE,
    SPEED_OF_LIGHT,
    ChannelOperator,
    DelayDopplerFrame,
    apply_G,
    centred_indices,
)
from sensing.estimator import RoiGrid
from sensing.scene import (
    BsSite,
    SceneConfig,
    link_budget,
    radial_params,
    to_local,
    to_polar,
)
from sensing.src.exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    NuisanceDegeneracyError,
    NumericalDerivativeError,
    SensingError,
    UnobservablePositionError,
)
from sensing.src.helpers import config_section, configure_logger
from sensing.src.parallel import ordered_map

_CONFIG = config_section("crlb")
STEP_FACTOR = float(_CONFIG.get("step_factor", 1.0e-4))
RICHARDSON_TOLERANCE = float(_CONFIG.get("richardson_tolerance", 1.0e-4))
MAX_CONDITION = float(_CONFIG.get("max_condition", 1.0e12))

logger = configure_logger(__name__)


@dataclass(frozen=True)
class PerBsFim:
    """
    5x5 FIM over [beta, phase, f_D, tau, phi] of one BS.

    A is the nuisance block over (beta, phase, f_D), C the block over
    (tau, phi) and B the coupling between them.
    """

    matrix: np.ndarray

    @property
    def A(self) -> np.ndarray:  # pylint: disable=C0103
        return self.matrix[:3, :3]

    @property
    def B(self) -> np.ndarray:  # pylint: disable=C0103
        return self.matrix[:3, 3:]

    @property
    def C(self) -> np.ndarray:  # pylint: disable=C0103
        return self.matrix[3:, 3:]


@dataclass(frozen=True)
class Efim2:
    """2x2 equivalent FIM over (tau, phi); condition is that of the scaled A."""

    matrix: np.ndarray
    condition: float = float("nan")


@dataclass(frozen=True)
class CoopPosFim:
    """2x2 position FIM over (x, y) in 1/m^2."""

    matrix: np.ndarray


@dataclass(frozen=True)
class RangeAngleBounds:
    """Root CRBs of range (m) and angle (rad) from the EFIM and the full FIM."""

    efim_range_m: float
    efim_angle_rad: float
    full_range_m: float
    full_angle_rad: float


@dataclass(frozen=True)
class PebMap:
    """
    PEB over the RoI, stored (ny, nx); NaN marks excluded or unobservable pixels.
    """

    grid: RoiGrid
    values: np.ndarray
    bs_indices: tuple[int, ...]

    @property
    def excluded(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass(frozen=True)
class PositionBound:
    """Bounds of one target position for one BS subset."""

    per_bs: tuple[PerBsFim, ...]
    efims: tuple[Efim2, ...]
    position_fim: CoopPosFim
    peb_m: float
    reference: RangeAngleBounds


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def _check_psd(matrix: np.ndarray, name: str):
    eigenvalues = linalg.eigvalsh(matrix)
    largest = max(float(np.max(np.abs(eigenvalues))), np.finfo(float).tiny)
    if eigenvalues.min() < -1e-8 * largest:
        raise NumericalDerivativeError(
            f"{name} is not positive semidefinite: smallest eigenvalue "
            f"{eigenvalues.min():.3e}, largest {largest:.3e}"
        )


def _scaled_inverse(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse through unit-diagonal scaling, with the scaled condition number."""
    diagonal = np.diag(matrix)
    if np.any(diagonal <= 0.0) or not np.all(np.isfinite(matrix)):
        return np.full_like(matrix, np.nan), float("inf")
    scale = 1.0 / np.sqrt(diagonal)
    scaled = matrix * np.outer(scale, scale)
    condition = float(np.linalg.cond(scaled))
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        return np.full_like(matrix, np.nan), condition
    inverse = linalg.inv(scaled) * np.outer(scale, scale)
    return _symmetrize(inverse), condition


def mu_elements(op: ChannelOperator, h: complex, x: DelayDopplerFrame) -> np.ndarray:
    """
    Noise-free received samples mu[k, l, j] = h b_j(phi) (Psi x)[k, l].

    Returns:
        np.ndarray: Shape (M, N, N_R).
    """
    params = op.params
    echo = h * apply_G(op, x)
    return echo.reshape(params.n_rx, params.N, params.M).transpose(2, 1, 0)


def _richardson(samples, step: float, stencil: str) -> tuple[np.ndarray, float]:
    """Derivative from a stencil at step and step / 2, with their relative gap."""

    def estimate(h: float) -> np.ndarray:
        if stencil == "central":
            return (samples(h) - samples(-h)) / (2 * h)
        if stencil == "forward":
            return (-3 * samples(0.0) + 4 * samples(h) - samples(2 * h)) / (2 * h)
        return (3 * samples(0.0) - 4 * samples(-h) + samples(-2 * h)) / (2 * h)

    coarse, fine = estimate(step), estimate(step / 2)
    scale = np.linalg.norm(fine)
    gap = float(np.linalg.norm(coarse - fine) / scale) if scale > 0 else 0.0
    return (4 * fine - coarse) / 3, gap


def _delay_stencil(op: ChannelOperator, step: float) -> str:
    """Stencil that keeps every delay sample inside the current pulse-sample cell."""
    spacing = op.params.T / op.params.M
    cell = np.floor(op.tau / spacing + SAMPLE_TOLERANCE)
    left, right = cell * spacing, (cell + 1) * spacing
    if op.tau - step >= left and op.tau + step < right:
        return "central"
    if op.tau + 2 * step < right:
        return "forward"
    return "backward"


def fim_per_bs(
    op: ChannelOperator,
    h: complex,
    x: DelayDopplerFrame,
    noise_var: Optional[float] = None,
) -> PerBsFim:
    """
    Fisher information of theta = [beta, phase, f_D, tau, phi] for one BS.

    I[q, p] = (2 / sigma^2) Re{sum (d mu / d theta_q)^* (d mu / d theta_p)}.
    The beta, phase and phi derivatives are analytic; f_D and tau use finite
    differences at 1e-4 of the resolution, checked against the half step and
    combined by Richardson extrapolation. Delay stencils stay inside one
    pulse-sample cell, where the sampled ambiguity is smooth.

    Args:
        op (ChannelOperator): Operator at the true (f_D, tau, phi).
        h (complex): Channel factor.
        x (DelayDopplerFrame): Transmitted symbols.
        noise_var (Optional[float]): Noise variance; defaults to N0 delta_f.

    Returns:
        PerBsFim: The symmetric 5x5 FIM.

    Raises:
        NumericalDerivativeError: If a finite difference fails its step check
            or the assembled matrix is not PSD.
    """
    params = op.params
    sigma2 = params.noise_var if noise_var is None else float(noise_var)
    beta, phase = abs(h), np.angle(h)

    mu = mu_elements(op, h, x)
    d_beta = mu_elements(op, np.exp(1j * phase), x)
    d_phase = 1j * mu
    d_phi = mu * (1j * np.pi * centred_indices(params.n_rx) * np.cos(op.phi))

    def shifted(name: str):
        base = getattr(op, name)
        return lambda delta: mu_elements(op.moved(**{name: base + delta}), h, x)

    derivatives = {}
    for name, step, stencil in (
        ("f_D", STEP_FACTOR * params.doppler_resolution, "central"),
        ("tau", STEP_FACTOR * params.delay_resolution, None),
    ):
        if stencil is None:
            stencil = _delay_stencil(op, step)
        derivative, gap = _richardson(shifted(name), step, stencil)
        if gap > RICHARDSON_TOLERANCE or not np.all(np.isfinite(derivative)):
            raise NumericalDerivativeError(
                f"d mu / d {name} failed the step-halving check: step {step:.3e}, "
                f"relative gap {gap:.3e} > {RICHARDSON_TOLERANCE:.1e} "
                f"({stencil} stencil)"
            )
        derivatives[name] = derivative

    stacked = np.stack(
        [d_beta, d_phase, derivatives["f_D"], derivatives["tau"], d_phi]
    ).reshape(5, -1)
    fim = _symmetrize((2.0 / sigma2) * np.real(stacked.conj() @ stacked.T))
    if beta > 0:
        _check_psd(fim, "Per-BS FIM")
    return PerBsFim(fim)


def efim_reduce(fim: PerBsFim) -> Efim2:
    """
    Schur complement C - B^T A^-1 B of the nuisance block.

    Conditioning of A is measured after scaling it to unit diagonal.

    Raises:
        NuisanceDegeneracyError: If the scaled A has condition number > 1e12.
    """
    a_inverse, condition = _scaled_inverse(fim.A)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise NuisanceDegeneracyError(
            f"Nuisance block condition number {condition:.3e} "
            f"exceeds {MAX_CONDITION:.1e}"
        )
    reduced = _symmetrize(fim.C - fim.B.T @ a_inverse @ fim.B)
    return Efim2(reduced, condition)


def jacobian_m(p_local) -> np.ndarray:
    """d(tau, phi) / d(x_i, y_i) at a local-frame point."""
    x_local, y_local = (float(v) for v in p_local)
    r = np.hypot(x_local, y_local)
    if r == 0.0:
        raise DegenerateGeometryError("Jacobian undefined at the array centre")
    return np.array(
        [
            [2 * x_local / (SPEED_OF_LIGHT * r), 2 * y_local / (SPEED_OF_LIGHT * r)],
            [-y_local / r**2, x_local / r**2],
        ]
    )


def jacobian_n(theta: float) -> np.ndarray:
    """d(x_i, y_i) / d(x, y): the local-frame rotation."""
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    return np.array([[cos_t, sin_t], [-sin_t, cos_t]])


def coop_fim(
    per_bs_efims: Sequence[Efim2], sites: Sequence[BsSite], p
) -> CoopPosFim:
    """
    Cooperative position FIM sum_i J_n^T J_m^T EFIM_i J_m J_n.

    Raises:
        DegenerateGeometryError: If p is at, or behind, any array.
    """
    total = np.zeros((2, 2))
    for efim, site in zip(per_bs_efims, sites):
        local = to_local(p, site)
        to_polar(local)
        chain = jacobian_m(local) @ jacobian_n(site.rotation)
        total = total + chain.T @ efim.matrix @ chain
    return CoopPosFim(_symmetrize(total))


def peb(fim: CoopPosFim) -> float:
    """
    Position error bound sqrt(trace(I_e^-1)) in m.

    Raises:
        UnobservablePositionError: If I_e is singular.
    """
    inverse, condition = _scaled_inverse(fim.matrix)
    if not np.all(np.isfinite(inverse)):
        raise UnobservablePositionError(
            f"Position FIM is singular (scaled condition number {condition:.3e})"
        )
    return float(np.sqrt(np.trace(inverse)))


def range_angle_bounds(fim: PerBsFim) -> RangeAngleBounds:
    """
    Root CRBs of range and angle from the EFIM inverse and the full-FIM inverse.

    Range bounds are (c / 2) sqrt(CRB(tau)).

    Raises:
        NuisanceDegeneracyError: If either inverse is too ill-conditioned.
    """
    efim_inverse, _ = _scaled_inverse(efim_reduce(fim).matrix)
    full_inverse, condition = _scaled_inverse(fim.matrix)
    if not (np.all(np.isfinite(efim_inverse)) and np.all(np.isfinite(full_inverse))):
        raise NuisanceDegeneracyError(
            f"FIM too ill-conditioned to invert (scaled condition {condition:.3e})"
        )
    half_c = SPEED_OF_LIGHT / 2.0
    return RangeAngleBounds(
        efim_range_m=float(half_c * np.sqrt(efim_inverse[0, 0])),
        efim_angle_rad=float(np.sqrt(efim_inverse[1, 1])),
        full_range_m=float(half_c * np.sqrt(full_inverse[3, 3])),
        full_angle_rad=float(np.sqrt(full_inverse[4, 4])),
    )


def position_bound(
    scene: SceneConfig,
    sites: Sequence[BsSite],
    frame: DelayDopplerFrame,
    support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
) -> PositionBound:
    """
    Full bound chain at the scene's target position for a BS subset.

    The range/angle bounds refer to the first site of the subset.
    """
    params = scene.params
    per_bs = []
    for site in sites:
        radial = radial_params(scene.target, site, params)
        link = link_budget(params, site, scene.target, scene.beamformer)
        op = ChannelOperator(
            params, radial.f_D, radial.tau, radial.phi, support_halfwidth
        )
        per_bs.append(fim_per_bs(op, link.h, frame))

    efims = tuple(efim_reduce(fim) for fim in per_bs)
    position_fim = coop_fim(efims, sites, scene.target.position)
    return PositionBound(
        per_bs=tuple(per_bs),
        efims=efims,
        position_fim=position_fim,
        peb_m=peb(position_fim),
        reference=range_angle_bounds(per_bs[0]),
    )


def peb_map(  # pylint: disable=R0913
    roi: RoiGrid,
    sites: Sequence[BsSite],
    scene: SceneConfig,
    frame: DelayDopplerFrame,
    support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
    threads: Optional[int] = 1,
) -> PebMap:
    """
    PEB at every RoI pixel for a BS subset.

    Pixels behind any array, at an array centre, or with a singular FIM are
    excluded (NaN), mirroring the radar-map exclusion rule. A pixel whose
    bound fails numerically (derivative or nuisance block) is also NaN and
    counted separately in the log.
    """
    points = roi.points().reshape(-1, 2)

    def pixel_bound(point) -> tuple[float, bool]:
        try:
            bound = position_bound(
                scene.with_target(scene.target.moved_to(point)),
                sites,
                frame,
                support_halfwidth,
            )
        except (DegenerateGeometryError, UnobservablePositionError):
            return float("nan"), False
        except ConfigurationError:
            raise
        except SensingError as e:
            logger.debug("PEB failed at %s: %s", tuple(point), e)
            return float("nan"), True
        return bound.peb_m, False

    results = ordered_map(pixel_bound, points, threads)
    values = np.array([value for value, _ in results]).reshape(roi.shape)
    n_failed = sum(failed for _, failed in results)
    n_excluded = int(np.isnan(values).sum())
    if n_excluded:
        logger.warning("%d of %d PEB pixels excluded", n_excluded, roi.size)
    if n_failed:
        logger.warning("%d PEB pixels failed numerically", n_failed)
    return PebMap(roi, values, tuple(site.index for site in sites))
