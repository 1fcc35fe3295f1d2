""" Scenario geometry, radar link budget, sector beamforming and echo synthesis. """

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
from scipy import linalg

from sensing.otfs_core import (
    SPEED_OF_LIGHT,
    ChannelOperator,
    DelayDopplerFrame,
    OtfsParams,
    apply_G,
    array_response,
)
from sensing.src.exceptions import (
    BehindArrayError,
    ConfigurationError,
    DegenerateGeometryError,
)
from sensing.src.helpers import config_section, configure_logger

if TYPE_CHECKING:
    from sensing.estimator import RoiGrid

_CONFIG = config_section("scene")

logger = configure_logger(__name__)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


@dataclass(frozen=True)
class BsSite:
    """
    A monostatic base station in the common frame.

    Attributes:
        index (int): 1-based BS label.
        origin (tuple[float, float]): Array centre (x, y) in m.
        rotation (float): Counterclockwise rotation of the local frame in rad,
            normalized to [0, 2pi).
    """

    index: int
    origin: tuple[float, float]
    rotation: float

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 2 or not all(np.isfinite(origin)):
            raise ConfigurationError(
                f"BS {self.index}: origin must be two finite values"
            )
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "rotation", float(np.mod(self.rotation, 2 * np.pi)))


@dataclass(frozen=True)
class TargetState:
    """Point target: position (m), velocity (m/s) in the common frame, RCS (m^2)."""

    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    rcs: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        if not self.rcs > 0:
            raise ConfigurationError(f"Target RCS must be positive, got {self.rcs!r}")

    def moved_to(self, position) -> "TargetState":
        return replace(self, position=tuple(position))


@dataclass(frozen=True)
class RadialParams:
    """Per-BS channel parameters of the target."""

    f_D: float
    tau: float
    phi: float
    r: float


@dataclass(frozen=True)
class LinkBudget:
    """
    Complex channel factor of one BS-target link.

    Attributes:
        alpha_mag (float): |alpha| from the radar equation.
        alpha_phase (float): Phase of alpha in rad.
        gamma (complex): Beamforming factor a^H(phi) w_T.
        h (complex): sqrt(P_avg) gamma alpha exp(j2pi f_D tau).
    """

    alpha_mag: float
    alpha_phase: float
    gamma: complex
    h: complex

    @property
    def beta(self) -> float:
        return float(abs(self.h))

    @property
    def phase(self) -> float:
        return float(np.angle(self.h))


@dataclass(frozen=True)
class Beamformer:
    """
    Unit-norm transmit beamformer with its achieved in-sector pattern.

    Attributes:
        w_t (np.ndarray): Weights, length N_T.
        center (float): Sector centre in rad.
        width (float): Sector width in rad.
        mean_gain_db (float): Mean in-sector power gain |a^H w|^2 in dB.
        min_gain_db (float): Minimum in-sector gain in dB.
        max_gain_db (float): Maximum in-sector gain in dB.
    """

    w_t: np.ndarray
    center: float
    width: float
    mean_gain_db: float = float("nan")
    min_gain_db: float = float("nan")
    max_gain_db: float = float("nan")

    def __post_init__(self):
        w_t = np.array(self.w_t, dtype=np.complex128, copy=True)
        if abs(np.linalg.norm(w_t) - 1.0) > 1e-12:
            raise ConfigurationError("Beamformer weights must have unit norm")
        w_t.setflags(write=False)
        object.__setattr__(self, "w_t", w_t)

    @property
    def ripple_db(self) -> float:
        return self.max_gain_db - self.min_gain_db

    def gain(self, phi) -> np.ndarray:
        """|a^H(phi) w_T|^2 (linear)."""
        return np.abs(array_response(phi, self.w_t.shape[0]).conj() @ self.w_t) ** 2


@dataclass(frozen=True)
class SceneConfig:
    """Waveform, BS sites, target and RoI of one scenario."""

    params: OtfsParams
    sites: tuple[BsSite, ...]
    target: TargetState
    beamformer: Beamformer
    roi: Optional["RoiGrid"] = None

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if not self.sites:
            raise ConfigurationError("A scene needs at least one BS")
        indices = [site.index for site in self.sites]
        if len(set(indices)) != len(indices):
            raise ConfigurationError(f"Duplicate BS indices: {indices}")

    def site(self, index: int) -> BsSite:
        for site in self.sites:
            if site.index == index:
                return site
        raise ConfigurationError(f"Unknown BS index {index}")

    def subset(self, indices) -> tuple[BsSite, ...]:
        """Sites of a BS subset, in the given order."""
        return tuple(self.site(index) for index in indices)

    def with_target(self, target: TargetState) -> "SceneConfig":
        return replace(self, target=target)

    def check_geometry(self, indices=None):
        """
        Raises if the target sits on or behind any participating array.

        Raises:
            DegenerateGeometryError: Target at a BS origin.
            BehindArrayError: Target outside the front half-plane of a BS.
        """
        sites = self.sites if indices is None else self.subset(indices)
        for site in sites:
            radial_params(self.target, site, self.params)


def to_local(p, site: BsSite) -> np.ndarray:
    """
    Maps common-frame points to the local frame of a BS.

    x = x' cos(theta) + y' sin(theta), y = -x' sin(theta) + y' cos(theta)
    with (x', y') = p - O.

    Args:
        p: Point(s), last axis of length 2.
        site (BsSite): The BS.

    Returns:
        np.ndarray: Local point(s), same shape as p.
    """
    offset = np.asarray(p, dtype=float) - np.asarray(site.origin)
    cos_t, sin_t = np.cos(site.rotation), np.sin(site.rotation)
    x_local = offset[..., 0] * cos_t + offset[..., 1] * sin_t
    y_local = -offset[..., 0] * sin_t + offset[..., 1] * cos_t
    return np.stack([x_local, y_local], axis=-1)


def to_common(p_local, site: BsSite) -> np.ndarray:
    """Inverse of to_local."""
    local = np.asarray(p_local, dtype=float)
    cos_t, sin_t = np.cos(site.rotation), np.sin(site.rotation)
    x_common = local[..., 0] * cos_t - local[..., 1] * sin_t + site.origin[0]
    y_common = local[..., 0] * sin_t + local[..., 1] * cos_t + site.origin[1]
    return np.stack([x_common, y_common], axis=-1)


def to_polar(p_local) -> tuple[float, float]:
    """
    Round-trip delay and angle of a local-frame point.

    Args:
        p_local: (x, y) in m.

    Returns:
        tuple[float, float]: tau = 2 r / c in s and phi = atan2(y, x) in rad.

    Raises:
        DegenerateGeometryError: At the array origin.
        BehindArrayError: If |phi| >= pi/2.
    """
    x_local, y_local = (float(v) for v in p_local)
    r = np.hypot(x_local, y_local)
    if r == 0.0:
        raise DegenerateGeometryError("Target coincides with the BS array centre")

    phi = float(np.arctan2(y_local, x_local))
    if abs(phi) >= np.pi / 2:
        raise BehindArrayError(
            f"Local angle {phi:.6f} rad lies behind the array (|phi| >= pi/2)"
        )
    return 2.0 * r / SPEED_OF_LIGHT, phi


def to_polar_many(p_local) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized to_polar that flags invalid points instead of raising.

    Returns:
        tuple: (tau, phi, valid); tau and phi are NaN where valid is False.
    """
    local = np.asarray(p_local, dtype=float)
    r = np.hypot(local[..., 0], local[..., 1])
    phi = np.arctan2(local[..., 1], local[..., 0])
    valid = (r > 0.0) & (np.abs(phi) < np.pi / 2)
    tau = np.where(valid, 2.0 * r / SPEED_OF_LIGHT, np.nan)
    return tau, np.where(valid, phi, np.nan), valid


def radial_params(
    target: TargetState, site: BsSite, params: OtfsParams
) -> RadialParams:
    """
    Doppler, delay, angle and range of the target as seen from a BS.

    The radial velocity is the projection of the target velocity on the unit
    vector from the BS to the target; f_D = 2 v f_c / c.
    """
    tau, phi = to_polar(to_local(target.position, site))
    offset = np.asarray(target.position) - np.asarray(site.origin)
    r = float(np.hypot(*offset))
    radial_velocity = float(np.dot(target.velocity, offset / r))
    f_D = 2.0 * radial_velocity * params.f_c / SPEED_OF_LIGHT
    return RadialParams(f_D=f_D, tau=tau, phi=phi, r=r)


def radar_gain(params: OtfsParams, rcs: float, r: float) -> float:
    """|alpha|^2 = G^2 sigma c^2 / ((4 pi)^3 f_c^2 r^4)."""
    return (
        params.antenna_gain**2
        * rcs
        * SPEED_OF_LIGHT**2
        / ((4 * np.pi) ** 3 * params.f_c**2 * r**4)
    )


def link_budget(
    params: OtfsParams,
    site: BsSite,
    target: TargetState,
    beamformer: Beamformer,
    alpha_phase: float = 0.0,
) -> LinkBudget:
    """
    Builds the complex channel factor h of one BS-target link.

    Args:
        params (OtfsParams): Waveform parameters.
        site (BsSite): The BS.
        target (TargetState): The target.
        beamformer (Beamformer): Transmit beamformer of the BS.
        alpha_phase (float): Phase of the reflection coefficient in rad.

    Returns:
        LinkBudget: alpha, gamma and h.
    """
    radial = radial_params(target, site, params)
    alpha_mag = float(np.sqrt(radar_gain(params, target.rcs, radial.r)))
    gamma = complex(array_response(radial.phi, params.n_tx).conj() @ beamformer.w_t)
    h = (
        np.sqrt(params.p_avg)
        * gamma
        * alpha_mag
        * np.exp(1j * alpha_phase)
        * np.exp(2j * np.pi * radial.f_D * radial.tau)
    )
    return LinkBudget(alpha_mag, float(alpha_phase), gamma, complex(h))


def design_sector_beamformer(
    params: OtfsParams, sector: tuple[float, float]
) -> Beamformer:
    """
    Regularized least-squares flat-sector beampattern synthesis.

    Alternates between taking the phase of the current in-sector pattern
    a^H(phi) w and refitting w to a constant magnitude with that phase. Each
    refit is a ridge regression whose penalty is a fixed fraction of the
    largest eigenvalue of the sector Gram matrix, which keeps the weights in
    the span of beams concentrated on the sector. Starts from the matched
    beam a(centre).

    Args:
        params (OtfsParams): Supplies N_T.
        sector (tuple[float, float]): (centre, width) in rad.

    Returns:
        Beamformer: Unit-norm weights and achieved in-sector gain statistics.

    Raises:
        ConfigurationError: If the width is outside (0, pi] or the sector
            leaves the front half-plane.
    """
    center, width = (float(v) for v in sector)
    if not 0.0 < width <= np.pi:
        raise ConfigurationError(f"Sector width must lie in (0, pi], got {width!r}")
    if abs(center) + width / 2 > np.pi / 2 + 1e-12:
        raise ConfigurationError(
            f"Sector centred at {center!r} rad with width {width!r} rad "
            "extends behind the array"
        )

    n_samples = max(181, int(_CONFIG.get("beampattern_samples", 361)))
    iterations = int(_CONFIG.get("beampattern_iterations", 200))
    ridge = float(_CONFIG.get("beampattern_ridge", 0.05))
    max_ripple_db = float(_CONFIG.get("beampattern_max_ripple_db", 6.0))

    angles = np.linspace(center - width / 2, center + width / 2, n_samples)
    response = array_response(angles, params.n_tx).conj()

    gram = response.conj().T @ response
    penalty = ridge * linalg.eigvalsh(gram)[-1]
    factor = linalg.cho_factor(gram + penalty * np.eye(params.n_tx))

    w_t = array_response(center, params.n_tx) / np.sqrt(params.n_tx)
    for _ in range(iterations):
        desired = np.exp(1j * np.angle(response @ w_t))
        w_t = linalg.cho_solve(factor, response.conj().T @ desired)
    w_t = w_t / np.linalg.norm(w_t)

    gain_db = 10 * np.log10(np.abs(response @ w_t) ** 2)
    beamformer = Beamformer(
        w_t=w_t,
        center=center,
        width=width,
        mean_gain_db=float(10 * np.log10(np.mean(10 ** (gain_db / 10)))),
        min_gain_db=float(gain_db.min()),
        max_gain_db=float(gain_db.max()),
    )

    logger.debug(
        "Sector beamformer: mean gain %.2f dB, ripple %.2f dB",
        beamformer.mean_gain_db,
        beamformer.ripple_db,
    )
    if beamformer.ripple_db > max_ripple_db:
        logger.warning(
            "Sector beamformer ripple %.2f dB exceeds %.1f dB",
            beamformer.ripple_db,
            max_ripple_db,
        )
    return beamformer


def synthesize_rx(  # pylint: disable=R0913
    params: OtfsParams,
    site: BsSite,
    target: TargetState,
    beamformer: Beamformer,
    frame: DelayDopplerFrame,
    noise_seed: SeedLike,
    noiseless: bool = False,
) -> tuple[np.ndarray, LinkBudget]:
    """
    Synthesizes y = h G(f_D, tau, phi) x + noise for one BS.

    The alpha phase (uniform on [0, 2pi)) is drawn first from the seeded
    stream, then the noise, so one seed fixes the whole reception. The echo
    uses the untruncated channel operator.

    Args:
        params (OtfsParams): Waveform parameters.
        site (BsSite): The BS.
        target (TargetState): The target.
        beamformer (Beamformer): Transmit beamformer of the BS.
        frame (DelayDopplerFrame): Transmitted symbols.
        noise_seed (SeedLike): Seed of the reception stream.
        noiseless (bool): Skip the noise draw (y = h G x).

    Returns:
        tuple[np.ndarray, LinkBudget]: y (length M N N_R) and the link.
    """
    rng = np.random.default_rng(noise_seed)
    alpha_phase = rng.uniform(0.0, 2 * np.pi)

    radial = radial_params(target, site, params)
    link = link_budget(params, site, target, beamformer, alpha_phase)
    operator = ChannelOperator.exact(params, radial.f_D, radial.tau, radial.phi)
    y = link.h * apply_G(operator, frame)

    if not noiseless:
        scale = np.sqrt(params.noise_var / 2.0)
        y = y + scale * (
            rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        )
    return y, link


def received_snr(params: OtfsParams, clean: np.ndarray) -> float:
    """Integrated-sample SNR ||h G x||^2 / (M N N_R sigma^2) of a noiseless echo."""
    clean = np.asarray(clean)
    return float(np.vdot(clean, clean).real / (clean.size * params.noise_var))


def nominal_snr(params: OtfsParams, link: LinkBudget) -> float:
    """|h|^2 / sigma^2, the per-sample SNR for unit-energy symbols."""
    return float(abs(link.h) ** 2 / params.noise_var)
