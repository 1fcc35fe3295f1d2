""" OTFS transforms, pulses, cross-ambiguity and the effective channel operator. """

from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import fft as sp_fft

from sensing.src.exceptions import ConfigurationError
from sensing.src.helpers import config_section, configure_logger

SPEED_OF_LIGHT = 299_792_458.0

_CONFIG = config_section("otfs_core")
DEFAULT_SUPPORT_HALFWIDTH = int(_CONFIG.get("support_halfwidth", 5))
DENSE_MAX_SIZE = int(_CONFIG.get("dense_max_size", 4096))
SAMPLE_TOLERANCE = float(_CONFIG.get("sample_tolerance", 1.0e-9))

logger = configure_logger(__name__)


@dataclass(frozen=True)
class OtfsParams:
    """
    Waveform and array scalars of one OTFS-ISAC transceiver.

    Attributes:
        M (int): Number of subcarriers.
        N (int): Number of time slots.
        delta_f (float): Subcarrier spacing in Hz.
        T (float): Slot duration in s, with T * delta_f = 1.
        f_c (float): Carrier frequency in Hz.
        n_tx (int): Transmit antennas (ULA, half-wavelength spacing).
        n_rx (int): Receive antennas (ULA, half-wavelength spacing).
        p_t (float): Total sensing transmit power in W.
        n0 (float): Noise power spectral density in W/Hz.
        antenna_gain (float): Single element gain G of both arrays.
    """

    M: int
    N: int
    delta_f: float
    T: float
    f_c: float
    n_tx: int
    n_rx: int
    p_t: float
    n0: float
    antenna_gain: float = 1.0

    def __post_init__(self):
        for name in ("M", "N", "n_tx", "n_rx"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ConfigurationError(
                    f"'{name}' must be an integer >= 1, got {value!r}"
                )
            object.__setattr__(self, name, int(value))

        for name in ("delta_f", "T", "f_c", "p_t", "n0", "antenna_gain"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ConfigurationError(f"'{name}' must be positive, got {value!r}")
            object.__setattr__(self, name, value)

        if abs(self.T * self.delta_f - 1.0) > 1e-12:
            raise ConfigurationError(
                "Orthogonality violated: T * delta_f must equal 1, "
                f"got {self.T * self.delta_f!r}"
            )

        if self.bandwidth / self.f_c >= 0.01:
            raise ConfigurationError(
                "Narrowband assumption violated: M * delta_f / f_c must be < 0.01, "
                f"got {self.bandwidth / self.f_c!r}"
            )

    @property
    def bandwidth(self) -> float:
        """B = M * delta_f in Hz."""
        return self.M * self.delta_f

    @property
    def frame_size(self) -> int:
        """Number of delay-Doppler symbols M * N."""
        return self.M * self.N

    @property
    def p_avg(self) -> float:
        """Average transmit power per subcarrier P_T / M in W."""
        return self.p_t / self.M

    @property
    def noise_var(self) -> float:
        """Per-component noise variance N0 * delta_f in W."""
        return self.n0 * self.delta_f

    @property
    def doppler_resolution(self) -> float:
        """1 / (N T) in Hz."""
        return 1.0 / (self.N * self.T)

    @property
    def delay_resolution(self) -> float:
        """1 / (M delta_f) in s."""
        return 1.0 / (self.M * self.delta_f)

    @property
    def wavelength(self) -> float:
        """Carrier wavelength in m."""
        return SPEED_OF_LIGHT / self.f_c


def _as_grid(symbols, expected: Optional[tuple[int, int]], name: str) -> np.ndarray:
    grid = np.array(symbols, dtype=np.complex128, copy=True)
    if grid.ndim != 2:
        raise ConfigurationError(f"{name} must be two-dimensional, got {grid.ndim}D")
    if expected is not None and grid.shape != expected:
        raise ConfigurationError(
            f"{name} has shape {grid.shape}, expected {expected}"
        )
    grid.setflags(write=False)
    return grid


@dataclass(frozen=True)
class DelayDopplerFrame:
    """
    M x N grid of delay-Doppler symbols x[k, l].

    The vectorized form stacks columns: entry k + M * l holds x[k, l].
    """

    symbols: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "symbols", _as_grid(self.symbols, None, "Delay-Doppler frame")
        )

    @property
    def M(self) -> int:  # pylint: disable=C0103
        return self.symbols.shape[0]

    @property
    def N(self) -> int:  # pylint: disable=C0103
        return self.symbols.shape[1]

    def vectorize(self) -> np.ndarray:
        """Returns vec(x) of length M N, k fastest."""
        return self.symbols.reshape(-1, order="F")

    @classmethod
    def from_vector(cls, vector: np.ndarray, M: int, N: int) -> "DelayDopplerFrame":
        """Rebuilds a frame from its vectorized form."""
        vector = np.asarray(vector)
        if vector.size != M * N:
            raise ConfigurationError(
                f"Vector of length {vector.size} cannot form a {M}x{N} frame"
            )
        return cls(vector.reshape((M, N), order="F"))

    def mean_energy(self) -> float:
        """Empirical E{|x|^2} over the frame."""
        return float(np.mean(np.abs(self.symbols) ** 2))

    def has_unit_energy(self, tolerance: float = 0.05) -> bool:
        """True when the empirical symbol energy is within tolerance of 1."""
        return abs(self.mean_energy() - 1.0) <= tolerance


@dataclass(frozen=True)
class TimeFrequencyFrame:
    """N x M grid of time-frequency symbols X[n, m]."""

    symbols: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "symbols", _as_grid(self.symbols, None, "Time-frequency frame")
        )

    @property
    def M(self) -> int:  # pylint: disable=C0103
        return self.symbols.shape[1]

    @property
    def N(self) -> int:  # pylint: disable=C0103
        return self.symbols.shape[0]


def _check_frame(frame, params: Optional[OtfsParams], shape: tuple[int, int]):
    if params is not None and shape != (params.M, params.N):
        raise ConfigurationError(
            f"Frame is {shape[0]}x{shape[1]} (M x N) but parameters declare "
            f"{params.M}x{params.N}"
        )


def isfft_to_tf(
    frame: DelayDopplerFrame, params: Optional[OtfsParams] = None
) -> TimeFrequencyFrame:
    """
    Maps delay-Doppler symbols to the time-frequency grid.

    X[n, m] = 1/sqrt(NM) sum_k sum_l x[k, l] exp(-j2pi(mk/M - nl/N)), a
    unitary map.

    Args:
        frame (DelayDopplerFrame): Symbols x[k, l].
        params (Optional[OtfsParams]): When given, the frame size is checked.

    Returns:
        TimeFrequencyFrame: Symbols X[n, m].

    Raises:
        ConfigurationError: If the frame does not match params.
    """
    _check_frame(frame, params, (frame.M, frame.N))
    over_delay = sp_fft.fft(frame.symbols, axis=0, norm="ortho")
    grid = sp_fft.ifft(over_delay, axis=1, norm="ortho")
    return TimeFrequencyFrame(grid.T)


def sfft_to_dd(
    frame: TimeFrequencyFrame, params: Optional[OtfsParams] = None
) -> DelayDopplerFrame:
    """
    Maps time-frequency symbols back to the delay-Doppler grid.

    Exact inverse of isfft_to_tf.

    Args:
        frame (TimeFrequencyFrame): Symbols X[n, m].
        params (Optional[OtfsParams]): When given, the frame size is checked.

    Returns:
        DelayDopplerFrame: Symbols x[k, l].

    Raises:
        ConfigurationError: If the frame does not match params.
    """
    _check_frame(frame, params, (frame.M, frame.N))
    over_subcarrier = sp_fft.ifft(frame.symbols.T, axis=0, norm="ortho")
    return DelayDopplerFrame(sp_fft.fft(over_subcarrier, axis=1, norm="ortho"))


class PulseKind(str, Enum):
    """Supported pulse families."""

    RECTANGULAR = "rectangular"


@dataclass(frozen=True)
class Pulse:
    """
    Unit-energy pulse sampled at t = i T / M.

    Attributes:
        kind (PulseKind): Pulse family.
        duration (float): Support length T in s.
        samples (np.ndarray): The M samples g(i T / M).
    """

    kind: PulseKind
    duration: float
    samples: np.ndarray

    @classmethod
    def rectangular(cls, duration: float, n_samples: int) -> "Pulse":
        """Rectangular pulse of amplitude 1/sqrt(T) on [0, T)."""
        samples = np.full(n_samples, 1.0 / np.sqrt(duration), dtype=np.complex128)
        samples.setflags(write=False)
        return cls(PulseKind.RECTANGULAR, float(duration), samples)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_spacing(self) -> float:
        return self.duration / self.n_samples

    def energy(self) -> float:
        """(T/M) sum |g(iT/M)|^2."""
        return float(self.sample_spacing * np.sum(np.abs(self.samples) ** 2))

    def evaluate(self, t) -> np.ndarray:
        """
        Evaluates the pulse at arbitrary times, zero outside [0, T).

        Times within SAMPLE_TOLERANCE samples of a support edge snap to it.
        """
        position = np.asarray(t, dtype=float) / self.sample_spacing
        inside = (position > -SAMPLE_TOLERANCE) & (
            position < self.n_samples - SAMPLE_TOLERANCE
        )
        return np.where(inside, self.samples[0], 0.0 + 0.0j)


@lru_cache(maxsize=32)
def rectangular_pulse(params: OtfsParams) -> Pulse:
    """The transmit/receive pulse used by every operator built on params."""
    return Pulse.rectangular(params.T, params.M)


def _check_pulse_pair(g_rx: Pulse, g_tx: Pulse):
    if g_rx.n_samples != g_tx.n_samples or not np.isclose(
        g_rx.duration, g_tx.duration, rtol=1e-12, atol=0.0
    ):
        raise ConfigurationError(
            "Pulses must share duration and sample count for the ambiguity"
        )


def cross_ambiguity(g_rx: Pulse, g_tx: Pulse, tau: float, f_D: float) -> complex:
    """
    M-sample cross-ambiguity of two pulses.

    A(tau, f_D) = (T/M) sum_i g_rx(iT/M) g_tx*(iT/M - tau) exp(-j2pi f_D iT/M).

    Args:
        g_rx (Pulse): Receive pulse.
        g_tx (Pulse): Transmit pulse.
        tau (float): Delay offset in s.
        f_D (float): Frequency offset in Hz.

    Returns:
        complex: The ambiguity value.
    """
    _check_pulse_pair(g_rx, g_tx)
    spacing = g_rx.sample_spacing
    t = np.arange(g_rx.n_samples) * spacing
    terms = (
        g_rx.samples * np.conj(g_tx.evaluate(t - tau)) * np.exp(-2j * np.pi * f_D * t)
    )
    return complex(spacing * np.sum(terms))


def ambiguity_profile(
    g_rx: Pulse, g_tx: Pulse, taus, f_D: float, slot_offset: int
) -> np.ndarray:
    """
    All subcarrier offsets of the ambiguity for a batch of delays.

    Row b, column q holds A(slot_offset * T - taus[b], dm * delta_f - f_D) for
    every dm = q mod M; the M-sample ambiguity is periodic in dm with period M.

    Args:
        g_rx (Pulse): Receive pulse.
        g_tx (Pulse): Transmit pulse.
        taus: Round-trip delays in s (scalar or 1D).
        f_D (float): Doppler shift in Hz.
        slot_offset (int): n - n'.

    Returns:
        np.ndarray: Complex array of shape (len(taus), M).
    """
    _check_pulse_pair(g_rx, g_tx)
    spacing = g_rx.sample_spacing
    t = np.arange(g_rx.n_samples) * spacing
    taus = np.atleast_1d(np.asarray(taus, dtype=float))

    shifted = t[None, :] - (slot_offset * g_rx.duration - taus)[:, None]
    weights = (
        spacing
        * g_rx.samples[None, :]
        * np.conj(g_tx.evaluate(shifted))
        * np.exp(2j * np.pi * f_D * t)[None, :]
    )
    return sp_fft.fft(weights, axis=-1)


def array_response(phi, n_elems: int) -> np.ndarray:
    """
    Half-wavelength ULA response, centred on the array midpoint.

    Element q is exp(j pi (q - (n_elems - 1)/2) sin(phi)). A 1D array of
    angles returns one response per row.

    Args:
        phi: Angle(s) in rad.
        n_elems (int): Number of elements.

    Returns:
        np.ndarray: Shape (n_elems,) for scalar phi, else phi.shape + (n_elems,).
    """
    if n_elems < 1:
        raise ConfigurationError(f"n_elems must be >= 1, got {n_elems}")
    return np.exp(1j * np.pi * np.multiply.outer(np.sin(phi), centred_indices(n_elems)))


def centred_indices(n_elems: int) -> np.ndarray:
    """q - (n - 1)/2 for q = 0..n-1."""
    return np.arange(n_elems) - (n_elems - 1) / 2.0


@dataclass(frozen=True)
class ChannelOperator:
    """
    (f_D, tau, phi)-parameterized effective channel of one target.

    Applies Psi (and G = b(phi) kron Psi) without materializing them; the
    frequency-offset sum is truncated to |m - m'| <= support_halfwidth.

    Attributes:
        params (OtfsParams): Waveform parameters.
        f_D (float): Doppler shift in Hz.
        tau (float): Round-trip delay in s, 0 <= tau < T.
        phi (float): Angle of arrival/departure in rad.
        support_halfwidth (int): Truncation radius in [1, M]; M is exact.
    """

    params: OtfsParams
    f_D: float
    tau: float
    phi: float = 0.0
    support_halfwidth: int = field(default=DEFAULT_SUPPORT_HALFWIDTH)

    def __post_init__(self):
        if not 0.0 <= self.tau < self.params.T:
            raise ConfigurationError(
                f"Delay {self.tau!r} s outside [0, T) with T = {self.params.T!r} s"
            )
        halfwidth = int(self.support_halfwidth)
        if not 1 <= halfwidth <= self.params.M:
            raise ConfigurationError(
                f"support_halfwidth must lie in [1, {self.params.M}], got {halfwidth}"
            )
        object.__setattr__(self, "support_halfwidth", halfwidth)

    @classmethod
    def exact(
        cls, params: OtfsParams, f_D: float, tau: float, phi: float = 0.0
    ) -> "ChannelOperator":
        """Untruncated operator (support_halfwidth = M)."""
        return cls(params, f_D, tau, phi, support_halfwidth=params.M)

    @property
    def is_exact(self) -> bool:
        return self.support_halfwidth == self.params.M

    def moved(self, **changes) -> "ChannelOperator":
        """Copy with some of f_D, tau, phi replaced."""
        return replace(self, **changes)


def support_offsets(params: OtfsParams, support_halfwidth: int) -> np.ndarray:
    """Subcarrier offsets m - m' kept by a truncation radius."""
    reach = min(int(support_halfwidth), params.M - 1)
    return np.arange(-reach, reach + 1)


def doppler_weighted_tf(
    params: OtfsParams, x: DelayDopplerFrame, f_D: float
) -> np.ndarray:
    """ISFFT of x with slot n' multiplied by exp(j2pi n' T f_D); shape (N, M)."""
    tf = isfft_to_tf(x, params).symbols
    slot_phase = np.exp(2j * np.pi * np.arange(params.N) * params.T * f_D)
    return tf * slot_phase[:, None]


def delayed_slots(grid: np.ndarray, slot_offset: int) -> np.ndarray:
    """Rows moved down by slot_offset (row n holds row n - slot_offset, zero fill)."""
    if slot_offset == 0:
        return grid
    out = np.zeros_like(grid)
    out[slot_offset:] = grid[:-slot_offset]
    return out


def shifted_subcarriers(grid: np.ndarray, offset: int) -> np.ndarray:
    """Columns moved right by offset (column m holds column m - offset, zero fill)."""
    n_sub = grid.shape[1]
    out = np.zeros_like(grid)
    if offset >= 0:
        out[:, offset:] = grid[:, : n_sub - offset]
    else:
        out[:, : n_sub + offset] = grid[:, -offset:]
    return out


def support_coefficients(
    params: OtfsParams, taus, f_D: float, support_halfwidth: int
) -> np.ndarray:
    """
    Ambiguity weights of the kept (slot, subcarrier) offsets.

    Returns:
        np.ndarray: Shape (len(taus), 2, len(offsets)); [b, d, s] weights the
        copy of the input delayed by d slots and offsets[s] subcarriers.
    """
    pulse = rectangular_pulse(params)
    offsets = support_offsets(params, support_halfwidth) % params.M
    profiles = [
        ambiguity_profile(pulse, pulse, taus, f_D, slot_offset)[:, offsets]
        for slot_offset in (0, 1)
    ]
    return np.stack(profiles, axis=1)


def receive_phase(params: OtfsParams, taus) -> np.ndarray:
    """exp(-j2pi m delta_f tau); shape (len(taus), M)."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    return np.exp(
        -2j * np.pi * np.multiply.outer(taus, np.arange(params.M) * params.delta_f)
    )


def apply_channel_fast(op: ChannelOperator, x: DelayDopplerFrame) -> np.ndarray:
    """
    Computes Psi x through the time-frequency domain.

    ISFFT, Doppler slot phase, ambiguity mixing over the causal slot pair
    {n, n - 1} and |m - m'| <= support_halfwidth, delay phase, SFFT.

    Args:
        op (ChannelOperator): The operator.
        x (DelayDopplerFrame): Input symbols.

    Returns:
        np.ndarray: vec(Psi x), length M N.
    """
    params = op.params
    weighted = doppler_weighted_tf(params, x, op.f_D)
    offsets = support_offsets(params, op.support_halfwidth)
    coefficients = support_coefficients(
        params, op.tau, op.f_D, op.support_halfwidth
    )[0]

    mixed = np.zeros_like(weighted)
    for slot_offset in (0, 1):
        source = delayed_slots(weighted, slot_offset)
        for index, offset in enumerate(offsets):
            mixed += coefficients[slot_offset, index] * shifted_subcarriers(
                source, int(offset)
            )

    mixed *= receive_phase(params, op.tau)[0][None, :]
    return sfft_to_dd(TimeFrequencyFrame(mixed), params).vectorize()


def apply_G(  # pylint: disable=C0103
    op: ChannelOperator, x: DelayDopplerFrame
) -> np.ndarray:
    """
    Computes G x = b(phi) kron (Psi x) without forming G.

    Returns:
        np.ndarray: Length M N N_R, antenna blocks of length M N.
    """
    steering = array_response(op.phi, op.params.n_rx)
    return np.kron(steering, apply_channel_fast(op, x))


def dd_to_tf_matrix(params: OtfsParams) -> np.ndarray:
    """
    Dense ISFFT matrix mapping vec(x) (index k + M l) to X (index n M + m).
    """
    M, N = params.M, params.N
    n_out, m_out = np.meshgrid(np.arange(N), np.arange(M), indexing="ij")
    l_in, k_in = np.meshgrid(np.arange(N), np.arange(M), indexing="ij")
    phase = (
        np.outer(m_out.ravel(), k_in.ravel()) / M
        - np.outer(n_out.ravel(), l_in.ravel()) / N
    )
    return np.exp(-2j * np.pi * phase) / np.sqrt(N * M)


def build_tf_mixing_dense(op: ChannelOperator) -> np.ndarray:
    """
    Dense time-frequency channel (no truncation), index n M + m on both sides.

    Entry [(n, m), (n', m')] is exp(j2pi n'T f_D) exp(-j2pi m delta_f tau)
    A((n - n')T - tau, (m - m')delta_f - f_D) for n - n' in {0, 1}, else 0.
    """
    params = op.params
    M, N = params.M, params.N
    _check_dense_size(params)
    pulse = rectangular_pulse(params)

    frequency_offsets = np.arange(-(M - 1), M)
    ambiguity = np.array(
        [
            [
                cross_ambiguity(
                    pulse,
                    pulse,
                    slot_offset * params.T - op.tau,
                    offset * params.delta_f - op.f_D,
                )
                for offset in frequency_offsets
            ]
            for slot_offset in (0, 1)
        ]
    )
    subcarriers = np.arange(M)
    offset_index = subcarriers[:, None] - subcarriers[None, :] + (M - 1)
    rx_phase = np.exp(-2j * np.pi * subcarriers * params.delta_f * op.tau)

    mixing = np.zeros((N, M, N, M), dtype=np.complex128)
    for slot_offset in (0, 1):
        block = rx_phase[:, None] * ambiguity[slot_offset][offset_index]
        for slot in range(slot_offset, N):
            source = slot - slot_offset
            mixing[slot, :, source, :] = block * np.exp(
                2j * np.pi * source * params.T * op.f_D
            )
    return mixing.reshape(N * M, N * M)


def _check_dense_size(params: OtfsParams):
    if params.frame_size > DENSE_MAX_SIZE:
        raise ConfigurationError(
            f"Dense Psi refused for M*N = {params.frame_size} > {DENSE_MAX_SIZE}; "
            "use apply_channel_fast for instances of this size"
        )


def build_psi_dense(op: ChannelOperator) -> np.ndarray:
    """
    Exact dense Psi (MN x MN) for small instances.

    Psi = SFFT o (time-frequency mixing) o ISFFT in vectorized form; h and
    b(phi) are not included. Ignores support_halfwidth.

    Args:
        op (ChannelOperator): The operator.

    Returns:
        np.ndarray: Psi with vec(Psi x) = Psi @ vec(x).

    Raises:
        ConfigurationError: If M N exceeds the configured dense cap.
    """
    _check_dense_size(op.params)
    to_tf = dd_to_tf_matrix(op.params)
    logger.debug(
        "Building dense Psi for M=%d, N=%d", op.params.M, op.params.N
    )
    return to_tf.conj().T @ build_tf_mixing_dense(op) @ to_tf
