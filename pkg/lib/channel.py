import json
import logging
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import hadamard

import config
from scene import AngleSet, Scenario, angle_of, steering_matrix

log = logging.getLogger(__name__)


class ChannelError(ValueError):
    pass


class ChannelConfigurationError(ChannelError):
    pass


class InvalidGeometryError(ChannelError):
    pass


########################################################################
#
#   Vectorization
#
# A radar slice H (N_P x N_A) is vectorized column by column, so
# vec(a(aoa) b a(aod)^H) = kron(conj(a(aod)), a(aoa)) b. The synthesizer
# and the estimator both go through these two functions.

def vectorize_csi(stack: np.ndarray) -> np.ndarray:
    '''(Q, N_P, N_A) -> (Q, N_A * N_P), column-major per slice'''
    stack = np.asarray(stack)
    q = stack.shape[0]
    return stack.transpose(0, 2, 1).reshape(q, -1)


def joint_steering_vector(aod, aoa, n_ap: int, n_pwr: int, spacing: float = 0.5) -> np.ndarray:
    '''(N_A * N_P, len(aod)) joint AoD/AoA steering matrix'''
    a_d = steering_matrix(aod, n_ap, spacing)
    a_a = steering_matrix(aoa, n_pwr, spacing)
    return (np.conj(a_d)[:, None, :] * a_a[None, :, :]).reshape(n_ap * n_pwr, -1)


########################################################################
#
#   NDP

def ndp_signal(q: int, n_a: int) -> np.ndarray:
    '''HE-LTF mapping for subcarrier q: rows are AP antennas, columns
       are LTF symbols. The same normalized Hadamard matrix on every q.'''
    if n_a < 1 or (n_a & (n_a - 1)) != 0:
        raise ChannelConfigurationError("n_a must be 1 or a power of two, got %s" % n_a)
    return hadamard(n_a).astype(complex) / math.sqrt(n_a)


########################################################################
#
#   Channels

@dataclass
class RadarChannel:
    matrices: np.ndarray       # (Q, N_P, N_A)
    coefficients: np.ndarray   # (Q, K) beta^r
    aod_steering: np.ndarray   # (N_A, K)
    aoa_steering: np.ndarray   # (N_P, K)
    angle_set: AngleSet
    delays: np.ndarray         # (K,) seconds

    def reconstruct(self) -> np.ndarray:
        return np.einsum('pk,qk,ak->qpa', self.aoa_steering, self.coefficients,
                         np.conj(self.aod_steering))

    @property
    def mean_path_power(self) -> float:
        if self.coefficients.size == 0:
            return 0.0
        return float(np.mean(np.abs(self.coefficients) ** 2))


@dataclass
class CommChannel:
    matrices: np.ndarray            # (Q, N_u, N_A)
    los_coefficients: np.ndarray    # (Q, N_u) beta^c_u
    los_aod: float                  # phi^c_u
    multipath_coefficients: np.ndarray  # (Q, N_u, K_u - 1)
    multipath_aods: np.ndarray      # (K_u - 1,)
    n_ap: int
    spacing: float = 0.5

    def los_part(self) -> np.ndarray:
        a = steering_matrix([self.los_aod], self.n_ap, self.spacing)[:, 0]
        return self.los_coefficients[:, :, None] * np.conj(a)[None, None, :]

    def multipath_part(self) -> np.ndarray:
        a = steering_matrix(self.multipath_aods, self.n_ap, self.spacing)
        return np.einsum('qul,al->qua', self.multipath_coefficients, np.conj(a))

    def reconstruct(self) -> np.ndarray:
        return self.los_part() + self.multipath_part()

    def k_factor_db(self) -> float:
        mp = np.sum(np.abs(self.multipath_part()) ** 2)
        if mp == 0:
            return math.inf
        return 10 * math.log10(np.sum(np.abs(self.los_part()) ** 2) / mp)


def _subcarrier_phases(num_subcarriers: int, spacing: float, delays: np.ndarray) -> np.ndarray:
    q = np.arange(num_subcarriers)[:, None]
    return np.exp(-1j * 2 * np.pi * q * spacing * np.asarray(delays)[None, :])


def synth_radar_channel(scenario: Scenario, rng: np.random.Generator) -> RadarChannel:
    '''bistatic single-bounce channel AP -> target -> PWR, direct path
       and clutter already removed'''
    ap = np.asarray(scenario.ap_position, dtype=float)
    pwr = np.asarray(scenario.pwr_position, dtype=float)
    pos = scenario.positions()
    d_tx = np.linalg.norm(pos - ap, axis=1)
    d_rx = np.linalg.norm(pos - pwr, axis=1)
    if np.any(d_tx < 1e-9) or np.any(d_rx < 1e-9):
        raise InvalidGeometryError("a target is co-located with the AP or the PWR")

    angles = scenario.angle_set()
    k = len(pos)
    delays = (d_tx + d_rx) / config.speed_of_light
    alpha = 1.0 / (d_tx * d_rx)
    if k:
        alpha = alpha / math.sqrt(np.mean(alpha ** 2))
    theta = rng.uniform(0.0, 2 * np.pi, k)

    beta = alpha[None, :] * _subcarrier_phases(scenario.num_subcarriers, scenario.subcarrier_spacing, delays) \
        * np.exp(1j * theta)[None, :]

    a_d = steering_matrix(angles.aod, scenario.ap_array.num_elements, scenario.ap_array.spacing)
    a_a = steering_matrix(angles.aoa, scenario.pwr_array.num_elements, scenario.pwr_array.spacing)
    channel = RadarChannel(np.empty(0), beta, a_d, a_a, angles, delays)
    channel.matrices = channel.reconstruct()
    return channel


def synth_comm_channel(scenario: Scenario, u: int, rng: np.random.Generator) -> CommChannel:
    '''AP -> client u: LoS path plus scattered paths K-factor dB weaker'''
    if not 0 <= u < scenario.num_clients:
        raise ChannelConfigurationError("client %s does not exist" % u)
    client = scenario.clients[u]
    k_factor = client.ricean_k_factor
    if math.isnan(k_factor) or k_factor == -math.inf:
        raise ChannelConfigurationError("ricean K-factor must be finite or +inf, got %s" % k_factor)

    q_count = scenario.num_subcarriers
    n_a = scenario.ap_array.num_elements
    n_u = client.array.num_elements
    ap = np.asarray(scenario.ap_position, dtype=float)
    pos = np.asarray(client.position, dtype=float)
    los_range = float(np.linalg.norm(pos - ap))
    if los_range < 1e-9:
        raise InvalidGeometryError("client %s is co-located with the AP" % u)

    los_aod = angle_of(scenario.ap_position, scenario.ap_array.boresight, client.position)
    los_aoa = angle_of(client.position, client.array.boresight, scenario.ap_position)
    los_phase = rng.uniform(0.0, 2 * np.pi)
    # unit power per client antenna
    los = _subcarrier_phases(q_count, scenario.subcarrier_spacing, [los_range / config.speed_of_light])[:, 0] \
        * np.exp(1j * los_phase)
    los_coefficients = los[:, None] * steering_matrix([los_aoa], n_u, client.array.spacing)[None, :, 0]

    paths = client.num_multipath if math.isfinite(k_factor) else 0
    limit = math.radians(config.music_grid_limit_deg)
    mp_aods = rng.uniform(-limit, limit, paths)
    mp_aoas = rng.uniform(-limit, limit, paths)
    lo, hi = config.multipath_excess_taps
    if not 1 <= lo <= hi:
        raise ChannelConfigurationError("multipath taps must satisfy 1 <= lo <= hi, got %s" % ((lo, hi),))
    tap = 1.0 / (q_count * scenario.subcarrier_spacing)
    mp_delays = los_range / config.speed_of_light + tap * rng.integers(lo, hi + 1, paths)
    mp_phases = rng.uniform(0.0, 2 * np.pi, paths)
    mp_gains = rng.uniform(0.5, 1.0, paths)

    mp = _subcarrier_phases(q_count, scenario.subcarrier_spacing, mp_delays) \
        * (mp_gains * np.exp(1j * mp_phases))[None, :]
    mp_coefficients = mp[:, None, :] * steering_matrix(mp_aoas, n_u, client.array.spacing)[None, :, :]

    channel = CommChannel(np.empty(0), los_coefficients, los_aod, mp_coefficients, mp_aods,
                          n_a, scenario.ap_array.spacing)
    if paths:
        # scale the scattered paths so the realized power ratio is the K-factor
        los_power = np.sum(np.abs(channel.los_part()) ** 2)
        mp_power = np.sum(np.abs(channel.multipath_part()) ** 2)
        channel.multipath_coefficients = mp_coefficients * math.sqrt(
            los_power / (mp_power * 10 ** (k_factor / 10)))
    channel.matrices = channel.reconstruct()
    return channel


########################################################################
#
#   CSI extraction

@dataclass
class CsiTensor:
    estimates: np.ndarray   # (Q, rows, N_A)
    noise_variance: float

    def __post_init__(self):
        self.estimates = np.asarray(self.estimates, dtype=complex)
        if self.estimates.ndim != 3:
            raise ChannelError("CSI must be a (Q, rows, cols) stack, got shape %s" % (self.estimates.shape,))

    @property
    def num_subcarriers(self) -> int:
        return self.estimates.shape[0]

    @property
    def shape(self):
        return self.estimates.shape

    HEADER = struct.Struct('<4sIIId')
    MAGIC = b'CSI1'

    def to_bytes(self) -> bytes:
        q, rows, cols = self.estimates.shape
        body = np.ascontiguousarray(self.estimates).astype('<c16').tobytes()
        return self.HEADER.pack(self.MAGIC, q, rows, cols, self.noise_variance) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "CsiTensor":
        try:
            magic, q, rows, cols, noise = cls.HEADER.unpack_from(data)
        except struct.error as e:
            raise ChannelError("truncated CSI header: %s" % e)
        if magic != cls.MAGIC:
            raise ChannelError("not a CSI dump")
        if len(data) < cls.HEADER.size + 16 * q * rows * cols:
            raise ChannelError("truncated CSI body")
        body = np.frombuffer(data, dtype='<c16', offset=cls.HEADER.size, count=q * rows * cols)
        return cls(body.reshape(q, rows, cols).copy(), noise)

    def dumps(self) -> str:
        q, rows, cols = self.estimates.shape
        return json.dumps({
            "dims": [q, rows, cols],
            "noise_variance": self.noise_variance,
            "re": self.estimates.real.tolist(),
            "im": self.estimates.imag.tolist(),
        })


def noise_variance_for_snr(snr_db: float, reference_power: float = 1.0) -> float:
    '''the SNR is the mean path power over the noise variance'''
    if math.isnan(snr_db):
        raise ChannelConfigurationError("snr_db must not be nan")
    if snr_db == math.inf:
        return 0.0
    return reference_power / 10 ** (snr_db / 10)


def observe_csi(matrices: np.ndarray, snr_db: float, rng: np.random.Generator,
                reference_power: float = 1.0, ndp: Optional[np.ndarray] = None) -> CsiTensor:
    '''receive the NDP through the channel and equalize it with S^H'''
    matrices = np.asarray(matrices, dtype=complex)
    if matrices.ndim != 3:
        raise ChannelError("channel must be a (Q, rows, N_A) stack")
    if snr_db == -math.inf or math.isnan(snr_db):
        raise ChannelConfigurationError("snr_db must be finite or +inf, got %s" % snr_db)
    sigma2 = noise_variance_for_snr(snr_db, reference_power)
    if sigma2 == 0:
        return CsiTensor(matrices.copy(), 0.0)

    n_a = matrices.shape[2]
    s = ndp if ndp is not None else ndp_signal(0, n_a)
    noise = math.sqrt(sigma2 / 2) * (rng.standard_normal(matrices.shape) + 1j * rng.standard_normal(matrices.shape))
    received = matrices @ s + noise
    return CsiTensor(received @ np.conj(s.T), sigma2)
