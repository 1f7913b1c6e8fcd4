'''
Client side beamforming feedback (802.11ax compressed, MU-MIMO, one
stream) and its interception at the PWR.

A client decomposes every subcarrier of its CSI, keeps the right singular
vector of the strongest stream, encodes it as Givens angles and reports
the stream gain as an average SNR plus a per-subcarrier delta. The PWR
undoes all of it and rebuilds an approximate channel covariance.
'''
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

import config
from channel import CsiTensor

log = logging.getLogger(__name__)


class BffError(ValueError):
    pass


class BffInputError(BffError):
    pass


class BffConfigurationError(BffError):
    pass


class BffFormatError(BffError):
    pass


AVG_SNR_MIN = -10.0
AVG_SNR_MAX = 53.75
AVG_SNR_STEP = 0.25
AVG_SNR_BITS = 8
DELTA_SNR_MIN = -8
DELTA_SNR_MAX = 7
DELTA_SNR_BITS = 4


@dataclass(frozen=True)
class QuantizationConfig:
    phi_bits: int = field(default_factory=lambda: config.bff_phi_bits)
    psi_bits: int = field(default_factory=lambda: config.bff_psi_bits)

    def __post_init__(self):
        if self.phi_bits <= 0 or self.psi_bits <= 0:
            raise BffConfigurationError("angle bit widths must be positive, got (%s, %s)"
                                        % (self.phi_bits, self.psi_bits))


@dataclass
class SvdTriple:
    u: np.ndarray   # (Q, N_u, r)
    s: np.ndarray   # (Q, r) descending
    v: np.ndarray   # (Q, N_A, r), columns are right singular vectors

    def reconstruct(self) -> np.ndarray:
        return np.einsum('qur,qr,qar->qua', self.u, self.s, np.conj(self.v))


def client_svd(csi: CsiTensor) -> SvdTriple:
    '''economy SVD per subcarrier; each right singular vector is rotated
       so its last entry is real and non-negative'''
    u, s, vh = np.linalg.svd(csi.estimates, full_matrices=False)
    v = np.conj(np.swapaxes(vh, 1, 2))
    last = v[:, -1, :]
    phase = np.ones_like(last)
    nz = np.abs(last) > 0
    phase[nz] = np.conj(last[nz]) / np.abs(last[nz])
    v = v * phase[:, None, :]
    u = u * phase[:, None, :]
    return SvdTriple(u, s, v)


########################################################################
#
#   Givens angles
#
# For a unit vector v with real non-negative last entry:
#   phi_l = arg(v_l) for l = 1 .. N-1, which leaves a real vector x >= 0
#   then, folding x_2 .. x_N into x_1 one at a time,
#   psi_l = atan2(r, x_l), r <- hypot(r, x_l), with r starting at x_1.
# A basis vector e_1 maps to psi = pi/2, e_N to psi = 0.

def _phase_normalize(v: np.ndarray) -> np.ndarray:
    last = v[..., -1]
    mag = np.abs(last)
    phase = np.where(mag > 0, np.conj(last) / np.where(mag > 0, mag, 1), 1)
    return v * phase[..., None]


def compress_v(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    '''(..., N) unit vectors -> ((..., N-1) phi, (..., N-1) psi)'''
    v = np.asarray(v, dtype=complex)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(norms == 0):
        raise BffInputError("cannot compress a zero vector")
    if np.any(np.abs(norms - 1) > 1e-9):
        raise BffInputError("feedback vectors must have unit norm")
    v = _phase_normalize(v)
    n = v.shape[-1]
    phi = np.mod(np.angle(v[..., :-1]), 2 * np.pi)
    x = np.abs(v)
    psi = np.empty(v.shape[:-1] + (n - 1,))
    r = x[..., 0]
    for l in range(1, n):
        psi[..., l - 1] = np.arctan2(r, x[..., l])
        r = np.hypot(r, x[..., l])
    return phi, psi


def decompress_v(phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    n = psi.shape[-1] + 1
    x = np.empty(psi.shape[:-1] + (n,))
    r = np.ones(psi.shape[:-1])
    for l in range(n - 1, 0, -1):
        x[..., l] = r * np.cos(psi[..., l - 1])
        r = r * np.sin(psi[..., l - 1])
    x[..., 0] = r
    v = x.astype(complex)
    v[..., :-1] *= np.exp(1j * phi)
    return v


def quantize_angles(phi: np.ndarray, psi: np.ndarray, phi_bits: int, psi_bits: int) -> Tuple[np.ndarray, np.ndarray]:
    '''mid-rise grids: phi on (k + 1/2) 2pi / 2^b, psi on (k + 1/2) pi / 2^(b+1)'''
    QuantizationConfig(phi_bits, psi_bits)
    phi_step = 2 * np.pi / 2 ** phi_bits
    psi_step = np.pi / 2 ** (psi_bits + 1)
    phi_idx = np.mod(np.floor(np.mod(phi, 2 * np.pi) / phi_step), 2 ** phi_bits).astype(np.int64)
    psi_idx = np.clip(np.floor(np.asarray(psi) / psi_step), 0, 2 ** psi_bits - 1).astype(np.int64)
    return phi_idx, psi_idx


def dequantize_angles(phi_idx: np.ndarray, psi_idx: np.ndarray, phi_bits: int, psi_bits: int) -> Tuple[np.ndarray, np.ndarray]:
    QuantizationConfig(phi_bits, psi_bits)
    phi = (np.asarray(phi_idx) + 0.5) * 2 * np.pi / 2 ** phi_bits
    psi = (np.asarray(psi_idx) + 0.5) * np.pi / 2 ** (psi_bits + 1)
    return phi, psi


########################################################################
#
#   Stream gain

def quantize_gain(sigma1: np.ndarray, noise_variance: float) -> Tuple[int, np.ndarray]:
    '''returns (avg index, delta indices). avg is 8 bits of 0.25 dB from
       -10 dB, delta is 4 bits of 1 dB from -8 dB'''
    sigma1 = np.asarray(sigma1, dtype=float)
    if np.any(~(sigma1 > 0)):
        raise BffInputError("stream gains must be positive")
    if not noise_variance > 0:
        raise BffInputError("noise variance must be positive, got %s" % noise_variance)
    snr = 10 * np.log10(sigma1 ** 2 / noise_variance)
    avg = float(np.mean(snr))
    avg_q = min(max(round(avg / AVG_SNR_STEP) * AVG_SNR_STEP, AVG_SNR_MIN), AVG_SNR_MAX)
    avg_idx = int(round((avg_q - AVG_SNR_MIN) / AVG_SNR_STEP))
    delta = np.clip(np.rint(snr - avg), DELTA_SNR_MIN, DELTA_SNR_MAX)
    return avg_idx, (delta - DELTA_SNR_MIN).astype(np.int64)


def dequantize_gain(avg_idx: int, delta_idx: np.ndarray, noise_variance: float) -> np.ndarray:
    snr = AVG_SNR_MIN + avg_idx * AVG_SNR_STEP + (np.asarray(delta_idx) + DELTA_SNR_MIN)
    return np.sqrt(noise_variance * 10 ** (snr / 10))


########################################################################
#
#   Report

@dataclass
class BffReport:
    client: int
    phi_idx: np.ndarray     # (Q, N_A - 1)
    psi_idx: np.ndarray     # (Q, N_A - 1)
    avg_snr_idx: int
    delta_snr_idx: np.ndarray   # (Q,)
    quantization: QuantizationConfig
    num_client_antennas: int
    noise_variance: float

    @property
    def num_subcarriers(self) -> int:
        return self.phi_idx.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.phi_idx.shape[1] + 1

    @property
    def avg_snr_db(self) -> float:
        return AVG_SNR_MIN + self.avg_snr_idx * AVG_SNR_STEP

    @property
    def delta_snr_db(self) -> np.ndarray:
        return self.delta_snr_idx + DELTA_SNR_MIN

    def angles(self) -> Tuple[np.ndarray, np.ndarray]:
        return dequantize_angles(self.phi_idx, self.psi_idx,
                                 self.quantization.phi_bits, self.quantization.psi_bits)

    def feedback_vectors(self) -> np.ndarray:
        return decompress_v(*self.angles())

    def stream_gains(self) -> np.ndarray:
        return dequantize_gain(self.avg_snr_idx, self.delta_snr_idx, self.noise_variance)

    ####################################################################
    # wire format: header, avg index (8 bits), then per subcarrier the
    # delta index (4 bits) and the angle indices phi_1..phi_{N-1},
    # psi_1..psi_{N-1}, all packed LSB first

    HEADER = struct.Struct('<HHBBBBd')

    def _field_widths(self) -> np.ndarray:
        n = self.num_antennas - 1
        per_q = [DELTA_SNR_BITS] + [self.quantization.phi_bits] * n + [self.quantization.psi_bits] * n
        return np.array([AVG_SNR_BITS] + per_q * self.num_subcarriers)

    def to_bytes(self) -> bytes:
        fields = np.concatenate([
            [self.avg_snr_idx],
            np.column_stack([self.delta_snr_idx, self.phi_idx, self.psi_idx]).ravel(),
        ]).astype(np.int64)
        widths = self._field_widths()
        bits = (fields[:, None] >> np.arange(widths.max())[None, :]) & 1
        bits = bits[np.arange(widths.max())[None, :] < widths[:, None]]
        header = self.HEADER.pack(self.client, self.num_subcarriers, self.quantization.phi_bits,
                                  self.quantization.psi_bits, self.num_antennas,
                                  self.num_client_antennas, self.noise_variance)
        return header + np.packbits(bits.astype(np.uint8), bitorder='little').tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BffReport":
        try:
            client, q, phi_bits, psi_bits, n_a, n_u, noise = cls.HEADER.unpack_from(data)
        except struct.error as e:
            raise BffFormatError("truncated BFF header: %s" % e)
        n = n_a - 1
        widths = np.array([AVG_SNR_BITS] + ([DELTA_SNR_BITS] + [phi_bits] * n + [psi_bits] * n) * q)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=cls.HEADER.size), bitorder='little')
        if bits.size < widths.sum():
            raise BffFormatError("truncated BFF body")
        bits = bits[:widths.sum()].astype(np.int64)
        ends = np.cumsum(widths)
        starts = ends - widths
        # bit positions inside each field
        offsets = np.arange(widths.sum()) - np.repeat(starts, widths)
        values = np.zeros(len(widths), dtype=np.int64)
        np.add.at(values, np.repeat(np.arange(len(widths)), widths), bits << offsets)
        per_q = values[1:].reshape(q, 1 + 2 * n)
        return cls(client, per_q[:, 1:1 + n], per_q[:, 1 + n:], int(values[0]), per_q[:, 0],
                   QuantizationConfig(phi_bits, psi_bits), n_u, noise)

    def dumps(self) -> str:
        phi, psi = self.angles()
        return json.dumps({
            "client": self.client,
            "num_subcarriers": self.num_subcarriers,
            "num_antennas": self.num_antennas,
            "num_client_antennas": self.num_client_antennas,
            "phi_bits": self.quantization.phi_bits,
            "psi_bits": self.quantization.psi_bits,
            "noise_variance": self.noise_variance,
            "avg_snr_db": self.avg_snr_db,
            "delta_snr_db": self.delta_snr_db.tolist(),
            "phi": phi.tolist(),
            "psi": psi.tolist(),
        }, indent=1)


def build_bff(csi: CsiTensor, noise_variance: Optional[float] = None, *, client: int = 0,
              quantization: Optional[QuantizationConfig] = None) -> BffReport:
    '''feedback of client `client`: SVD, strongest column, Givens angles,
       quantized stream gain'''
    quantization = quantization or QuantizationConfig()
    if noise_variance is None:
        noise_variance = csi.noise_variance
    if not noise_variance > 0:
        noise_variance = config.bff_noiseless_reference_variance

    svd = client_svd(csi)
    v1 = svd.v[:, :, 0]
    sigma1 = svd.s[:, 0]
    phi, psi = compress_v(v1)
    phi_idx, psi_idx = quantize_angles(phi, psi, quantization.phi_bits, quantization.psi_bits)
    floor = np.finfo(float).tiny
    avg_idx, delta_idx = quantize_gain(np.maximum(sigma1, floor), noise_variance)
    return BffReport(client, phi_idx, psi_idx, avg_idx, delta_idx, quantization,
                     csi.estimates.shape[1], float(noise_variance))


def approx_covariance(report: BffReport) -> np.ndarray:
    '''(1 / (Q N_u)) sum_q v sigma^2 v^H from the dequantized feedback.
       The gain enters squared so the result matches H^H H / (Q N_u).'''
    v = report.feedback_vectors()
    g2 = report.stream_gains() ** 2
    r = np.einsum('q,qa,qb->ab', g2, v, np.conj(v)) / (report.num_subcarriers * report.num_client_antennas)
    return (r + np.conj(r.T)) / 2
