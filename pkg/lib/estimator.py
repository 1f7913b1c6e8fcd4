'''
Target localization at the PWR.

The radar CSI gives the sample covariance R^r, every intercepted BFF an
approximate client covariance R^c_u. MUSIC on R^r pre-estimates one
(AoD, AoA) pair per target, the client spectra pre-estimate one LoS AoD
per client, and the Hungarian algorithm ties client AoDs to radar AoDs.
The alternating summation then refines one target at a time over a
position grid, holding the others at their current estimates, with the
client likelihood added for targets that carry an association.
'''
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import linear_sum_assignment

import config
from channel import CsiTensor, joint_steering_vector, vectorize_csi
from scene import Geometry, NoIntersectionError, steering_matrix

log = logging.getLogger(__name__)


class DupFilter(object):
    def __init__(self):
        self.msgs = set()

    def filter(self, record):
        rv = record.msg not in self.msgs
        self.msgs.add(record.msg)
        return rv


class Duplogger():
    def __init__(self):
        self.log = logging.getLogger("%s.dupfree" % (__name__))
        dup_filter = DupFilter()
        self.log.addFilter(dup_filter)
    def logref(self):
        return self.log

duplog = Duplogger().logref()


class EstimatorError(ValueError):
    pass


class EstimatorConfigurationError(EstimatorError):
    pass


########################################################################
#
#   Covariances

@dataclass
class CovarianceSet:
    radar_cov: np.ndarray           # (N_A N_P, N_A N_P)
    client_covs: List[np.ndarray]   # C x (N_A, N_A)
    radar_noise_variance: float
    client_noise_variance: float
    num_subcarriers: int
    num_client_antennas: int
    n_ap: int
    n_pwr: int
    spacing: float = 0.5

    def effective_variances(self) -> Tuple[float, float]:
        '''noiseless CSI has no variance to weigh the likelihoods with,
           both sides then share the configured floor'''
        r = self.radar_noise_variance
        u = self.client_noise_variance
        if r <= 0 or u <= 0:
            floor = config.noiseless_variance_floor
            return (r if r > 0 else floor), (u if u > 0 else floor)
        return r, u


def radar_sample_cov(csi: CsiTensor) -> np.ndarray:
    '''(1/Q) sum_q vec(H_q) vec(H_q)^H'''
    h = vectorize_csi(csi.estimates)
    r = h.T @ np.conj(h) / h.shape[0]
    return (r + np.conj(r.T)) / 2


def client_sample_cov(csi: CsiTensor) -> np.ndarray:
    '''(1/(Q N_u)) sum_q H_q^H H_q from the full client CSI'''
    h = csi.estimates
    r = np.einsum('qua,qub->ab', np.conj(h), h) / (h.shape[0] * h.shape[1])
    return (r + np.conj(r.T)) / 2


########################################################################
#
#   MUSIC

def angle_grid(step_deg: float, limit_deg: Optional[float] = None) -> np.ndarray:
    limit_deg = config.music_grid_limit_deg if limit_deg is None else limit_deg
    if not step_deg > 0:
        raise EstimatorConfigurationError("grid step must be positive, got %s" % step_deg)
    n = int(round(2 * limit_deg / step_deg))
    return np.radians(np.linspace(-limit_deg, limit_deg, n + 1))


def _flat_tolerance(values: np.ndarray, rtol: float = 1e-12) -> float:
    finite = values[np.isfinite(values)]
    top = float(np.max(np.abs(finite))) if finite.size else 0.0
    return rtol * max(top, np.finfo(float).tiny)


def _strict_local_maxima(values: np.ndarray) -> np.ndarray:
    '''cells above all their neighbors by more than round-off'''
    footprint = np.ones((3,) * values.ndim, dtype=bool)
    footprint[(1,) * values.ndim] = False
    neighbors = maximum_filter(values, footprint=footprint, mode='constant', cval=-np.inf)
    return values > neighbors + _flat_tolerance(values)


@dataclass
class MusicPeaks:
    aod: np.ndarray
    aoa: np.ndarray
    heights: np.ndarray
    degenerate: bool
    noise_subspace: np.ndarray


def noise_subspace(r: np.ndarray, k: int) -> np.ndarray:
    '''eigenvectors beyond the k strongest'''
    _, vecs = np.linalg.eigh(r)
    return vecs[:, :r.shape[0] - k]


def music_spectrum_2d(g: np.ndarray, aod_grid: np.ndarray, aoa_grid: np.ndarray,
                      n_ap: int, n_pwr: int, spacing: float = 0.5) -> np.ndarray:
    '''1 / (a'^H G G^H a') on the (aod, aoa) grid'''
    g = g.reshape(n_ap, n_pwr, -1)
    a_d = steering_matrix(aod_grid, n_ap, spacing)
    a_a = steering_matrix(aoa_grid, n_pwr, spacing)
    proj = np.einsum('mnl,mi,nj->lij', np.conj(g), np.conj(a_d), a_a, optimize=True)
    denom = np.sum(np.abs(proj) ** 2, axis=0)
    return 1.0 / np.maximum(denom, np.finfo(float).tiny)


def music_2d(r: np.ndarray, k: int, n_ap: int, n_pwr: int, grid: Optional[np.ndarray] = None,
             spacing: float = 0.5) -> MusicPeaks:
    '''K highest strict local maxima of the joint AoD/AoA MUSIC spectrum'''
    m = r.shape[0]
    if not 0 < k < m:
        raise EstimatorConfigurationError("need 0 < K < %d, got %d" % (m, k))
    grid = angle_grid(config.music_grid_step_deg) if grid is None else np.asarray(grid)
    if grid.size == 0:
        raise EstimatorConfigurationError("empty MUSIC grid")

    g = noise_subspace(r, k)
    spectrum = music_spectrum_2d(g, grid, grid, n_ap, n_pwr, spacing)
    if np.max(spectrum) - np.min(spectrum) <= _flat_tolerance(spectrum):
        duplog.warning("MUSIC spectrum is flat, the noise subspace carries no direction")
    peaks = _strict_local_maxima(spectrum)
    i, j = np.nonzero(peaks)
    h = spectrum[i, j]
    order = np.lexsort((j, i, -h))
    i, j, h = i[order][:k], j[order][:k], h[order][:k]

    degenerate = False
    if len(i) < k:
        degenerate = True
        duplog.warning("MUSIC spectrum has fewer local maxima than targets, using the highest grid values")
        taken = np.zeros(spectrum.shape, dtype=bool)
        taken[i, j] = True
        flat = np.where(taken, -np.inf, spectrum).ravel()
        fill = np.lexsort((np.arange(flat.size), -flat))[:k - len(i)]
        fi, fj = np.unravel_index(fill, spectrum.shape)
        i, j = np.concatenate([i, fi]), np.concatenate([j, fj])
        h = spectrum[i, j]

    return MusicPeaks(grid[i], grid[j], h, degenerate, g)


class ClientPeak(NamedTuple):
    aod: float
    height: float
    degenerate: bool


def client_spectrum(r_u: np.ndarray, grid: np.ndarray, spacing: float = 0.5) -> np.ndarray:
    a = steering_matrix(grid, r_u.shape[0], spacing)
    return np.real(np.sum(np.conj(a) * (r_u @ a), axis=0))


def music_client(r_u: np.ndarray, grid: Optional[np.ndarray] = None, spacing: float = 0.5) -> ClientPeak:
    '''highest peak of a^H(phi) R_u a(phi)'''
    grid = angle_grid(config.client_grid_step_deg) if grid is None else np.asarray(grid)
    if grid.size == 0:
        raise EstimatorConfigurationError("empty client grid")
    spectrum = client_spectrum(r_u, grid, spacing)
    top = float(np.max(spectrum))
    tol = 1e-12 * max(abs(top), np.finfo(float).tiny)
    # lowest index among ties
    idx = int(np.argmax(spectrum >= top - tol))
    flat = (top - np.min(spectrum)) <= tol
    if flat:
        duplog.warning("client spectrum is flat, LoS AoD is arbitrary")
    return ClientPeak(float(grid[idx]), float(top), bool(flat))


########################################################################
#
#   Association

@dataclass
class Assignment:
    pairs: Dict[int, int] = field(default_factory=dict)     # client -> target
    costs: Dict[int, float] = field(default_factory=dict)   # client -> |delta aod|

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs.values()))

    def target_of(self, client: int) -> Optional[int]:
        return self.pairs.get(client)


# pass as gate to associate every client regardless of its AoD distance
NO_GATE = math.inf


def associate(client_aods: Sequence[float], radar_aods: Sequence[float],
              gate: Optional[float] = None) -> Assignment:
    '''minimum total |client AoD - radar AoD| assignment. With a finite
       gate, pairs beyond it are dropped, and so is a pair whose client
       has a second radar AoD inside the gate. gate=None means no gate.'''
    client_aods = np.asarray(client_aods, dtype=float)
    radar_aods = np.asarray(radar_aods, dtype=float)
    out = Assignment()
    if client_aods.size == 0 or radar_aods.size == 0:
        return out
    if client_aods.size > radar_aods.size:
        raise EstimatorError("more clients (%d) than targets (%d)" % (client_aods.size, radar_aods.size))
    cost = np.abs(client_aods[:, None] - radar_aods[None, :])
    finite = np.isfinite(cost)
    gated = gate is not None and math.isfinite(gate)
    # unknown angles can be assigned but never associated
    rows, cols = linear_sum_assignment(np.where(finite, cost, 4 * math.pi))
    for u, k in zip(rows, cols):
        if not finite[u, k]:
            continue
        if gated and cost[u, k] > gate:
            log.debug("client %d not associated, nearest AoD %.2f deg away" % (u, math.degrees(cost[u, k])))
            continue
        if gated and np.count_nonzero(finite[u] & (cost[u] <= gate)) > 1:
            log.debug("client %d not associated, several radar AoDs within the gate" % u)
            continue
        out.pairs[int(u)] = int(k)
        out.costs[int(u)] = float(cost[u, k])
    return out


########################################################################
#
#   Likelihoods

class Loglik(NamedTuple):
    value: float
    degenerate: bool


def _variance(noise_variance: float) -> float:
    return noise_variance if noise_variance > 0 else config.noiseless_variance_floor


def loglik_radar(aod, aoa, radar_cov: np.ndarray, noise_variance: float, num_subcarriers: int,
                 n_ap: int, n_pwr: int, spacing: float = 0.5) -> Loglik:
    '''(Q / 2 sigma^2) Tr{A'(A')^+ R}'''
    a = joint_steering_vector(np.atleast_1d(aod), np.atleast_1d(aoa), n_ap, n_pwr, spacing)
    s = np.linalg.svd(a, compute_uv=False)
    degenerate = bool(s.min() <= 1e-6 * s.max())
    if degenerate:
        gram = np.conj(a.T) @ a
        lam = config.tikhonov_scale * np.real(np.trace(gram))
        proj = a @ np.linalg.solve(gram + lam * np.eye(gram.shape[0]), np.conj(a.T))
        tr = np.real(np.trace(proj @ radar_cov))
        duplog.info("rank deficient steering matrix, using regularized projector")
    else:
        q, _ = np.linalg.qr(a)
        tr = np.real(np.trace(np.conj(q.T) @ radar_cov @ q))
    return Loglik(float(num_subcarriers / (2 * _variance(noise_variance)) * tr), degenerate)


def loglik_radar_residual(aod, aoa, csi: CsiTensor, noise_variance: float,
                          n_ap: int, n_pwr: int, spacing: float = 0.5) -> float:
    '''-(1 / 2 sigma^2) sum_q || h_q - A' beta_q ||^2 with the least
       squares beta_q substituted'''
    a = joint_steering_vector(np.atleast_1d(aod), np.atleast_1d(aoa), n_ap, n_pwr, spacing)
    h = vectorize_csi(csi.estimates).T
    beta = np.linalg.lstsq(a, h, rcond=None)[0]
    residual = np.sum(np.abs(h - a @ beta) ** 2)
    return float(-residual / (2 * _variance(noise_variance)))


def loglik_client(aod: float, client_cov: np.ndarray, noise_variance: float, num_subcarriers: int,
                  num_client_antennas: int, spacing: float = 0.5) -> float:
    '''(Q N_u / 2 sigma^2) a^H R a / N_A'''
    n_a = client_cov.shape[0]
    a = steering_matrix([aod], n_a, spacing)[:, 0]
    quad = np.real(np.conj(a) @ client_cov @ a)
    return float(num_subcarriers * num_client_antennas / (2 * _variance(noise_variance)) * quad / n_a)


########################################################################
#
#   Pre-estimation

@dataclass
class PreEstimate:
    radar_aod: np.ndarray           # (K,)
    radar_aoa: np.ndarray           # (K,)
    peak_height: np.ndarray         # (K,)
    client_of_target: np.ndarray    # (K,) client index or -1
    client_aod: np.ndarray          # (K,) associated client AoD or nan
    client_aods: np.ndarray         # (C,) every client's pre-estimate
    noise_subspace: np.ndarray
    degenerate: bool = False

    @property
    def num_targets(self) -> int:
        return len(self.radar_aod)

    @property
    def associated(self) -> np.ndarray:
        return self.client_of_target >= 0

    def without_association(self) -> "PreEstimate":
        k = self.num_targets
        return replace(self, client_of_target=np.full(k, -1), client_aod=np.full(k, np.nan))

    def permuted(self, order: Sequence[int]) -> "PreEstimate":
        order = np.asarray(order)
        return replace(self, radar_aod=self.radar_aod[order], radar_aoa=self.radar_aoa[order],
                       peak_height=self.peak_height[order],
                       client_of_target=self.client_of_target[order],
                       client_aod=self.client_aod[order])


def default_gate() -> float:
    '''configured association gate in radians, NO_GATE when disabled'''
    if config.association_gate_deg is None:
        return NO_GATE
    return math.radians(config.association_gate_deg)


def pre_estimate(covs: CovarianceSet, k: int, *, music_grid: Optional[np.ndarray] = None,
                 client_grid: Optional[np.ndarray] = None, gate: Optional[float] = None) -> PreEstimate:
    '''MUSIC pre-estimates, client LoS AoDs and their association.
       gate=None uses the configured gate, NO_GATE turns it off.'''
    gate = default_gate() if gate is None else gate
    if math.isnan(gate) or gate < 0:
        raise EstimatorConfigurationError("association gate must be >= 0, got %s" % gate)
    peaks = music_2d(covs.radar_cov, k, covs.n_ap, covs.n_pwr, music_grid, covs.spacing)
    client_peaks = [music_client(r_u, client_grid, covs.spacing) for r_u in covs.client_covs]
    client_aods = np.array([p.aod for p in client_peaks], dtype=float)
    assignment = associate(client_aods, peaks.aod, gate)

    client_of_target = np.full(k, -1)
    client_aod = np.full(k, np.nan)
    for u, t in assignment.pairs.items():
        client_of_target[t] = u
        client_aod[t] = client_aods[u]
    return PreEstimate(peaks.aod, peaks.aoa, peaks.heights, client_of_target, client_aod,
                       client_aods, peaks.noise_subspace, peaks.degenerate)


########################################################################
#
#   Localization

@dataclass(frozen=True)
class SearchConfig:
    coarse_step: float = field(default_factory=lambda: config.position_grid_step)
    refine_step: Optional[float] = field(default_factory=lambda: config.position_refine_step)
    refine_window: float = field(default_factory=lambda: config.position_refine_window)
    max_passes: int = field(default_factory=lambda: config.as_max_passes)
    tolerance: float = field(default_factory=lambda: config.as_tolerance)
    single_pass: bool = field(default_factory=lambda: config.as_single_pass)
    region: Optional[Tuple[float, float, float, float]] = None

    def __post_init__(self):
        if not self.coarse_step > 0:
            raise EstimatorConfigurationError("coarse_step must be positive")
        if self.refine_step is not None and not self.refine_step > 0:
            raise EstimatorConfigurationError("refine_step must be positive")
        if self.max_passes < 1:
            raise EstimatorConfigurationError("max_passes must be >= 1")


@dataclass
class LocalizationResult:
    method: str
    positions: np.ndarray   # (K, 2), nan where the method gave up
    associated: np.ndarray  # (K,)
    objective: np.ndarray   # (K,)
    degenerate: np.ndarray  # (K,)
    wall_time: float
    passes: int = 0

    @property
    def num_targets(self) -> int:
        return len(self.positions)

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.positions), axis=1)


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1)


def position_grid(region, step: float) -> np.ndarray:
    xmin, xmax, ymin, ymax = region
    if not all(math.isfinite(v) for v in region) or xmax < xmin or ymax < ymin:
        raise EstimatorConfigurationError("empty search region %s" % (region,))
    xs, ys = _axis(xmin, xmax, step), _axis(ymin, ymax, step)
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    return np.column_stack([gx.ravel(), gy.ravel()])


class _Candidates(object):
    '''positions with their radar angles and steering vectors'''
    def __init__(self, points, geometry: Geometry, n_ap, n_pwr, spacing):
        self.points = points
        self.aod, self.aoa = geometry.radar_angles(points)
        self.valid = np.isfinite(self.aod) & np.isfinite(self.aoa)
        aod = np.where(self.valid, self.aod, 0.0)
        aoa = np.where(self.valid, self.aoa, 0.0)
        self.joint = joint_steering_vector(aod, aoa, n_ap, n_pwr, spacing)
        self.aod_steering = steering_matrix(aod, n_ap, spacing)


def _orth_basis(a: np.ndarray) -> Tuple[np.ndarray, bool]:
    if a.shape[1] == 0:
        return a, False
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    keep = s > 1e-6 * s.max()
    return u[:, keep], bool(not np.all(keep))


class _Objective(object):
    '''per-target objective of the alternating summation'''
    def __init__(self, covs: CovarianceSet):
        self.covs = covs
        s_r, s_u = covs.effective_variances()
        self.radar_scale = covs.num_subcarriers / (2 * s_r)
        self.client_scale = covs.num_subcarriers * covs.num_client_antennas / (2 * s_u) / covs.n_ap

    def evaluate(self, cands: _Candidates, others_joint: np.ndarray, client: int):
        r = self.covs.radar_cov
        m = r.shape[0]
        basis, rank_deficient = _orth_basis(others_joint)
        base = np.real(np.trace(np.conj(basis.T) @ r @ basis)) if basis.shape[1] else 0.0
        # projector onto [others, candidate] is the others' projector plus
        # the normalized residual of the candidate column
        w = cands.joint - basis @ (np.conj(basis.T) @ cands.joint)
        den = np.sum(np.abs(w) ** 2, axis=0)
        num = np.real(np.sum(np.conj(w) * (r @ w), axis=0))
        lam = config.tikhonov_scale * m
        obj = self.radar_scale * (base + num / (den + lam))
        if client >= 0:
            r_u = self.covs.client_covs[client]
            a = cands.aod_steering
            obj = obj + self.client_scale * np.real(np.sum(np.conj(a) * (r_u @ a), axis=0))
        obj = np.where(cands.valid, obj, -np.inf)
        degenerate = rank_deficient | (den < 1e-6 * m)
        return obj, degenerate


def _coincident(aod, aoa, n_ap, n_pwr, spacing) -> np.ndarray:
    '''targets whose joint steering vector matches another one'''
    a = joint_steering_vector(aod, aoa, n_ap, n_pwr, spacing)
    corr = np.abs(np.conj(a.T) @ a) / a.shape[0]
    np.fill_diagonal(corr, 0.0)
    return np.any(corr > 1 - 1e-9, axis=1)


def _initial_positions(preest: PreEstimate, geometry: Geometry) -> np.ndarray:
    out = np.full((preest.num_targets, 2), np.nan)
    for i in range(preest.num_targets):
        try:
            out[i] = geometry.triangulate(preest.radar_aod[i], preest.radar_aoa[i])
        except NoIntersectionError:
            pass
    return out


def _alternating_summation(method: str, preest: PreEstimate, covs: CovarianceSet,
                           geometry: Geometry, search: Optional[SearchConfig]) -> LocalizationResult:
    start = time.perf_counter()
    search = search or SearchConfig()
    region = search.region or geometry.coverage
    n_ap, n_pwr, sp = covs.n_ap, covs.n_pwr, covs.spacing
    k = preest.num_targets

    coarse = _Candidates(position_grid(region, search.coarse_step), geometry, n_ap, n_pwr, sp)
    objective = _Objective(covs)
    aod = preest.radar_aod.astype(float).copy()
    aoa = preest.radar_aoa.astype(float).copy()
    positions = _initial_positions(preest, geometry)
    values = np.full(k, -np.inf)
    degenerate = _coincident(aod, aoa, n_ap, n_pwr, sp) if k > 1 else np.zeros(k, dtype=bool)
    clients = preest.client_of_target
    order = np.argsort(-preest.peak_height, kind='stable')
    xmin, xmax, ymin, ymax = region

    passes = 0
    while passes < search.max_passes:
        passes += 1
        previous = positions.copy()
        for i in order:
            others = np.array([j for j in range(k) if j != i], dtype=int)
            others_joint = joint_steering_vector(aod[others], aoa[others], n_ap, n_pwr, sp)
            obj, flags = objective.evaluate(coarse, others_joint, clients[i])
            best = int(np.argmax(obj))
            if not np.isfinite(obj[best]):
                degenerate[i] = True
                continue
            point, flag, value = coarse.points[best], flags[best], obj[best]
            if search.refine_step:
                w = search.refine_window
                window = (max(xmin, point[0] - w), min(xmax, point[0] + w),
                          max(ymin, point[1] - w), min(ymax, point[1] + w))
                fine = _Candidates(position_grid(window, search.refine_step), geometry, n_ap, n_pwr, sp)
                f_obj, f_flags = objective.evaluate(fine, others_joint, clients[i])
                f_best = int(np.argmax(f_obj))
                if f_obj[f_best] >= obj[best]:
                    point, flag, value = fine.points[f_best], f_flags[f_best], f_obj[f_best]
            positions[i] = point
            values[i] = value
            a_d, a_a = geometry.radar_angles(point[None, :])
            aod[i], aoa[i] = a_d[0], a_a[0]
            degenerate[i] |= bool(flag)

        moved = np.linalg.norm(positions - previous, axis=1)
        moved[~np.isfinite(moved)] = np.inf
        if search.single_pass or np.all(moved < search.tolerance):
            break

    # values hold each target's maximized objective from the last pass
    s_r, _ = covs.effective_variances()
    radar = loglik_radar(aod, aoa, covs.radar_cov, s_r, covs.num_subcarriers, n_ap, n_pwr, sp)
    log.debug("%s converged after %d passes" % (method, passes))
    return LocalizationResult(method, positions, preest.associated.copy(), values,
                              degenerate | radar.degenerate, time.perf_counter() - start, passes)


def localize_hybrid_as(preest: PreEstimate, covs: CovarianceSet, geometry: Geometry,
                       search: Optional[SearchConfig] = None) -> LocalizationResult:
    '''associative alternating summation: radar likelihood plus the
       client likelihood for every associated target'''
    return _alternating_summation("hybrid_as", preest, covs, geometry, search)


def localize_ndp_as(preest: PreEstimate, covs: CovarianceSet, geometry: Geometry,
                    search: Optional[SearchConfig] = None) -> LocalizationResult:
    return _alternating_summation("ndp_as", preest.without_association(), covs, geometry, search)


def _clip(point: np.ndarray, region) -> np.ndarray:
    xmin, xmax, ymin, ymax = region
    return np.array([min(max(point[0], xmin), xmax), min(max(point[1], ymin), ymax)])


def _triangulated(method: str, preest: PreEstimate, geometry: Geometry, aods: np.ndarray,
                  associated: np.ndarray, region=None) -> LocalizationResult:
    start = time.perf_counter()
    region = region or geometry.coverage
    k = preest.num_targets
    positions = np.full((k, 2), np.nan)
    degenerate = np.zeros(k, dtype=bool)
    for i in range(k):
        try:
            positions[i] = _clip(geometry.triangulate(aods[i], preest.radar_aoa[i]), region)
        except NoIntersectionError:
            log.debug("%s: no intersection for target %d" % (method, i))
            degenerate[i] = True
    return LocalizationResult(method, positions, associated, preest.peak_height.astype(float).copy(),
                              degenerate | preest.degenerate, time.perf_counter() - start)


def localize_music_ndp(preest: PreEstimate, geometry: Geometry, region=None) -> LocalizationResult:
    '''triangulate every MUSIC (AoD, AoA) pair'''
    return _triangulated("music_ndp", preest, geometry, preest.radar_aod,
                         np.zeros(preest.num_targets, dtype=bool), region)


def localize_music_bff(preest: PreEstimate, geometry: Geometry, region=None) -> LocalizationResult:
    '''as music_ndp, with the associated client AoD in place of the radar AoD'''
    associated = preest.associated
    aods = np.where(associated, preest.client_aod, preest.radar_aod)
    return _triangulated("music_bff", preest, geometry, aods, associated.copy(), region)


def localize_music_map(preest: PreEstimate, covs: CovarianceSet, geometry: Geometry,
                       search: Optional[SearchConfig] = None) -> LocalizationResult:
    '''radar MUSIC pseudo-spectrum and client spectra on one x-y map.
       Every client spectrum is scaled to a unit peak and the radar
       pseudo-spectrum is weighted by one plus their sum, which lifts
       radar peaks lying on a client's LoS direction.'''
    start = time.perf_counter()
    search = search or SearchConfig()
    region = search.region or geometry.coverage
    n_ap, n_pwr, sp = covs.n_ap, covs.n_pwr, covs.spacing
    k = preest.num_targets
    xmin, xmax, ymin, ymax = region

    client_grid = angle_grid(config.client_grid_step_deg)
    client_tops = [np.max(client_spectrum(r_u, client_grid, sp)) for r_u in covs.client_covs]

    def _map(cands: _Candidates) -> np.ndarray:
        g = preest.noise_subspace
        proj = np.conj(g.T) @ cands.joint
        radar = 1.0 / np.maximum(np.sum(np.abs(proj) ** 2, axis=0), 1e-300)
        boost = np.ones(len(cands.points))
        for r_u, top in zip(covs.client_covs, client_tops):
            if top > 0:
                spectrum = np.real(np.sum(np.conj(cands.aod_steering) * (r_u @ cands.aod_steering), axis=0))
                boost += np.clip(spectrum / top, 0.0, None)
        return np.where(cands.valid, radar * boost, -np.inf)

    xs = _axis(xmin, xmax, search.coarse_step)
    ys = _axis(ymin, ymax, search.coarse_step)
    coarse = _Candidates(position_grid(region, search.coarse_step), geometry, n_ap, n_pwr, sp)
    values = _map(coarse)
    surface = values.reshape(len(xs), len(ys))
    maxima = _strict_local_maxima(np.where(np.isfinite(surface), surface, -np.inf))
    idx = np.flatnonzero(maxima.ravel())
    idx = idx[np.lexsort((idx, -values[idx]))][:k]
    degenerate = np.zeros(k, dtype=bool)
    if len(idx) < k:
        duplog.warning("position map has fewer local maxima than targets")
        rest = np.setdiff1d(np.arange(len(values)), idx)
        rest = rest[np.lexsort((rest, -values[rest]))][:k - len(idx)]
        degenerate[len(idx):] = True
        idx = np.concatenate([idx, rest])

    positions = coarse.points[idx].astype(float)
    heights = values[idx].astype(float)
    if search.refine_step:
        w = search.refine_window
        for i, p in enumerate(positions):
            window = (max(xmin, p[0] - w), min(xmax, p[0] + w), max(ymin, p[1] - w), min(ymax, p[1] + w))
            fine = _Candidates(position_grid(window, search.refine_step), geometry, n_ap, n_pwr, sp)
            f_values = _map(fine)
            best = int(np.argmax(f_values))
            if f_values[best] > heights[i]:
                positions[i], heights[i] = fine.points[best], f_values[best]

    associated = np.zeros(k, dtype=bool)
    if len(preest.client_aods):
        aods, _ = geometry.radar_angles(positions)
        assignment = associate(preest.client_aods, aods, default_gate())
        associated[list(assignment.pairs.values())] = True
    return LocalizationResult("music_map", positions, associated, heights, degenerate,
                              time.perf_counter() - start)


def _wrap_triangulated(fn):
    def run(preest, covs, geometry, search=None):
        return fn(preest, geometry, search.region if search else None)
    return run


METHODS: Dict[str, Callable[..., LocalizationResult]] = {
    "music_ndp": _wrap_triangulated(localize_music_ndp),
    "music_bff": _wrap_triangulated(localize_music_bff),
    "ndp_as": localize_ndp_as,
    "hybrid_as": localize_hybrid_as,
    "music_map": localize_music_map,
}
