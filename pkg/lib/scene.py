import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config

log = logging.getLogger(__name__)

Point = Tuple[float, float]

HALF_PI = math.pi / 2


class SceneError(ValueError):
    pass


class InvalidInputError(SceneError):
    pass


class OutOfFieldError(SceneError):
    pass


class NoIntersectionError(SceneError):
    pass


class InfeasibleGeometryError(SceneError):
    pass


class ConfigurationError(SceneError):
    pass


def _unit(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if v.shape != (2,) or not np.isfinite(norm) or norm == 0:
        raise InvalidInputError("boresight must be a non-zero 2D vector, got %s" % (v,))
    return v / norm


def _clockwise(b: np.ndarray) -> np.ndarray:
    # +90 degrees clockwise of the boresight, the positive angle side
    return np.array([b[1], -b[0]])


@dataclass(frozen=True)
class ArrayConfig:
    num_elements: int
    spacing: float = 0.5
    boresight: Point = (0.0, 1.0)

    def __post_init__(self):
        if int(self.num_elements) != self.num_elements or self.num_elements < 1:
            raise ConfigurationError("num_elements must be a positive integer, got %s" % self.num_elements)
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ConfigurationError("spacing must be positive, got %s" % self.spacing)
        b = np.asarray(self.boresight, dtype=float)
        if b.shape != (2,) or abs(np.linalg.norm(b) - 1.0) > 1e-9:
            raise ConfigurationError("boresight must have unit norm, got %s" % (self.boresight,))


@dataclass(frozen=True)
class ClientNode:
    position: Point
    array: ArrayConfig
    num_multipath: int = 3
    ricean_k_factor: float = 15.0

    def __post_init__(self):
        if self.num_multipath < 0:
            raise ConfigurationError("num_multipath must be >= 0, got %s" % self.num_multipath)
        if math.isnan(self.ricean_k_factor) or self.ricean_k_factor < 0:
            raise ConfigurationError("ricean_k_factor must be >= 0 dB, got %s" % self.ricean_k_factor)


@dataclass(frozen=True)
class Target:
    position: Point
    is_client: bool


@dataclass(frozen=True)
class AngleSet:
    aod: np.ndarray
    aoa: np.ndarray
    client_los_aod: np.ndarray

    def __post_init__(self):
        for name in ("aod", "aoa", "client_los_aod"):
            a = np.asarray(getattr(self, name), dtype=float)
            if np.any(np.abs(a) >= HALF_PI):
                raise OutOfFieldError("%s outside (-pi/2, pi/2): %s" % (name, a))


@dataclass(frozen=True)
class Geometry:
    '''the fixed part of a scenario: where the AP and PWR are and how
       their arrays look, plus the rectangle targets live in'''
    ap_position: Point
    pwr_position: Point
    ap_array: ArrayConfig
    pwr_array: ArrayConfig
    coverage: Tuple[float, float, float, float]

    def radar_angles(self, points) -> Tuple[np.ndarray, np.ndarray]:
        '''vectorized (aod, aoa) for an (n, 2) array of points. Points
           outside the field of either array come back as nan'''
        aod = angles_of(self.ap_position, self.ap_array.boresight, points)
        aoa = angles_of(self.pwr_position, self.pwr_array.boresight, points)
        return aod, aoa

    def triangulate(self, aod: float, aoa: float) -> np.ndarray:
        return triangulate(aod, self.ap_position, aoa, self.pwr_position,
                           (self.ap_array.boresight, self.pwr_array.boresight))


@dataclass(frozen=True)
class Scenario:
    ap_position: Point
    pwr_position: Point
    ap_array: ArrayConfig
    pwr_array: ArrayConfig
    clients: List[ClientNode]
    targets: List[Target]
    num_subcarriers: int
    subcarrier_spacing: float
    coverage: Tuple[float, float, float, float] = (0.0, 10.0, 5.0, 15.0)

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.ap_position, self.pwr_position,
                        self.ap_array, self.pwr_array, self.coverage)

    def positions(self) -> np.ndarray:
        return np.array([t.position for t in self.targets], dtype=float).reshape(-1, 2)

    def client_mask(self) -> np.ndarray:
        return np.array([t.is_client for t in self.targets], dtype=bool)

    def angle_set(self) -> AngleSet:
        aod = [angle_of(self.ap_position, self.ap_array.boresight, t.position) for t in self.targets]
        aoa = [angle_of(self.pwr_position, self.pwr_array.boresight, t.position) for t in self.targets]
        los = [angle_of(self.ap_position, self.ap_array.boresight, c.position) for c in self.clients]
        return AngleSet(np.array(aod), np.array(aoa), np.array(los))

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        def arr(a):
            return ArrayConfig(int(a["num_elements"]), float(a["spacing"]), tuple(a["boresight"]))
        clients = [ClientNode(tuple(c["position"]), arr(c["array"]),
                              int(c["num_multipath"]), float(c["ricean_k_factor"]))
                   for c in d["clients"]]
        targets = [Target(tuple(t["position"]), bool(t["is_client"])) for t in d["targets"]]
        return cls(tuple(d["ap_position"]), tuple(d["pwr_position"]),
                   arr(d["ap_array"]), arr(d["pwr_array"]), clients, targets,
                   int(d["num_subcarriers"]), float(d["subcarrier_spacing"]),
                   tuple(d["coverage"]))

    @classmethod
    def loads(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


########################################################################
#
#   Scenario configuration (JSON file, see storage/scenarios)

SCENARIO_KEYS = ("ap_position", "pwr_position", "n_ap", "n_pwr", "n_ue", "q",
                 "coverage", "k_targets", "c_clients", "min_separation", "seed",
                 "subcarrier_spacing", "num_multipath", "ricean_k_factor")


@dataclass(frozen=True)
class ScenarioConfig:
    ap_position: Point = field(default_factory=lambda: tuple(config.ap_position))
    pwr_position: Point = field(default_factory=lambda: tuple(config.pwr_position))
    n_ap: int = field(default_factory=lambda: config.n_ap)
    n_pwr: int = field(default_factory=lambda: config.n_pwr)
    n_ue: int = field(default_factory=lambda: config.n_ue)
    q: int = field(default_factory=lambda: config.num_subcarriers)
    coverage: Tuple[float, float, float, float] = field(default_factory=lambda: tuple(config.coverage))
    k_targets: int = field(default_factory=lambda: config.k_targets)
    c_clients: int = field(default_factory=lambda: config.c_clients)
    min_separation: float = field(default_factory=lambda: config.min_separation)
    seed: Optional[int] = None
    subcarrier_spacing: float = field(default_factory=lambda: config.subcarrier_spacing)
    num_multipath: int = field(default_factory=lambda: config.num_multipath)
    ricean_k_factor: float = field(default_factory=lambda: config.ricean_k_factor_db)

    def __post_init__(self):
        if not (self.k_targets >= self.c_clients >= 0):
            raise ConfigurationError("need k_targets >= c_clients >= 0, got K=%s C=%s" % (self.k_targets, self.c_clients))
        if self.q < 1:
            raise ConfigurationError("q must be >= 1, got %s" % self.q)
        xmin, xmax, ymin, ymax = self.coverage
        if xmax < xmin or ymax < ymin:
            raise ConfigurationError("coverage rectangle is inverted: %s" % (self.coverage,))
        if self.min_separation < 0:
            raise ConfigurationError("min_separation must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def load_scenario_config(path: str) -> ScenarioConfig:
    '''read a JSON ScenarioConfig. Missing keys take the config.py default.'''
    if not os.path.isfile(path):
        candidate = os.path.join(config.scenario_directory, path)
        if os.path.isfile(candidate):
            path = candidate
    try:
        with open(path) as infile:
            d = json.load(infile)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError("cannot read scenario config %s: %s" % (path, e))
    if not isinstance(d, dict):
        raise ConfigurationError("scenario config %s must be a JSON object" % path)
    unknown = sorted(set(d) - set(SCENARIO_KEYS))
    if unknown:
        raise ConfigurationError("unknown scenario config keys in %s: %s" % (path, ", ".join(unknown)))
    for key in ("ap_position", "pwr_position", "coverage"):
        if key in d:
            d[key] = tuple(float(v) for v in d[key])
    log.info("loaded scenario config %s" % path)
    return ScenarioConfig(**d)


########################################################################
#
#   Array geometry

def steering_vector(angle: float, n: int, spacing: float = 0.5) -> np.ndarray:
    '''ULA response, element m is exp(j 2 pi spacing m sin(angle))'''
    if not math.isfinite(angle):
        raise InvalidInputError("angle must be finite, got %s" % angle)
    if n < 1:
        raise InvalidInputError("n must be >= 1, got %s" % n)
    m = np.arange(n)
    return np.exp(1j * 2 * np.pi * spacing * m * math.sin(angle))


def steering_matrix(angles, n: int, spacing: float = 0.5) -> np.ndarray:
    '''n x len(angles) matrix whose columns are steering vectors'''
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    m = np.arange(n)[:, None]
    return np.exp(1j * 2 * np.pi * spacing * m * np.sin(angles)[None, :])


def angle_of(observer: Point, boresight: Point, target: Point) -> float:
    b = _unit(boresight)
    d = np.asarray(target, dtype=float) - np.asarray(observer, dtype=float)
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("positions must be finite")
    if np.hypot(d[0], d[1]) == 0:
        raise InvalidInputError("target coincides with observer %s" % (observer,))
    angle = math.atan2(float(d @ _clockwise(b)), float(d @ b))
    if abs(angle) >= HALF_PI:
        raise OutOfFieldError("target %s is not in front of the array at %s" % (target, observer))
    return angle


def angles_of(observer: Point, boresight: Point, points) -> np.ndarray:
    '''angle_of over an (n, 2) array of points, nan where out of field'''
    b = _unit(boresight)
    d = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(observer, dtype=float)
    angles = np.arctan2(d @ _clockwise(b), d @ b)
    bad = (np.abs(angles) >= HALF_PI) | (np.hypot(d[:, 0], d[:, 1]) == 0)
    angles[bad] = np.nan
    return angles


def ray_direction(angle: float, boresight: Point) -> np.ndarray:
    b = _unit(boresight)
    return math.cos(angle) * b + math.sin(angle) * _clockwise(b)


def triangulate(aod: float, ap: Point, aoa: float, pwr: Point, boresights) -> np.ndarray:
    '''intersection of the AP ray at aod and the PWR ray at aoa'''
    if not (math.isfinite(aod) and math.isfinite(aoa)):
        raise InvalidInputError("angles must be finite")
    ap_b, pwr_b = boresights
    d1 = ray_direction(aod, ap_b)
    d2 = ray_direction(aoa, pwr_b)
    m = np.column_stack([d1, -d2])
    det = np.linalg.det(m)
    if abs(det) < 1e-12:
        raise NoIntersectionError("rays are parallel (aod=%.6f, aoa=%.6f)" % (aod, aoa))
    t = np.linalg.solve(m, np.asarray(pwr, dtype=float) - np.asarray(ap, dtype=float))
    if t[0] <= 0 or t[1] <= 0:
        raise NoIntersectionError("rays diverge (aod=%.6f, aoa=%.6f)" % (aod, aoa))
    return np.asarray(ap, dtype=float) + t[0] * d1


########################################################################
#
#   Random scenarios

def _client_boresight(rng: np.random.Generator, client: np.ndarray, ap: np.ndarray) -> Point:
    to_ap = ap - client
    base = math.atan2(to_ap[1], to_ap[0])
    jitter = math.radians(config.client_boresight_jitter_deg)
    heading = base + rng.uniform(-jitter, jitter)
    return (math.cos(heading), math.sin(heading))


def sample_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> Scenario:
    '''draw K target positions uniformly over the coverage rectangle,
       rejecting draws that violate the separation or field constraints'''
    xmin, xmax, ymin, ymax = cfg.coverage
    k = cfg.k_targets
    ap = np.asarray(cfg.ap_position, dtype=float)
    pwr = np.asarray(cfg.pwr_position, dtype=float)
    ap_array = ArrayConfig(cfg.n_ap, config.element_spacing, tuple(config.ap_boresight))
    pwr_array = ArrayConfig(cfg.n_pwr, config.element_spacing, tuple(config.pwr_boresight))
    limit = math.radians(config.music_grid_limit_deg)

    positions = None
    for attempt in range(config.scenario_max_attempts):
        pts = np.column_stack([rng.uniform(xmin, xmax, k), rng.uniform(ymin, ymax, k)])
        inside = ((pts[:, 0] > xmin) & (pts[:, 0] < xmax) &
                  (pts[:, 1] > ymin) & (pts[:, 1] < ymax))
        if not np.all(inside):
            continue
        if k > 1:
            gaps = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
            if np.min(gaps[np.triu_indices(k, 1)]) < cfg.min_separation:
                continue
        aod = angles_of(ap, ap_array.boresight, pts)
        aoa = angles_of(pwr, pwr_array.boresight, pts)
        if np.any(~np.isfinite(aod)) or np.any(~np.isfinite(aoa)):
            continue
        if np.any(np.abs(aod) > limit) or np.any(np.abs(aoa) > limit):
            continue
        positions = pts
        break

    if positions is None:
        raise InfeasibleGeometryError("no feasible placement of %d targets in %s after %d attempts"
                                      % (k, cfg.coverage, config.scenario_max_attempts))

    targets = [Target((float(p[0]), float(p[1])), i < cfg.c_clients) for i, p in enumerate(positions)]
    clients = []
    for p in positions[:cfg.c_clients]:
        array = ArrayConfig(cfg.n_ue, config.element_spacing, _client_boresight(rng, p, ap))
        clients.append(ClientNode((float(p[0]), float(p[1])), array,
                                  cfg.num_multipath, cfg.ricean_k_factor))

    return Scenario(tuple(cfg.ap_position), tuple(cfg.pwr_position), ap_array, pwr_array,
                    clients, targets, cfg.q, cfg.subcarrier_spacing, tuple(cfg.coverage))
