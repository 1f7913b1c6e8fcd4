'''
Monte-Carlo experiment driver.

Every trial draws a scenario, runs the sounding session (radar CSI at the
PWR, client CSI and BFF at every client), builds the covariances once and
hands the same pre-estimates to every configured method. Trials derive
their random stream from (master seed, SNR index, trial index), so any
single trial can be replayed in isolation and the thread count does not
change the output.
'''
import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from scipy.optimize import linear_sum_assignment
from scipy.stats import binomtest

import config
import results_db
from bff import QuantizationConfig, approx_covariance, build_bff
from channel import observe_csi, synth_comm_channel, synth_radar_channel
from estimator import (METHODS, CovarianceSet, LocalizationResult, SearchConfig, duplog,
                       pre_estimate, radar_sample_cov)
from scene import InfeasibleGeometryError, Scenario, ScenarioConfig, sample_scenario

log = logging.getLogger(__name__)

TARGET_CLASSES = ("client", "non_client", "all")

# attempts with fresh seeds before a trial is given up
MAX_RESAMPLES = 5


class ExperimentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    snr_db: Tuple[float, ...] = field(default_factory=lambda: tuple(config.snr_sweep_db))
    trials: int = field(default_factory=lambda: config.trials_per_snr)
    methods: Tuple[str, ...] = field(default_factory=lambda: tuple(config.methods))
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    master_seed: int = field(default_factory=lambda: config.master_seed)
    output: str = field(default_factory=lambda: config.output_directory)
    hit_radius: float = field(default_factory=lambda: config.hit_radius)
    noiseless: bool = False
    single_pass: bool = field(default_factory=lambda: config.as_single_pass)
    workers: int = field(default_factory=lambda: config.workers)
    db_path: Optional[str] = field(default_factory=lambda: config.sqlite_db_path)
    quantization: QuantizationConfig = field(default_factory=QuantizationConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise ExperimentConfigError("trials must be >= 1, got %s" % self.trials)
        if not self.hit_radius > 0:
            raise ExperimentConfigError("hit radius must be positive, got %s" % self.hit_radius)
        if not self.noiseless and len(self.snr_db) == 0:
            raise ExperimentConfigError("the SNR sweep is empty")
        if any(math.isnan(s) or s == -math.inf for s in self.snr_db):
            raise ExperimentConfigError("SNR values must be finite or +inf")
        if not self.methods:
            raise ExperimentConfigError("no methods selected")
        unknown = sorted(set(self.methods) - set(METHODS))
        if unknown:
            raise ExperimentConfigError("unknown methods: %s (known: %s)"
                                        % (", ".join(unknown), ", ".join(sorted(METHODS))))
        if self.master_seed < 0:
            raise ExperimentConfigError("seed must be non-negative")
        if self.workers < 1:
            raise ExperimentConfigError("workers must be >= 1")

    @property
    def sweep(self) -> Tuple[float, ...]:
        '''the SNR points actually run. A noiseless run has one point, +inf.'''
        return (math.inf,) if self.noiseless else tuple(self.snr_db)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = [_json_float(s) for s in self.sweep]
        d["scenario"]["ricean_k_factor"] = _json_float(self.scenario.ricean_k_factor)
        return d


def _json_float(v: float):
    return v if math.isfinite(v) else repr(v)


def trial_rng(master_seed: int, snr_index: int, trial: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, snr_index, trial, attempt]))


########################################################################
#
#   One trial

@dataclass
class TrialOutcome:
    snr_db: float
    trial: int
    scenario: Scenario
    results: Dict[str, LocalizationResult]
    resamples: int = 0


def run_trial(cfg: ExperimentConfig, snr_index: int, trial: int) -> TrialOutcome:
    '''one sounding session, every method on the same realization'''
    snr_db = cfg.sweep[snr_index]
    for attempt in range(MAX_RESAMPLES):
        rng = trial_rng(cfg.master_seed, snr_index, trial, attempt)
        try:
            scenario = sample_scenario(cfg.scenario, rng)
            break
        except InfeasibleGeometryError as e:
            duplog.warning("resampling infeasible trial geometry: %s" % e)
    else:
        raise ExperimentConfigError("no feasible scenario for trial %d after %d seeds" % (trial, MAX_RESAMPLES))

    # the NDP reaches the PWR through the target echoes
    radar = synth_radar_channel(scenario, rng)
    radar_csi = observe_csi(radar.matrices, snr_db, rng)

    # every client estimates its channel and answers with a BFF
    client_covs = []
    client_noise = 0.0
    for u in range(scenario.num_clients):
        comm = synth_comm_channel(scenario, u, rng)
        client_csi = observe_csi(comm.matrices, snr_db, rng)
        client_noise = client_csi.noise_variance
        report = build_bff(client_csi, client=u, quantization=cfg.quantization)
        client_covs.append(approx_covariance(report))

    covs = CovarianceSet(radar_sample_cov(radar_csi), client_covs, radar_csi.noise_variance, client_noise,
                         scenario.num_subcarriers, cfg.scenario.n_ue, scenario.ap_array.num_elements,
                         scenario.pwr_array.num_elements, scenario.ap_array.spacing)
    preest = pre_estimate(covs, scenario.num_targets)
    search = SearchConfig(single_pass=cfg.single_pass)
    geometry = scenario.geometry
    results = {m: METHODS[m](preest, covs, geometry, search) for m in cfg.methods}
    return TrialOutcome(snr_db, trial, scenario, results, attempt)


########################################################################
#
#   Scoring

@dataclass
class TargetScore:
    estimate: np.ndarray    # (K,) estimate index matched to each truth, -1 if none
    errors: np.ndarray      # (K,) meters, inf when unmatched
    hits: np.ndarray        # (K,)


def match_and_score(truth: np.ndarray, positions: np.ndarray, hit_radius: float) -> TargetScore:
    '''minimum total distance matching of estimates to truths'''
    truth = np.asarray(truth, dtype=float)
    positions = np.asarray(positions, dtype=float)
    k = len(truth)
    estimate = np.full(k, -1)
    errors = np.full(k, np.inf)
    if k and len(positions):
        dist = np.linalg.norm(truth[:, None, :] - positions[None, :, :], axis=-1)
        finite = np.isfinite(dist)
        big = 1e12 if not finite.any() else 1e6 * (1 + np.max(dist[finite]))
        rows, cols = linear_sum_assignment(np.where(finite, dist, big))
        for t, e in zip(rows, cols):
            if finite[t, e]:
                estimate[t] = e
                errors[t] = dist[t, e]
    return TargetScore(estimate, errors, errors <= hit_radius)


@dataclass
class TrialRow:
    method: str
    snr_db: float
    trial: int
    target: int
    is_client: bool
    true_x: float
    true_y: float
    est_x: float
    est_y: float
    error: float
    objective: float    # the method's score of the matched estimate
    hit: bool
    associated: bool
    degenerate: bool
    resamples: int

    def sort_key(self):
        return (self.method, self.snr_db, self.trial, self.target)


def score_trial(outcome: TrialOutcome, hit_radius: float) -> List[TrialRow]:
    truth = outcome.scenario.positions()
    clients = outcome.scenario.client_mask()
    rows = []
    for method, result in outcome.results.items():
        score = match_and_score(truth, result.positions, hit_radius)
        for t in range(len(truth)):
            e = score.estimate[t]
            est = result.positions[e] if e >= 0 else (math.nan, math.nan)
            rows.append(TrialRow(method, outcome.snr_db, outcome.trial, t, bool(clients[t]),
                                 float(truth[t, 0]), float(truth[t, 1]), float(est[0]), float(est[1]),
                                 float(score.errors[t]),
                                 float(result.objective[e]) if e >= 0 else math.nan,
                                 bool(score.hits[t]),
                                 bool(result.associated[e]) if e >= 0 else False,
                                 bool(result.degenerate[e]) if e >= 0 else False,
                                 outcome.resamples))
    return rows


@dataclass
class MetricsRecord:
    method: str
    snr_db: float
    target_class: str
    targets: int
    hits: int
    hit_rate: float
    rmse_count: int
    rmse: Optional[float]   # None when no target was hit by every method


def _in_class(row: TrialRow, target_class: str) -> bool:
    if target_class == "client":
        return row.is_client
    if target_class == "non_client":
        return not row.is_client
    return True


def aggregate(rows: Sequence[TrialRow]) -> List[MetricsRecord]:
    '''hit rate per (method, snr, class), RMSE over the targets every
       method hit'''
    methods = sorted({r.method for r in rows})
    hit_by = {}
    for r in rows:
        hit_by.setdefault((r.snr_db, r.trial, r.target), set())
        if r.hit:
            hit_by[(r.snr_db, r.trial, r.target)].add(r.method)
    common = {key for key, m in hit_by.items() if len(m) == len(methods)}

    groups: Dict[Tuple[str, float, str], List[TrialRow]] = {}
    for r in rows:
        for c in TARGET_CLASSES:
            if _in_class(r, c):
                groups.setdefault((r.method, r.snr_db, c), []).append(r)

    records = []
    for (method, snr_db, c) in sorted(groups, key=lambda g: (g[0], g[1], TARGET_CLASSES.index(g[2]))):
        group = groups[(method, snr_db, c)]
        hits = sum(r.hit for r in group)
        shared = [r.error for r in group if (r.snr_db, r.trial, r.target) in common]
        rmse = float(np.sqrt(np.mean(np.square(shared)))) if shared else None
        records.append(MetricsRecord(method, snr_db, c, len(group), hits, hits / len(group), len(shared), rmse))
    return records


@dataclass
class SignTest:
    better: int     # trials where the first method had the smaller error
    worse: int
    ties: int
    pvalue: float
    median_a: float
    median_b: float


def compare_methods(rows: Sequence[TrialRow], a: str, b: str, snr_db: float,
                    target_class: str = "client") -> SignTest:
    '''one-sided paired sign test that method a has smaller errors than b'''
    errors: Dict[str, Dict[Tuple[int, int], float]] = {a: {}, b: {}}
    for r in rows:
        if r.method in errors and r.snr_db == snr_db and _in_class(r, target_class):
            errors[r.method][(r.trial, r.target)] = r.error
    keys = sorted(set(errors[a]) & set(errors[b]))
    if not keys:
        raise ExperimentConfigError("no paired rows for %s and %s at %s dB" % (a, b, snr_db))
    ea = np.array([errors[a][k] for k in keys])
    eb = np.array([errors[b][k] for k in keys])
    better = int(np.sum(ea < eb))
    worse = int(np.sum(ea > eb))
    ties = len(keys) - better - worse
    pvalue = binomtest(better, better + worse, 0.5, alternative='greater').pvalue if better + worse else 1.0
    return SignTest(better, worse, ties, float(pvalue), float(np.median(ea)), float(np.median(eb)))


########################################################################
#
#   Output

ROW_FIELDS = [f for f in TrialRow.__dataclass_fields__]
METRIC_FIELDS = [f for f in MetricsRecord.__dataclass_fields__]


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def write_csv(path: str, fieldnames: List[str], records) -> None:
    with open(path, 'w', newline='') as out:
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(fieldnames)
        for r in records:
            d = asdict(r)
            writer.writerow([_cell(d[f]) for f in fieldnames])


def write_results(out_dir: str, rows: Sequence[TrialRow], records: Sequence[MetricsRecord],
                  manifest: dict) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "results": os.path.join(out_dir, "results.csv"),
        "aggregate": os.path.join(out_dir, "aggregate.csv"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }
    write_csv(paths["results"], ROW_FIELDS, rows)
    write_csv(paths["aggregate"], METRIC_FIELDS, records)
    with open(paths["manifest"], 'w') as out:
        json.dump(manifest, out, indent=2, sort_keys=True)
    log.info("wrote %s" % ", ".join(paths.values()))
    return paths


def read_results(path: str) -> List[TrialRow]:
    '''load a results.csv back into TrialRows'''
    casts = {"method": str, "snr_db": float, "trial": int, "target": int, "resamples": int}
    out = []
    with open(path, newline='') as f:
        for d in csv.DictReader(f):
            kw = {}
            for name in ROW_FIELDS:
                v = d[name]
                if name in casts:
                    kw[name] = casts[name](v)
                elif name in ("is_client", "hit", "associated", "degenerate"):
                    kw[name] = v == "1"
                else:
                    kw[name] = float(v)
            out.append(TrialRow(**kw))
    return out


########################################################################
#
#   Experiment

@dataclass
class ExperimentRun:
    rows: List[TrialRow]
    records: List[MetricsRecord]
    manifest: dict
    paths: Dict[str, str] = field(default_factory=dict)


def _record_run(db_path: str, cfg: ExperimentConfig, rows, records, manifest) -> Optional[str]:
    try:
        results_db.ensure_db(db_path, log=log)
        run_id = results_db.create_run(db_path, master_seed=cfg.master_seed, config=cfg.to_dict())
        results_db.add_trial_rows(db_path, run_id=run_id, rows=[asdict(r) for r in rows])
        results_db.add_metrics(db_path, run_id=run_id, records=[asdict(r) for r in records])
        results_db.finish_run(db_path, run_id=run_id, outcome="COMPLETED", manifest=manifest)
        return run_id
    except Exception:
        log.exception("could not record run in %s" % db_path)
        return None


def run_experiment(cfg: ExperimentConfig, progress: Optional[Callable[[], None]] = None,
                   write: bool = True) -> ExperimentRun:
    '''run every (snr, trial) pair, score, aggregate and write the outputs.
       progress is called once per finished trial.'''
    start = time.time()
    tasks = [(i, t) for i in range(len(cfg.sweep)) for t in range(cfg.trials)]
    log.info("running %d trials x %d methods on %d worker(s)" % (len(tasks), len(cfg.methods), cfg.workers))

    def work(task):
        outcome = run_trial(cfg, *task)
        rows = score_trial(outcome, cfg.hit_radius)
        times = {m: r.wall_time for m, r in outcome.results.items()}
        if progress:
            progress()
        return rows, times, outcome.resamples

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            done = list(pool.map(work, tasks))
    else:
        done = [work(task) for task in tasks]

    rows = sorted((r for trial_rows, _, _ in done for r in trial_rows), key=TrialRow.sort_key)
    records = aggregate(rows)
    wall = {m: sum(t[m] for _, t, _ in done) for m in cfg.methods}
    resamples = sum(n for _, _, n in done)

    manifest = {
        "software_version": config.software_version,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "config": cfg.to_dict(),
        "seeding": "numpy SeedSequence([master_seed, snr_index, trial, attempt])",
        "master_seed": cfg.master_seed,
        "trials_run": len(tasks),
        "resamples": resamples,
        "method_wall_time": wall,
        "started_at": int(start),
        "elapsed": time.time() - start,
    }
    run = ExperimentRun(rows, records, manifest)
    if cfg.db_path:
        run_id = _record_run(cfg.db_path, cfg, rows, records, manifest)
        if run_id:
            manifest["run_id"] = run_id
    if write:
        run.paths = write_results(cfg.output, rows, records, manifest)
    return run


########################################################################
#
#   Command line helpers

def parse_snr(text: str) -> Tuple[float, ...]:
    '''"0,10,20" or an inclusive range "start:stop:step"'''
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if not step > 0 or stop < start:
                raise ExperimentConfigError("bad SNR range %r" % text)
            n = int(math.floor((stop - start) / step + 1e-9))
            return tuple(float(start + i * step) for i in range(n + 1))
        values = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as e:
        if isinstance(e, ExperimentConfigError):
            raise
        raise ExperimentConfigError("cannot parse SNR list %r" % text)
    if not values:
        raise ExperimentConfigError("the SNR sweep is empty")
    return values


def parse_methods(text: str) -> Tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())
