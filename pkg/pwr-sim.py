#!/usr/bin/env python

import os
import sys
import logging
import argparse

try:
    sys.dont_write_bytecode = True
    import config
    sys.dont_write_bytecode = False
except ImportError:
    print("Could not import config file.")
    exit(1)

script_dir = os.path.dirname(os.path.realpath(__file__))
sys.path.insert(0, script_dir + '/lib/')

_dev_mode = (os.environ.get('DEVELOPMENT') == '1')

# readable logs in local dev only, plain logging if rich is missing
if _dev_mode:
    try:
        from rich.logging import RichHandler

        logging.basicConfig(
            level=config.log_level,
            format="%(message)s",
            datefmt="[%X]",
            handlers=[RichHandler(rich_tracebacks=True)],
        )
    except Exception:
        logging.basicConfig(level=config.log_level, format=config.log_format)
else:
    logging.basicConfig(level=config.log_level, format=config.log_format)

log = logging.getLogger("pwr-sim")

workers_env = os.environ.get('PWR_WORKERS')
if workers_env:
    try:
        config.workers = int(workers_env)
        log.info("PWR_WORKERS=%s set: workers=%s" % (workers_env, config.workers))
    except ValueError:
        log.warning("PWR_WORKERS=%s invalid; using workers=%s" % (workers_env, config.workers))

from harness import ExperimentConfig, ExperimentConfigError, parse_methods, parse_snr, run_experiment
from scene import SceneError, ScenarioConfig, load_scenario_config


def build_config(args) -> ExperimentConfig:
    scenario = load_scenario_config(args.config) if args.config else ScenarioConfig()
    kw = dict(scenario=scenario)
    if args.snr:
        kw["snr_db"] = parse_snr(args.snr)
    if args.trials is not None:
        kw["trials"] = args.trials
    if args.seed is not None:
        kw["master_seed"] = args.seed
    elif scenario.seed is not None:
        kw["master_seed"] = scenario.seed
    if args.methods:
        kw["methods"] = parse_methods(args.methods)
    if args.out:
        kw["output"] = args.out
    if args.hit_radius is not None:
        kw["hit_radius"] = args.hit_radius
    if args.workers is not None:
        kw["workers"] = args.workers
    if args.db is not None:
        kw["db_path"] = args.db or None
    kw["noiseless"] = args.noiseless
    if args.single_pass:
        kw["single_pass"] = True
    return ExperimentConfig(**kw)


def run(cfg: ExperimentConfig):
    total = len(cfg.sweep) * cfg.trials
    if sys.stderr.isatty():
        from rich.progress import Progress

        with Progress(transient=True) as progress:
            task = progress.add_task("trials", total=total)
            return run_experiment(cfg, progress=lambda: progress.advance(task))
    return run_experiment(cfg)


def main(argv=None):
    parser = argparse.ArgumentParser(description='Passive Wi-Fi radar Monte-Carlo experiment')
    parser.add_argument('--config', type=str, help="Scenario config JSON (path or name in storage/scenarios).")
    parser.add_argument('--snr', type=str, help="SNR points in dB, a list 0,10,20 or a range -10:30:5.")
    parser.add_argument('--trials', type=int, help="Trials per SNR point (default %d)." % config.trials_per_snr)
    parser.add_argument('--seed', type=int, help="Master seed (default %d)." % config.master_seed)
    parser.add_argument('--methods', type=str, help="Comma separated methods (default %s)." % ",".join(config.methods))
    parser.add_argument('--out', type=str, help="Output directory (default %s)." % config.output_directory)
    parser.add_argument('--noiseless', action='store_true', help="Run noiseless CSI (one SNR point, +inf).")
    parser.add_argument('--single-pass', action='store_true', help="One alternating summation pass only.")
    parser.add_argument('--hit-radius', type=float, help="Hit radius in meters (default %s)." % config.hit_radius)
    parser.add_argument('--workers', type=int, help="Worker threads (default %d)." % config.workers)
    parser.add_argument('--db', type=str, help="SQLite run history path, empty string to disable.")
    args = parser.parse_args(argv)

    try:
        cfg = build_config(args)
        result = run(cfg)
    except (ExperimentConfigError, SceneError) as e:
        log.error("configuration error: %s" % e)
        return 2

    for r in result.records:
        if r.target_class == "all":
            continue
        rmse = "-" if r.rmse is None else "%.3f" % r.rmse
        log.info("%-10s %6s dB %-10s hit rate %.3f rmse %s m (%d)"
                 % (r.method, r.snr_db, r.target_class, r.hit_rate, rmse, r.rmse_count))
    return 0


if __name__ == "__main__":
    sys.exit(main())
