#!/usr/bin/env python

import os
import sys
import logging
import argparse

import numpy as np

try:
    sys.dont_write_bytecode = True
    import config
    sys.dont_write_bytecode = False
except ImportError:
    print("Could not import config file.")
    exit(1)

script_dir = os.path.dirname(os.path.realpath(__file__))
sys.path.insert(0, script_dir + '/lib/')

logging.basicConfig(level=config.log_level, format=config.log_format)
log = logging.getLogger("pwr-tool")

import results_db
from bff import build_bff
from channel import observe_csi, synth_comm_channel, synth_radar_channel
from harness import aggregate, compare_methods, read_results
from scene import SceneError, ScenarioConfig, load_scenario_config, sample_scenario


def _scenario(args):
    cfg = load_scenario_config(args.config) if args.config else ScenarioConfig()
    rng = np.random.default_rng(args.seed)
    return sample_scenario(cfg, rng), rng


def _emit(args, text=None, data=None):
    if args.out:
        mode = 'wb' if data is not None else 'w'
        with open(args.out, mode) as f:
            f.write(data if data is not None else text)
        log.info("wrote %s" % args.out)
    else:
        print(text)


def scenario(args):
    scn, _ = _scenario(args)
    _emit(args, scn.dumps())


def csi(args):
    scn, rng = _scenario(args)
    radar = synth_radar_channel(scn, rng)
    tensor = observe_csi(radar.matrices, args.snr, rng)
    if args.binary:
        _emit(args, data=tensor.to_bytes())
    else:
        _emit(args, tensor.dumps())


def bff(args):
    scn, rng = _scenario(args)
    if not 0 <= args.client < scn.num_clients:
        raise SceneError("scenario has %d clients" % scn.num_clients)
    comm = synth_comm_channel(scn, args.client, rng)
    report = build_bff(observe_csi(comm.matrices, args.snr, rng), client=args.client)
    if args.binary:
        _emit(args, data=report.to_bytes())
    else:
        _emit(args, report.dumps())


def summarize(args):
    rows = read_results(args.csvfile)
    for r in aggregate(rows):
        rmse = "-" if r.rmse is None else "%.3f" % r.rmse
        print("%-10s %7s %-10s targets %5d hit rate %.3f rmse %s (%d)"
              % (r.method, r.snr_db, r.target_class, r.targets, r.hit_rate, rmse, r.rmse_count))
    if args.compare:
        a, b = args.compare.split(",")
        for snr in sorted({r.snr_db for r in rows}):
            t = compare_methods(rows, a, b, snr, args.target_class)
            print("%s vs %s at %s dB: better %d worse %d ties %d p=%.3g median %.3f / %.3f"
                  % (a, b, snr, t.better, t.worse, t.ties, t.pvalue, t.median_a, t.median_b))


def runs(args):
    db_path = results_db.ensure_db(args.db or None, log=log)
    for r in results_db.list_runs(db_path, limit=args.limit):
        print("%s created %s ended %s seed %s %s"
              % (r["id"], r["created_at"], r["ended_at"], r["master_seed"], r["outcome"]))


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='Passive Wi-Fi radar tools')
    subparsers = parser.add_subparsers()
    parser.set_defaults(mode='')

    def sampled(p):
        p.add_argument('--config', type=str, help="Scenario config JSON.")
        p.add_argument('--seed', type=int, default=config.master_seed, help="Seed for the scenario draw.")
        p.add_argument('--out', type=str, help="Write to this file instead of stdout.")

    parser_scn = subparsers.add_parser('scenario', help='Draw a scenario and dump it as JSON')
    sampled(parser_scn)
    parser_scn.set_defaults(mode='scenario')

    parser_csi = subparsers.add_parser('csi', help='Dump the radar CSI of a drawn scenario')
    sampled(parser_csi)
    parser_csi.add_argument('--snr', type=float, default=float('inf'), help="SNR in dB (default noiseless).")
    parser_csi.add_argument('--binary', action='store_true', help="Binary dump (needs --out).")
    parser_csi.set_defaults(mode='csi')

    parser_bff = subparsers.add_parser('bff', help='Dump the BFF of one client')
    sampled(parser_bff)
    parser_bff.add_argument('--client', type=int, default=0, help="Client index (default 0).")
    parser_bff.add_argument('--snr', type=float, default=float('inf'), help="SNR in dB (default noiseless).")
    parser_bff.add_argument('--binary', action='store_true', help="Binary dump (needs --out).")
    parser_bff.set_defaults(mode='bff')

    parser_sum = subparsers.add_parser('summarize', help='Aggregate a results.csv')
    parser_sum.add_argument('csvfile', type=str, help="results.csv written by pwr-sim.py")
    parser_sum.add_argument('--compare', type=str, help="Two methods a,b for a paired sign test.")
    parser_sum.add_argument('--target-class', type=str, default='client', help="client, non_client or all.")
    parser_sum.set_defaults(mode='summarize')

    parser_runs = subparsers.add_parser('runs', help='List recorded runs')
    parser_runs.add_argument('--db', type=str, help="SQLite path (default from config).")
    parser_runs.add_argument('--limit', type=int, default=20)
    parser_runs.set_defaults(mode='runs')

    args = parser.parse_args()
    modes = {'scenario': scenario, 'csi': csi, 'bff': bff, 'summarize': summarize, 'runs': runs}
    if args.mode not in modes:
        parser.print_help()
        sys.exit(1)
    if getattr(args, 'binary', False) and not args.out:
        parser.error("--binary needs --out")

    try:
        modes[args.mode](args)
    except (SceneError, ValueError) as e:
        log.error("%s" % e)
        sys.exit(2)
