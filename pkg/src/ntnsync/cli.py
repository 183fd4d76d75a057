"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import harness
from .channel import ChannelType, ImpairmentConfig, apply_impairments
from .phase import dechirp, extract_phase, write_phase_csv
from .waveform import PreambleConfig, gen_preamble, write_iq

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# Phase trace of a noiseless preamble delayed by 200 samples with a 1500 Hz CFO
FIG3 = {"toa_samples": 200.0, "cfo_hz": 1500.0, "n_rep": 1, "n_off": 0}


def _run(args) -> int:
    cfg = harness.ExperimentConfig.from_json(args.config)
    overrides = {k: v for k, v in (("workers", args.threads), ("tire_weights", args.tire_weights)) if v is not None}
    if overrides:
        cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    if cfg.tire_weights and not os.path.exists(cfg.tire_weights):
        raise harness.ConfigError(f"TIRE weights {cfg.tire_weights} not found")
    records = harness.run_campaign(cfg)
    out = harness.write_outputs(cfg, records, args.out)
    n_ok = sum(r.status == harness.Status.OK for r in records)
    print(f"{len(records)} trials, {n_ok} ok -> {out}")
    return EXIT_OK


def _summarize(args) -> int:
    records = harness.read_records(args.csv)
    summary = harness.summarize(records)
    if not args.cdf:
        for g in summary:
            g.pop("toa_cdf", None)
            g.pop("cfo_cdf", None)
    text = json.dumps(summary, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _gen(args) -> int:
    try:
        cfg = PreambleConfig.from_json(args.preamble)
    except (TypeError, ValueError) as exc:
        raise harness.ConfigError(f"{args.preamble}: {exc}") from exc
    buf = gen_preamble(cfg)
    if args.toa_us or args.cfo_hz or args.snr_db is not None or args.channel != "Awgn":
        imp = ImpairmentConfig(toa_samples=args.toa_us * 1e-6 * cfg.sample_rate, cfo_hz=args.cfo_hz,
                               snr_db=math.inf if args.snr_db is None else args.snr_db,
                               channel=ChannelType(args.channel), seed=args.seed,
                               sample_rate=cfg.sample_rate)
        buf = apply_impairments(buf, imp, block_len=cfg.sg_len)
    write_iq(buf, args.iq)
    print(f"{len(buf)} samples -> {args.iq}")
    return EXIT_OK


def _demo_phase(args) -> int:
    sc = FIG3
    cfg = PreambleConfig(n_rep=sc["n_rep"], n_off=sc["n_off"])
    tx = gen_preamble(cfg)
    rx = apply_impairments(tx, ImpairmentConfig(toa_samples=sc["toa_samples"], cfo_hz=sc["cfo_hz"]))
    ps = extract_phase(dechirp(rx, tx), smooth_window=args.window, sg_len=cfg.sg_len)
    write_phase_csv(ps, args.csv)
    print(f"{len(ps)} phase samples -> {args.csv}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad arguments are configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ntnsync", description="NPRACH ToA/CFO estimation over LEO channels")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a Monte Carlo campaign")
    r.add_argument("--config", required=True, help="experiment config (JSON)")
    r.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    r.add_argument("--threads", type=int, default=None, help="worker processes")
    r.add_argument("--tire-weights", default=None, help="pre-trained TIRE weights, skips per-trial training")
    r.set_defaults(func=_run)

    s = sub.add_parser("summarize", help="summarize a records CSV")
    s.add_argument("csv")
    s.add_argument("--out", default=None)
    s.add_argument("--cdf", action="store_true", help="include CDF points")
    s.set_defaults(func=_summarize)

    g = sub.add_parser("gen", help="write a preamble as raw float32 I/Q")
    g.add_argument("--preamble", required=True, help="preamble config (JSON)")
    g.add_argument("--iq", required=True)
    g.add_argument("--toa-us", type=float, default=0.0)
    g.add_argument("--cfo-hz", type=float, default=0.0)
    g.add_argument("--snr-db", type=float, default=None)
    g.add_argument("--channel", default="Awgn", choices=[c.value for c in ChannelType])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_gen)

    d = sub.add_parser("demo-phase", help="write a phase trace as CSV")
    d.add_argument("--scenario", default="fig3", choices=["fig3"])
    d.add_argument("--csv", required=True)
    d.add_argument("--window", type=int, default=1, help="smoothing window (odd)")
    d.set_defaults(func=_demo_phase)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        # a missing input file is a configuration problem
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
