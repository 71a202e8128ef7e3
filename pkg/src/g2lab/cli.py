"""Command line interface.

Subcommands:

    g2lab run SCENARIO.toml --out DIR [--seed N] [--threads K]
    g2lab correlate --traces FILE --pairs i,j [--pairs k,l | --pairs all]
                    --lags MIN:MAX[:STRIDE] [--out DIR] [--threads K]
    g2lab fit --data POINTS.csv --w WIDTH [--out DIR]

Exit codes: 0 success, 2 config or input error, 3 runtime error, 4 fit did
not converge (artifacts are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .correlator import LagRange, correlate_pair
from .physics import fit_near_field
from .scenarios import (
    EXIT_CONFIG,
    EXIT_NO_CONVERGENCE,
    EXIT_OK,
    EXIT_RUNTIME,
    ConfigError,
    load_config,
    run_scenario,
)
from .tracefile import TraceFileError, read_traces, write_correlogram_csv

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="g2lab",
        description="Photon-correlation simulation and analysis pipelines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario config end to end")
    p_run.add_argument("config", help="scenario TOML file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--threads", type=int, default=1, help="series-level workers")

    p_corr = sub.add_parser("correlate", help="correlate channels of a trace file")
    p_corr.add_argument("--traces", required=True, help="binary trace file")
    p_corr.add_argument(
        "--pairs",
        action="append",
        required=True,
        help="channel pair 'i,j' (repeatable); 'i,i'_autocorrelates; 'all' for every pair",
    )
    p_corr.add_argument("--lags", required=True, help="lag range MIN:MAX[:STRIDE] in bins")
    p_corr.add_argument("--out", default=".", help="output directory")
    p_corr.add_argument("--threads", type=int, default=1)

    p_fit = sub.add_parser("fit", help="fit the near-field model to g2 maxima")
    p_fit.add_argument("--data", required=True, help="CSV with columns fresnel,g2_max[,sigma]")
    p_fit.add_argument("--w", type=float, required=True, help="near-field width in meters")
    p_fit.add_argument("--out", default=".", help="output directory")
    return parser


def _parse_lags(text: str) -> LagRange:
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ConfigError(f"bad --lags '{text}', expected MIN:MAX[:STRIDE]")
    try:
        lo, hi = int(parts[0]), int(parts[1])
        stride = int(parts[2]) if len(parts) == 3 else 1
        return LagRange(lo, hi, stride)
    except ValueError as exc:
        raise ConfigError(f"bad --lags '{text}': {exc}")


def _parse_pairs(tokens, channel_count: int):
    pairs = []
    for token in tokens:
        if token == "all":
            pairs.extend((i, j) for i in range(channel_count) for j in range(i + 1, channel_count))
            continue
        try:
            i, j = (int(v) for v in token.split(","))
        except ValueError:
            raise ConfigError(f"bad --pairs '{token}', expected 'i,j'")
        if not (0 <= i < channel_count and 0 <= j < channel_count):
            raise ConfigError(f"pair {token} out of range for {channel_count} channels")
        pairs.append((i, j))
    return pairs


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    return run_scenario(cfg, args.out, seed=args.seed, threads=args.threads)


def _cmd_correlate(args) -> int:
    traces = read_traces(args.traces)
    lags = _parse_lags(args.lags)
    pairs = _parse_pairs(args.pairs, traces.channel_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, j in pairs:
        corr = correlate_pair(traces, i, j, lags, workers=args.threads)
        fname = f"corr_{i:02d}_{j:02d}.csv"
        write_correlogram_csv(corr, out / fname)
        index.append({"i": i, "j": j, "file": fname, "kind": corr.kind})
    (out / "corr_index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_fit(args) -> int:
    points = []
    sigmas = []
    with open(args.data, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{args.data}: empty data file")
        cols = {name.lower().strip(): name for name in reader.fieldnames}
        fn_col = next((cols[k] for k in ("fresnel", "fn") if k in cols), None)
        g2_col = next((cols[k] for k in ("g2_max", "g2max", "g2") if k in cols), None)
        if fn_col is None or g2_col is None:
            raise ConfigError(f"{args.data}: need 'fresnel' and 'g2_max' columns")
        sigma_col = cols.get("sigma")
        for row in reader:
            points.append((float(row[fn_col]), float(row[g2_col])))
            if sigma_col:
                sigmas.append(float(row[sigma_col]))
    try:
        fit = fit_near_field(points, args.w, sigma=sigmas or None)
    except ValueError as exc:
        raise ConfigError(f"{args.data}: {exc}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "gamma": fit.gamma,
        "omega_rad_per_m": fit.omega,
        "omega_pi_per_width": fit.omega * args.w / np.pi,
        "residual_norm": fit.residual_norm,
        "converged": fit.converged,
        "n_points": fit.n_points,
    }
    (out / "fit_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK if fit.converged else EXIT_NO_CONVERGENCE


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "correlate":
            return _cmd_correlate(args)
        return _cmd_fit(args)
    except (ConfigError, TraceFileError, FileNotFoundError) as exc:
        print(f"g2lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # runtime failure, stage name included by scenarios
        print(f"g2lab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
