"""Command-line interface.

Subcommands: simulate (draw a synthetic dataset), estimate-field (orientation
grid from points), run (posterior sampling), summarize (per-k summary plus
cluster labels), density (fibre-density raster). Every command takes a flat
key = value config file and writes its outputs plus a resolved-config echo
into --out. Exit codes: 0 ok, 2 usage/data error, 3 numerical/model failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, io
from .config import (
    KEY_ORDER,
    WINDOW_KEYS,
    hyperparams_from,
    parse_config,
    rates_from,
    require,
    window_from,
)
from .errors import ConfigError, DataError, FibreFieldError
from .field import estimate_field
from .geometry import PointPattern
from .sampler import run_chain
from .synthetic import ScenarioConfig, generate

COMMANDS = ("simulate", "estimate-field", "run", "summarize", "density")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fibrefield",
        description="Latent curvilinear structure in planar point patterns.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--points", help="points CSV (header x,y or lat/lon)")
        p.add_argument("--trace", help="trace JSONL from a previous run")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
    return parser


def _echo(cfg, outdir, command):
    io.write_config_echo(outdir / f"{command}.config.txt", cfg, KEY_ORDER)


def _read_points(args):
    if not args.points:
        raise DataError(f"{args.command} requires --points")
    return io.read_points_csv(args.points)


def _read_trace(args):
    if not args.trace:
        raise DataError(f"{args.command} requires --trace")
    return io.read_trace_jsonl(args.trace)


def cmd_simulate(cfg, args, outdir):
    require(cfg, WINDOW_KEYS, args.config)
    try:
        scenario = ScenarioConfig(
            window=window_from(cfg),
            h=hyperparams_from(cfg),
            seed=cfg["seed"],
            field_kind=cfg["field_kind"],
            theta0=cfg["theta0"],
            amplitude=cfg["amplitude"],
            period=cfg["period"],
            fibres=cfg["fibres"],
            k_fibres=cfg["k_fibres"],
            count_mode=cfg["count_mode"],
            n_signal=cfg["n_signal"],
            noise_count=cfg["noise_count"],
            step=cfg["step"],
        )
    except DataError as e:
        raise ConfigError(f"{args.config}: {e}") from None
    pattern, truth = generate(scenario)
    io.write_points_csv(outdir / "points.csv", pattern.points)
    io.write_truth_json(outdir / "truth.json", truth)
    _echo(cfg, outdir, "simulate")
    print(f"wrote {len(pattern.points)} points to {outdir / 'points.csv'}")


def cmd_estimate_field(cfg, args, outdir):
    require(cfg, WINDOW_KEYS, args.config)
    points = _read_points(args)
    if len(points) < 2:
        raise DataError(f"{args.points}: need at least 2 points, got {len(points)}")
    h = hyperparams_from(cfg)
    eps = np.full(len(points), h.alpha_signal / (h.alpha_signal + h.beta_signal))
    grid = estimate_field(
        points, eps, h.sigma_fo, h.h_fo, window_from(cfg), cfg["grid_spacing"]
    )
    grid.to_csv(outdir / "field.csv")
    _echo(cfg, outdir, "estimate-field")
    print(f"wrote {grid.nx * grid.ny} grid nodes to {outdir / 'field.csv'}")


def cmd_run(cfg, args, outdir):
    require(cfg, WINDOW_KEYS + ("t_end",), args.config)
    points = _read_points(args)
    pattern = PointPattern(points, window_from(cfg))
    result = run_chain(
        pattern,
        hyperparams_from(cfg),
        rates_from(cfg),
        cfg["seed"],
        cfg["t_end"],
        spacing=cfg["grid_spacing"],
        step_len=cfg["step"],
        eps_concentration=cfg["eps_concentration"],
    )
    io.write_trace_jsonl(outdir / "trace.jsonl", result.records)
    _echo(cfg, outdir, "run")
    print(f"burn-in: {result.burn_in}", file=sys.stderr)
    counts = " ".join(
        f"{kind}={result.event_counts[kind]}" for kind in sorted(result.event_counts)
    )
    print(f"events: {counts}", file=sys.stderr)
    print(f"wrote {len(result.records)} records to {outdir / 'trace.jsonl'}")


def cmd_summarize(cfg, args, outdir):
    records = _read_trace(args)
    summaries = diagnostics.summarize(records)
    io.write_summary_csv(outdir / "summary.csv", summaries)
    cooc = diagnostics.cooccurrence(records, len(records[0].x))
    labels = diagnostics.cluster_points(cooc, cfg["cluster_threshold"])
    io.write_labels_csv(outdir / "labels.csv", labels)
    _echo(cfg, outdir, "summarize")
    print(f"wrote {outdir / 'summary.csv'} and {outdir / 'labels.csv'}")


def cmd_density(cfg, args, outdir):
    require(cfg, WINDOW_KEYS, args.config)
    records = _read_trace(args)
    img = diagnostics.density_raster(
        records, window_from(cfg), cfg["bandwidth"], cfg["raster_cell"]
    )
    io.write_pgm(outdir / "density.pgm", img)
    io.write_raster_csv(outdir / "density.csv", img)
    _echo(cfg, outdir, "density")
    print(f"wrote {outdir / 'density.pgm'} ({img.shape[1]}x{img.shape[0]})")


_DISPATCH = {
    "simulate": cmd_simulate,
    "estimate-field": cmd_estimate_field,
    "run": cmd_run,
    "summarize": cmd_summarize,
    "density": cmd_density,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        _DISPATCH[args.command](cfg, args, outdir)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FibreFieldError as e:
        print(f"failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
