"""Command line entry points.

    hierforecast run <config.json> [--out DIR] [--seed N]
    hierforecast synth <spec.json> [--out DIR]
    hierforecast report <run-dir>

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import load_config
from .errors import ConfigError, HierforecastError
from .synthetic import SyntheticSpec, generate_synthetic


def _cmd_run(args) -> int:
    config = load_config(args.config)
    config = config.with_overrides(seed=args.seed, output_dir=args.out)
    out_dir = config.output_dir or "run_output"

    from .pipelines import run_pipeline
    from .reports import emit_reports, metrics_text

    artifacts = run_pipeline(config)
    written = emit_reports(artifacts, out_dir, figures=bool(config.output.get("figures", True)))
    print(metrics_text(artifacts.metrics))
    print(f"{len(written)} files written to {out_dir}")
    return 0


def _cmd_synth(args) -> int:
    try:
        with open(args.spec) as fh:
            spec_dict = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"spec file not found: {args.spec}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec is not valid JSON: {exc}") from exc
    spec = SyntheticSpec.from_dict(spec_dict)
    zone_frames, global_frame = generate_synthetic(spec)
    out_dir = args.out or "synthetic_data"
    os.makedirs(out_dir, exist_ok=True)
    for z, frame in {**zone_frames, global_frame.zone_id: global_frame}.items():
        path = os.path.join(out_dir, f"{z}.csv")
        frame.data.to_csv(path, index_label="timestamp")
        print(path)
    return 0


def _cmd_report(args) -> int:
    from .reports import metrics_text, render_figures

    metrics_path = os.path.join(args.run_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise ConfigError(f"not a run directory (missing metrics.csv): {args.run_dir}")
    import pandas as pd

    print(metrics_text(pd.read_csv(metrics_path)))
    for path in render_figures(args.run_dir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierforecast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a pipeline from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (overrides config)")
    p_run.add_argument("--seed", type=int, default=None, help="seed override")
    p_run.set_defaults(func=_cmd_run)

    p_synth = sub.add_parser("synth", help="generate synthetic hierarchy CSVs from a spec")
    p_synth.add_argument("spec")
    p_synth.add_argument("--out", default=None)
    p_synth.set_defaults(func=_cmd_synth)

    p_rep = sub.add_parser("report", help="re-render tables and figures for a finished run")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HierforecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
