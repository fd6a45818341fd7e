"""Benchmark CLI: run one experiment, sweep a parameter, compare outputs.

Every configuration field is a flag; flags override config-file values.
``compare`` exits nonzero when token outputs diverge, so it doubles as the
output-equivalence gate in scripts.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Dict, List, Optional

from . import bench
from .engine import MODES, ExperimentConfig

_FLAG_HELP = {
    "mode": f"inference mode: {', '.join(MODES)}",
    "nodes": "total simulated cluster nodes (speculative modes dedicate one to the draft)",
    "draft_backend": "draft proposer: toy (small model) or synthetic (pinned alpha)",
    "alpha": "synthetic draft alignment probability",
    "cutoff": "base confidence cutoff for speculation",
    "cutoff_recovery": "cutoff increase per continuous speculation iteration",
    "cutoff_decay": "cutoff decrease when speculation idles",
    "microbatch": "speculative micro-batch cap (1..4)",
    "tree_cap": "sync-speculative tree size cap",
    "continuous": "continuous speculation (disable for one tree per round)",
    "partitions": "KV-cache sequence partitions (id 0 is canonical)",
    "clock": "virtual (deterministic) or wall (threads, informational)",
    "per_layer_delay": "simulated seconds per layer per token at each node",
    "link_latency": "fixed per-message link delay in seconds",
    "per_byte_delay": "per-byte link delay in seconds",
    "draft_token_delay": "draft node seconds per token",
    "idle_poll": "head back-off after an empty speculation round",
    "eos_token": "end-of-generation token id (empty to disable)",
    "node_weights": "comma-separated relative node speeds for the layer split",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None,
                            help=_FLAG_HELP.get(f.name, f.name.replace("_", " ")))


def _collect_overrides(args: argparse.Namespace) -> Dict[str, object]:
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    file_values = bench.parse_config_file(args.config) if args.config else {}
    return bench.config_from_sources(file_values, _collect_overrides(args))


def _figures_dir(args: argparse.Namespace, default_base: Optional[str]) -> Optional[str]:
    if args.no_figures:
        return None
    if args.figures:
        return args.figures
    if default_base:
        return os.path.splitext(default_base)[0] + "_figures"
    return None


def _print_summary(report: bench.Report) -> None:
    cfg = report.config
    print(f"mode={cfg.mode} nodes={cfg.nodes} clock={cfg.clock} "
          f"reps={len(report.runs)}")
    print(f"  generation speed : {report.mean['generation_speed']:.2f} tokens/s")
    print(f"  ttft             : {report.mean['ttft'] * 1e3:.3f} ms")
    print(f"  itl              : {report.mean['itl'] * 1e3:.3f} ms")
    print(f"  acceptance rate  : {report.mean['acceptance_rate']:.3f}")
    print(f"  cancelled runs   : {report.mean['cancelled_runs']:.1f}")
    print(f"  checksum         : {report.checksum()[:16]}")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    report = bench.run_experiment(cfg)
    _print_summary(report)
    if args.out:
        bench.export(report, "json", args.out)
        print(f"report written to {args.out}")
    if args.csv:
        bench.export(report, "csv", args.csv)
        print(f"csv written to {args.csv}")
    figdir = _figures_dir(args, args.out or args.csv)
    if figdir:
        from .figures import render_report_figures

        written = render_report_figures(report, figdir)
        print(f"{len(written)} figures written to {figdir}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    values: List[str] = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        print("sweep: no values given", file=sys.stderr)
        return 2
    reports = bench.sweep(cfg, args.param.replace("-", "_"), values)
    for rep in reports:
        print(f"-- {args.param} = {getattr(rep.config, args.param.replace('-', '_'))}")
        _print_summary(rep)
    bench.sweep_to_csv(reports, args.param.replace("-", "_"), args.out_csv)
    print(f"sweep table written to {args.out_csv}")
    if args.out_json:
        import json

        with open(args.out_json, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"sweep reports written to {args.out_json}")
    figdir = _figures_dir(args, args.out_csv)
    if figdir:
        from .figures import render_sweep_figures

        written = render_sweep_figures(reports, args.param.replace("-", "_"), figdir)
        print(f"{len(written)} figures written to {figdir}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    reports = [bench.load_report(p) for p in args.reports]
    if args.modes:
        cfg = _build_config(args)
        for mode in args.modes.split(","):
            mode = mode.strip()
            reports.append(bench.run_experiment(
                dataclasses.replace(cfg, mode=mode)
            ))
    if len(reports) < 2:
        print("compare: need at least two reports (files and/or --modes)",
              file=sys.stderr)
        return 2
    verdict = bench.compare_outputs(reports)
    print(verdict.detail)
    if args.out:
        bench.export(reports[0], "json", args.out)
    return 0 if verdict.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specpipe",
        description="Deterministic benchmark driver for pipelined "
                    "speculative inference simulation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", help="flat key=value config file")
    p_run.add_argument("--out", help="write JSON report here")
    p_run.add_argument("--csv", help="write per-repetition CSV here")
    p_run.add_argument("--figures", help="write figures to this directory")
    p_run.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")
    _add_config_flags(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one config field")
    p_sweep.add_argument("--config", help="flat key=value config file")
    p_sweep.add_argument("--param", required=True, help="config field to sweep")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values")
    p_sweep.add_argument("--out-csv", required=True, help="sweep table path")
    p_sweep.add_argument("--out-json", help="optional JSON report list")
    p_sweep.add_argument("--figures", help="write figures to this directory")
    p_sweep.add_argument("--no-figures", action="store_true",
                         help="skip figure rendering")
    _add_config_flags(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_cmp = sub.add_parser(
        "compare",
        help="check byte-exact output equivalence across reports/modes",
    )
    p_cmp.add_argument("reports", nargs="*", help="JSON report files")
    p_cmp.add_argument("--modes", help="comma-separated modes to run and compare")
    p_cmp.add_argument("--config", help="flat key=value config file")
    p_cmp.add_argument("--out", help="write the first report here")
    _add_config_flags(p_cmp)
    p_cmp.set_defaults(fn=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
