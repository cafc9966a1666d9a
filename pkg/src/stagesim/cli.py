"""Command line entry points.

    stagesim run config.yaml --out results/
    stagesim sweep config.yaml --workers 8 --out results/
    stagesim report results/summary.json --format csv

Exit codes: 0 success, 2 configuration problems, 3 simulation failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from typing import Optional

from .config import load_config, run_from_config
from .errors import ConfigError, StagesimError
from .metrics import export_chrome_trace, write_request_csv, write_summary_json
from .sweep import run_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagesim",
        description="Discrete-event simulator for multi-stage LLM serving.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate one configuration")
    run_p.add_argument("config", help="YAML configuration file")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the trace seed")
    run_p.add_argument("--out", default=".",
                       help="directory for summary.json, requests.csv, trace.json")
    run_p.add_argument("--format", choices=("text", "csv"), default="text")

    sweep_p = sub.add_parser("sweep", help="explore a configuration space")
    sweep_p.add_argument("config", help="YAML configuration file with a sweep section")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--out", default=".", help="directory for sweep.json")
    sweep_p.add_argument("--workers", type=int, default=1)
    sweep_p.add_argument("--format", choices=("text", "csv"), default="text")

    report_p = sub.add_parser("report", help="render a previous result")
    report_p.add_argument("result",
                          help="result directory, summary.json, or sweep.json")
    report_p.add_argument("--format", choices=("text", "csv"), default="text")
    return parser


def _print_summary(summary: dict, fmt: str) -> None:
    if fmt == "csv":
        flat = {
            "serviced": summary["requests"]["serviced"],
            "rejected": summary["requests"]["rejected"],
            "makespan_s": summary["makespan_s"],
            "ttft_p50_s": summary["ttft_s"].get("p50"),
            "ttft_p90_s": summary["ttft_s"].get("p90"),
            "tbt_p99_s": summary["tbt_s"].get("p99"),
            "decoded_tokens": summary["tokens"]["decoded"],
            "tokens_per_dollar": summary["tokens_per_dollar"],
            "goodput_rps": summary.get("goodput_rps", ""),
        }
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(flat))
        writer.writeheader()
        writer.writerow(flat)
        sys.stdout.write(buf.getvalue())
        return
    req = summary["requests"]
    print(f"requests: {req['serviced']} serviced, {req['rejected']} rejected "
          f"of {req['accepted']} accepted")
    print(f"makespan: {summary['makespan_s']:.3f} s")
    for name in ("ttft_s", "tbt_s", "e2e_s"):
        dist = summary[name]
        if dist.get("n", 0):
            print(f"{name[:-2]}: mean {dist['mean']:.4f} s  p50 {dist['p50']:.4f}"
                  f"  p90 {dist['p90']:.4f}  p99 {dist['p99']:.4f}")
    print(f"decoded tokens: {summary['tokens']['decoded']}")
    if summary["tokens_per_dollar"]:
        print(f"tokens per dollar: {summary['tokens_per_dollar']:.1f}")
    if "goodput_rps" in summary:
        print(f"goodput: {summary['goodput_rps']:.3f} req/s")


def _print_sweep(report: dict, fmt: str) -> None:
    fields = ["index", "label", "tokens_per_dollar", "goodput_rps",
              "makespan_s", "serviced", "rejected", "slo_ok"]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in report["points"]:
            writer.writerow(row)
        sys.stdout.write(buf.getvalue())
        return
    print(f"points: {report['n_points']} run, {report['infeasible_count']} infeasible,"
          f" {report['slo_filtered_count']} filtered by SLO")
    print(f"search cost: ${report['search_cost_dollars']:.2f}")
    by_index = {r["index"]: r for r in report["points"]}
    for rank, index in enumerate(report["ranking"][:10], start=1):
        row = by_index[index]
        print(f"{rank:>3}. {row['label']:<50} {report['objective']}="
              f"{row[report['objective']]:.2f}")
    if report["best"] is None:
        print("no configuration satisfied the constraints")


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg.setdefault("trace", {})["seed"] = args.seed
    result, summary = run_from_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_summary_json(summary, os.path.join(args.out, "summary.json"))
    write_request_csv(result.ledger, os.path.join(args.out, "requests.csv"))
    with open(os.path.join(args.out, "trace.json"), "w") as fh:
        json.dump(export_chrome_trace(result.ledger), fh)
    _print_summary(summary, args.format)
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg.setdefault("trace", {})["seed"] = args.seed
    report = run_sweep(cfg, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    _print_sweep(report, args.format)
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    path = args.result
    if os.path.isdir(path):
        for name in ("sweep.json", "summary.json"):
            candidate = os.path.join(path, name)
            if os.path.exists(candidate):
                path = candidate
                break
        else:
            raise ConfigError(
                f"no sweep.json or summary.json found in {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read result file: {exc}") from exc
    if "points" in data:
        _print_sweep(data, args.format)
    elif "requests" in data:
        _print_summary(data, args.format)
    else:
        raise ConfigError("result file is neither a run summary nor a sweep report")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "report": _cmd_report}
    try:
        return handler[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StagesimError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
