"""Command-line experiment runner.

Exit codes: 0 success, 1 configuration or input error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .catalog import CatalogError, Catalog, default_hardware, generate_variants, resnet50_like, write_profiles
from .config import ConfigError, build_trace, load_config
from .scenarios import BUILDERS
from .simulator import Scenario, SimulationError, Simulator
from .workload import PATTERNS, WorkloadError, format_buckets, gen_pattern, save_arrivals

log = logging.getLogger("modelless")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
INPUT_ERRORS = (ConfigError, WorkloadError, CatalogError, FileNotFoundError)


class CompareError(Exception):
    pass


def _scenario_config(args):
    if args.config and args.scenario:
        raise ConfigError("give either --config or --scenario, not both")
    if args.scenario:
        if args.scenario not in BUILDERS:
            raise ConfigError(f"unknown scenario {args.scenario!r}; choose from {', '.join(BUILDERS)}")
        kw = {}
        if args.policy:
            if args.scenario == "offline_colocation":
                raise ConfigError("offline_colocation does not take --policy")
            kw["policy"] = args.policy
        cfg = BUILDERS[args.scenario](**kw)
    elif args.config:
        cfg = load_config(args.config)
        if args.policy:
            cfg.policy = args.policy
    else:
        raise ConfigError("--config or --scenario is required")
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _scenario_config(args)
    scenario = Scenario.from_config(cfg)
    baseline = None
    if args.baseline:
        bpath = Path(args.baseline) / "summary.json"
        if not bpath.exists():
            raise ConfigError(f"baseline run not found: {bpath}")
        baseline = json.loads(bpath.read_text())
    result = Simulator(scenario).run()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = dict(result.summary)
    if baseline is not None:
        summary["baseline"] = {"name": baseline.get("name"), "policy": baseline.get("policy"),
                               "total_cost": baseline["total_cost"]}
        summary["cost_ratio_vs_baseline"] = (baseline["total_cost"] / summary["total_cost"]
                                             if summary["total_cost"] > 0 else None)
    (out / "metrics.csv").write_text(result.metrics_csv())
    (out / "plans.log").write_text(result.plan_log_text())
    (out / "scaling.log").write_text(result.scaling_log_text())
    (out / "throttle.log").write_text(result.throttle_log_text())
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.yaml").write_text(cfg.to_yaml())
    log.info("wrote %s (total cost %.4f, mean violation ratio %.4f)", out, summary["total_cost"],
             summary["mean_violation_ratio"])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _read_run(d: Path) -> tuple[dict, list[dict]]:
    if not d.is_dir():
        raise ConfigError(f"run directory not found: {d}")
    try:
        summary = json.loads((d / "summary.json").read_text())
        with open(d / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError as e:
        raise ConfigError(f"incomplete run directory {d}: {e.filename}") from None
    return summary, rows


def _ratio(a: float, b: float) -> float | None:
    if b == 0:
        return 1.0 if a == 0 else None
    return a / b


def compare_runs(dir_a: str | Path, dir_b: str | Path) -> dict:
    """Cost ratio, violation-ratio delta and throughput ratio of run a over
    run b, per interval and in aggregate."""
    sa, ra = _read_run(Path(dir_a))
    sb, rb = _read_run(Path(dir_b))
    if sa["horizon_s"] != sb["horizon_s"] or len(ra) != len(rb):
        raise CompareError("runs cover different horizons")
    intervals = []
    for x, y in zip(ra, rb):
        if x["time_s"] != y["time_s"]:
            raise CompareError("runs use different metric intervals")
        intervals.append({
            "time_s": float(x["time_s"]),
            "cost_ratio": _ratio(float(x["cost_cumulative"]), float(y["cost_cumulative"])),
            "violation_ratio_delta": float(x["violation_ratio"]) - float(y["violation_ratio"]),
            "throughput_ratio": _ratio(float(x["served"]), float(y["served"])),
        })
    return {
        "a": str(dir_a),
        "b": str(dir_b),
        "cost_ratio": _ratio(sa["total_cost"], sb["total_cost"]),
        "violation_ratio_delta": sa["mean_violation_ratio"] - sb["mean_violation_ratio"],
        "throughput_ratio": _ratio(sa["served"], sb["served"]),
        "intervals": intervals,
    }


def cmd_compare(args) -> int:
    report = compare_runs(args.run_a, args.run_b)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    agg = {k: report[k] for k in ("cost_ratio", "violation_ratio_delta", "throughput_ratio")}
    print(json.dumps(agg, sort_keys=True))
    return EXIT_OK


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            params[k] = json.loads(v)
        except json.JSONDecodeError:
            raise ConfigError(f"--param {k}: value must be JSON (number or list)") from None
    return params


def cmd_gen_trace(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        trace = build_trace(cfg)
        duration = cfg.horizon_s
    else:
        seed = 0 if args.seed is None else args.seed
        trace = gen_pattern(args.pattern, args.duration, seed, _parse_params(args.param))
        duration = args.duration
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "buckets":
        out.write_text(format_buckets(trace.bucket_counts(args.bucket_s, duration), args.bucket_s))
    else:
        save_arrivals(out, trace)
    print(f"{len(trace)} arrivals -> {out}")
    return EXIT_OK


def cmd_gen_catalog(args) -> int:
    try:
        batches = [int(b) for b in args.batches.split(",") if b]
    except ValueError:
        raise ConfigError(f"--batches must be comma-separated integers, got {args.batches!r}") from None
    arch = resnet50_like(app_ids=[args.app])
    catalog = Catalog([arch], generate_variants(arch, default_hardware(), batches))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_profiles(out, catalog)
    print(f"{len(catalog)} variants -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modelless", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one simulation and write its artifacts")
    r.add_argument("--config", help="scenario YAML")
    r.add_argument("--scenario", help=f"built-in scenario ({', '.join(BUILDERS)})")
    r.add_argument("--policy", help="override the policy mode")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--baseline", help="run directory to compute a cost ratio against")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare two run directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out", help="write the full report here")
    c.set_defaults(func=cmd_compare)

    t = sub.add_parser("gen-trace", help="write an arrival trace")
    t.add_argument("--config", help="take the workload from a scenario YAML")
    t.add_argument("--pattern", choices=PATTERNS, default="flat_low")
    t.add_argument("--duration", type=float, default=60.0)
    t.add_argument("--param", action="append", help="pattern parameter key=value (JSON value)")
    t.add_argument("--format", choices=("arrivals", "buckets"), default="arrivals")
    t.add_argument("--bucket-s", type=float, default=1.0)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_gen_trace)

    g = sub.add_parser("gen-catalog", help="write a synthetic profile file")
    g.add_argument("--batches", default="1,8")
    g.add_argument("--app", default="default")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="accepted for symmetry; generation is deterministic")
    g.set_defaults(func=cmd_gen_catalog)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, CompareError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - report anything else as a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
