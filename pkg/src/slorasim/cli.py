"""Command-line experiment runner.

Subcommands: plan, trace gen, trace classify, simulate, sweep, report.
Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from . import metrics, preload, profiles, workload
from .core import ConfigError, UnknownIdError, load_cluster, load_functions, validate_plan
from .engine import Pricing, SimConfig, run

VARIANTS = ("full", "nbs", "npl", "ndo", "nab")


class CliError(Exception):
    """Bad arguments or configuration; maps to exit code 1."""


@dataclass(frozen=True)
class ExperimentConfig:
    cluster_file: str | None
    functions_file: str | None
    pricing_file: str | None
    trace: str                  # a CSV path or "gen:<class>"
    variant: str
    nab_size: int | None
    nab_delay_ms: float
    duration_s: float
    rate: float
    seed: int
    out_dir: Path
    figures: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise CliError(f"unknown variant {self.variant!r}")
        if self.variant == "nab" and (self.nab_size is None or self.nab_size < 1):
            raise CliError("variant nab needs --nab-size >= 1")


def _load_inputs(cfg: ExperimentConfig):
    cluster = load_cluster(cfg.cluster_file) if cfg.cluster_file else profiles.default_cluster()
    functions = load_functions(cfg.functions_file) if cfg.functions_file else profiles.default_functions()
    if cfg.pricing_file:
        with open(cfg.pricing_file, encoding="utf-8") as fh:
            pricing = Pricing.from_dict(yaml.safe_load(fh))
    else:
        pricing = profiles.default_pricing()
    return cluster, functions, pricing


def _resolve_trace(cfg: ExperimentConfig, functions) -> workload.Trace:
    if not cfg.trace.startswith("gen:"):
        return workload.read_trace_csv(cfg.trace)
    class_name = cfg.trace.split(":", 1)[1]
    try:
        cov_class = workload.CovClass(class_name)
    except ValueError:
        raise CliError(f"unknown workload class {class_name!r}") from None
    traces = [
        workload.generate_trace(cov_class, cfg.duration_s, cfg.rate, cfg.seed,
                                function_id=f.id)
        for f in sorted(functions, key=lambda f: f.id)
    ]
    return workload.merge_traces(traces)


def sim_config(cfg: ExperimentConfig) -> SimConfig:
    c = SimConfig(seed=cfg.seed)
    if cfg.variant == "nbs":
        c = replace(c, sharing_enabled=False)
    elif cfg.variant == "npl":
        c = replace(c, preload_enabled=False)
    elif cfg.variant == "ndo":
        c = replace(c, offload_enabled=False)
    elif cfg.variant == "nab":
        c = replace(c, fixed_batching=(cfg.nab_size, cfg.nab_delay_ms))
    return c


def run_experiment(cfg: ExperimentConfig) -> metrics.MetricsReport:
    """Execute one variant and write its run artifacts into ``cfg.out_dir``."""
    cluster, functions, pricing = _load_inputs(cfg)
    trace = _resolve_trace(cfg, functions)
    result = run(sim_config(cfg), cluster, functions, trace)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_requests_csv(result.records, cfg.out_dir / "requests.csv")
    report = metrics.build_report(cfg.variant, result, pricing)
    metrics.write_summary(report, cfg.out_dir / "summary.json", cfg.out_dir / "summary.txt")
    metrics.write_cdf_csv(result.records, cfg.out_dir / "ttft_cdf.csv")
    if cfg.figures:
        from . import plotting
        plotting.render_ttft_cdf(
            {cfg.variant: metrics.ttft_cdf(result.records)},
            cfg.out_dir / "ttft_cdf.png")
    return report


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_plan(args) -> int:
    cluster = load_cluster(args.cluster) if args.cluster else profiles.default_cluster()
    functions = load_functions(args.functions) if args.functions else profiles.default_functions()
    with open(args.rates, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    rates = doc.get("rates", doc)
    if not isinstance(rates, dict):
        raise CliError(f"{args.rates}: expected a mapping of function id to requests/s")
    arrival = workload.ArrivalStats({str(k): float(v) for k, v in rates.items()})

    benefits = preload.compute_benefits(functions, arrival)
    solver = preload.exact_preload if args.exact else preload.greedy_preload
    plan = solver(benefits, cluster, functions)
    violations = validate_plan(plan, cluster, functions)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "plan.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["function_id", "kind", "tier", "instance", "value", "weight", "density"])
        for p in plan:
            e = benefits.get(p.function_id, p.kind, p.tier)
            w.writerow([p.function_id, p.kind.value, p.tier.value, p.instance,
                        f"{e.value:.6g}", e.weight, f"{e.density:.6g}"])
    with open(out / "feasibility.txt", "w", encoding="utf-8") as fh:
        fh.write(f"placements: {len(plan)}\n")
        fh.write(f"total_value: {benefits.value_of(plan):.6g}\n")
        fh.write(f"feasible: {'yes' if not violations else 'no'}\n")
        for v in violations:
            fh.write(f"violation {v.code.value}: {v.message}\n")
    print(f"wrote {out / 'plan.csv'} ({len(plan)} placements)")
    return 0


def _cmd_trace_gen(args) -> int:
    try:
        cov_class = workload.CovClass(args.cls)
    except ValueError:
        raise CliError(f"unknown workload class {args.cls!r}") from None
    trace = workload.generate_trace(
        cov_class, args.duration, args.rate, args.seed, function_id=args.function_id)
    workload.write_trace_csv(trace, args.out)
    print(f"wrote {args.out} ({len(trace)} arrivals)")
    return 0


def _cmd_trace_classify(args) -> int:
    trace = workload.read_trace_csv(args.file)
    for fid in sorted(trace.function_ids()):
        try:
            cov, cls = workload.classify_cov(trace, fid)
        except workload.TooFewArrivals:
            print(f"{fid}\ttoo-few-arrivals")
            continue
        print(f"{fid}\t{cov:.4f}\t{cls.value}")
    return 0


def _experiment_from_args(args, variant: str, out_dir: Path) -> ExperimentConfig:
    return ExperimentConfig(
        cluster_file=args.cluster,
        functions_file=args.functions,
        pricing_file=args.pricing,
        trace=args.trace,
        variant=variant,
        nab_size=args.nab_size,
        nab_delay_ms=args.nab_delay_ms,
        duration_s=args.duration,
        rate=args.rate,
        seed=args.seed,
        out_dir=out_dir,
        figures=args.figures,
    )


def _cmd_simulate(args) -> int:
    cfg = _experiment_from_args(args, args.variant, Path(args.out))
    report = run_experiment(cfg)
    print(metrics.summary_text(report), end="")
    return 0


def _cmd_sweep(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise CliError("--variants is empty")
    out = Path(args.out)
    reports = []
    for variant in variants:
        cfg = _experiment_from_args(args, variant, out / variant)
        reports.append(run_experiment(cfg))
    baseline = "full" if "full" in variants else variants[0]
    rows = metrics.compare_runs(reports, baseline)
    (out / "comparison.csv").write_text(metrics.comparison_csv(rows), encoding="utf-8")
    (out / "comparison.txt").write_text(metrics.comparison_text(rows), encoding="utf-8")
    if args.figures:
        from . import plotting
        plotting.render_comparison(rows, out / "comparison.png")
    print(metrics.comparison_text(rows), end="")
    return 0


def _read_run_dir(path: Path):
    with open(path / "summary.json", encoding="utf-8") as fh:
        report = metrics.report_from_dict(json.load(fh))
    curve = []
    cdf = path / "ttft_cdf.csv"
    if cdf.exists():
        with open(cdf, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                curve.append((float(row["ttft_ms"]), float(row["cum_fraction"])))
    return report, curve


def _cmd_report(args) -> int:
    runs = [Path(p) for p in args.runs]
    loaded = [_read_run_dir(p) for p in runs]
    reports = [rep for rep, _ in loaded]
    curves = {rep.name: curve for rep, curve in loaded}
    baseline = args.baseline or reports[0].name
    rows = metrics.compare_runs(reports, baseline)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(metrics.comparison_csv(rows), encoding="utf-8")
    (out / "comparison.txt").write_text(metrics.comparison_text(rows), encoding="utf-8")
    with open(out / "ttft_cdf.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "ttft_ms", "cum_fraction"])
        for name in sorted(curves):
            for t, frac in curves[name]:
                w.writerow([name, f"{t:.6g}", f"{frac:.6g}"])
    from . import plotting
    plotting.render_ttft_cdf(curves, out / "ttft_cdf.png")
    plotting.render_comparison(rows, out / "comparison.png")
    print(metrics.comparison_text(rows), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_experiment_args(p: argparse.ArgumentParser):
    p.add_argument("--cluster", help="cluster YAML (default: bundled profile)")
    p.add_argument("--functions", help="function catalog YAML (default: bundled profile)")
    p.add_argument("--pricing", help="pricing YAML (default: bundled prices)")
    p.add_argument("--trace", required=True,
                   help="trace CSV path, or gen:<predictable|normal|bursty>")
    p.add_argument("--duration", type=float, default=120.0,
                   help="generated trace length in seconds (gen: traces only)")
    p.add_argument("--rate", type=float, default=0.1,
                   help="mean arrivals/s per function (gen: traces only)")
    p.add_argument("--nab-size", type=int, default=None, help="fixed batch size (variant nab)")
    p.add_argument("--nab-delay-ms", type=float, default=0.0, help="fixed batch delay (variant nab)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slorasim",
        description="Discrete-event simulator for serverless LoRA-LLM serving.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="compute and validate a pre-load plan")
    p.add_argument("--cluster")
    p.add_argument("--functions")
    p.add_argument("--rates", required=True, help="YAML mapping function id -> requests/s")
    p.add_argument("--exact", action="store_true", help="exhaustive solver (small instances)")
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("trace", help="generate or classify request traces")
    tsub = p.add_subparsers(dest="trace_command", required=True)
    g = tsub.add_parser("gen", help="synthesize a trace of a given burstiness class")
    g.add_argument("--class", dest="cls", required=True,
                   choices=[c.value for c in workload.CovClass])
    g.add_argument("--duration", type=float, required=True, help="seconds")
    g.add_argument("--rate", type=float, required=True, help="mean arrivals/s")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--function-id", default="f0")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_trace_gen)
    c = tsub.add_parser("classify", help="report CoV class per function")
    c.add_argument("file")
    c.set_defaults(func=_cmd_trace_classify)

    p = sub.add_parser("simulate", help="run one policy variant over a trace")
    p.add_argument("--variant", default="full", choices=VARIANTS)
    _add_experiment_args(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="run several variants and compare them")
    p.add_argument("--variants", required=True, help="comma-separated variant names")
    _add_experiment_args(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="compare existing run directories")
    p.add_argument("runs", nargs="+", help="run directories written by simulate/sweep")
    p.add_argument("--baseline", help="run name to normalize against (default: first)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, UnknownIdError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
