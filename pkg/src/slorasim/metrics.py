"""Aggregation of per-request records into evaluation metrics and
run-to-run comparison tables.

Percentiles use the nearest-rank method; TPOT is the mean inter-token gap
over the decode phase only (requests emitting a single token are excluded).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field


def percentile_nearest_rank(values: list, p: float) -> float:
    """Nearest-rank percentile: smallest value covering p% of the sample."""
    if not values:
        return math.nan
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class FunctionMetrics:
    function_id: str
    requests: int
    ttft_mean_ms: float
    ttft_p50_ms: float
    ttft_p90_ms: float
    ttft_p99_ms: float
    tpot_mean_ms: float
    e2e_mean_ms: float
    slo_violation_rate: float
    cold_breakdown_totals: dict


@dataclass
class MetricsReport:
    name: str
    per_function: dict
    overall: FunctionMetrics
    duration_s: float
    tokens_per_s: float
    requests_per_s: float
    monetary_cost: float
    cost_effectiveness: float
    peak_batch_size: int = 0
    baseline_relative_ce: float | None = None
    extras: dict = field(default_factory=dict)


def slo_violation_rate(records, slo_rule: str = "paper5x",
                       warm_ttft_ms: dict | None = None,
                       absolute_slo_ms: dict | None = None) -> dict:
    """Violation rate per function.

    ``paper5x``: violation iff TTFT > 5x the warm-start TTFT reference;
    ``absolute``: violation iff TTFT > the configured absolute SLO.
    """
    counts: dict[str, list] = {}
    for r in records:
        if math.isnan(r.ttft_ms):
            continue
        if slo_rule == "paper5x":
            threshold = 5.0 * warm_ttft_ms[r.function_id]
        elif slo_rule == "absolute":
            threshold = absolute_slo_ms[r.function_id]
        else:
            raise ValueError(f"unknown slo_rule {slo_rule!r}")
        hit = counts.setdefault(r.function_id, [0, 0])
        hit[0] += 1
        if r.ttft_ms > threshold:
            hit[1] += 1
    return {fid: viol / total for fid, (total, viol) in sorted(counts.items())}


def _summarize(name, records, violation_rates):
    done = [r for r in records if not math.isnan(r.ttft_ms)]
    ttfts = [r.ttft_ms for r in done]
    tpots = [r.tpot_ms for r in done if not math.isnan(r.tpot_ms)]
    e2es = [r.e2e_ms for r in done if not math.isnan(r.e2e_ms)]
    breakdown: dict[str, float] = {}
    for r in done:
        for k, v in r.cold_start_breakdown.items():
            breakdown[k] = breakdown.get(k, 0.0) + v
    total = len(done)
    viol = sum(violation_rates.get(fid, 0.0) * n for fid, n in _counts(done).items())
    return FunctionMetrics(
        function_id=name,
        requests=total,
        ttft_mean_ms=sum(ttfts) / total if total else math.nan,
        ttft_p50_ms=percentile_nearest_rank(ttfts, 50),
        ttft_p90_ms=percentile_nearest_rank(ttfts, 90),
        ttft_p99_ms=percentile_nearest_rank(ttfts, 99),
        tpot_mean_ms=sum(tpots) / len(tpots) if tpots else math.nan,
        e2e_mean_ms=sum(e2es) / len(e2es) if e2es else math.nan,
        slo_violation_rate=viol / total if total else 0.0,
        cold_breakdown_totals=breakdown,
    )


def _counts(records) -> dict:
    out: dict[str, int] = {}
    for r in records:
        out[r.function_id] = out.get(r.function_id, 0) + 1
    return out


def build_report(name: str, result, pricing, slo_rule: str = "paper5x",
                 absolute_slo_ms: dict | None = None) -> MetricsReport:
    """MetricsReport from a SimulationResult and a pricing schedule."""
    from .engine import cost_effectiveness as ce, monetary_cost

    records = result.records
    rates = slo_violation_rate(
        records, slo_rule, warm_ttft_ms=result.warm_ttft_ms,
        absolute_slo_ms=absolute_slo_ms)
    per_function = {}
    for fid in sorted({r.function_id for r in records}):
        fn_records = [r for r in records if r.function_id == fid]
        per_function[fid] = _summarize(fid, fn_records, rates)
    overall = _summarize("overall", records, rates)

    duration_s = result.duration_ms / 1000.0 if result.duration_ms > 0 else 0.0
    tokens = sum(r.output_tokens for r in records if not math.isnan(r.completion_ms))
    completed = sum(1 for r in records if not math.isnan(r.completion_ms))
    cost = monetary_cost(result.usage, pricing)
    try:
        effectiveness = ce(overall.e2e_mean_ms, cost)
    except ValueError:
        effectiveness = math.nan
    return MetricsReport(
        name=name,
        per_function=per_function,
        overall=overall,
        duration_s=duration_s,
        tokens_per_s=tokens / duration_s if duration_s else 0.0,
        requests_per_s=completed / duration_s if duration_s else 0.0,
        monetary_cost=cost,
        cost_effectiveness=effectiveness,
        peak_batch_size=result.peak_batch_size,
    )


def compare_runs(reports: list[MetricsReport], baseline_name: str):
    """Comparison rows with cost-effectiveness relative to the baseline."""
    by_name = {r.name: r for r in reports}
    if baseline_name not in by_name:
        raise KeyError(f"baseline run {baseline_name!r} not found")
    base = by_name[baseline_name]
    rows = []
    for name in sorted(by_name):
        r = by_name[name]
        rows.append({
            "run": name,
            "ttft_mean_ms": r.overall.ttft_mean_ms,
            "e2e_mean_ms": r.overall.e2e_mean_ms,
            "cost": r.monetary_cost,
            "cost_effectiveness": r.cost_effectiveness,
            "relative_cost_effectiveness": r.cost_effectiveness / base.cost_effectiveness,
            "slo_violation_rate": r.overall.slo_violation_rate,
        })
    return rows


COMPARISON_COLUMNS = [
    "run", "ttft_mean_ms", "e2e_mean_ms", "cost",
    "cost_effectiveness", "relative_cost_effectiveness", "slo_violation_rate",
]


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in COMPARISON_COLUMNS})
    return buf.getvalue()


def comparison_text(rows) -> str:
    headers = COMPARISON_COLUMNS
    table = [headers] + [[_fmt(r[k]) for k in headers] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for row in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def ttft_cdf(records) -> list[tuple[float, float]]:
    """(ttft_ms, cumulative fraction) points for plotting."""
    ttfts = sorted(r.ttft_ms for r in records if not math.isnan(r.ttft_ms))
    n = len(ttfts)
    return [(t, (i + 1) / n) for i, t in enumerate(ttfts)]


def write_cdf_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ttft_ms", "cum_fraction"])
        for t, frac in ttft_cdf(records):
            w.writerow([_fmt(t), _fmt(frac)])


REQUEST_CSV_COLUMNS = [
    "request_id", "function", "arrival_ms", "ttft_ms", "tpot_ms", "e2e_ms",
    "cold_container_init_ms", "cold_library_load_ms", "cold_backbone_load_ms",
    "cold_adapter_load_ms", "cold_kernel_compile_ms",
]


def write_requests_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REQUEST_CSV_COLUMNS)
        for r in records:
            bd = r.cold_start_breakdown
            w.writerow([
                r.request_id, r.function_id, _fmt(float(r.arrival_ms)),
                _fmt(float(r.ttft_ms)), _fmt(float(r.tpot_ms)), _fmt(float(r.e2e_ms)),
                _fmt(bd.get("container_init", 0.0)), _fmt(bd.get("library_load", 0.0)),
                _fmt(bd.get("backbone_load", 0.0)), _fmt(bd.get("adapter_load", 0.0)),
                _fmt(bd.get("kernel_compile", 0.0)),
            ])


def report_to_dict(report: MetricsReport) -> dict:
    def fm(m: FunctionMetrics) -> dict:
        return {
            "requests": m.requests,
            "ttft_mean_ms": m.ttft_mean_ms,
            "ttft_p50_ms": m.ttft_p50_ms,
            "ttft_p90_ms": m.ttft_p90_ms,
            "ttft_p99_ms": m.ttft_p99_ms,
            "tpot_mean_ms": m.tpot_mean_ms,
            "e2e_mean_ms": m.e2e_mean_ms,
            "slo_violation_rate": m.slo_violation_rate,
            "cold_breakdown_totals": m.cold_breakdown_totals,
        }

    return {
        "name": report.name,
        "duration_s": report.duration_s,
        "tokens_per_s": report.tokens_per_s,
        "requests_per_s": report.requests_per_s,
        "monetary_cost": report.monetary_cost,
        "cost_effectiveness": report.cost_effectiveness,
        "peak_batch_size": report.peak_batch_size,
        "overall": fm(report.overall),
        "per_function": {fid: fm(m) for fid, m in report.per_function.items()},
    }


def report_from_dict(doc: dict) -> MetricsReport:
    def fm(name, d) -> FunctionMetrics:
        return FunctionMetrics(
            function_id=name,
            requests=d["requests"],
            ttft_mean_ms=d["ttft_mean_ms"],
            ttft_p50_ms=d["ttft_p50_ms"],
            ttft_p90_ms=d["ttft_p90_ms"],
            ttft_p99_ms=d["ttft_p99_ms"],
            tpot_mean_ms=d["tpot_mean_ms"],
            e2e_mean_ms=d["e2e_mean_ms"],
            slo_violation_rate=d["slo_violation_rate"],
            cold_breakdown_totals=d.get("cold_breakdown_totals", {}),
        )

    return MetricsReport(
        name=doc["name"],
        per_function={fid: fm(fid, d) for fid, d in doc["per_function"].items()},
        overall=fm("overall", doc["overall"]),
        duration_s=doc["duration_s"],
        tokens_per_s=doc["tokens_per_s"],
        requests_per_s=doc["requests_per_s"],
        monetary_cost=doc["monetary_cost"],
        cost_effectiveness=doc["cost_effectiveness"],
        peak_batch_size=doc.get("peak_batch_size", 0),
    )


def write_summary(report: MetricsReport, json_path, text_path=None) -> None:
    doc = report_to_dict(report)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if text_path is not None:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(summary_text(report))


def summary_text(report: MetricsReport) -> str:
    o = report.overall
    lines = [
        f"run: {report.name}",
        f"requests: {o.requests}",
        f"duration_s: {_fmt(report.duration_s)}",
        f"ttft_ms mean/p50/p90/p99: {_fmt(o.ttft_mean_ms)} / {_fmt(o.ttft_p50_ms)}"
        f" / {_fmt(o.ttft_p90_ms)} / {_fmt(o.ttft_p99_ms)}",
        f"tpot_mean_ms: {_fmt(o.tpot_mean_ms)}",
        f"e2e_mean_ms: {_fmt(o.e2e_mean_ms)}",
        f"throughput: {_fmt(report.tokens_per_s)} tok/s, {_fmt(report.requests_per_s)} req/s",
        f"slo_violation_rate: {_fmt(o.slo_violation_rate)}",
        f"monetary_cost: {_fmt(report.monetary_cost)}",
        f"cost_effectiveness: {_fmt(report.cost_effectiveness)}",
        f"peak_batch_size: {report.peak_batch_size}",
    ]
    return "\n".join(lines) + "\n"
