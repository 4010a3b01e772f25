"""Request traces: CSV ingestion, CoV classification, synthetic generation,
and arrival-rate estimation.

Workloads are classified by the coefficient of variation of inter-arrival
times: Predictable (CoV <= 1), Normal (1 < CoV <= 4), Bursty (CoV > 4).
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .core import ArrivalStats, ConfigError


class TooFewArrivals(Exception):
    """CoV needs at least 3 arrivals for the function."""


class ClassUnreachable(Exception):
    """Generator could not hit the requested CoV class after retries."""


TRACE_HEADER = ["function_id", "arrival_ms", "prompt_tokens", "output_tokens"]


@dataclass(frozen=True)
class TraceRecord:
    function_id: str
    arrival_ms: float
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.prompt_tokens <= 0 or self.output_tokens <= 0:
            raise ConfigError("token counts must be > 0")


@dataclass(frozen=True)
class Trace:
    records: tuple[TraceRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        last = -math.inf
        for r in self.records:
            if r.arrival_ms < last:
                raise ConfigError("trace arrivals must be non-decreasing")
            last = r.arrival_ms

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def function_ids(self) -> list[str]:
        seen = dict.fromkeys(r.function_id for r in self.records)
        return list(seen)

    def arrivals_of(self, function_id: str) -> list[float]:
        return [r.arrival_ms for r in self.records if r.function_id == function_id]


class CovClass(Enum):
    PREDICTABLE = "predictable"
    NORMAL = "normal"
    BURSTY = "bursty"


def cov_class_of(cov: float) -> CovClass:
    if cov <= 1.0:
        return CovClass.PREDICTABLE
    if cov <= 4.0:
        return CovClass.NORMAL
    return CovClass.BURSTY


def classify_cov(trace: Trace, function_id: str) -> tuple[float, CovClass]:
    """CoV = stddev/mean of inter-arrival times over the whole trace window."""
    arrivals = trace.arrivals_of(function_id)
    if len(arrivals) < 3:
        raise TooFewArrivals(f"{function_id}: {len(arrivals)} arrivals, need >= 3")
    gaps = np.diff(np.asarray(arrivals, dtype=float))
    mean = float(gaps.mean())
    if mean == 0.0:
        return 0.0, CovClass.PREDICTABLE
    cov = float(gaps.std()) / mean
    return cov, cov_class_of(cov)


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream: adding streams never perturbs existing ones."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _token_counts(rng: np.random.Generator, n: int, median_prompt: float = 60.0,
                  median_output: float = 64.0, sigma: float = 0.6):
    prompts = np.maximum(1, np.rint(rng.lognormal(math.log(median_prompt), sigma, n))).astype(int)
    outputs = np.maximum(1, np.rint(rng.lognormal(math.log(median_output), sigma, n))).astype(int)
    return prompts, outputs


def _gamma_arrivals(rng, duration_s, rate, shape):
    t, out = 0.0, []
    scale = 1.0 / (rate * shape)
    while True:
        t += rng.gamma(shape, scale)
        if t >= duration_s:
            return out
        out.append(t)


def _mmpp_arrivals(rng, duration_s, rate, hi_ratio, lo_ratio, dwell_hi_s, dwell_lo_s):
    """Two-state Markov-modulated Poisson process with the given mean rate."""
    frac_hi = dwell_hi_s / (dwell_hi_s + dwell_lo_s)
    base = rate / (hi_ratio * frac_hi + lo_ratio * (1 - frac_hi))
    t, out, hi = 0.0, [], True
    while t < duration_s:
        dwell = rng.exponential(dwell_hi_s if hi else dwell_lo_s)
        state_rate = base * (hi_ratio if hi else lo_ratio)
        end = min(t + dwell, duration_s)
        if state_rate > 0:
            u = t
            while True:
                u += rng.exponential(1.0 / state_rate)
                if u >= end:
                    break
                out.append(u)
        t = end
        hi = not hi
    return out


def _onoff_arrivals(rng, duration_s, rate, burst_factor, on_s, off_s):
    """On/off modulated Poisson: bursts at burst_factor x the mean rate."""
    frac_on = on_s / (on_s + off_s)
    on_rate = rate / frac_on
    t, out, on = 0.0, [], True
    while t < duration_s:
        dwell = rng.exponential(on_s if on else off_s)
        end = min(t + dwell, duration_s)
        if on:
            u = t
            while True:
                u += rng.exponential(1.0 / on_rate)
                if u >= end:
                    break
                out.append(u)
        t = end
        on = not on
    _ = burst_factor  # burst contrast is on_rate/mean via the on fraction
    return out


def generate_trace(cov_class: CovClass, duration_s: float, mean_rate: float,
                   seed: int, function_id: str = "f0",
                   median_prompt_tokens: float = 60.0,
                   median_output_tokens: float = 64.0) -> Trace:
    """Synthesize a single-function trace that classifies into ``cov_class``.

    Self-checks with classify_cov and retries with more extreme parameters
    (up to 5 attempts) before raising ClassUnreachable. Deterministic per
    seed.
    """
    if mean_rate <= 0:
        raise ConfigError("mean_rate must be > 0")
    arr_rng = stream_rng(seed, f"arrivals/{cov_class.value}/{function_id}")
    tok_rng = stream_rng(seed, f"tokens/{function_id}")

    contrast = 8.0  # MMPP high/low rate ratio; adapted between attempts
    for attempt in range(5):
        if cov_class is CovClass.PREDICTABLE:
            shape = 4.0 * (2.0 ** attempt)  # CoV = 1/sqrt(shape)
            arrivals = _gamma_arrivals(arr_rng, duration_s, mean_rate, shape)
        elif cov_class is CovClass.NORMAL:
            # Dwell times track the window so several on/off phases fit.
            dwell_hi = duration_s / 8.0
            arrivals = _mmpp_arrivals(
                arr_rng, duration_s, mean_rate,
                hi_ratio=contrast, lo_ratio=0.1,
                dwell_hi_s=dwell_hi, dwell_lo_s=3.0 * dwell_hi)
        else:
            burst = 20.0 * (1.5 ** attempt)
            on_s = duration_s / (20.0 * (attempt + 1))
            off_s = on_s * (burst - 1.0)
            arrivals = _onoff_arrivals(
                arr_rng, duration_s, mean_rate, burst, on_s=on_s, off_s=off_s)

        if len(arrivals) < 3:
            continue
        prompts, outputs = _token_counts(
            tok_rng, len(arrivals), median_prompt_tokens, median_output_tokens)
        trace = Trace(tuple(
            TraceRecord(function_id, round(t * 1000.0, 3), int(p), int(o))
            for t, p, o in zip(arrivals, prompts, outputs)
        ))
        cov, got = classify_cov(trace, function_id)
        if got is cov_class:
            return trace
        # Steer the burst contrast toward the target band.
        contrast = contrast * 0.55 if cov > 4.0 else contrast * 1.8
    raise ClassUnreachable(f"could not generate a {cov_class.value} trace (seed {seed})")


def merge_traces(traces: list[Trace]) -> Trace:
    records = sorted(
        (r for t in traces for r in t),
        key=lambda r: (r.arrival_ms, r.function_id),
    )
    return Trace(tuple(records))


def estimate_rates(trace: Trace, window_s: float, half_life_s: float, now_ms: float) -> ArrivalStats:
    """Exponentially weighted arrival rate per function (requests/second).

    lambda = ln2/half_life * sum over in-window arrivals of
    2^(-(now - t)/half_life); a steady rate r converges to r.
    """
    if window_s <= 0:
        raise ConfigError("window_s must be > 0")
    rates: dict[str, float] = {}
    k = math.log(2.0) / half_life_s
    for fid in trace.function_ids():
        total = 0.0
        for t in trace.arrivals_of(fid):
            if t > now_ms:
                continue
            age_s = (now_ms - t) / 1000.0
            if age_s > window_s:
                continue
            total += math.exp(-k * age_s)
        rates[fid] = k * total
    return ArrivalStats(rates)


def mean_rates(trace: Trace, duration_ms: float | None = None) -> ArrivalStats:
    """Whole-trace mean arrival rate per function (historical profile)."""
    if len(trace) == 0:
        return ArrivalStats({})
    if duration_ms is None:
        duration_ms = max(r.arrival_ms for r in trace) or 1.0
    return ArrivalStats({
        fid: len(trace.arrivals_of(fid)) / (duration_ms / 1000.0)
        for fid in trace.function_ids()
    })


# ---------------------------------------------------------------------------
# CSV I/O


def write_trace_csv(trace: Trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in trace:
            arrival = int(r.arrival_ms) if float(r.arrival_ms).is_integer() else r.arrival_ms
            w.writerow([r.function_id, arrival, r.prompt_tokens, r.output_tokens])


def read_trace_csv(path) -> Trace:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRACE_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"{path}: missing trace columns {sorted(missing)}")
        records = [
            TraceRecord(
                row["function_id"], float(row["arrival_ms"]),
                int(row["prompt_tokens"]), int(row["output_tokens"]))
            for row in reader
        ]
    records.sort(key=lambda r: (r.arrival_ms, r.function_id))
    return Trace(tuple(records))


def from_azure_minute_counts(rows, function_id_key="HashFunction",
                             minute_keys=None, tokens=(60, 100)) -> Trace:
    """Adapter for the Azure Functions per-minute invocation schema.

    ``rows`` are dict-like records with per-minute invocation counts in
    columns "1".."1440"; counts are spread uniformly within each minute.
    """
    records = []
    prompt, output = tokens
    for row in rows:
        fid = str(row[function_id_key])
        keys = minute_keys or [k for k in row.keys() if k.isdigit()]
        for k in sorted(keys, key=int):
            count = int(float(row.get(k, 0) or 0))
            if count <= 0:
                continue
            minute_start = (int(k) - 1) * 60_000.0
            step = 60_000.0 / count
            for i in range(count):
                records.append(TraceRecord(fid, minute_start + step * (i + 0.5), prompt, output))
    records.sort(key=lambda r: (r.arrival_ms, r.function_id))
    return Trace(tuple(records))
