"""Figure rendering for the report path (headless matplotlib)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_ttft_cdf(curves: dict, path) -> None:
    """One CDF line per run; ``curves`` maps run name -> [(ttft_ms, frac)]."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(curves):
        points = curves[name]
        if not points:
            continue
        xs, ys = zip(*points)
        ax.step(xs, ys, where="post", label=name)
    ax.set_xlabel("TTFT (ms)")
    ax.set_ylabel("cumulative fraction of requests")
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_comparison(rows: list, path) -> None:
    """Grouped bars: mean TTFT / mean E2E per run, cost on a twin axis."""
    names = [r["run"] for r in rows]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.35
    ax.bar([i - width / 2 for i in x], [r["ttft_mean_ms"] for r in rows],
           width, label="mean TTFT (ms)")
    ax.bar([i + width / 2 for i in x], [r["e2e_mean_ms"] for r in rows],
           width, label="mean E2E (ms)")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("latency (ms)")
    ax2 = ax.twinx()
    ax2.plot(list(x), [r["cost"] for r in rows], "ko--", label="cost")
    ax2.set_ylabel("monetary cost")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
