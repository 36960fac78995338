"""Static figures written next to the CSV outputs."""
from __future__ import annotations

import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)


def frontier_scatter(candidates, path, title: str = "Agreement vs latency") -> None:
    """P (overall agreement) against latency; frontier members are highlighted.

    ``candidates`` need ``metrics`` and ``on_frontier`` attributes.
    """
    fig, ax = plt.subplots(figsize=(6, 4.5))
    rest = [c for c in candidates if not c.on_frontier]
    front = sorted((c for c in candidates if c.on_frontier), key=lambda c: c.metrics.L)
    if rest:
        ax.scatter([c.metrics.L for c in rest], [c.metrics.P for c in rest], s=18,
                   color="0.6", label="evaluated", gid="evaluated")
    if front:
        ax.scatter([c.metrics.L for c in front], [c.metrics.P for c in front], s=36,
                   color="tab:red", marker="D", label="frontier (5 objectives)", zorder=3,
                   gid="frontier")
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("overall agreement P")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    log.info("wrote %s", path)


def breakdown_bars(breakdown, path, title: str = "Cost breakdown") -> None:
    """Side-by-side FLOPs and parameter shares per block."""
    shares = breakdown.shares()
    blocks = list(shares)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(blocks))
    ax.bar([x - 0.2 for x in xs], [shares[b][0] for b in blocks], width=0.4, label="FLOPs %")
    ax.bar([x + 0.2 for x in xs], [shares[b][1] for b in blocks], width=0.4, label="params %")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(blocks, rotation=30, ha="right")
    ax.set_ylabel("share (%)")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
