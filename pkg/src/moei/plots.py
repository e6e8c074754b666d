"""Static charts rendered from exported metric CSVs."""

from __future__ import annotations

import os
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench.tasks import EI_FAMILIES  # noqa: E402
from .export import read_csv  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _seed_rows(records: List[Dict[str, str]]) -> List[Dict[str, str]]:
    """Mean rows when present, otherwise every per-seed row."""
    means = [r for r in records if r["seed"] == "mean"]
    return means or [r for r in records if r["seed"] != "spread"]


def plot_forgetting(metrics_csv: str, path: str) -> str:
    """Bars: GI before/after per method, and EI after per facet."""
    rows = _seed_rows(read_csv(metrics_csv))
    methods = list(dict.fromkeys(r["method"] for r in rows))

    def value(method, dim, col):
        vals = [float(r[col]) for r in rows if r["method"] == method and r["dimension"] == dim]
        return float(np.mean(vals)) if vals else np.nan

    fig, (ax_gi, ax_ei) = plt.subplots(1, 2, figsize=(12, 4.5))
    x = np.arange(len(methods))
    ax_gi.bar(x - 0.2, [value(m, "GI", "before") for m in methods], 0.4, label="before")
    ax_gi.bar(x + 0.2, [value(m, "GI", "after") for m in methods], 0.4, label="after")
    ax_gi.set_title("GI retention")
    ax_gi.set_ylabel("mean GI accuracy")
    width = 0.8 / len(EI_FAMILIES)
    for i, facet in enumerate(EI_FAMILIES):
        ax_ei.bar(x + (i - 1) * width, [value(m, facet, "after") for m in methods], width, label=facet)
    ax_ei.set_title("EI after adaptation")
    for ax in (ax_gi, ax_ei):
        ax.set_xticks(x)
        ax.set_xticklabels(methods, rotation=35, ha="right", fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_sweep(sweep_csv: str, path: str) -> str:
    """Lines: GI after adaptation and mean EI against replay-set size, one line per method."""
    rows = read_csv(sweep_csv)
    fig, (ax_gi, ax_ei) = plt.subplots(1, 2, figsize=(10, 4))
    for method in dict.fromkeys(r["method"] for r in rows):
        sel = sorted((r for r in rows if r["method"] == method), key=lambda r: int(r["replay_size"]))
        sizes = [int(r["replay_size"]) for r in sel]
        ax_gi.plot(sizes, [float(r["gi_after"]) for r in sel], marker="o", label=method)
        ax_ei.plot(sizes, [np.mean([float(r[f]) for f in EI_FAMILIES]) for r in sel], marker="o", label=method)
    ax_gi.set_title("GI after adaptation")
    ax_ei.set_title("mean EI after adaptation")
    for ax in (ax_gi, ax_ei):
        ax.set_xlabel("replay-set size")
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_router(router_csv: str, path: str, site: Optional[str] = None) -> str:
    """Heatmap of mean gate values (datasets x slots) for one site."""
    rows = read_csv(router_csv)
    sites = list(dict.fromkeys(r["site"] for r in rows))
    site = site or sites[-1]
    sel = [r for r in rows if r["site"] == site]
    slots = [c for c in sel[0].keys() if c == "alpha" or c.startswith("beta_")]
    grid = np.array([[float(r[c]) for c in slots] for r in sel])
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(slots), 0.5 + 0.45 * len(sel)))
    im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(slots)))
    ax.set_xticklabels(slots, fontsize=8)
    ax.set_yticks(range(len(sel)))
    ax.set_yticklabels([r["dataset"] for r in sel], fontsize=8)
    ax.set_title(f"gate means at {site}", fontsize=9)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)
