"""Figures written next to report files."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep PNG bytes free of version strings
_PNG_META = {"Software": None}


def _figure(width: float = 6.0, height: float | None = None):
    if height is None:
        height = width * (np.sqrt(5.0) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height))
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def _save(fig, path: str | os.PathLike) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return str(path)


def plot_hits_curve(hits: dict[int, float], mrr: float, path: str | os.PathLike) -> str:
    cutoffs = sorted(hits)
    fig, ax = _figure()
    ax.plot(cutoffs, [hits[c] for c in cutoffs], marker="o", color="C0", label="hits@N")
    ax.axhline(mrr, ls="--", color="C1", label=f"MRR = {mrr:.3f}")
    ax.set_xscale("log")
    ax.set_xticks(cutoffs)
    ax.set_xticklabels([str(c) for c in cutoffs])
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("N")
    ax.set_ylabel("fraction of queries")
    ax.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def plot_rank_histogram(ranks: Sequence[float | None], path: str | os.PathLike, max_rank: int = 20) -> str:
    ranked = [min(r, max_rank + 1) for r in ranks if r is not None]
    missing = sum(1 for r in ranks if r is None)
    fig, ax = _figure()
    bins = np.arange(0.5, max_rank + 2.5, 1.0)
    ax.hist(ranked, bins=bins, color="C0", label="ranked")
    ax.bar([max_rank + 2.5], [missing], width=1.0, color="C3", label="not retrieved")
    ax.set_xlabel(f"rank of gold answer (>{max_rank} pooled)")
    ax.set_ylabel("queries")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_unique_paths(counts: dict[str, int], path: str | os.PathLike, top: int = 40) -> str:
    items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    fig, ax = _figure(width=8.0, height=max(3.0, 0.22 * len(items) + 1.0))
    names = [name for name, _ in items][::-1]
    values = [v for _, v in items][::-1]
    ax.barh(range(len(items)), values, color="C2")
    ax.set_yticks(range(len(items)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("unique path types reaching the gold answer")
    return _save(fig, path)


def plot_tuning_grid(table: Sequence[tuple[int, int, float]], path: str | os.PathLike) -> str:
    ks = sorted({k for k, _, _ in table})
    ls = sorted({l for _, l, _ in table})
    grid = np.full((len(ks), len(ls)), np.nan)
    for k, l, mrr in table:
        grid[ks.index(k), ls.index(l)] = mrr
    fig, ax = _figure()
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(ls)))
    ax.set_xticklabels([str(l) for l in ls])
    ax.set_yticks(range(len(ks)))
    ax.set_yticklabels([str(k) for k in ks])
    ax.set_xlabel("l (path-type budget)")
    ax.set_ylabel("k (neighbours)")
    for i in range(len(ks)):
        for j in range(len(ls)):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="w", fontsize=7)
    fig.colorbar(im, ax=ax, label="validation MRR")
    return _save(fig, path)


def figure_path(report: str | os.PathLike, tag: str) -> str:
    root, _ = os.path.splitext(str(report))
    return f"{root}.{tag}.png"
