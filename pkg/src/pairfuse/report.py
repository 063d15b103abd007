"""Plots and tables from persisted results: grid heatmaps, top-5 tables,
and benchmark latency series."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .experiment import BenchReport, GridResult, _cell_key  # noqa: E402


def grid_matrix(grid: GridResult, metric: str = "mean_test_acc") -> np.ndarray:
    """(len(h_fids), len(v_fids)) matrix of a cell metric; NaN for failures."""
    mat = np.full((len(grid.h_fids), len(grid.v_fids)), np.nan)
    for i, h in enumerate(grid.h_fids):
        for j, v in enumerate(grid.v_fids):
            cell = grid.cells.get(_cell_key(h, v))
            if cell is not None and cell.status == "ok":
                mat[i, j] = getattr(cell, metric)
    return mat


def save_grid_heatmap(grid: GridResult, path) -> None:
    mat = grid_matrix(grid)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(grid.v_fids),
                                    1.0 + 0.7 * len(grid.h_fids)))
    im = ax.imshow(mat, cmap="viridis")
    ax.set_xticks(range(len(grid.v_fids)), [str(v) for v in grid.v_fids])
    ax.set_yticks(range(len(grid.h_fids)), [str(h) for h in grid.h_fids])
    ax.set_xlabel("vertical fuse function")
    ax.set_ylabel("horizontal fuse function")
    ax.set_title("mean test accuracy")
    for i in range(len(grid.h_fids)):
        for j in range(len(grid.v_fids)):
            if np.isfinite(mat[i, j]):
                ax.text(j, i, f"{mat[i, j]:.3f}", ha="center", va="center",
                        color="w", fontsize=7)
            else:
                ax.text(j, i, "x", ha="center", va="center", color="r")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def top_cells(grid: GridResult, k: int = 5) -> list[dict]:
    """Cells sorted by mean test accuracy descending, ties by F1 descending."""
    rows = []
    for h in grid.h_fids:
        for v in grid.v_fids:
            cell = grid.cells.get(_cell_key(h, v))
            if cell is None or cell.status != "ok":
                continue
            rows.append({
                "h_fid": h,
                "v_fid": v,
                "train_acc": cell.mean_train_acc,
                "test_acc": cell.mean_test_acc,
                "test_f1": cell.mean_test_f1,
            })
    rows.sort(key=lambda r: (-r["test_acc"], -r["test_f1"], r["h_fid"], r["v_fid"]))
    return rows[:k]


def save_top_table(grid: GridResult, path, k: int = 5) -> list[dict]:
    rows = top_cells(grid, k)
    lines = ["h_fid,v_fid,train_acc,test_acc,test_f1"]
    for r in rows:
        lines.append(
            f"{r['h_fid']},{r['v_fid']},{r['train_acc']:.6f},"
            f"{r['test_acc']:.6f},{r['test_f1']:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def save_bench_plot(report: BenchReport, path) -> None:
    """Latency-vs-index series per fid plus the no-fuse baseline."""
    fig, ax = plt.subplots(figsize=(9, 5))
    idx = np.arange(report.n_inputs)
    ax.plot(idx, np.asarray(report.baseline_s) * 1e3, label="no fuse",
            color="k", lw=0.8)
    for fid, series in sorted(report.per_fid_s.items()):
        ax.plot(idx, np.asarray(series) * 1e3, label=f"fuse {fid}", lw=0.6,
                alpha=0.8)
    ax.axvline(report.warmup, ls="--", color="gray", lw=0.8)
    ax.set_xlabel("input index")
    ax.set_ylabel("latency [ms]")
    ax.set_title(f"per-input inference time, shape {report.shape}")
    ax.legend(fontsize=7, ncols=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_csv(report: BenchReport, path) -> None:
    lines = ["variant,median_s,p95_s,mean_s,count,overhead_ratio"]
    for name, s in sorted(report.summary.items()):
        ratio = s.get("overhead_ratio", 1.0)
        lines.append(
            f"{name},{s['median_s']:.9f},{s['p95_s']:.9f},"
            f"{s['mean_s']:.9f},{s['count']},{ratio:.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
