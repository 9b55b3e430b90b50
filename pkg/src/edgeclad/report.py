"""Tables and plots aggregated from run directories.

Every plot is written next to a CSV holding exactly the plotted data.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from .metrics import METRIC_NAMES, ResultMatrix, forgetting
from .replay import MB

SUMMARY_COLUMNS = (
    "strategy",
    "variant",
    "image_auc_roc",
    "image_f1",
    "pixel_auc_roc",
    "pixel_f1",
    "pixel_pr_auc",
    "pixel_au_pro",
    "architecture_memory_mb",
    "additional_memory_mb",
    "average_forgetting",
)
_SUMMARY_METRICS = dict(zip(SUMMARY_COLUMNS[2:8], METRIC_NAMES))


class ReportError(ValueError):
    pass


def load_run(run_dir) -> dict:
    path = Path(run_dir) / "result.json"
    try:
        res = json.loads(path.read_text())
        res["_matrices"] = {k: ResultMatrix.from_list(k, v) for k, v in res["matrices"].items()}
        res["_key"] = (res["config"]["strategy"]["kind"], res["config"]["variant"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ReportError(f"malformed result file {path}: {exc}") from exc
    return res


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and not np.isfinite(v)) else repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def curve_rows(runs: list[dict]) -> list[list]:
    """Running average over seen tasks, aggregated over runs sharing strategy and variant."""
    groups = defaultdict(list)
    for r in runs:
        groups[r["_key"]].append(r)
    rows = []
    for (strategy, variant), members in sorted(groups.items()):
        for metric in METRIC_NAMES:
            curves = [m["_matrices"][metric].running_mean() for m in members]
            T = len(curves[0])
            for t in range(T):
                pts = [c[t] for c in curves if c[t] is not None]
                if not pts:
                    continue
                rows.append([strategy, variant, metric, t + 1, _fmt(np.mean(pts)), _fmt(min(pts)), _fmt(max(pts)), len(pts)])
    return rows


def summary_rows(runs: list[dict]) -> list[list]:
    groups = defaultdict(list)
    for r in runs:
        groups[r["_key"]].append(r)
    rows = []
    for (strategy, variant), members in sorted(groups.items()):
        row = [strategy, variant]
        for metric in _SUMMARY_METRICS.values():
            row.append(_fmt(np.mean([m["_matrices"][metric].final_mean() for m in members])))
        row.append(_fmt(np.mean([m["resources"]["architecture_bytes"] / MB for m in members])))
        row.append(_fmt(np.mean([m["footprint"]["total_bytes"] / MB for m in members])))
        fg = []
        for m in members:
            mat = m["_matrices"]["pixel_f1"]
            if mat.T >= 2 and np.isfinite(mat.row(mat.T - 2)).all():
                fg.append(forgetting(mat))
        row.append(_fmt(np.mean(fg)) if fg else "")
        rows.append(row)
    return rows


def _plot_curves(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in sorted({(r[0], r[1]) for r in rows if r[2] == "pixel_f1"}):
        pts = [r for r in rows if (r[0], r[1]) == key and r[2] == "pixel_f1"]
        x = [r[3] for r in pts]
        ax.plot(x, [float(r[4]) for r in pts], marker="o", label=f"{key[1]} {key[0]}")
        ax.fill_between(x, [float(r[5]) for r in pts], [float(r[6]) for r in pts], alpha=0.15)
    ax.set_xlabel("tasks seen")
    ax.set_ylabel("pixel F1 (average over seen tasks)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_tradeoff(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for r in rows:
        ax.scatter(float(r[2]), float(r[3]))
        ax.annotate(f"{r[1]} {r[0]}", (float(r[2]), float(r[3])), fontsize=7)
    ax.set_xlabel("additional memory [MB]")
    ax.set_ylabel("final pixel F1")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_report(run_dirs, out_dir, plots: bool = True) -> dict[str, Path]:
    """Write curves, trade-off and summary CSVs (plus PNG plots) into ``out_dir``."""
    if not run_dirs:
        raise ReportError("no run directories given")
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = curve_rows(runs)
    summary = summary_rows(runs)
    pf1 = SUMMARY_COLUMNS.index("pixel_f1")
    mem = SUMMARY_COLUMNS.index("additional_memory_mb")
    tradeoff = [[r[0], r[1], r[mem], r[pf1]] for r in summary]
    paths = {
        "curves": out / "curves.csv",
        "tradeoff": out / "memory_tradeoff.csv",
        "summary": out / "summary.csv",
    }
    _write_csv(paths["curves"], ["strategy", "variant", "metric", "tasks_seen", "mean", "min", "max", "n_runs"], curves)
    _write_csv(paths["tradeoff"], ["strategy", "variant", "additional_memory_mb", "final_pixel_f1"], tradeoff)
    _write_csv(paths["summary"], SUMMARY_COLUMNS, summary)
    if plots:
        paths["curves_png"] = out / "curves_pixel_f1.png"
        paths["tradeoff_png"] = out / "memory_tradeoff.png"
        _plot_curves(curves, paths["curves_png"])
        _plot_tradeoff(tradeoff, paths["tradeoff_png"])
    return paths
