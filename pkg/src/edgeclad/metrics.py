"""Anomaly-detection and continual-learning metrics.

All functions are pure.  Scores are "higher means more anomalous"; labels
are 1 for anomalous samples or pixels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .validation import check_scored_set

METRIC_NAMES = ("image_roc_auc", "image_f1", "pixel_roc_auc", "pixel_f1", "pixel_pr_auc", "pixel_aupro")


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s, y = check_scored_set(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _block_counts(s: np.ndarray, y: np.ndarray):
    """Distinct thresholds (descending) with cumulative TP / FP at ``score >= t``."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last_of_block = np.r_[np.flatnonzero(np.diff(s_sorted)), s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[last_of_block]
    fp = (last_of_block + 1) - tp
    return s_sorted[last_of_block], tp.astype(np.float64), fp.astype(np.float64)


def f1_max(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds realized by the scores; ties go to the higher threshold."""
    s, y = check_scored_set(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("f1_max needs at least one positive")
    thr, tp, fp = _block_counts(s, y)
    f1 = 2 * tp / (tp + fp + n_pos)
    best = int(np.argmax(f1))
    return float(f1[best]), float(thr[best])


def pr_auc(scores, labels) -> float:
    """Average precision: sum of precision times recall increment, tied scores as one block."""
    s, y = check_scored_set(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("pr_auc needs at least one positive")
    _, tp, fp = _block_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float((precision * d_recall).sum())


EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def pro_curve(maps, masks, num_thresholds: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Per-region-overlap and false-positive rate over a descending threshold sweep.

    Thresholds are every distinct pooled score when there are at most
    ``num_thresholds`` of them, otherwise ``num_thresholds`` pooled quantiles.
    The returned FPR array is nondecreasing and starts at (0, 0).
    """
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    if maps.shape != masks.shape:
        raise ValueError(f"map shape {maps.shape} != mask shape {masks.shape}")
    if not masks.any():
        raise ValueError("aupro needs at least one anomalous pixel")
    regions = []
    for amap, mask in zip(maps, masks):
        labeled, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        for r in range(1, n + 1):
            regions.append(np.sort(amap[labeled == r]))
    neg = np.sort(maps[~masks])
    uniq = np.unique(maps)
    if uniq.size <= num_thresholds:
        thresholds = uniq[::-1]
    else:
        thresholds = np.unique(np.quantile(maps, np.linspace(0.0, 1.0, num_thresholds)))[::-1]
    if neg.size:
        fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    else:
        fpr = np.zeros_like(thresholds)
    pro = np.zeros_like(thresholds)
    for reg in regions:
        pro += (reg.size - np.searchsorted(reg, thresholds, side="left")) / reg.size
    pro /= len(regions)
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def _area_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit and keep.sum() < x.size:
        i = int(keep.sum())
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(maps, masks, fpr_limit: float = 0.3, num_thresholds: int = 500) -> float:
    """Area under the PRO-vs-FPR curve up to ``fpr_limit``, normalized to [0, 1].

    Ground-truth regions are 8-connected components of the masks; each counts
    equally regardless of its size.
    """
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, masks, num_thresholds)
    return _area_to_limit(fpr, pro, fpr_limit) / fpr_limit


def evaluate_task(maps, image_labels, masks, image_scores=None) -> dict[str, float]:
    """The six detection metrics for one task's test set."""
    maps = np.asarray(maps)
    masks = np.asarray(masks).astype(np.int8)
    if image_scores is None:
        image_scores = maps.reshape(maps.shape[0], -1).max(axis=1)
    img_f1, _ = f1_max(image_scores, image_labels)
    px_s, px_y = maps.ravel(), masks.ravel()
    px_f1, _ = f1_max(px_s, px_y)
    return {
        "image_roc_auc": roc_auc(image_scores, image_labels),
        "image_f1": img_f1,
        "pixel_roc_auc": roc_auc(px_s, px_y),
        "pixel_f1": px_f1,
        "pixel_pr_auc": pr_auc(px_s, px_y),
        "pixel_aupro": aupro(maps, masks),
    }


@dataclass
class ResultMatrix:
    """Lower-triangular grid: ``values[t, j]`` is the metric on task j after training task t."""

    name: str
    T: int
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.full((self.T, self.T), np.nan)
        else:
            self.values = np.array(self.values, dtype=np.float64)

    def set(self, t: int, j: int, value: float) -> None:
        if j > t:
            raise IndexError(f"entry ({t}, {j}) is above the diagonal")
        self.values[t, j] = value

    def row(self, t: int) -> np.ndarray:
        return self.values[t, : t + 1]

    def defined(self) -> int:
        return int(np.isfinite(self.values).sum())

    def final_mean(self) -> float:
        return float(np.mean(self.row(self.T - 1)))

    def running_mean(self) -> list[float | None]:
        """Mean over seen tasks after each training task (None where the row is unfilled)."""
        out = []
        for t in range(self.T):
            r = self.row(t)
            out.append(float(r.mean()) if np.isfinite(r).all() else None)
        return out

    def to_list(self) -> list[list[float | None]]:
        return [[None if not np.isfinite(v) else float(v) for v in self.values[t, : t + 1]] for t in range(self.T)]

    @classmethod
    def from_list(cls, name: str, rows) -> "ResultMatrix":
        T = len(rows)
        m = cls(name, T)
        for t, r in enumerate(rows):
            for j, v in enumerate(r):
                if v is not None:
                    m.values[t, j] = v
        return m


def forgetting(matrix, absolute: bool = False) -> float:
    """Average drop from each task's best earlier value to its final value.

    By default the drop is divided by the peak (relative forgetting) and
    clamped at zero.  The last task is excluded.  Tasks whose peak is zero are
    skipped with a warning.
    """
    a = matrix.values if isinstance(matrix, ResultMatrix) else np.asarray(matrix, dtype=np.float64)
    T = a.shape[0]
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    drops = []
    for j in range(T - 1):
        peak = float(np.max(a[j : T - 1, j]))
        final = float(a[T - 1, j])
        if absolute:
            drops.append(max(peak - final, 0.0))
            continue
        if peak <= 0:
            warnings.warn(f"task {j}: zero peak value, excluded from forgetting", RuntimeWarning, stacklevel=2)
            continue
        drops.append(max((peak - final) / peak, 0.0))
    if not drops:
        return float("nan")
    return float(np.mean(drops))


def jt_gap(method_value: float, jt_value: float) -> float:
    """Relative shortfall versus joint training."""
    if jt_value <= 0:
        raise ValueError("joint-training value must be positive")
    return (jt_value - method_value) / jt_value
