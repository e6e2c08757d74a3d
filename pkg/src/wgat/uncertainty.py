"""Uncertainty analyses over learned Gaussian embeddings.

Covers variance size against user activity, top-K category diversity,
variance against item label count, and loss-curve oscillation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

ACTIVITY_EDGES = (1.0, 1.5, 2.0, 2.5)
DIVERSITY_WIDTH = 0.2
LABEL_GROUPS = ("1", "2", "3+")
STABILITY_WINDOW = 100
SMOOTHING = 10


class CategoryTable(dict):
    """Item id -> frozenset of category labels."""

    @classmethod
    def from_mapping(cls, mapping, num_items: int | None = None) -> "CategoryTable":
        table = cls()
        for item, labels in mapping.items():
            item = int(item)
            labels = frozenset(str(x) for x in labels)
            if not labels:
                continue
            if num_items is not None and not 0 <= item < num_items:
                raise ValueError(f"labeled item {item} is outside the item index")
            table[item] = labels
        return table

    def label_count(self, item: int) -> int:
        return len(self.get(item, ()))


def variance_norm(variance, per_entry_mean: bool = False):
    """Euclidean norm of each variance row (or the mean entry when asked)."""
    v = np.asarray(variance, dtype=np.float64)
    if per_entry_mean:
        return v.mean(axis=-1)
    return np.linalg.norm(v, axis=-1)


@dataclass
class BucketReport:
    title: str
    labels: list
    counts: list
    means: list

    @property
    def population(self) -> int:
        return int(sum(self.counts))

    def rows(self):
        for label, n, m in zip(self.labels, self.counts, self.means):
            yield label, n, m

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "count", "mean"])
        for label, n, m in self.rows():
            w.writerow([label, n, "" if m is None else repr(m)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"**{self.title}**", "", "| bucket | count | mean |", "|---|---:|---:|"]
        for label, n, m in self.rows():
            lines.append(f"| {label} | {n} | {'empty' if m is None else f'{m:.4f}'} |")
        return "\n".join(lines) + "\n"


def _edge_labels(edges) -> list[str]:
    bounds = [0.0, *edges]
    labels = [f"{lo:.1f}~{hi:.1f}" for lo, hi in zip(bounds[:-1], bounds[1:])]
    labels.append(f">={edges[-1]:.1f}")
    return labels


def _bucket_means(keys: np.ndarray, values: np.ndarray, n_buckets: int):
    counts, means = [], []
    for b in range(n_buckets):
        sel = values[keys == b]
        counts.append(int(len(sel)))
        means.append(float(sel.mean()) if len(sel) else None)
    return counts, means


def activity_bucket(counts, edges=ACTIVITY_EDGES) -> np.ndarray:
    """Bucket index of log10(count): [0, e0) -> 0, [e0, e1) -> 1, ..., >= e_last -> len(edges)."""
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bucket edges must be strictly ascending")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("interaction counts must be >= 1")
    return np.searchsorted(edges, np.log10(counts), side="right")


def group_by_o1(variances, train_counts, edges=ACTIVITY_EDGES,
                per_entry_mean: bool = False) -> BucketReport:
    """Mean variance norm of users grouped by log10(training interaction count)."""
    norms = variance_norm(variances, per_entry_mean)
    keys = activity_bucket(train_counts, edges)
    counts, means = _bucket_means(keys, norms, len(edges) + 1)
    return BucketReport("Average user variance by activity", _edge_labels(edges), counts, means)


def o2_diversity(topk, categories: CategoryTable) -> float:
    """1 - fraction of item pairs in the list whose label sets intersect.

    Unlabeled items are skipped. Returns nan when fewer than two labeled
    items remain.
    """
    labeled = [categories[i] for i in np.asarray(topk).tolist() if i in categories]
    k = len(labeled)
    if k < 2:
        return float("nan")
    same = sum(1 for a in range(k) for b in range(a + 1, k) if labeled[a] & labeled[b])
    return 1.0 - 2.0 * same / (k * (k - 1))


def group_by_o2(variances, rankings, categories: CategoryTable,
                width: float = DIVERSITY_WIDTH, per_entry_mean: bool = False) -> BucketReport:
    """Mean variance norm of users grouped by the diversity of their top-K list.

    ``rankings`` is a sequence of top-K item lists aligned with ``variances``.
    Users whose diversity is undefined are left out.
    """
    norms = variance_norm(variances, per_entry_mean)
    div = np.array([o2_diversity(r, categories) for r in rankings])
    keep = ~np.isnan(div)
    n_buckets = int(round(1.0 / width))
    keys = np.minimum((div[keep] / width).astype(np.int64), n_buckets - 1)
    counts, means = _bucket_means(keys, norms[keep], n_buckets)
    labels = [f"{b * width:.1f}~{(b + 1) * width:.1f}" for b in range(n_buckets)]
    return BucketReport("Average user variance by top-K diversity", labels, counts, means)


def variance_by_label_count(item_variances, categories: CategoryTable,
                            per_entry_mean: bool = False) -> BucketReport:
    """Mean variance norm of labeled items grouped by label count 1, 2, 3+."""
    norms = variance_norm(item_variances, per_entry_mean)
    items = np.array(sorted(categories), dtype=np.int64)
    n_labels = np.array([len(categories[i]) for i in items], dtype=np.int64)
    keys = np.minimum(n_labels, 3) - 1
    counts, means = _bucket_means(keys, norms[items], 3)
    return BucketReport("Average item variance by label count", list(LABEL_GROUPS),
                        counts, means)


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


def activity_correlation(user_variances, train_counts, per_entry_mean: bool = False) -> float:
    """Spearman rank correlation of log10(count) with the user variance norm."""
    return spearman(np.log10(train_counts), variance_norm(user_variances, per_entry_mean))


# --------------------------------------------------------------------------
# loss-curve stability


def oscillation(curve, window: int = STABILITY_WINDOW) -> float:
    """Population std of successive differences over the first ``window`` epochs."""
    c = np.asarray(curve, dtype=np.float64)[:window]
    if len(c) < 2:
        return 0.0
    return float(np.std(np.diff(c)))


def moving_average(curve, width: int = SMOOTHING) -> np.ndarray:
    c = np.asarray(curve, dtype=np.float64)
    if len(c) < width:
        return c.copy() if len(c) == 0 else np.array([c.mean()])
    return np.convolve(c, np.ones(width) / width, mode="valid")


def trends_down(curve, width: int = SMOOTHING, window: int = STABILITY_WINDOW) -> bool:
    """True if the smoothed curve ends lower than it starts."""
    ma = moving_average(np.asarray(curve)[:window], width)
    return bool(len(ma) >= 2 and ma[-1] < ma[0])


@dataclass
class StabilityRun:
    arm: str
    batch_size: int
    seed: int
    curve: list = field(repr=False)

    @property
    def statistic(self) -> float:
        return oscillation(self.curve)

    @property
    def decreasing(self) -> bool:
        return trends_down(self.curve)


def stability_report(runs) -> tuple[str, str]:
    """Summary CSV (one row per run) and long-format curve CSV for plotting."""
    summary = io.StringIO()
    w = csv.writer(summary, lineterminator="\n")
    w.writerow(["arm", "batch_size", "seed", "oscillation", "ma_decreasing", "epochs"])
    for r in runs:
        w.writerow([r.arm, r.batch_size, r.seed, repr(r.statistic), int(r.decreasing),
                    len(r.curve)])
    curves = io.StringIO()
    w = csv.writer(curves, lineterminator="\n")
    w.writerow(["arm", "batch_size", "seed", "epoch", "l_total"])
    for r in runs:
        for e, v in enumerate(r.curve[:STABILITY_WINDOW], start=1):
            w.writerow([r.arm, r.batch_size, r.seed, e, repr(float(v))])
    return summary.getvalue(), curves.getvalue()

