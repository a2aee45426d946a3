"""Quantitative outputs: error metrics, cluster accounting, and reports.

CSV layouts mirror the three standard result tables: per-method quality
(actual_k / loss / mae), the binary-mask value census, and the cluster vs
reference-class contingency with "count (pct)" cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .engine import ParamError
from .masks import BinarityCensus, ClassMap


@dataclass
class EvalReport:
    method: str
    k: int
    actual_k: int
    loss: float
    mae: float

    def __post_init__(self):
        if self.actual_k > self.k:
            raise ParamError(f"actual_k {self.actual_k} exceeds k {self.k}")
        if self.loss < 0 or self.mae < 0:
            raise ParamError("loss and mae must be non-negative")


@dataclass
class Contingency:
    clusters: list
    ref_names: list
    counts: np.ndarray  # (n_clusters, n_refs)

    def column_percentages(self) -> np.ndarray:
        totals = self.counts.sum(axis=0, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(totals > 0, 100.0 * self.counts / totals, 0.0)
        return pct

    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def mae(orig: np.ndarray, sim: np.ndarray) -> float:
    """Mean absolute difference over all pixels and bands."""
    orig = np.asarray(orig, dtype=np.float64)
    sim = np.asarray(sim, dtype=np.float64)
    if orig.shape != sim.shape:
        raise ParamError(f"mae shape mismatch: {orig.shape} vs {sim.shape}")
    return float(np.abs(orig - sim).mean())


def actual_k(class_map, k: int) -> int:
    """Distinct labels actually present in a prediction."""
    labels = class_map.labels if isinstance(class_map, ClassMap) else np.asarray(class_map)
    if labels.size and labels.max() >= k:
        raise ParamError(f"label {labels.max()} out of range for k={k}")
    return int(np.unique(labels).size)


def contingency(class_map, ref: np.ndarray, ref_names) -> Contingency:
    """Cross-tabulate cluster labels against a reference label raster."""
    labels = class_map.labels if isinstance(class_map, ClassMap) else np.asarray(class_map)
    ref = np.asarray(ref)
    if labels.shape != ref.shape:
        raise ParamError(f"rasters not aligned: {labels.shape} vs {ref.shape}")
    ref_ids = sorted(int(v) for v in np.unique(ref))
    names = list(ref_names)
    if len(names) < len(ref_ids):
        raise ParamError(f"{len(names)} reference names for {len(ref_ids)} reference classes")
    clusters = sorted(int(v) for v in np.unique(labels))
    counts = np.zeros((len(clusters), len(ref_ids)), dtype=np.int64)
    for i, c in enumerate(clusters):
        sel = ref[labels == c]
        for j, r in enumerate(ref_ids):
            counts[i, j] = int(np.count_nonzero(sel == r))
    return Contingency(clusters=clusters, ref_names=[names[r] for r in ref_ids], counts=counts)


def ordering_score(bank) -> float:
    """Spearman rank correlation between class index and mean texture value.

    Scores near +-1 indicate the one-dimensional texture ordering the
    method tends to produce.
    """
    textures = bank.textures if hasattr(bank, "textures") else np.asarray(bank)
    k = textures.shape[0]
    if k < 3:
        raise ParamError("ordering_score needs k >= 3")
    means = textures.reshape(k, -1).mean(axis=1)
    rho = spearmanr(np.arange(k), means).statistic
    return float(rho)


def merge_classes(class_map, selected) -> np.ndarray:
    """Binary raster: 1 where the label is in `selected`."""
    labels = class_map.labels if isinstance(class_map, ClassMap) else np.asarray(class_map)
    k = class_map.k if isinstance(class_map, ClassMap) else int(labels.max()) + 1
    selected = set(int(s) for s in selected)
    if any(s < 0 or s >= k for s in selected):
        raise ParamError(f"selected labels {selected} outside [0, {k})")
    return np.isin(labels, sorted(selected)).astype(np.uint8)


def ari(map_a, map_b) -> float:
    """Adjusted Rand index between two labelings (permutation-invariant)."""
    a = (map_a.labels if isinstance(map_a, ClassMap) else np.asarray(map_a)).ravel()
    b = (map_b.labels if isinstance(map_b, ClassMap) else np.asarray(map_b)).ravel()
    if a.shape != b.shape:
        raise ParamError(f"ari shape mismatch: {a.shape} vs {b.shape}")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        x = x.astype(np.float64)
        return x * (x - 1.0) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    n = comb2(np.array([a.size]))[0]
    if n == 0:
        return 1.0
    expected = sum_a * sum_b / n
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if denom == 0.0:
        return 1.0 if sum_ij == expected else 0.0
    return float((sum_ij - expected) / denom)


# ---------------------------------------------------------------------------
# CSV writers


def write_summary_csv(path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "k", "actual_k", "loss", "mae"])
        for r in reports:
            w.writerow([r.method, r.k, r.actual_k, f"{r.loss:.6f}", f"{r.mae:.6f}"])


def write_binarity_csv(path, rows: list[tuple[int, BinarityCensus]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "n_zero", "n_one", "n_nonbinary", "n_total", "pct_nonbinary"])
        for k, c in rows:
            w.writerow([k, c.n_zero, c.n_one, c.n_nonbinary, c.n_total, f"{c.pct_nonbinary:.7f}"])


def write_contingency_csv(path, tables: dict[str, Contingency]) -> None:
    """One row per (algorithm, cluster); cells formatted 'count (pct)'."""
    first = next(iter(tables.values()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "cluster"] + list(first.ref_names) + ["total"])
        grand = None
        for name, tab in tables.items():
            pct = tab.column_percentages()
            grand = tab.counts.sum()
            for i, cluster in enumerate(tab.clusters):
                cells = [
                    f"{int(tab.counts[i, j])} ({pct[i, j]:.2f})" for j in range(len(tab.ref_names))
                ]
                row_total = int(tab.counts[i].sum())
                row_pct = 100.0 * row_total / grand if grand else 0.0
                w.writerow([name, cluster] + cells + [f"{row_total} ({row_pct:.2f})"])


def write_history_csv(path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i + 1, f"{v:.8g}"])
