"""Shapley attribution over the flattened 14 x F input.

The value of a coalition S is the model output on an input whose columns in
S come from the explained sample and whose other columns hold the background
mean.  Small column sets are enumerated exactly; the full 238-column input
uses permutation sampling, which also yields a standard error per column.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

MAX_EXACT = 12
TOP_K = 50

PredictFn = Callable[[np.ndarray], np.ndarray]  # (n, d) -> (n,)


class AttributionError(ValueError):
    pass


@dataclass
class ShapleyResult:
    values: np.ndarray  # per active column
    base: float  # v(empty coalition)
    prediction: float  # v(all active columns)
    se: Optional[np.ndarray] = None


def _coalition_inputs(x: np.ndarray, background: np.ndarray, cols: np.ndarray, masks: np.ndarray) -> np.ndarray:
    Z = np.repeat(background[None, :], len(masks), axis=0)
    for j, c in enumerate(cols):
        on = masks[:, j]
        Z[on, c] = x[c]
    return Z


def exact_shapley(predict_fn: PredictFn, x, background, active: Optional[Sequence[int]] = None) -> ShapleyResult:
    """Shapley values of the ``active`` columns by enumerating all coalitions.

    Columns outside ``active`` stay at their background value throughout.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.asarray(background, dtype=np.float64).ravel()
    cols = np.arange(len(x)) if active is None else np.asarray(active, dtype=np.int64)
    n = len(cols)
    if n > MAX_EXACT:
        raise AttributionError(f"exact enumeration limited to {MAX_EXACT} columns, got {n}; use sampled_shapley")
    codes = np.arange(2 ** n)
    masks = ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    v = np.asarray(predict_fn(_coalition_inputs(x, background, cols, masks)), dtype=np.float64).ravel()
    sizes = masks.sum(axis=1)
    # weight of a coalition of size s that excludes the player: s! (n-s-1)! / n!
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) if s < n else 0.0
                       for s in range(n + 1)])
    values = np.zeros(n)
    for j in range(n):
        without = ~masks[:, j]
        S = codes[without]
        values[j] = np.sum(weight[sizes[without]] * (v[S | (1 << j)] - v[S]))
    return ShapleyResult(values, float(v[0]), float(v[-1]))


def sampled_shapley(predict_fn: PredictFn, x, background, n_permutations: int = 200, seed: int = 0,
                    batch_permutations: int = 16) -> ShapleyResult:
    """Permutation-sampling estimate with per-column standard errors."""
    if n_permutations < 1:
        raise AttributionError(f"n_permutations must be >= 1, got {n_permutations}")
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.asarray(background, dtype=np.float64).ravel()
    d = len(x)
    rng = np.random.default_rng(seed)
    contrib = np.empty((n_permutations, d))
    base = prediction = None
    for start in range(0, n_permutations, batch_permutations):
        stop = min(n_permutations, start + batch_permutations)
        perms = np.stack([rng.permutation(d) for _ in range(stop - start)])
        pos = np.argsort(perms, axis=1)  # pos[b, c] = place of column c in permutation b
        # row k of each block: the first k permuted columns come from x, the rest from background
        on = pos[:, None, :] < np.arange(d + 1)[None, :, None]
        Z = np.where(on, x, background)
        v = np.asarray(predict_fn(Z.reshape(-1, d)), dtype=np.float64).reshape(len(perms), d + 1)
        if base is None:
            base, prediction = float(v[0, 0]), float(v[0, -1])
        marg = np.diff(v, axis=1)
        for b, perm in enumerate(perms):
            contrib[start + b, perm] = marg[b]
    values = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(n_permutations) if n_permutations > 1 else np.full(d, np.inf)
    return ShapleyResult(values, base, prediction, se)


# --------------------------------------------------------------------------
# model-level explanations
# --------------------------------------------------------------------------

def model_predict_fn(model, chunk: int = 4096) -> PredictFn:
    T, F = model.spec.T, model.spec.F

    def predict(flat: np.ndarray) -> np.ndarray:
        return model.forward(np.asarray(flat).reshape(-1, T, F), chunk=chunk)

    return predict


def background_mean(X_train: np.ndarray, n: int = 100, seed: int = 0) -> np.ndarray:
    """Column-wise mean of ``n`` training samples drawn without replacement."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(X_train), size=min(n, len(X_train)), replace=False)
    return X_train[np.sort(idx)].mean(axis=0)


@dataclass
class AttributionSet:
    values: np.ndarray  # N x T x F
    se: np.ndarray  # N x T x F
    base: float
    predictions: np.ndarray  # N
    inputs: np.ndarray  # N x T x F, as fed to the model
    feature_names: List[str]
    sample_ids: List[str] = field(default_factory=list)
    model_tag: str = ""
    meta: dict = field(default_factory=dict)


def explain(model, X: np.ndarray, background: np.ndarray, n_permutations: int = 64, seed: int = 0,
            feature_names: Optional[Sequence[str]] = None, sample_ids: Optional[Sequence[str]] = None,
            model_tag: str = "") -> AttributionSet:
    """Sampled Shapley values for every sample of ``X`` (N x T x F)."""
    X = np.asarray(X, dtype=np.float64)
    N, T, F = X.shape
    fn = model_predict_fn(model)
    bg = np.asarray(background, dtype=np.float64).reshape(T * F)
    values = np.empty((N, T, F))
    se = np.empty((N, T, F))
    preds = np.empty(N)
    base = float(fn(bg[None, :])[0])
    for k in range(N):
        res = sampled_shapley(fn, X[k].ravel(), bg, n_permutations, seed + k)
        values[k] = res.values.reshape(T, F)
        se[k] = res.se.reshape(T, F)
        preds[k] = res.prediction
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(F)]
    ids = list(sample_ids) if sample_ids is not None else [str(k) for k in range(N)]
    return AttributionSet(values, se, base, preds, X, names, ids, model_tag,
                          {"n_permutations": n_permutations, "seed": seed})


# --------------------------------------------------------------------------
# aggregation and export
# --------------------------------------------------------------------------

@dataclass
class ImportanceReport:
    importance: np.ndarray  # T x F mean |value|
    ranks: np.ndarray  # T x F, permutation of 1..T*F
    month_counts: dict  # base feature -> months in the global top-k
    feature_names: List[str]
    top_k: int = TOP_K

    def top(self, k: Optional[int] = None) -> List[tuple]:
        """(rank, month 1-based, feature, importance) for the best ``k`` columns."""
        k = self.top_k if k is None else k
        T, F = self.importance.shape
        flat = self.ranks.ravel()
        order = np.argsort(flat)[:k]
        return [(int(flat[c]), c // F + 1, self.feature_names[c % F], float(self.importance.ravel()[c])) for c in order]


def rank_columns(importance: np.ndarray) -> np.ndarray:
    """Rank 1 = largest importance; equal importances go to the lower flat column index."""
    flat = np.asarray(importance, dtype=np.float64).ravel()
    order = np.lexsort((np.arange(len(flat)), -flat))
    ranks = np.empty(len(flat), dtype=np.int64)
    ranks[order] = np.arange(1, len(flat) + 1)
    return ranks.reshape(np.shape(importance))


def importance_report(attr: AttributionSet, top_k: int = TOP_K) -> ImportanceReport:
    importance = np.abs(attr.values).mean(axis=0)
    ranks = rank_columns(importance)
    # a column with zero importance holds a rank but never counts as appearing in the top k
    in_top = (ranks <= top_k) & (importance > 0)
    counts = {name: int(in_top[:, j].sum()) for j, name in enumerate(attr.feature_names)}
    return ImportanceReport(importance, ranks, counts, list(attr.feature_names), top_k)


def summary_plot_data(attr: AttributionSet, path, raw_values: Optional[np.ndarray] = None) -> int:
    """Write the summary-plot point cloud: one row per (sample, month, feature)."""
    raw = attr.inputs if raw_values is None else np.asarray(raw_values, dtype=np.float64)
    if raw.shape != attr.values.shape:
        raise AttributionError(f"raw values {raw.shape} do not align with attributions {attr.values.shape}")
    N, T, F = attr.values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "month", "feature", "shapley_value", "raw_value", "se"])
        for k in range(N):
            for t in range(T):
                for j in range(F):
                    w.writerow([attr.sample_ids[k], t + 1, attr.feature_names[j], repr(float(attr.values[k, t, j])),
                                repr(float(raw[k, t, j])), repr(float(attr.se[k, t, j]))])
    return N * T * F


def write_importance(path, report: ImportanceReport) -> None:
    T, F = report.importance.shape
    rows = sorted(((int(report.ranks[t, j]), t + 1, report.feature_names[j], float(report.importance[t, j]))
                   for t in range(T) for j in range(F)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "month", "feature", "mean_abs_shapley"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(r[3])])


def write_month_counts(path, report: ImportanceReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", f"months_in_top_{report.top_k}"])
        for name, c in sorted(report.month_counts.items(), key=lambda kv: (-kv[1], report.feature_names.index(kv[0]))):
            w.writerow([name, c])


def write_manifest(path, attr: AttributionSet, **extra) -> None:
    doc = {"model": attr.model_tag, "base_value": attr.base, "samples": len(attr.sample_ids), **attr.meta, **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
