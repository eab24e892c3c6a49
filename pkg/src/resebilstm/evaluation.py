"""Five classification metrics and AvgR rank aggregation.

Ranks are fractional: a higher metric value ranks better (rank 1) and tied
entries share the mean of the ranks they span.  AvgR for one cohort is the
mean of a model's five metric ranks; AvgR for a year pools the 24
(model, quarter) entries of each metric, ranks within the pool and divides
each model's rank total by 20.
"""

from __future__ import annotations

import csv
import math
import re
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

METRICS = ("accuracy", "precision", "recall", "f1", "auc")
COHORT_RE = re.compile(r"^(\d{4})Q([1-4])$")


class UndefinedMetricError(ValueError):
    pass


class RankError(ValueError):
    pass


class Undefined:
    """Tagged stand-in for a metric whose formula divides by zero."""

    __slots__ = ("reason",)

    def __init__(self, reason: str):
        self.reason = reason

    def __bool__(self) -> bool:
        return False

    def __eq__(self, other) -> bool:
        return isinstance(other, Undefined)

    def __hash__(self) -> int:
        return hash(Undefined)

    def __repr__(self) -> str:
        return f"Undefined({self.reason!r})"


Value = Union[float, Undefined]


def is_defined(v) -> bool:
    return not isinstance(v, Undefined)


# --------------------------------------------------------------------------
# confusion counts and metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Counts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _as_pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> Counts:
    """Counts with the rule: predicted positive iff score >= threshold."""
    s, y = _as_pair(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return Counts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: float, den: float, what: str) -> Value:
    return num / den if den else Undefined(f"{what}: zero denominator")


def metrics(counts: Counts) -> Dict[str, Value]:
    acc = _ratio(counts.tp + counts.tn, counts.n, "accuracy")
    prec = _ratio(counts.tp, counts.tp + counts.fp, "precision")
    rec = _ratio(counts.tp, counts.tp + counts.fn, "recall")
    if not (is_defined(prec) and is_defined(rec)):
        f1: Value = Undefined("f1: precision or recall undefined")
    else:
        f1 = _ratio(2 * prec * rec, prec + rec, "f1")
    return {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1}


def ranks_ascending(values) -> np.ndarray:
    """Fractional ranks, smallest value = 1, ties get the mean of their span."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> Value:
    """Mann-Whitney statistic; a tied positive/negative pair earns half credit."""
    s, y = _as_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return Undefined("auc: only one class present")
    r = ranks_ascending(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsReport:
    accuracy: Value
    precision: Value
    recall: Value
    f1: Value
    auc: Value
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def defined(self) -> bool:
        return all(is_defined(getattr(self, m)) for m in METRICS)

    def values(self) -> Dict[str, Value]:
        return {m: getattr(self, m) for m in METRICS}


def evaluate(scores, labels, threshold: float = 0.5) -> MetricsReport:
    counts = confusion(scores, labels, threshold)
    m = metrics(counts)
    return MetricsReport(auc=auc(scores, labels), tp=counts.tp, tn=counts.tn, fp=counts.fp,
                         fn=counts.fn, **m)


# --------------------------------------------------------------------------
# metric tables
# --------------------------------------------------------------------------

@dataclass
class MetricRow:
    model: str
    cohort: str
    trial: str
    values: Dict[str, Value]


def _fmt(v: Value) -> str:
    return "NA" if not is_defined(v) else repr(float(v))


def _parse_value(text: str, where: str) -> Value:
    text = text.strip()
    if text in ("", "NA", "nan", "NaN"):
        return Undefined(f"{where}: missing in table")
    try:
        return float(text)
    except ValueError:
        raise RankError(f"{where}: not a number: {text!r}") from None


def write_metric_table(path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "cohort", "trial", *METRICS])
        for r in rows:
            w.writerow([r.model, r.cohort, r.trial, *(_fmt(r.values[m]) for m in METRICS)])


def read_metric_table(path) -> List[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise RankError(f"{path}: empty metric table") from None
        expected = ["model", "cohort", "trial", *METRICS]
        if header != expected:
            raise RankError(f"{path}: header {header} does not match {expected}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(expected):
                raise RankError(f"{path}:{lineno}: expected {len(expected)} fields, found {len(rec)}")
            model, cohort, trial = (x.strip() for x in rec[:3])
            vals = {m: _parse_value(t, f"{path}:{lineno}:{m}") for m, t in zip(METRICS, rec[3:])}
            rows.append(MetricRow(model, cohort, trial, vals))
    return rows


def summarize_trials(rows: Sequence[MetricRow]) -> "OrderedDict[tuple, Dict[str, Value]]":
    """One metric dict per (cohort, model): the ``mean`` row if present, else the trial mean."""
    grouped: Dict[tuple, List[MetricRow]] = OrderedDict()
    for r in rows:
        grouped.setdefault((r.cohort, r.model), []).append(r)
    out = OrderedDict()
    for key, group in grouped.items():
        means = [r for r in group if r.trial == "mean"]
        if means:
            out[key] = means[0].values
            continue
        vals = {}
        for m in METRICS:
            xs = [r.values[m] for r in group]
            vals[m] = (float(np.mean(xs)) if all(is_defined(x) for x in xs)
                       else Undefined(f"{m}: undefined in some trial"))
        out[key] = vals
    return out


# --------------------------------------------------------------------------
# AvgR
# --------------------------------------------------------------------------

@dataclass
class RankTable:
    group: str
    models: List[str]
    ranks: Dict[str, Dict[str, float]] = field(default_factory=dict)  # model -> metric -> rank (or rank total)
    avgr: Dict[str, float] = field(default_factory=dict)


def fractional_ranks(values: Sequence[float]) -> np.ndarray:
    """Rank 1 = highest value; ties share the mean rank."""
    return ranks_ascending(-np.asarray(values, dtype=np.float64))


def _require_defined(where: str, vals: Dict[str, Value]) -> None:
    bad = [m for m in METRICS if not is_defined(vals.get(m, Undefined("absent")))]
    if bad:
        raise UndefinedMetricError(f"{where}: metric(s) {', '.join(bad)} undefined; AvgR needs all five")


def avgr_cohort(table: Dict[str, Dict[str, Value]], cohort: str = "", models: Optional[Sequence[str]] = None) -> RankTable:
    """``table`` maps model -> metric -> value for a single cohort."""
    models = list(models or table)
    if not models:
        raise RankError(f"{cohort}: no models to rank")
    for m in models:
        if m not in table:
            raise RankError(f"{cohort}: model {m!r} missing")
        _require_defined(f"{cohort}/{m}", table[m])
    out = RankTable(cohort, models)
    for m in models:
        out.ranks[m] = {}
    for metric in METRICS:
        r = fractional_ranks([table[m][metric] for m in models])
        for m, rk in zip(models, r):
            out.ranks[m][metric] = float(rk)
    for m in models:
        out.avgr[m] = float(np.mean([out.ranks[m][k] for k in METRICS]))
    return out


def avgr_year(tables: Dict[str, Dict[str, Dict[str, Value]]], year: str = "",
              models: Optional[Sequence[str]] = None) -> RankTable:
    """``tables`` maps quarter cohort id -> model -> metric -> value (exactly 4 quarters)."""
    if len(tables) != 4:
        raise RankError(f"{year}: need 4 quarterly tables, got {len(tables)} ({sorted(tables)})")
    quarters = sorted(tables)
    models = list(models or tables[quarters[0]])
    for q in quarters:
        for m in models:
            if m not in tables[q]:
                raise RankError(f"{year}: model {m!r} missing from {q}")
            _require_defined(f"{q}/{m}", tables[q][m])
    out = RankTable(year, models)
    totals = defaultdict(float)
    for m in models:
        out.ranks[m] = {}
    for metric in METRICS:
        entries = [(m, q) for q in quarters for m in models]
        r = fractional_ranks([tables[q][m][metric] for m, q in entries])
        per_model = defaultdict(float)
        for (m, _), rk in zip(entries, r):
            per_model[m] += float(rk)
        for m in models:
            out.ranks[m][metric] = per_model[m]
            totals[m] += per_model[m]
    n_slots = len(METRICS) * len(quarters)
    for m in models:
        out.avgr[m] = totals[m] / n_slots
    return out


def rank_tables(rows: Sequence[MetricRow], group: str = "cohort",
                models: Optional[Sequence[str]] = None) -> List[RankTable]:
    """AvgR per cohort (Eq. 2 style) or per year (pooled over its 4 quarters)."""
    summary = summarize_trials(rows)
    by_cohort: "OrderedDict[str, Dict[str, Dict[str, Value]]]" = OrderedDict()
    for (cohort, model), vals in summary.items():
        by_cohort.setdefault(cohort, OrderedDict())[model] = vals
    if group == "cohort":
        return [avgr_cohort(t, c, models) for c, t in by_cohort.items()]
    if group != "year":
        raise RankError(f"unknown grouping {group!r}; expected 'cohort' or 'year'")
    years: "OrderedDict[str, dict]" = OrderedDict()
    for cohort, t in by_cohort.items():
        match = COHORT_RE.match(cohort)
        if not match:
            raise RankError(f"cohort id {cohort!r} is not of the form YYYYQn")
        years.setdefault(match.group(1), OrderedDict())[cohort] = t
    return [avgr_year(t, y, models) for y, t in years.items()]


def write_rank_tables(path_or_file, tables: Sequence[RankTable], group: str = "cohort") -> None:
    """One row per group, one AvgR column per model."""
    if not tables:
        raise RankError("no rank tables to write")
    models = tables[0].models
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([group, *models])
        for t in tables:
            w.writerow([t.group, *(_round(t.avgr[m]) for m in models)])
    finally:
        if own:
            fh.close()


def _round(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".") if math.isfinite(x) else "NA"
