"""Loan-performance rows -> labelled, leak-free, balanced window samples.

Pipeline order: parse -> group per loan -> engineer features -> slide 19-month
windows -> label from months 17-19 and drop windows with any delinquency in
months 1-14 -> loan-level train/test split -> standardise (train statistics)
-> undersample the training set to 1:1.

Conventions worth knowing:

* Missing numeric fields are imputed as 0.  A delta is 0 on a loan's first
  month and whenever either of the two months involved is missing.
* Missing or unknown categorical values fall into the group's ``missing``
  level (``NAN`` for disaster and assistance codes, ``N`` for the
  modification flag).
* A non-numeric delinquency code (e.g. ``RA``) is stored as -1 and
  disqualifies any window that has it among the input months.
* Windows never span a gap in a loan's reporting periods.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import checkpoint

log = logging.getLogger(__name__)

WINDOW = 19
INPUT_MONTHS = 14
BLANK_MONTHS = 2
LABEL_MONTHS = 3
DEFAULT_THRESHOLD = 3
CLDS_UNAVAILABLE = -1


class ParseError(ValueError):
    pass


class SplitError(ValueError):
    pass


class BalancingError(ValueError):
    pass


# --------------------------------------------------------------------------
# column layout
# --------------------------------------------------------------------------

DEFAULT_LAYOUT = {
    "delimiter": "|",
    "columns": [
        "loan_id", "period", "clds", "current_actual_upb", "interest_bearing_upb",
        "current_deferred_upb", "current_ir", "eltv", "modification_flag",
        "delinquency_due_to_disaster", "borrower_assistance_status_code",
        "current_month_modification_cost", "ddlpi", "defect_settlement_date",
    ],
    "numeric": [
        "current_actual_upb", "interest_bearing_upb", "current_deferred_upb",
        "current_ir", "eltv", "current_month_modification_cost",
    ],
    "deltas": {
        "interest_bearing_upb_delta": "interest_bearing_upb",
        "current_actual_upb_delta": "current_actual_upb",
    },
    "categorical": {
        "modification_flag": {"levels": ["Y", "P", "N"], "missing": "N"},
        "delinquency_due_to_disaster": {"levels": ["Y", "NAN"], "missing": "NAN"},
        "borrower_assistance_status_code": {"levels": ["F", "R", "T", "NAN"], "missing": "NAN"},
    },
    "missing_codes": {"eltv": ["999"]},
    "missing_indicators": [],
}

NUMERIC_FIELDS = ("current_actual_upb", "interest_bearing_upb", "current_deferred_upb",
                  "current_ir", "eltv", "current_month_modification_cost")
CATEGORICAL_FIELDS = ("modification_flag", "delinquency_due_to_disaster",
                      "borrower_assistance_status_code")
TEXT_FIELDS = ("ddlpi", "defect_settlement_date")


@dataclass(frozen=True)
class Layout:
    delimiter: str
    columns: Tuple[str, ...]
    numeric: Tuple[str, ...]
    deltas: "OrderedDict[str, str]"
    categorical: "OrderedDict[str, dict]"
    missing_codes: Dict[str, Tuple[str, ...]]
    missing_indicators: Tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        merged = {**DEFAULT_LAYOUT, **(d or {})}
        cols = tuple(merged["columns"])
        for required in ("loan_id", "period", "clds"):
            if required not in cols:
                raise ParseError(f"layout: required column {required!r} missing")
        for name in merged["numeric"]:
            if name not in NUMERIC_FIELDS:
                raise ParseError(f"layout: unknown numeric field {name!r}")
        for name, src in merged["deltas"].items():
            if src not in merged["numeric"]:
                raise ParseError(f"layout: delta {name!r} refers to non-feature {src!r}")
        cats = OrderedDict()
        for name, spec in merged["categorical"].items():
            if name not in CATEGORICAL_FIELDS:
                raise ParseError(f"layout: unknown categorical field {name!r}")
            if spec["missing"] not in spec["levels"]:
                raise ParseError(f"layout: missing level of {name!r} not among its levels")
            cats[name] = {"levels": list(spec["levels"]), "missing": spec["missing"]}
        return cls(
            delimiter=merged["delimiter"],
            columns=cols,
            numeric=tuple(merged["numeric"]),
            deltas=OrderedDict(merged["deltas"]),
            categorical=cats,
            missing_codes={k: tuple(str(x) for x in v) for k, v in merged["missing_codes"].items()},
            missing_indicators=tuple(merged.get("missing_indicators") or ()),
        )

    def to_dict(self) -> dict:
        return {
            "delimiter": self.delimiter,
            "columns": list(self.columns),
            "numeric": list(self.numeric),
            "deltas": dict(self.deltas),
            "categorical": {k: dict(v) for k, v in self.categorical.items()},
            "missing_codes": {k: list(v) for k, v in self.missing_codes.items()},
            "missing_indicators": list(self.missing_indicators),
        }

    @property
    def feature_names(self) -> List[str]:
        names = list(self.numeric) + list(self.deltas)
        for group, spec in self.categorical.items():
            names += [f"{group}_{lvl}" for lvl in spec["levels"]]
        names += [f"{f}_missing" for f in self.missing_indicators]
        return names

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_scaled(self) -> int:
        """Leading columns that are continuous and get z-scored."""
        return len(self.numeric) + len(self.deltas)


BUILTIN_LAYOUTS = ("compact", "freddie_mac")


def load_layout(path=None) -> Layout:
    """Layout from a YAML file, or one of the packaged names in BUILTIN_LAYOUTS."""
    if path is None:
        return Layout.from_dict({})
    if str(path) in BUILTIN_LAYOUTS:
        path = Path(__file__).parent / "layouts" / f"{path}.yaml"
    with open(path) as fh:
        return Layout.from_dict(yaml.safe_load(fh) or {})


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MonthlyRecord:
    loan_id: str
    period: int  # months since year 0: year * 12 + (month - 1)
    clds: int  # months delinquent, -1 when unavailable
    current_actual_upb: Optional[float] = None
    interest_bearing_upb: Optional[float] = None
    current_deferred_upb: Optional[float] = None
    current_ir: Optional[float] = None
    eltv: Optional[float] = None
    modification_flag: Optional[str] = None
    delinquency_due_to_disaster: Optional[str] = None
    borrower_assistance_status_code: Optional[str] = None
    current_month_modification_cost: Optional[float] = None
    ddlpi: Optional[str] = None
    defect_settlement_date: Optional[str] = None


def parse_period(text: str) -> int:
    text = text.strip()
    if len(text) != 6 or not text.isdigit():
        raise ValueError(f"bad period {text!r}")
    year, month = int(text[:4]), int(text[4:])
    if not 1 <= month <= 12:
        raise ValueError(f"bad month in period {text!r}")
    return year * 12 + month - 1


def format_period(period: int) -> str:
    return f"{period // 12:04d}{period % 12 + 1:02d}"


def parse_clds(text: str) -> int:
    text = text.strip()
    return int(text) if text.isdigit() else CLDS_UNAVAILABLE


@dataclass
class ParseDiagnostics:
    rows: int = 0
    accepted: int = 0
    rejected: int = 0
    bad_numeric: int = 0
    examples: List[str] = field(default_factory=list)

    def reject(self, lineno: int, reason: str) -> None:
        self.rejected += 1
        if len(self.examples) < 20:
            self.examples.append(f"line {lineno}: {reason}")


def parse_performance_file(path, layout: Optional[Layout] = None, delimiter: Optional[str] = None,
                           strict: bool = False,
                           diagnostics: Optional[ParseDiagnostics] = None) -> Iterator[MonthlyRecord]:
    """Stream typed records from a header-less delimited file.

    Rows with a missing loan id or period (or the wrong column count) are
    skipped and counted in ``diagnostics``; with ``strict`` the first such row
    raises :class:`ParseError`.
    """
    layout = layout or Layout.from_dict({})
    delim = delimiter or layout.delimiter
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    cols = layout.columns
    missing_codes = layout.missing_codes
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delim), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            diag.rows += 1
            if len(row) != len(cols):
                msg = f"expected {len(cols)} fields, found {len(row)}"
                if strict:
                    raise ParseError(f"{path}:{lineno}: {msg}")
                diag.reject(lineno, msg)
                continue
            raw = dict(zip(cols, row))
            loan_id = raw["loan_id"].strip()
            try:
                period = parse_period(raw["period"])
            except ValueError as exc:
                period = None
                reason = str(exc)
            if not loan_id or period is None:
                msg = "missing loan id" if not loan_id else reason
                if strict:
                    raise ParseError(f"{path}:{lineno}: {msg}")
                diag.reject(lineno, msg)
                continue
            values = {}
            for name in NUMERIC_FIELDS:
                text = raw.get(name, "").strip()
                if not text or text in missing_codes.get(name, ()):
                    values[name] = None
                    continue
                try:
                    values[name] = float(text)
                except ValueError:
                    diag.bad_numeric += 1
                    values[name] = None
            for name in CATEGORICAL_FIELDS + TEXT_FIELDS:
                text = raw.get(name, "").strip()
                values[name] = text or None
            diag.accepted += 1
            yield MonthlyRecord(loan_id=loan_id, period=period, clds=parse_clds(raw["clds"]), **values)


def write_performance_file(path, records: Iterable[MonthlyRecord], layout: Optional[Layout] = None) -> int:
    """Inverse of :func:`parse_performance_file` for the given layout."""
    layout = layout or Layout.from_dict({})

    def fmt(name, rec):
        if name == "skip":
            return ""
        v = getattr(rec, name)
        if name == "period":
            return format_period(v)
        if name == "clds":
            return "RA" if v == CLDS_UNAVAILABLE else str(v)
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.2f}" if name != "current_ir" else f"{v:.3f}"
        return str(v)

    n = 0
    with open(path, "w", newline="") as fh:
        for rec in records:
            fh.write(layout.delimiter.join(fmt(c, rec) for c in layout.columns) + "\n")
            n += 1
    return n


# --------------------------------------------------------------------------
# per-loan series and features
# --------------------------------------------------------------------------

@dataclass
class LoanSeries:
    loan_id: str
    periods: np.ndarray  # int, ascending
    clds: np.ndarray  # int, -1 = unavailable
    features: np.ndarray  # L x F

    def __len__(self) -> int:
        return len(self.periods)

    def segments(self) -> List[Tuple[int, int]]:
        """Half-open index ranges of gap-free runs of reporting periods."""
        if len(self.periods) == 0:
            return []
        breaks = np.nonzero(np.diff(self.periods) != 1)[0] + 1
        edges = [0, *breaks.tolist(), len(self.periods)]
        return list(zip(edges[:-1], edges[1:]))


def group_loans(records: Iterable[MonthlyRecord]) -> Tuple["OrderedDict[str, List[MonthlyRecord]]", dict]:
    """Group by loan id (first-seen order) and sort each loan by period.

    Duplicate (loan, period) rows keep the first occurrence; gaps are counted.
    """
    groups: "OrderedDict[str, Dict[int, MonthlyRecord]]" = OrderedDict()
    dupes = 0
    for rec in records:
        per_loan = groups.setdefault(rec.loan_id, {})
        if rec.period in per_loan:
            dupes += 1
            continue
        per_loan[rec.period] = rec
    out = OrderedDict()
    gaps = 0
    for loan_id, per_loan in groups.items():
        ordered = [per_loan[p] for p in sorted(per_loan)]
        gaps += sum(1 for a, b in zip(ordered, ordered[1:]) if b.period - a.period != 1)
        out[loan_id] = ordered
    return out, {"duplicate_rows": dupes, "period_gaps": gaps}


def engineer_features(records: Sequence[MonthlyRecord], layout: Optional[Layout] = None) -> np.ndarray:
    """One feature row per month (L x F) for a single loan's period-sorted records."""
    layout = layout or Layout.from_dict({})
    L = len(records)
    cols = []
    raw = {}
    for name in layout.numeric:
        vals = np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in records],
                        dtype=np.float64).reshape(L)
        raw[name] = vals
        cols.append(np.nan_to_num(vals, nan=0.0))
    for _, src in layout.deltas.items():
        vals = raw[src]
        delta = np.zeros(L)
        if L > 1:
            d = vals[1:] - vals[:-1]
            delta[1:] = np.where(np.isfinite(d), d, 0.0)
        cols.append(delta)
    for group, spec in layout.categorical.items():
        levels = spec["levels"]
        index = {lvl: k for k, lvl in enumerate(levels)}
        fallback = index[spec["missing"]]
        onehot = np.zeros((L, len(levels)))
        for t, r in enumerate(records):
            value = getattr(r, group)
            onehot[t, index.get(value, fallback) if value is not None else fallback] = 1.0
        cols.extend(onehot.T)
    for name in layout.missing_indicators:
        cols.append(np.array([1.0 if getattr(r, name) is None else 0.0 for r in records]))
    if not cols:
        return np.zeros((L, 0))
    return np.column_stack(cols).reshape(L, layout.n_features)


def build_series(records: Iterable[MonthlyRecord], layout: Optional[Layout] = None) -> Tuple[List[LoanSeries], dict]:
    layout = layout or Layout.from_dict({})
    groups, diag = group_loans(records)
    series = []
    for loan_id, recs in groups.items():
        series.append(LoanSeries(
            loan_id=loan_id,
            periods=np.array([r.period for r in recs], dtype=np.int64),
            clds=np.array([r.clds for r in recs], dtype=np.int64),
            features=engineer_features(recs, layout),
        ))
    return series, diag


# --------------------------------------------------------------------------
# windows and labels
# --------------------------------------------------------------------------

@dataclass
class WindowSample:
    loan_id: str
    start_period: int
    inputs: np.ndarray  # 14 x F
    label: int


@dataclass
class Windows:
    """Window candidates (or, after labelling, samples) cut from one loan."""

    loan_id: str
    starts: np.ndarray  # index of the window's first month within the loan
    start_periods: np.ndarray
    inputs: np.ndarray  # n x 14 x F
    clds: np.ndarray  # n x 19
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.starts)

    def __iter__(self) -> Iterator[WindowSample]:
        for k in range(len(self)):
            label = -1 if self.labels is None else int(self.labels[k])
            yield WindowSample(self.loan_id, int(self.start_periods[k]), self.inputs[k], label)


def slice_windows(series: LoanSeries, stride: int = 1) -> Windows:
    """Every gap-free 19-month slice (step ``stride``); inputs are its first 14 months."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    F = series.features.shape[1]
    starts = []
    for lo, hi in series.segments():
        starts.extend(range(lo, hi - WINDOW + 1, stride))
    starts = np.array(starts, dtype=np.int64)
    if len(starts) == 0:
        return Windows(series.loan_id, starts, starts.copy(), np.zeros((0, INPUT_MONTHS, F)),
                       np.zeros((0, WINDOW), dtype=np.int64))
    offsets = np.arange(WINDOW)
    idx = starts[:, None] + offsets[None, :]
    return Windows(
        loan_id=series.loan_id,
        starts=starts,
        start_periods=series.periods[starts],
        inputs=series.features[idx[:, :INPUT_MONTHS]],
        clds=series.clds[idx],
    )


def label_and_filter(windows: Windows, threshold: int = DEFAULT_THRESHOLD) -> Windows:
    """Label y=1 iff any of months 17-19 has CLDS >= threshold; drop windows
    whose 14 input months contain any nonzero (or unavailable) CLDS."""
    clean = np.all(windows.clds[:, :INPUT_MONTHS] == 0, axis=1)
    label_window = windows.clds[:, INPUT_MONTHS + BLANK_MONTHS:]
    labels = np.any(label_window >= threshold, axis=1).astype(np.int64)
    return Windows(
        loan_id=windows.loan_id,
        starts=windows.starts[clean],
        start_periods=windows.start_periods[clean],
        inputs=windows.inputs[clean],
        clds=windows.clds[clean],
        labels=labels[clean],
    )


# --------------------------------------------------------------------------
# sample sets, split, balance, scale
# --------------------------------------------------------------------------

@dataclass
class SampleSet:
    X: np.ndarray  # N x 14 x F
    y: np.ndarray  # N, int 0/1
    loan_ids: np.ndarray  # N, str
    starts: np.ndarray  # N, start period

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.X[idx], self.y[idx], self.loan_ids[idx], self.starts[idx])

    @property
    def class_counts(self) -> Tuple[int, int]:
        pos = int(self.y.sum())
        return len(self.y) - pos, pos

    @classmethod
    def empty(cls, F: int) -> "SampleSet":
        return cls(np.zeros((0, INPUT_MONTHS, F)), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=object), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, parts: Sequence[Windows], F: int) -> "SampleSet":
        parts = [w for w in parts if len(w)]
        if not parts:
            return cls.empty(F)
        return cls(
            X=np.concatenate([w.inputs for w in parts]),
            y=np.concatenate([w.labels for w in parts]).astype(np.int64),
            loan_ids=np.concatenate([np.full(len(w), w.loan_id, dtype=object) for w in parts]),
            starts=np.concatenate([w.start_periods for w in parts]),
        )


def make_samples(series: Sequence[LoanSeries], stride: int = 1, F: Optional[int] = None) -> SampleSet:
    if F is None:
        F = series[0].features.shape[1] if series else Layout.from_dict({}).n_features
    return SampleSet.concat([label_and_filter(slice_windows(s, stride)) for s in series], F)


def split_train_test(samples: SampleSet, ratio: float = 0.70, seed: int = 0) -> Tuple[SampleSet, SampleSet]:
    """Loan-level split, stratified on whether a loan has any positive sample.

    Each stratum is shuffled and round(ratio * n) of its loans go to train,
    so every loan's windows land wholly in one partition.
    """
    loans = list(OrderedDict.fromkeys(samples.loan_ids.tolist()))
    if len(loans) < 2:
        raise SplitError(f"need at least 2 loans to split, have {len(loans)}")
    positive = set(samples.loan_ids[samples.y == 1].tolist())
    rng = np.random.default_rng(seed)
    train_loans = set()
    for stratum in ([l for l in loans if l in positive], [l for l in loans if l not in positive]):
        if not stratum:
            continue
        order = rng.permutation(len(stratum))
        n_train = int(round(ratio * len(stratum)))
        train_loans.update(stratum[k] for k in order[:n_train])
    in_train = np.array([l in train_loans for l in samples.loan_ids], dtype=bool)
    return samples.subset(np.nonzero(in_train)[0]), samples.subset(np.nonzero(~in_train)[0])


def undersample(train: SampleSet, seed: int = 0) -> SampleSet:
    """Keep every positive and an equal-size uniform draw of negatives."""
    pos = np.nonzero(train.y == 1)[0]
    neg = np.nonzero(train.y == 0)[0]
    if len(pos) == 0 or len(neg) == 0:
        raise BalancingError(f"cannot balance: {len(neg)} negatives, {len(pos)} positives")
    rng = np.random.default_rng(seed)
    if len(neg) >= len(pos):
        keep_neg = rng.choice(neg, size=len(pos), replace=False)
        keep = np.sort(np.concatenate([pos, keep_neg]))
    else:
        keep_pos = rng.choice(pos, size=len(neg), replace=False)
        keep = np.sort(np.concatenate([keep_pos, neg]))
    return train.subset(keep)


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    n_scaled: int
    zero_variance: List[int] = field(default_factory=list)

    @classmethod
    def fit(cls, X: np.ndarray, n_scaled: int) -> "Scaler":
        flat = X[..., :n_scaled].reshape(-1, n_scaled)
        mean = flat.mean(axis=0) if len(flat) else np.zeros(n_scaled)
        std = flat.std(axis=0) if len(flat) else np.ones(n_scaled)
        zero = [int(k) for k in np.nonzero(std == 0)[0]]
        if zero:
            log.warning("zero-variance feature column(s) %s: using scale 1", zero)
        std = np.where(std == 0, 1.0, std)
        return cls(mean, std, n_scaled, zero)

    def transform(self, X: np.ndarray) -> np.ndarray:
        out = np.array(X, dtype=np.float64, copy=True)
        out[..., :self.n_scaled] = (out[..., :self.n_scaled] - self.mean) / self.std
        return out

    def inverse(self, X: np.ndarray) -> np.ndarray:
        out = np.array(X, dtype=np.float64, copy=True)
        out[..., :self.n_scaled] = out[..., :self.n_scaled] * self.std + self.mean
        return out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "n_scaled": self.n_scaled,
                "zero_variance": self.zero_variance}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   int(d["n_scaled"]), list(d.get("zero_variance", [])))


@dataclass
class CohortDataset:
    """Scaled samples for one cohort.

    ``train_pool`` is the whole (imbalanced) training partition; ``train`` is
    its 1:1 undersampled view used for fitting.  Scaling statistics come from
    ``train_pool`` only.
    """

    cohort: str
    train_pool: SampleSet
    train: SampleSet
    test: SampleSet
    scaler: Scaler
    layout: Layout
    manifest: dict = field(default_factory=dict)

    def rebalanced(self, seed: int) -> SampleSet:
        return undersample(self.train_pool, seed)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        loans = list(OrderedDict.fromkeys(np.concatenate(
            [self.train_pool.loan_ids, self.test.loan_ids]).tolist()))
        index = {l: k for k, l in enumerate(loans)}
        pool_pos = {(l, s): k for k, (l, s) in enumerate(zip(self.train_pool.loan_ids, self.train_pool.starts))}
        arrays = OrderedDict()
        for name, part in (("train_pool", self.train_pool), ("test", self.test)):
            arrays[f"{name}/X"] = part.X
            arrays[f"{name}/y"] = part.y.astype(np.float64)
            arrays[f"{name}/loan"] = np.array([index[l] for l in part.loan_ids], dtype=np.float64)
            arrays[f"{name}/start"] = part.starts.astype(np.float64)
        arrays["train/index"] = np.array([pool_pos[(l, s)] for l, s in zip(self.train.loan_ids, self.train.starts)],
                                         dtype=np.float64)
        checkpoint.save(directory / "samples.reseb", arrays)
        manifest = dict(self.manifest)
        manifest.update({
            "cohort": self.cohort,
            "layout": self.layout.to_dict(),
            "feature_names": self.layout.feature_names,
            "scaler": self.scaler.to_dict(),
            "loan_ids": loans,
            "counts": counts_of(self),
        })
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "CohortDataset":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = checkpoint.load(directory / "samples.reseb")
        loans = np.array(manifest["loan_ids"], dtype=object)

        def part(name):
            return SampleSet(
                X=arrays[f"{name}/X"],
                y=arrays[f"{name}/y"].astype(np.int64),
                loan_ids=loans[arrays[f"{name}/loan"].astype(np.int64)],
                starts=arrays[f"{name}/start"].astype(np.int64),
            )

        pool = part("train_pool")
        train = pool.subset(arrays["train/index"].astype(np.int64))
        return cls(
            cohort=manifest["cohort"],
            train_pool=pool,
            train=train,
            test=part("test"),
            scaler=Scaler.from_dict(manifest["scaler"]),
            layout=Layout.from_dict(manifest["layout"]),
            manifest=manifest,
        )


def counts_of(ds: CohortDataset) -> dict:
    out = {}
    for name in ("train_pool", "train", "test"):
        neg, pos = getattr(ds, name).class_counts
        out[name] = {"negative": neg, "positive": pos,
                     "loans": len(set(getattr(ds, name).loan_ids.tolist()))}
    return out


def standardize(train_pool: SampleSet, test: SampleSet, n_scaled: int) -> Tuple[SampleSet, SampleSet, Scaler]:
    scaler = Scaler.fit(train_pool.X, n_scaled)
    scale = lambda s: SampleSet(scaler.transform(s.X), s.y, s.loan_ids, s.starts)  # noqa: E731
    return scale(train_pool), scale(test), scaler


def build_cohort(series: Sequence[LoanSeries], layout: Layout, cohort: str = "cohort", seed: int = 0,
                 stride: int = 1, ratio: float = 0.70, balanced_test: bool = False,
                 diagnostics: Optional[dict] = None) -> CohortDataset:
    """Windows -> labels/filter -> split -> scale -> undersample, all seeded by ``seed``."""
    candidates = sum(len(slice_windows(s, stride)) for s in series)
    samples = make_samples(series, stride, layout.n_features)
    train, test = split_train_test(samples, ratio, seed)
    pool, test, scaler = standardize(train, test, layout.n_scaled)
    balanced = undersample(pool, seed)
    if balanced_test:
        test = undersample(test, seed)
    manifest = {
        "seed": seed,
        "stride": stride,
        "train_ratio": ratio,
        "balanced_test": balanced_test,
        "diagnostics": {
            **(diagnostics or {}),
            "window_candidates": int(candidates),
            "leakage_filtered": int(candidates - len(samples)),
            "zero_variance_features": scaler.zero_variance,
        },
    }
    return CohortDataset(cohort, pool, balanced, test, scaler, layout, manifest)


# --------------------------------------------------------------------------
# cohort statistics
# --------------------------------------------------------------------------

def cohort_summary(records: Iterable[MonthlyRecord], threshold: int = DEFAULT_THRESHOLD) -> dict:
    """Loan count, mean/median history length and loan-level default rate."""
    lengths: Dict[str, int] = defaultdict(int)
    defaulted = set()
    for r in records:
        lengths[r.loan_id] += 1
        if r.clds >= threshold:
            defaulted.add(r.loan_id)
    n = len(lengths)
    arr = np.array(list(lengths.values()), dtype=np.float64)
    return {
        "loans": n,
        "mean_length": float(arr.mean()) if n else 0.0,
        "median_length": float(np.median(arr)) if n else 0.0,
        "default_rate": len(defaulted) / n if n else 0.0,
    }


# --------------------------------------------------------------------------
# per-loan series archive (output of ingest, input of window)
# --------------------------------------------------------------------------

def save_series(directory, series: Sequence[LoanSeries], layout: Layout, manifest: Optional[dict] = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    F = layout.n_features
    offsets = np.cumsum([0] + [len(s) for s in series])
    arrays = OrderedDict()
    arrays["features"] = np.concatenate([s.features for s in series]) if series else np.zeros((0, F))
    arrays["periods"] = np.concatenate([s.periods for s in series]).astype(np.float64) if series else np.zeros(0)
    arrays["clds"] = np.concatenate([s.clds for s in series]).astype(np.float64) if series else np.zeros(0)
    arrays["offsets"] = offsets.astype(np.float64)
    checkpoint.save(directory / "series.reseb", arrays)
    doc = dict(manifest or {})
    doc.update({"layout": layout.to_dict(), "feature_names": layout.feature_names,
                "loan_ids": [s.loan_id for s in series]})
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_series(directory) -> Tuple[List[LoanSeries], Layout, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = checkpoint.load(directory / "series.reseb")
    layout = Layout.from_dict(manifest["layout"])
    off = arrays["offsets"].astype(np.int64)
    series = []
    for k, loan_id in enumerate(manifest["loan_ids"]):
        lo, hi = off[k], off[k + 1]
        series.append(LoanSeries(loan_id, arrays["periods"][lo:hi].astype(np.int64),
                                 arrays["clds"][lo:hi].astype(np.int64), arrays["features"][lo:hi]))
    return series, layout, manifest
