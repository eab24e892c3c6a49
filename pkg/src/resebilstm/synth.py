"""Synthetic loan-performance cohorts with a plantable default signal.

Every loan draws from its own seeded sub-stream (``SeedSequence([seed, k])``)
so output does not depend on generation order.  All random draws are made
identically for both classes, including a default "anchor" month that
non-defaulting loans also receive but never act on; with signal strength 0
the precursor months of the two classes are therefore identically
distributed.

Defaulting loans go delinquent at the anchor month ``m``: CLDS runs
1, 2, 3 and stays >= 3 to the end of the loan.  Over the 12 months before
``m`` the scheduled principal payment shrinks by a factor ``1 - s*w`` and
ELTV drifts up by ``15*s*w``, where ``w`` ramps linearly from 1/12 to 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

from .data import MonthlyRecord, parse_period

PRECURSOR_MONTHS = 12
ELTV_DRIFT = 15.0
MIN_DEFAULT_MONTH = 16  # earliest anchor that still yields a full positive window
TAIL_AFTER_ANCHOR = 5  # months needed from the anchor to the end of the last positive window


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_loans: int = 5000
    min_length: int = 12
    max_length: int = 60
    long_fraction: float = 0.9  # share of loans long enough to carry windows
    default_rate: float = 0.05
    signal: float = 0.8
    seed: int = 0
    start: str = "201701"

    def validate(self) -> "SynthConfig":
        if self.n_loans < 1:
            raise SynthConfigError(f"n_loans must be >= 1, got {self.n_loans}")
        if not 0.0 < self.default_rate < 1.0:
            raise SynthConfigError(f"default rate must lie in (0, 1), got {self.default_rate}")
        if not 0.0 <= self.signal <= 1.0:
            raise SynthConfigError(f"signal strength must lie in [0, 1], got {self.signal}")
        if not 0.0 < self.long_fraction <= 1.0:
            raise SynthConfigError(f"long_fraction must lie in (0, 1], got {self.long_fraction}")
        if self.default_rate > self.long_fraction:
            raise SynthConfigError("default rate exceeds the fraction of loans long enough to default")
        if self.max_length < self.long_min or self.min_length < 1 or self.min_length > self.max_length:
            raise SynthConfigError(
                f"length range [{self.min_length}, {self.max_length}] cannot hold loans of "
                f"{self.long_min}+ months")
        parse_period(self.start)
        return self

    @property
    def long_min(self) -> int:
        return MIN_DEFAULT_MONTH + TAIL_AFTER_ANCHOR


@dataclass(frozen=True)
class SynthLoan:
    loan_id: str
    length: int
    anchor: int  # month index of the first delinquent month (phantom for non-defaulters)
    defaulted: bool
    records: Tuple[MonthlyRecord, ...]


def _loan(config: SynthConfig, k: int, start: int) -> SynthLoan:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, k]))
    is_long = rng.random() < config.long_fraction
    short_max = min(config.max_length, config.long_min - 1)
    if is_long or config.min_length > short_max:
        L = int(rng.integers(max(config.min_length, config.long_min), config.max_length + 1))
    else:
        L = int(rng.integers(config.min_length, short_max + 1))
    anchor = int(rng.integers(MIN_DEFAULT_MONTH, max(MIN_DEFAULT_MONTH, L - TAIL_AFTER_ANCHOR) + 1))
    u_default = rng.random()
    defaulted = is_long and L >= config.long_min and u_default < config.default_rate / config.long_fraction

    upb0 = float(rng.uniform(80_000, 400_000))
    rate = float(np.round(rng.uniform(2.5, 6.5), 3))
    house = upb0 / rng.uniform(0.55, 0.95)
    r = rate / 1200.0
    payment = upb0 * r / (1.0 - (1.0 + r) ** -360)
    noise = rng.normal(0.0, 0.08, size=L)
    eltv_noise = rng.normal(0.0, 1.0, size=L)
    missing_eltv = rng.random(L) < 0.01
    deferred = float(np.round(rng.uniform(1_000, 20_000), 2)) if rng.random() < 0.03 else 0.0
    assist = "F" if rng.random() < 0.02 else None
    mod_month = int(rng.integers(0, L)) if rng.random() < 0.02 else -1
    mod_cost = float(np.round(rng.uniform(50, 500), 2))

    s = config.signal
    months = np.arange(L)
    w = np.clip((months - (anchor - PRECURSOR_MONTHS) + 1) / PRECURSOR_MONTHS, 0.0, 1.0)
    if not defaulted:
        w = np.zeros(L)

    loan_id = f"L{config.seed}-{k:06d}"
    upb = upb0
    records = []
    for t in range(L):
        if t > 0:
            principal = max(0.0, (payment - upb * r) * (1.0 + noise[t]) * (1.0 - s * w[t]))
            upb = max(0.0, upb - principal)
        if defaulted and t >= anchor:
            clds = min(t - anchor + 1, 3) if t < anchor + 3 else t - anchor + 1
        else:
            clds = 0
        eltv = None if missing_eltv[t] else float(np.round(100.0 * upb / house + eltv_noise[t] + ELTV_DRIFT * s * w[t], 1))
        modified = t >= mod_month >= 0
        records.append(MonthlyRecord(
            loan_id=loan_id,
            period=start + t,
            clds=int(clds),
            current_actual_upb=round(upb + deferred, 2),
            interest_bearing_upb=round(upb, 2),
            current_deferred_upb=deferred,
            current_ir=rate,
            eltv=eltv,
            modification_flag=("Y" if t == mod_month else "P") if modified else None,
            delinquency_due_to_disaster=None,
            borrower_assistance_status_code=assist,
            current_month_modification_cost=mod_cost if t == mod_month else 0.0,
            ddlpi=None,
            defect_settlement_date=None,
        ))
    return SynthLoan(loan_id, L, anchor, bool(defaulted), tuple(records))


def generate_loans(config: SynthConfig) -> Iterator[SynthLoan]:
    config.validate()
    start = parse_period(config.start)
    for k in range(config.n_loans):
        yield _loan(config, k, start)


def generate(config: SynthConfig) -> Iterator[MonthlyRecord]:
    """Stream of monthly records for ``config.n_loans`` loans, loan by loan."""
    for loan in generate_loans(config):
        yield from loan.records


def loan_table(config: SynthConfig) -> List[Tuple[str, int, int, bool]]:
    """(loan_id, length, anchor, defaulted) for every loan; handy for tests."""
    return [(l.loan_id, l.length, l.anchor, l.defaulted) for l in generate_loans(config)]
