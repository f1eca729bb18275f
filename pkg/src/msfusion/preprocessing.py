"""Cohort filtering, temporal splitting and static-feature encoding."""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import (
    CATEGORICAL_COLUMNS,
    GAIT_CHANNELS,
    MAX_DAY,
    NUMERIC_COLUMNS,
    Cohort,
    DigitalChannel,
)
from .table import FeatureTable

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    """Cohort inclusion rules, applied in order as a funnel.

    ``min_samples`` valid samples within days 0..84 are required in at least
    ``min_channels`` of ``density_channels``. Setting ``min_samples=0``,
    ``required_static=()``, ``target=None`` and ``apply_qc=False`` turns
    filtering into a no-op.
    """

    required_static: tuple = ("AGE", "SEX", "EDSS")
    min_samples: int = 8
    density_channels: tuple = GAIT_CHANNELS
    min_channels: int = 1
    target: str | None = None
    apply_qc: bool = True

    @classmethod
    def none(cls):
        return cls(required_static=(), min_samples=0, target=None, apply_qc=False)


@dataclass
class FilterReport:
    initial_count: int
    excluded: dict = field(default_factory=dict)
    retained_count: int = 0
    qc_samples_removed: int = 0

    def to_json(self):
        return {
            "initial_count": self.initial_count,
            **{f"excluded_{k}": v for k, v in self.excluded.items()},
            "qc_samples_removed": self.qc_samples_removed,
            "retained_count": self.retained_count,
        }


def _apply_qc(patient):
    removed = 0
    channels = {}
    for cid, ch in patient.channels.items():
        keep = ch.qc_pass
        removed += int((~keep).sum())
        channels[cid] = DigitalChannel(cid, ch.days[keep], ch.values[keep], ch.qc_pass[keep])
    out = patient.copy()
    out.channels = channels
    return out, removed


def _dense_enough(patient, rules):
    if rules.min_samples <= 0:
        return True
    hits = 0
    for cid in rules.density_channels:
        ch = patient.channels.get(cid)
        if ch is None:
            continue
        n = int(np.sum((ch.days >= 0) & (ch.days <= MAX_DAY) & ch.qc_pass))
        if n >= rules.min_samples:
            hits += 1
    return hits >= max(rules.min_channels, 1)


def filter_cohort(cohort, rules=None):
    """Apply inclusion rules; never raises, returns ``(cohort, report)``."""
    rules = rules or FilterConfig()
    report = FilterReport(initial_count=len(cohort))
    stages = [
        ("required_static", lambda p: all(p.static.get(c) is not None for c in rules.required_static)),
        ("longitudinal_density", lambda p: _dense_enough(p, rules)),
    ]
    if rules.target is not None:
        stages.append((f"label_{rules.target}", lambda p: p.label(rules.target) is not None))

    patients = list(cohort.patients)
    if rules.apply_qc:
        cleaned = []
        for p in patients:
            q, removed = _apply_qc(p)
            report.qc_samples_removed += removed
            cleaned.append(q if removed else p)
        patients = cleaned
    for name, keep in stages:
        before = len(patients)
        patients = [p for p in patients if keep(p)]
        report.excluded[name] = before - len(patients)
    report.retained_count = len(patients)
    return Cohort(patients, cohort.provenance), report


# ---------------------------------------------------------------------------
# Temporal split
# ---------------------------------------------------------------------------


def quantile_cutoff(cohort, quantile=0.8):
    """Enrollment date at the empirical ``quantile``; patients strictly
    before it go to train."""
    dates = sorted(p.enrollment_date for p in cohort)
    if not dates:
        raise ValueError("empty cohort")
    k = min(int(math.floor(quantile * len(dates))), len(dates) - 1)
    return dates[k]


def temporal_split(cohort, cutoff):
    """Partition by enrollment date: ``< cutoff`` is train, ``>= cutoff`` test."""
    if isinstance(cutoff, str):
        cutoff = dt.date.fromisoformat(cutoff)
    train = [p for p in cohort if p.enrollment_date < cutoff]
    test = [p for p in cohort if p.enrollment_date >= cutoff]
    if not train or not test:
        log.warning("degenerate temporal split at %s: %d train / %d test", cutoff, len(train), len(test))
    return Cohort(train, cohort.provenance), Cohort(test, cohort.provenance)


# ---------------------------------------------------------------------------
# Static encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodingSpec:
    numeric: tuple = NUMERIC_COLUMNS
    categorical: tuple = CATEGORICAL_COLUMNS
    # "observed": indicator only where train had missing values; "always"; "never"
    missing_indicators: str = "observed"


@dataclass(frozen=True)
class NumericColumnState:
    name: str
    mean: float
    std: float
    zero_variance: bool
    indicator: bool


@dataclass(frozen=True)
class CategoricalColumnState:
    name: str
    categories: tuple
    indicator: bool


@dataclass(frozen=True)
class EncoderState:
    numeric: tuple
    categorical: tuple

    @property
    def column_names(self):
        names = []
        for c in self.numeric:
            names.append(c.name)
            if c.indicator:
                names.append(f"{c.name}__missing")
        for c in self.categorical:
            names.extend(f"{c.name}={v}" for v in c.categories)
            if c.indicator:
                names.append(f"{c.name}__missing")
        return tuple(names)

    def to_json(self):
        return {
            "numeric": [vars(c) for c in self.numeric],
            "categorical": [{**vars(c), "categories": list(c.categories)} for c in self.categorical],
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            tuple(NumericColumnState(**c) for c in doc["numeric"]),
            tuple(CategoricalColumnState(c["name"], tuple(c["categories"]), c["indicator"]) for c in doc["categorical"]),
        )


def fit_static_encoder(train, spec=None):
    """Learn per-column mean/std (population) and category lists on ``train``."""
    spec = spec or EncodingSpec()
    if len(train) == 0:
        raise ValueError("cannot fit an encoder on an empty cohort")
    numeric = []
    for col in spec.numeric:
        raw = [p.static.get(col) for p in train]
        vals = np.array([v for v in raw if v is not None], dtype=np.float64)
        has_missing = len(vals) < len(raw)
        indicator = spec.missing_indicators == "always" or (spec.missing_indicators == "observed" and has_missing)
        if len(vals) == 0:
            mean, std, zero = 0.0, 1.0, True
        else:
            mean = float(vals.mean())
            std = float(vals.std())
            zero = not std > 0.0
            if zero:
                std = 1.0
        if zero:
            log.info("encoder: column %s has zero variance; std clamped to 1", col)
        numeric.append(NumericColumnState(col, mean, std, zero, indicator))
    categorical = []
    for col in spec.categorical:
        raw = [p.static.get(col) for p in train]
        cats = tuple(sorted({v for v in raw if v is not None}))
        has_missing = any(v is None for v in raw)
        indicator = spec.missing_indicators == "always" or (spec.missing_indicators == "observed" and has_missing)
        categorical.append(CategoricalColumnState(col, cats, indicator))
    return EncoderState(tuple(numeric), tuple(categorical))


@dataclass
class EncodeReport:
    unseen_categories: dict = field(default_factory=dict)


def encode_static(cohort, enc, report=None):
    """Encode ``cohort`` with a fitted state. Missing numeric values become
    the train mean (0 after scaling); unseen categories encode as a zero
    block and are counted in ``report``."""
    names = enc.column_names
    rows = np.zeros((len(cohort), len(names)))
    for i, p in enumerate(cohort):
        j = 0
        for c in enc.numeric:
            v = p.static.get(c.name)
            rows[i, j] = 0.0 if v is None else (float(v) - c.mean) / c.std
            j += 1
            if c.indicator:
                rows[i, j] = 1.0 if v is None else 0.0
                j += 1
        for c in enc.categorical:
            v = p.static.get(c.name)
            if v is not None:
                if v in c.categories:
                    rows[i, j + c.categories.index(v)] = 1.0
                else:
                    log.warning("encoder: unseen category %r in %s for %s", v, c.name, p.patient_id)
                    if report is not None:
                        report.unseen_categories.setdefault(c.name, []).append(p.patient_id)
            j += len(c.categories)
            if c.indicator:
                rows[i, j] = 1.0 if v is None else 0.0
                j += 1
    return FeatureTable(rows, names, tuple(cohort.ids))
