"""Patient records, cohort containers and on-disk formats.

Two layouts are supported:

* a directory holding ``patients.csv`` (one row per patient) and
  ``samples.csv`` (``patient_id, channel_id, day, value[, qc_pass]``);
* a single JSON document with the same fields.

Empty CSV cells mean "missing". Floats are written with ``repr`` so a
save/load round trip is bitwise exact.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = (
    "step_duration_med",
    "step_impulse_med",
    "step_length_med",
    "step_length_sum",
    "step_velocity_med",
    "turn_speed_med",
    "das_fig8_accuracy",
    "pinch_async",
    "pinch_count",
)
GAIT_CHANNELS = CHANNELS[:6]
UPPER_LIMB_CHANNELS = CHANNELS[6:]

MAX_DAY = 84
N_DAYS = MAX_DAY + 1

FUNCTIONAL_SYSTEMS = (
    "pyramidal",
    "cerebellar",
    "brainstem",
    "sensory",
    "bowel_bladder",
    "visual",
    "cerebral",
    "ambulation",
)
BRAIN_VOLUMES = ("cerebellar_wm", "cerebral_wm", "t2_lesion", "thalamic")

# flat column name -> (attribute, key within a map attribute or None)
_SCALAR_COLUMNS = {
    "AGE": "age",
    "BBMI": "bmi",
    "SEX": "sex",
    "EDSS": "edss",
    "T25FWT": "t25fwt",
    "NHPT_AVG": "nhpt_avg",
    "NHPT_MIN": "nhpt_min",
    "NHPT_MAX": "nhpt_max",
    "NHPT_RANGE": "nhpt_range",
    "BLSDMT": "sdmt",
    "NUMRLP": "num_relapses",
    "ONSETYRS": "onset_years",
}
FS_COLUMNS = {f"FS_{k.upper()}": k for k in FUNCTIONAL_SYSTEMS}
VOLUME_COLUMNS = {f"VOL_{k.upper()}": k for k in BRAIN_VOLUMES}

STATIC_COLUMNS = tuple(_SCALAR_COLUMNS) + tuple(FS_COLUMNS) + tuple(VOLUME_COLUMNS)
CATEGORICAL_COLUMNS = ("SEX",)
NUMERIC_COLUMNS = tuple(c for c in STATIC_COLUMNS if c not in CATEGORICAL_COLUMNS)
_INTEGER_COLUMNS = {"NUMRLP", *FS_COLUMNS}
SEX_CATEGORIES = ("F", "M")
TARGETS = ("w48", "w72")


class CohortError(ValueError):
    """Raised when a cohort file cannot be parsed; ``errors`` lists every
    offending row/column found in the pass."""

    def __init__(self, errors):
        self.errors = list(errors)
        head = "; ".join(self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} problem(s): {head}{more}")


class CohortSchemaError(CohortError):
    pass


@dataclass
class StaticFeatures:
    age: float | None = None
    bmi: float | None = None
    sex: str | None = None
    edss: float | None = None
    functional_scores: dict = field(default_factory=lambda: dict.fromkeys(FUNCTIONAL_SYSTEMS))
    t25fwt: float | None = None
    nhpt_avg: float | None = None
    nhpt_min: float | None = None
    nhpt_max: float | None = None
    nhpt_range: float | None = None
    sdmt: float | None = None
    num_relapses: int | None = None
    onset_years: float | None = None
    brain_volumes: dict = field(default_factory=lambda: dict.fromkeys(BRAIN_VOLUMES))

    def get(self, column):
        if column in _SCALAR_COLUMNS:
            return getattr(self, _SCALAR_COLUMNS[column])
        if column in FS_COLUMNS:
            return self.functional_scores.get(FS_COLUMNS[column])
        if column in VOLUME_COLUMNS:
            return self.brain_volumes.get(VOLUME_COLUMNS[column])
        raise KeyError(column)

    def set(self, column, value):
        if column in _SCALAR_COLUMNS:
            setattr(self, _SCALAR_COLUMNS[column], value)
        elif column in FS_COLUMNS:
            self.functional_scores[FS_COLUMNS[column]] = value
        elif column in VOLUME_COLUMNS:
            self.brain_volumes[VOLUME_COLUMNS[column]] = value
        else:
            raise KeyError(column)

    def as_flat(self):
        return {c: self.get(c) for c in STATIC_COLUMNS}

    @classmethod
    def from_flat(cls, values):
        out = cls()
        for c, v in values.items():
            out.set(c, v)
        return out

    def copy(self):
        return StaticFeatures.from_flat(self.as_flat())

    def validate(self):
        """Return a list of invariant violations (empty when valid)."""
        problems = []
        if self.sex is not None and self.sex not in SEX_CATEGORIES:
            # unseen categories are tolerated by the encoder; only flag type
            if not isinstance(self.sex, str):
                problems.append("SEX must be a string")
        if self.edss is not None:
            if not 0.0 <= self.edss <= 10.0 or (self.edss * 2) != round(self.edss * 2):
                problems.append(f"EDSS {self.edss} not on the 0.5 grid within [0, 10]")
        for col in ("T25FWT", "NHPT_AVG", "NHPT_MIN", "NHPT_MAX", "NHPT_RANGE"):
            v = self.get(col)
            if v is not None and not v > 0:
                problems.append(f"{col} must be > 0")
        for col in ("BLSDMT", "NUMRLP", "ONSETYRS", *FS_COLUMNS, *VOLUME_COLUMNS):
            v = self.get(col)
            if v is not None and v < 0:
                problems.append(f"{col} must be >= 0")
        lo, hi, rng = self.nhpt_min, self.nhpt_max, self.nhpt_range
        if None not in (lo, hi, rng) and not math.isclose(rng, hi - lo, rel_tol=1e-9, abs_tol=1e-9):
            problems.append("NHPT_RANGE != NHPT_MAX - NHPT_MIN")
        return problems


class DigitalChannel:
    """One daily digital channel: strictly increasing days in ``[0, 84]``."""

    __slots__ = ("channel_id", "days", "values", "qc_pass")

    def __init__(self, channel_id, days, values, qc_pass=None):
        self.channel_id = channel_id
        self.days = np.asarray(days, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if qc_pass is None:
            qc_pass = np.ones(self.days.shape, dtype=bool)
        self.qc_pass = np.asarray(qc_pass, dtype=bool)
        if not (self.days.shape == self.values.shape == self.qc_pass.shape) or self.days.ndim != 1:
            raise ValueError(f"{channel_id}: days/values length mismatch")

    def __len__(self):
        return int(self.days.shape[0])

    def __eq__(self, other):
        if not isinstance(other, DigitalChannel):
            return NotImplemented
        return (
            self.channel_id == other.channel_id
            and np.array_equal(self.days, other.days)
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.qc_pass, other.qc_pass)
        )

    def __repr__(self):
        return f"DigitalChannel({self.channel_id!r}, n={len(self)})"

    def validate(self):
        problems = []
        if self.channel_id not in CHANNELS:
            problems.append(f"unknown channel {self.channel_id!r}")
        if len(self) and (self.days.min() < 0 or self.days.max() > MAX_DAY):
            problems.append(f"{self.channel_id}: day outside [0, {MAX_DAY}]")
        if np.any(np.diff(self.days) <= 0):
            problems.append(f"{self.channel_id}: days not strictly increasing")
        if not np.all(np.isfinite(self.values)):
            problems.append(f"{self.channel_id}: non-finite value")
        return problems

    def copy(self):
        return DigitalChannel(self.channel_id, self.days.copy(), self.values.copy(), self.qc_pass.copy())


@dataclass
class PatientRecord:
    patient_id: str
    enrollment_date: dt.date
    static: StaticFeatures = field(default_factory=StaticFeatures)
    channels: dict = field(default_factory=dict)
    label_w48: bool | None = None
    label_w72: bool | None = None

    def label(self, target):
        if target not in TARGETS:
            raise ValueError(f"unknown target {target!r}")
        return self.label_w48 if target == "w48" else self.label_w72

    def channel(self, channel_id):
        return self.channels.get(channel_id)

    def copy(self, patient_id=None):
        return PatientRecord(
            patient_id=self.patient_id if patient_id is None else patient_id,
            enrollment_date=self.enrollment_date,
            static=self.static.copy(),
            channels={k: ch.copy() for k, ch in self.channels.items()},
            label_w48=self.label_w48,
            label_w72=self.label_w72,
        )

    def validate(self):
        problems = [f"{self.patient_id}: {p}" for p in self.static.validate()]
        for key, ch in self.channels.items():
            if key != ch.channel_id:
                problems.append(f"{self.patient_id}: channel key {key!r} != {ch.channel_id!r}")
            problems.extend(f"{self.patient_id}: {p}" for p in ch.validate())
        return problems


@dataclass
class Cohort:
    patients: list = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        seen = set()
        dupes = []
        for p in self.patients:
            if p.patient_id in seen:
                dupes.append(f"duplicate patient_id {p.patient_id!r}")
            seen.add(p.patient_id)
        if dupes:
            raise CohortSchemaError(dupes)

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    @property
    def ids(self):
        return [p.patient_id for p in self.patients]

    def subset(self, ids, provenance=None):
        keep = set(ids)
        return Cohort([p for p in self.patients if p.patient_id in keep], provenance or self.provenance)

    def labels(self, target):
        return np.array([bool(p.label(target)) for p in self.patients])

    def validate(self):
        problems = []
        for p in self.patients:
            problems.extend(p.validate())
        return problems


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

_PATIENT_HEADER = ("patient_id", "enrollment_date", *STATIC_COLUMNS, "label_w48", "label_w72")
_SAMPLE_HEADER = ("patient_id", "channel_id", "day", "value", "qc_pass")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(text):
    t = text.strip().lower()
    if t in {"1", "true", "yes"}:
        return True
    if t in {"0", "false", "no"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_static_value(column, text):
    if text is None or text == "":
        return None
    if column == "SEX":
        return text
    if column in _INTEGER_COLUMNS:
        return int(text)
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("non-finite")
    return v


def _json_static_value(column, v):
    if v is None:
        return None
    if column == "SEX":
        return str(v)
    if column in _INTEGER_COLUMNS:
        if isinstance(v, float) and not v.is_integer():
            raise ValueError("expected an integer")
        return int(v)
    return float(v)


def _build_channels(rows, errors, where):
    """rows: {channel_id: [(day, value, qc, rowtag)]}"""
    channels = {}
    for cid, items in rows.items():
        items.sort(key=lambda r: r[0])
        days = [r[0] for r in items]
        for a, b in zip(items, items[1:]):
            if a[0] == b[0]:
                errors.append(f"{b[3]}: duplicate day {b[0]} for channel {cid}")
        if cid not in CHANNELS:
            errors.append(f"{where}: unknown channel_id {cid!r}")
            continue
        channels[cid] = DigitalChannel(cid, days, [r[1] for r in items], [r[2] for r in items])
    return {c: channels[c] for c in CHANNELS if c in channels}


def _check_day(day, tag, errors):
    if not 0 <= day <= MAX_DAY:
        errors.append(f"{tag}: day {day} outside [0, {MAX_DAY}]")
        return False
    return True


def _load_csv_pair(directory):
    directory = Path(directory)
    ppath, spath = directory / "patients.csv", directory / "samples.csv"
    for p in (ppath, spath):
        if not p.exists():
            raise FileNotFoundError(p)
    errors = []
    records = []
    with ppath.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("patient_id", "enrollment_date") if c not in (reader.fieldnames or [])]
        if missing and (reader.fieldnames or []):
            raise CohortSchemaError([f"patients.csv: missing column {c}" for c in missing])
        for lineno, row in enumerate(reader, start=2):
            tag = f"patients.csv row {lineno}"
            pid = row.get("patient_id", "")
            if not pid:
                errors.append(f"{tag} column patient_id: empty")
                continue
            try:
                date = dt.date.fromisoformat(row["enrollment_date"])
            except (ValueError, TypeError):
                errors.append(f"{tag} column enrollment_date: bad date {row.get('enrollment_date')!r}")
                continue
            static = StaticFeatures()
            bad = False
            for col in STATIC_COLUMNS:
                try:
                    static.set(col, _parse_static_value(col, row.get(col)))
                except ValueError as exc:
                    errors.append(f"{tag} column {col}: {exc}")
                    bad = True
            labels = {}
            for col in ("label_w48", "label_w72"):
                text = row.get(col) or ""
                try:
                    labels[col] = None if text == "" else _parse_bool(text)
                except ValueError as exc:
                    errors.append(f"{tag} column {col}: {exc}")
                    bad = True
            if not bad:
                records.append(PatientRecord(pid, date, static, {}, labels["label_w48"], labels["label_w72"]))
    by_id = {}
    dupes = []
    for r in records:
        if r.patient_id in by_id:
            dupes.append(f"duplicate patient_id {r.patient_id!r}")
        by_id[r.patient_id] = r
    if dupes:
        raise CohortSchemaError(dupes)

    grouped = {}
    with spath.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            tag = f"samples.csv row {lineno}"
            pid = row.get("patient_id", "")
            try:
                day = int(row["day"])
            except (ValueError, TypeError, KeyError):
                errors.append(f"{tag} column day: not an integer {row.get('day')!r}")
                continue
            try:
                value = float(row["value"])
                if not math.isfinite(value):
                    raise ValueError
            except (ValueError, TypeError, KeyError):
                errors.append(f"{tag} column value: not a finite number {row.get('value')!r}")
                continue
            qc_text = row.get("qc_pass") or ""
            try:
                qc = True if qc_text == "" else _parse_bool(qc_text)
            except ValueError as exc:
                errors.append(f"{tag} column qc_pass: {exc}")
                continue
            if not _check_day(day, f"{tag} column day", errors):
                continue
            if pid not in by_id:
                errors.append(f"{tag} column patient_id: unknown patient {pid!r}")
                continue
            grouped.setdefault(pid, {}).setdefault(row.get("channel_id", ""), []).append((day, value, qc, tag))
    for pid, rows in grouped.items():
        by_id[pid].channels = _build_channels(rows, errors, f"samples.csv patient {pid}")
    if errors:
        raise CohortError(errors)
    return Cohort(records, provenance=f"csv:{directory}")


def _load_json(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    errors = []
    records = []
    for i, item in enumerate(doc.get("patients", [])):
        tag = f"patients[{i}]"
        try:
            pid = str(item["patient_id"])
            date = dt.date.fromisoformat(item["enrollment_date"])
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"{tag}: bad id/date ({exc})")
            continue
        static = StaticFeatures()
        for col in STATIC_COLUMNS:
            try:
                static.set(col, _json_static_value(col, item.get("static", {}).get(col)))
            except (ValueError, TypeError) as exc:
                errors.append(f"{tag} column {col}: {exc}")
        rows = {}
        for cid, ch in item.get("channels", {}).items():
            days, values = ch.get("days", []), ch.get("values", [])
            qc = ch.get("qc_pass") or [True] * len(days)
            if not len(days) == len(values) == len(qc):
                errors.append(f"{tag} channel {cid}: length mismatch")
                continue
            for j, (d, v, q) in enumerate(zip(days, values, qc)):
                stag = f"{tag} channel {cid} sample {j}"
                if _check_day(int(d), stag, errors):
                    rows.setdefault(cid, []).append((int(d), float(v), bool(q), stag))
        channels = _build_channels(rows, errors, tag)
        records.append(PatientRecord(pid, date, static, channels, item.get("label_w48"), item.get("label_w72")))
    if errors:
        raise CohortError(errors)
    return Cohort(records, provenance=doc.get("provenance", f"json:{path}"))


def load_cohort(path, format=None):
    """Read a cohort from ``path``.

    ``format`` is ``"csv-pair"`` (a directory) or ``"json"``; inferred from
    the path when omitted. All row problems are collected before raising
    :class:`CohortError`.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix == ".json" else "csv-pair"
    if format == "json":
        if not path.exists():
            raise FileNotFoundError(path)
        return _load_json(path)
    if format == "csv-pair":
        return _load_csv_pair(path)
    raise ValueError(f"unknown cohort format {format!r}")


def save_cohort(cohort, path, format=None):
    path = Path(path)
    if format is None:
        format = "json" if path.suffix == ".json" else "csv-pair"
    if format == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cohort_to_json(cohort), indent=1))
        return path
    path.mkdir(parents=True, exist_ok=True)
    with (path / "patients.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_PATIENT_HEADER)
        for p in cohort:
            flat = p.static.as_flat()
            w.writerow(
                [p.patient_id, p.enrollment_date.isoformat()]
                + [_fmt(flat[c]) for c in STATIC_COLUMNS]
                + [_fmt(p.label_w48), _fmt(p.label_w72)]
            )
    with (path / "samples.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_SAMPLE_HEADER)
        for p in cohort:
            for ch in p.channels.values():
                for d, v, q in zip(ch.days.tolist(), ch.values.tolist(), ch.qc_pass.tolist()):
                    w.writerow([p.patient_id, ch.channel_id, d, repr(v), "1" if q else "0"])
    return path


def cohort_to_json(cohort):
    return {
        "provenance": cohort.provenance,
        "patients": [
            {
                "patient_id": p.patient_id,
                "enrollment_date": p.enrollment_date.isoformat(),
                "static": p.static.as_flat(),
                "label_w48": p.label_w48,
                "label_w72": p.label_w72,
                "channels": {
                    cid: {
                        "days": ch.days.tolist(),
                        "values": ch.values.tolist(),
                        "qc_pass": ch.qc_pass.tolist(),
                    }
                    for cid, ch in p.channels.items()
                },
            }
            for p in cohort
        ],
    }
