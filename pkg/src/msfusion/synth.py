"""Synthetic cohorts shaped like the study population.

Each patient carries two independent standard-normal latent factors: ``a``
(expressed through the clinical static features) and ``b`` (expressed
through the daily digital channels as a level shift plus a linear drift).
The progression risk is

    r = s * (sqrt(f) * a + sqrt(1 - f) * b) + e,    e ~ N(0, 1)

with ``s`` the signal magnitude and ``f`` the static share. Labels are
``r`` above the normal quantile matching the target event rate, so the
week-48 positives are a subset of the week-72 positives. Feature marginals
do not depend on ``s``; with ``s = 0`` labels are independent of everything.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .cohort import (
    BRAIN_VOLUMES,
    CHANNELS,
    FUNCTIONAL_SYSTEMS,
    N_DAYS,
    Cohort,
    DigitalChannel,
    PatientRecord,
    StaticFeatures,
    save_cohort,
)
from .seeding import derive_seed

# Frozen after calibration against the logistic baseline (see README).
SIGNAL_LEVELS = {"none": 0.0, "weak": 0.5, "strong": 3.0}

# (typical level, between-patient sd, direction of the b effect)
CHANNEL_PROFILES = {
    "step_duration_med": (1.10, 0.15, +1),
    "step_impulse_med": (0.25, 0.05, -1),
    "step_length_med": (0.60, 0.10, -1),
    "step_length_sum": (800.0, 300.0, -1),
    "step_velocity_med": (1.00, 0.20, -1),
    "turn_speed_med": (1.50, 0.40, -1),
    "das_fig8_accuracy": (0.80, 0.10, -1),
    "pinch_async": (0.10, 0.04, +1),
    "pinch_count": (20.0, 6.0, -1),
}

_SMOOTH_LENGTH = 7.0


@dataclass(frozen=True)
class SimConfig:
    n_patients: int = 415
    event_rate_w48: float = 0.24
    event_rate_w72: float = 0.35
    age_mean: float = 48.8
    age_sd: float = 9.3
    edss_mean: float = 4.8
    edss_sd: float = 1.4
    female_frac: float = 0.535
    missingness: float = 0.5  # per-day observation probability
    signal_strength: str = "strong"
    signal_split: float = 0.5  # share of the risk variance carried by static features
    signal_scale: float | None = None  # overrides SIGNAL_LEVELS when set
    channel_loading: float = 0.8  # corr(level, b) per channel
    static_loading: float = 0.8  # corr(feature, a) for the clinical scores
    qc_fail_rate: float = 0.01
    static_missing_rate: float = 0.02
    label_missing_rate: float = 0.02
    start_date: str = "2019-01-01"
    enrollment_days: int = 1095
    seed: int = 0

    def __post_init__(self):
        probs = ("event_rate_w48", "event_rate_w72", "female_frac", "missingness", "signal_split",
                 "qc_fail_rate", "static_missing_rate", "label_missing_rate")
        for name in probs:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.n_patients < 10:
            raise ValueError("n_patients must be >= 10")
        if self.signal_strength not in SIGNAL_LEVELS:
            raise ValueError(f"signal_strength must be one of {sorted(SIGNAL_LEVELS)}")
        if self.event_rate_w48 > self.event_rate_w72:
            raise ValueError("event_rate_w48 must not exceed event_rate_w72")
        for name in ("channel_loading", "static_loading"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def magnitude(self):
        return SIGNAL_LEVELS[self.signal_strength] if self.signal_scale is None else float(self.signal_scale)


def _smooth_factor():
    t = np.arange(N_DAYS, dtype=np.float64)
    K = np.exp(-0.5 * ((t[:, None] - t[None, :]) / _SMOOTH_LENGTH) ** 2)
    w, V = np.linalg.eigh(K)
    return V * np.sqrt(np.clip(w, 0.0, None))


_SMOOTH = _smooth_factor()


def _mix(rng, latent, loading):
    return loading * latent + math.sqrt(1.0 - loading**2) * rng.standard_normal()


def _maybe(rng, value, rate):
    return None if rng.random() < rate else value


def _static(rng, cfg, a):
    rho = cfg.static_loading
    miss = cfg.static_missing_rate
    s = StaticFeatures()
    s.age = float(round(cfg.age_mean + cfg.age_sd * rng.standard_normal(), 1))
    s.sex = "F" if rng.random() < cfg.female_frac else "M"
    edss = cfg.edss_mean + cfg.edss_sd * _mix(rng, a, rho)
    s.edss = float(min(max(round(edss * 2) / 2, 0.0), 10.0))
    s.bmi = _maybe(rng, float(round(25.0 + 4.5 * rng.standard_normal(), 1)), miss)
    s.t25fwt = _maybe(rng, float(round(math.exp(math.log(7.0) + 0.35 * _mix(rng, a, rho)), 2)), miss)
    lo = math.exp(math.log(22.0) + 0.25 * _mix(rng, a, rho))
    hi = lo * math.exp(abs(0.08 * rng.standard_normal()) + 0.02)
    lo, hi = round(lo, 2), round(hi, 2)
    s.nhpt_min, s.nhpt_max = float(lo), float(hi)
    s.nhpt_avg = float(round((lo + hi) / 2, 3))
    s.nhpt_range = float(hi - lo)
    s.sdmt = _maybe(rng, float(round(max(50.0 - 10.0 * _mix(rng, a, rho), 0.0))), miss)
    s.num_relapses = int(rng.poisson(1.2))
    s.onset_years = float(round(max(12.0 + 7.0 * rng.standard_normal(), 0.5), 1))
    for k in FUNCTIONAL_SYSTEMS:
        s.functional_scores[k] = int(np.clip(round(2.0 + 1.2 * _mix(rng, a, 0.5 * rho)), 0, 6))
    for k, (mu, sd) in zip(BRAIN_VOLUMES, ((14000, 1800), (450000, 45000), (9000, 6000), (15000, 1800))):
        sign = 1.0 if k == "t2_lesion" else -1.0
        v = mu + sd * _mix(rng, sign * a, 0.5 * rho)
        s.brain_volumes[k] = _maybe(rng, float(round(max(v, 0.0), 1)), 5 * miss)
    return s


def _channels(rng, cfg, b):
    days = np.arange(N_DAYS)
    centered = (days - (N_DAYS - 1) / 2) / ((N_DAYS - 1) / 2)
    out = {}
    for cid in CHANNELS:
        mu, sd, sign = CHANNEL_PROFILES[cid]
        shift = _mix(rng, sign * b, cfg.channel_loading)
        drift = 0.5 * sign * b
        smooth = _SMOOTH @ rng.standard_normal(N_DAYS)
        noise = rng.standard_normal(N_DAYS)
        values = mu + sd * (shift + drift * centered + 0.35 * smooth + 0.35 * noise)
        keep = rng.random(N_DAYS) < cfg.missingness
        qc = rng.random(int(keep.sum())) >= cfg.qc_fail_rate
        out[cid] = DigitalChannel(cid, days[keep], values[keep], qc)
    return out


def generate(config=None):
    """Deterministic cohort for ``config`` (each patient uses its own seed)."""
    cfg = config or SimConfig()
    s = cfg.magnitude
    sd_r = math.sqrt(s * s + 1.0)
    thr48 = sd_r * norm.ppf(1.0 - cfg.event_rate_w48)
    thr72 = sd_r * norm.ppf(1.0 - cfg.event_rate_w72)
    start = dt.date.fromisoformat(cfg.start_date)
    wf, wb = math.sqrt(cfg.signal_split), math.sqrt(1.0 - cfg.signal_split)
    patients = []
    width = len(str(cfg.n_patients))
    for i in range(cfg.n_patients):
        rng = np.random.default_rng(derive_seed(cfg.seed, "synth", i))
        a, b, e = rng.standard_normal(3)
        r = s * (wf * a + wb * b) + e
        pid = f"P{i:0{width}d}"
        enrolled = start + dt.timedelta(days=int(rng.integers(0, cfg.enrollment_days)))
        static = _static(rng, cfg, a)
        channels = _channels(rng, cfg, b)
        label72 = bool(r > thr72)
        patients.append(PatientRecord(
            patient_id=pid,
            enrollment_date=enrolled,
            static=static,
            channels=channels,
            label_w48=bool(r > thr48),
            label_w72=None if rng.random() < cfg.label_missing_rate else label72,
        ))
    return Cohort(patients, provenance=f"synthetic seed={cfg.seed} signal={cfg.signal_strength}")


def manifest(cohort, config):
    """Realized marginals next to the configured values."""
    def _stats(values):
        v = np.array([x for x in values if x is not None], dtype=np.float64)
        return {"mean": float(v.mean()), "sd": float(v.std()), "n": int(v.size)} if v.size else None

    def _rate(values):
        v = [x for x in values if x is not None]
        return float(np.mean(v)) if v else None

    observed = sum(len(ch) for p in cohort for ch in p.channels.values())
    return {
        "config": asdict(config),
        "signal_magnitude": config.magnitude,
        "n_patients": len(cohort),
        "age": _stats(p.static.age for p in cohort),
        "edss": _stats(p.static.edss for p in cohort),
        "female_frac": _rate(p.static.sex == "F" for p in cohort),
        "event_rate_w48": _rate(p.label_w48 for p in cohort),
        "event_rate_w72": _rate(p.label_w72 for p in cohort),
        "observation_frac": observed / (len(cohort) * len(CHANNELS) * N_DAYS),
    }


def write_cohort(cohort, config, out_dir, format="csv-pair"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out if format == "csv-pair" else out / "cohort.json"
    save_cohort(cohort, target, format=format)
    (out / "manifest.json").write_text(json.dumps(manifest(cohort, config), indent=1, sort_keys=True))
    return target
