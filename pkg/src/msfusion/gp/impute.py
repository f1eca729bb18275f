"""Cohort-level GP imputation and augmentation.

Channel values are standardized with train-set statistics before fitting so
the zero-mean prior is reasonable; completed trajectories are mapped back
to channel units. Per-(patient, channel) seeds are derived from a master
seed and the pair key, so results do not depend on processing order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..seeding import derive_seed
from ..cohort import CHANNELS, N_DAYS, Cohort, DigitalChannel
from .model import GpFit, GpFitError, complete_trajectory, fit_gp, sample_trajectory

log = logging.getLogger(__name__)

GRID = np.arange(N_DAYS, dtype=np.float64)


@dataclass(frozen=True)
class GpConfig:
    restarts: int = 5
    max_iter: int = 200
    gtol: float = 1e-6
    min_samples: int = 1
    seed: int = 0


def fit_channel_scalers(train):
    """Per-channel ``(mean, std)`` over every observed train sample."""
    scalers = {}
    for cid in CHANNELS:
        vals = [p.channels[cid].values for p in train if cid in p.channels and len(p.channels[cid])]
        if vals:
            v = np.concatenate(vals)
            mean, std = float(v.mean()), float(v.std())
        else:
            mean, std = 0.0, 1.0
        scalers[cid] = (mean, std if std > 0 else 1.0)
    return scalers


def fit_patient(record, scalers, config=None):
    """Fit one GP per channel with at least ``config.min_samples`` samples."""
    config = config or GpConfig()
    fits = {}
    for cid, ch in record.channels.items():
        if len(ch) < max(config.min_samples, 1):
            continue
        mean, std = scalers[cid]
        z = (ch.values - mean) / std
        fits[cid] = fit_gp(
            ch.days.astype(np.float64),
            z,
            restarts=config.restarts,
            seed=derive_seed(config.seed, record.patient_id, cid, "fit"),
            key=f"({record.patient_id}, {cid})",
            max_iter=config.max_iter,
            gtol=config.gtol,
        )
    return fits


def _prior_fill(cid, scalers):
    return np.full(N_DAYS, scalers[cid][0])


def complete_patient(record, fits, scalers, seed):
    """Copy of ``record`` with every channel dense on days 0..84."""
    out = record.copy()
    channels = {}
    for cid in CHANNELS:
        ch = record.channels.get(cid)
        if cid in fits:
            vals = complete_trajectory(
                ch, fits[cid], GRID, derive_seed(seed, record.patient_id, cid, "complete"), scalers[cid]
            )
        elif ch is not None and len(ch):
            # too sparse to fit: keep observations, prior mean elsewhere
            vals = _prior_fill(cid, scalers)
            vals[ch.days] = ch.values
        else:
            vals = _prior_fill(cid, scalers)
        channels[cid] = DigitalChannel(cid, np.arange(N_DAYS), vals)
    out.channels = channels
    return out


def augment_patient(record, fits, n_synthetic, seed, scalers=None):
    """``n_synthetic`` clones with fully resampled trajectories.

    Static features and labels are copied; ids get a ``~augK`` suffix.
    Channels without a fit are copied unchanged.
    """
    clones = []
    for k in range(1, n_synthetic + 1):
        clone = record.copy(patient_id=f"{record.patient_id}~aug{k}")
        for cid, ch in record.channels.items():
            fit = fits.get(cid)
            if fit is None:
                log.warning("augment: no fit for (%s, %s); copied unchanged", record.patient_id, cid)
                continue
            draw = sample_trajectory(fit, GRID, derive_seed(seed, record.patient_id, cid, "aug", k))
            if scalers is not None:
                mean, std = scalers[cid]
                draw = mean + std * draw
            clone.channels[cid] = DigitalChannel(cid, np.arange(N_DAYS), draw)
        clones.append(clone)
    return clones


@dataclass
class ImputationResult:
    cohort: Cohort
    fits: dict = field(default_factory=dict)
    scalers: dict = field(default_factory=dict)
    attempted: int = 0
    succeeded: int = 0
    failures: list = field(default_factory=list)

    def summary(self):
        lmls = [f.lml for f in self.fits.values()]
        return {
            "patients": len({pid for pid, _ in self.fits}),
            "fits_attempted": self.attempted,
            "fits_succeeded": self.succeeded,
            "fits_failed": len(self.failures),
            "mean_lml": float(np.mean(lmls)) if lmls else None,
            "output_records": len(self.cohort),
        }


def impute_cohort(cohort, scalers, config=None, augment=0, augment_ids=None):
    """Fit, complete and optionally augment every patient.

    ``augment_ids`` restricts augmentation (e.g. to train patients); clones
    are appended after the completed originals.
    """
    config = config or GpConfig()
    result = ImputationResult(Cohort([], cohort.provenance), scalers=scalers)
    completed, synthetic = [], []
    for p in cohort:
        try:
            fits = fit_patient(p, scalers, config)
        except GpFitError as exc:
            log.warning("GP fit failed: %s", exc)
            result.failures.append(str(exc))
            fits = {}
        result.attempted += sum(1 for ch in p.channels.values() if len(ch) >= max(config.min_samples, 1))
        result.succeeded += len(fits)
        for cid, f in fits.items():
            result.fits[(p.patient_id, cid)] = f
        completed.append(complete_patient(p, fits, scalers, config.seed))
        if augment and (augment_ids is None or p.patient_id in augment_ids):
            synthetic.extend(augment_patient(p, fits, augment, config.seed, scalers))
    result.cohort = Cohort(completed + synthetic, cohort.provenance)
    return result


def save_fits(result, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = [
        {"patient_id": pid, "channel_id": cid, "scale": list(result.scalers[cid]), **fit.to_json()}
        for (pid, cid), fit in sorted(result.fits.items())
    ]
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_fits(path):
    doc = json.loads(Path(path).read_text())
    return {(d["patient_id"], d["channel_id"]): GpFit.from_json(d) for d in doc}
