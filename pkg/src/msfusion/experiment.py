"""End-to-end experiment: filter, temporal split, encode, GP-impute,
featurize, fit on train, score the held-out test split.

Every statistic is fitted on train rows only. The staged helpers
(:func:`prepare`, :func:`impute_splits`, :func:`build_inputs`,
:func:`fit_model`, :func:`evaluate`) are what the CLI persists between
subcommands; :func:`run_experiment` chains them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cohort import CHANNELS, N_DAYS, Cohort, cohort_to_json
from .features import SelectionSpec, WindowSpec, cohort_window_features, select_features
from .gp import GpConfig, fit_channel_scalers, impute_cohort
from .logistic import LogisticModel, fit_logistic, predict_logistic
from .metrics import auroc, roc_curve, stratified_holdout, stratified_kfold
from .preprocessing import (
    EncoderState,
    EncodingSpec,
    FilterConfig,
    encode_static,
    filter_cohort,
    fit_static_encoder,
    quantile_cutoff,
    temporal_split,
)
from .seeding import derive_seed
from .table import FeatureTable
from .transformer import Batch, FusionModel, ModelConfig, TrainConfig, predict, train

log = logging.getLogger(__name__)

MODELS = ("multimodal", "unimodal_ts", "logistic")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    target: str = "w72"
    model: str = "multimodal"
    filter: FilterConfig = FilterConfig()
    split_quantile: float = 0.8
    encoding: EncodingSpec = EncodingSpec()
    gp: GpConfig = GpConfig()
    augment: int = 0
    window: WindowSpec = WindowSpec()
    selection: SelectionSpec = SelectionSpec()
    l2_grid: tuple = (0.01, 0.1, 1.0, 10.0)
    cv_folds: int = 5
    model_config: ModelConfig = ModelConfig()
    train_config: TrainConfig = TrainConfig()
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.target not in ("w48", "w72"):
            raise ValueError("target must be w48 or w72")

    def to_json(self):
        return _jsonable(asdict(self))

    def fingerprint(self):
        return fingerprint(self.to_json())


# Reduced transformer and GP settings for repeated runs on a CPU (acceptance
# suite, ``--preset quick``). Chosen so one n=415 run takes a few seconds.
QUICK_MODEL = ModelConfig(d_model=16, n_heads=2, n_blocks=1, ff_dim=32, head_dim=16)
QUICK_TRAIN = TrainConfig(lr=3e-3, epochs=10, batch_size=32, early_stop_patience=4)
QUICK_GP = GpConfig(restarts=1, gtol=1e-3)


def quick_config(**overrides):
    """:class:`PipelineConfig` with the quick settings; ``overrides`` win."""
    base = PipelineConfig(gp=QUICK_GP, model_config=QUICK_MODEL, train_config=QUICK_TRAIN)
    return replace(base, **overrides)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=True)


def fingerprint(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def from_dict(cls, doc):
    """Rebuild a (possibly nested) frozen config dataclass from plain data."""
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in doc.items():
        if k not in hints:
            raise ValueError(f"unknown field {cls.__name__}.{k}")
        f = hints[k]
        default = f.default_factory() if f.default is dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default) and isinstance(v, dict):
            v = from_dict(type(default), v)
        elif isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    train: Cohort
    test: Cohort
    cutoff: str
    funnel: dict
    encoder: EncoderState
    scalers: dict


def prepare(cohort, cfg):
    """Filter, split at the enrollment-date quantile, fit encoder and channel
    scalers on train."""
    rules = replace(cfg.filter, target=cfg.target)
    kept, report = filter_cohort(cohort, rules)
    if len(kept) == 0:
        raise ExperimentError("no patients survive filtering")
    cutoff = quantile_cutoff(kept, cfg.split_quantile)
    train, test = temporal_split(kept, cutoff)
    if len(test) == 0:
        raise ExperimentError("empty test split")
    if len(train) == 0:
        raise ExperimentError("empty train split")
    y_test = test.labels(cfg.target)
    if y_test.all() or not y_test.any():
        raise ExperimentError("test split has a single class")
    y_train = train.labels(cfg.target)
    if y_train.all() or not y_train.any():
        raise ExperimentError("train split has a single class")
    encoder = fit_static_encoder(train, cfg.encoding)
    scalers = fit_channel_scalers(train)
    return Prepared(train, test, cutoff.isoformat(), report.to_json(), encoder, scalers)


@dataclass
class Imputed:
    train: Cohort
    test: Cohort
    summary: dict


def gp_config(cfg):
    """GP options with the seed tied to the pipeline seed."""
    return replace(cfg.gp, seed=derive_seed(cfg.seed, "gp", cfg.gp.seed))


def impute_splits(prep, cfg, with_fits=False):
    gp = gp_config(cfg)
    tr = impute_cohort(prep.train, prep.scalers, gp, augment=cfg.augment)
    te = impute_cohort(prep.test, prep.scalers, gp)
    if with_fits:
        return Imputed(tr.cohort, te.cohort, {"train": tr.summary(), "test": te.summary()}), (tr, te)
    return Imputed(tr.cohort, te.cohort, {"train": tr.summary(), "test": te.summary()})


def standardized_tensor(cohort, scalers):
    """``(B, 85, C)`` completed trajectories in train-standardized units."""
    out = np.empty((len(cohort), N_DAYS, len(CHANNELS)))
    for i, p in enumerate(cohort):
        for j, cid in enumerate(CHANNELS):
            mean, std = scalers[cid]
            out[i, :, j] = (p.channels[cid].values - mean) / std
    return out


def _standardized_cohort(cohort, scalers):
    out = []
    for p in cohort:
        q = p.copy()
        for cid in CHANNELS:
            mean, std = scalers[cid]
            q.channels[cid].values = (q.channels[cid].values - mean) / std
        out.append(q)
    return Cohort(out, cohort.provenance)


@dataclass
class Inputs:
    static_train: FeatureTable
    static_test: FeatureTable
    ts_train: np.ndarray
    ts_test: np.ndarray
    y_train: np.ndarray
    y_test: np.ndarray
    windows_train: FeatureTable | None = None
    windows_test: FeatureTable | None = None

    def batches(self):
        return (Batch(self.ts_train, self.static_train.matrix, self.y_train),
                Batch(self.ts_test, self.static_test.matrix, self.y_test))

    def tabular(self):
        return self.windows_train.hstack(self.static_train), self.windows_test.hstack(self.static_test)


def build_inputs(prep, imp, cfg, windows=None):
    if windows is None:
        windows = cfg.model == "logistic"
    inp = Inputs(
        static_train=encode_static(imp.train, prep.encoder),
        static_test=encode_static(imp.test, prep.encoder),
        ts_train=standardized_tensor(imp.train, prep.scalers),
        ts_test=standardized_tensor(imp.test, prep.scalers),
        y_train=imp.train.labels(cfg.target),
        y_test=imp.test.labels(cfg.target),
    )
    if windows:
        inp.windows_train = cohort_window_features(_standardized_cohort(imp.train, prep.scalers), cfg.window)
        inp.windows_test = cohort_window_features(_standardized_cohort(imp.test, prep.scalers), cfg.window)
    return inp


@dataclass
class ColumnScaler:
    names: tuple
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, table):
        std = table.matrix.std(axis=0)
        return cls(table.column_names, table.matrix.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, table):
        t = table.columns(self.names)
        return FeatureTable((t.matrix - self.mean) / self.std, t.column_names, t.row_ids)

    def to_json(self):
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, doc):
        return cls(tuple(doc["names"]), np.array(doc["mean"]), np.array(doc["std"]))


@dataclass
class TrainedModel:
    kind: str
    logistic: LogisticModel | None = None
    scaler: ColumnScaler | None = None
    selected: tuple = ()
    transformer: FusionModel | None = None
    selection_log: dict = field(default_factory=dict)

    def predict(self, inp, split="test"):
        if self.kind == "logistic":
            table = inp.tabular()[0 if split == "train" else 1]
            return predict_logistic(self.logistic, self.scaler.transform(table.columns(self.selected)))
        batch = inp.batches()[0 if split == "train" else 1]
        return predict(self.transformer, batch)

    def fitted_statistics(self):
        if self.kind == "logistic":
            return {
                "selected": list(self.selected),
                "column_scaler": self.scaler.to_json(),
                "model": self.logistic.to_json(),
            }
        return {"model_digest": fingerprint(self.transformer.to_json()["params"])}

    def to_json(self):
        doc = {"kind": self.kind, "selection_log": self.selection_log}
        if self.kind == "logistic":
            doc.update(logistic=self.logistic.to_json(), scaler=self.scaler.to_json(), selected=list(self.selected))
        else:
            doc["transformer"] = self.transformer.to_json()
        return doc

    @classmethod
    def from_json(cls, doc):
        if doc["kind"] == "logistic":
            return cls("logistic", LogisticModel.from_json(doc["logistic"]), ColumnScaler.from_json(doc["scaler"]),
                       tuple(doc["selected"]), selection_log=doc.get("selection_log", {}))
        return cls(doc["kind"], transformer=FusionModel.from_json(doc["transformer"]),
                   selection_log=doc.get("selection_log", {}))


def _fit_logistic_cv(inp, cfg):
    train_tab, _ = inp.tabular()
    y = inp.y_train
    selected = tuple(select_features(train_tab, y, cfg.selection))
    sub = train_tab.columns(selected)
    scaler = ColumnScaler.fit(sub)
    X = scaler.transform(sub)
    folds = stratified_kfold(y, cfg.cv_folds, derive_seed(cfg.seed, "cv"))
    scores = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for l2 in cfg.l2_grid:
            aucs = []
            for tr, va in folds:
                m = fit_logistic(X.matrix[tr], y[tr], l2=l2)
                aucs.append(auroc(predict_logistic(m, X.matrix[va]), y[va]))
            scores[l2] = float(np.mean(aucs))
    # ties go to the stronger penalty (the simpler model)
    best = max(sorted(cfg.l2_grid, reverse=True), key=lambda l2: scores[l2])
    model = fit_logistic(X, y, l2=best)
    return TrainedModel("logistic", model, scaler, selected,
                        selection_log={"cv_auroc": {repr(k): v for k, v in scores.items()}, "l2": best})


def _fit_transformer(inp, cfg):
    train_batch, _ = inp.batches()
    keep, hold = stratified_holdout(inp.y_train, cfg.val_fraction, derive_seed(cfg.seed, "holdout"))
    mc = replace(cfg.model_config, mode=cfg.model, n_static=inp.static_train.shape[1],
                 seed=derive_seed(cfg.seed, "init") % 2**32)
    tc = replace(cfg.train_config, seed=derive_seed(cfg.seed, "train") % 2**32)
    model, history = train(train_batch.take(keep), train_batch.take(hold), mc, tc)
    best = max(history, key=lambda r: r.get("val_auroc", -1.0), default={})
    return TrainedModel(cfg.model, transformer=model,
                        selection_log={"epochs_run": len(history), "best_epoch": best.get("epoch")})


def fit_model(inp, cfg):
    if cfg.model == "logistic":
        return _fit_logistic_cv(inp, cfg)
    return _fit_transformer(inp, cfg)


@dataclass
class EvalReport:
    auroc: float
    roc_points: list
    n_pos: int
    n_neg: int
    split_descriptor: dict
    config_fingerprint: str
    funnel: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json(self):
        return _jsonable(asdict(self))

    def roc_csv(self):
        return "fpr,tpr\n" + "".join(f"{f!r},{t!r}\n" for f, t in self.roc_points)


def evaluate(trained, inp, prep, cfg, extra=None):
    scores = trained.predict(inp, "test")
    fpr, tpr = roc_curve(scores, inp.y_test)
    return EvalReport(
        auroc=auroc(scores, inp.y_test),
        roc_points=[[float(a), float(b)] for a, b in zip(fpr, tpr)],
        n_pos=int(inp.y_test.sum()),
        n_neg=int((~inp.y_test).sum()),
        split_descriptor={
            "kind": "temporal",
            "cutoff": prep.cutoff,
            "quantile": cfg.split_quantile,
            "n_train": len(inp.y_train),
            "n_test": len(inp.y_test),
            "train_pos": int(inp.y_train.sum()),
        },
        config_fingerprint=cfg.fingerprint(),
        funnel=prep.funnel,
        details={"model": cfg.model, "target": cfg.target, **trained.selection_log, **(extra or {})},
    )


def fitted_statistics(prep, trained=None):
    """Everything learned from train rows; used by the leak tripwire."""
    doc = {
        "cutoff": prep.cutoff,
        "train_ids": prep.train.ids,
        "encoder": prep.encoder.to_json(),
        "channel_scalers": {k: list(v) for k, v in prep.scalers.items()},
    }
    if trained is not None:
        doc.update(trained.fitted_statistics())
    return doc


@dataclass
class ExperimentResult:
    report: EvalReport
    prepared: Prepared
    imputed: Imputed
    inputs: Inputs
    trained: TrainedModel


def run_experiment(cohort, cfg=None, full=False):
    """Run the pipeline and return the :class:`EvalReport` (or every stage
    when ``full``)."""
    cfg = cfg or PipelineConfig()
    prep = prepare(cohort, cfg)
    imp = impute_splits(prep, cfg)
    inp = build_inputs(prep, imp, cfg)
    trained = fit_model(inp, cfg)
    report = evaluate(trained, inp, prep, cfg, {"imputation": imp.summary})
    if full:
        return ExperimentResult(report, prep, imp, inp, trained)
    return report


def cohort_digest(cohort):
    return fingerprint(cohort_to_json(cohort))
