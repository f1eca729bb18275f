"""``msfusion`` command line.

Subcommands share one output directory; each reads what the previous
stage wrote there::

    msfusion --out run simulate --n 415 --signal strong
    msfusion --out run impute            # reads run/cohort
    msfusion --out run features
    msfusion --out run train --model multimodal
    msfusion --out run evaluate
    msfusion report run other_run

Every command echoes its resolved config to ``<out>/<command>.config.yaml``
and writes ``<out>/<command>.manifest.json`` with the config fingerprint and
the sha256 of each file it produced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .cohort import CohortError, load_cohort, save_cohort
from .config import PRESETS, ConfigError, load_file, resolve
from .experiment import (
    ExperimentError,
    Imputed,
    PipelineConfig,
    Prepared,
    TrainedModel,
    _jsonable,
    build_inputs,
    canonical_json,
    cohort_digest,
    evaluate,
    fit_model,
    from_dict,
    impute_splits,
    prepare,
)
from .gp import save_fits
from .preprocessing import EncoderState
from .synth import SIGNAL_LEVELS, generate, write_cohort

log = logging.getLogger("msfusion")

# fields fixed by `impute`; later stages must agree on them
DATA_FIELDS = ("target", "filter", "split_quantile", "encoding", "gp", "augment", "seed")


class CliError(RuntimeError):
    pass


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")
    return path


def _read_json(path, what):
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path} (run the upstream command first)")
    return json.loads(path.read_text())


def _files_under(path):
    path = Path(path)
    return sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]


def _finish(out, command, run, written):
    run.dump(out / f"{command}.config.yaml")
    files = {}
    for item in written:
        for f in _files_under(item):
            files[str(f.relative_to(out))] = _sha256(f)
    _write_json(out / f"{command}.manifest.json", {
        "command": command,
        "config_fingerprint": run.fingerprint(),
        "pipeline_fingerprint": run.pipeline_config().fingerprint(),
        "files": files,
        "version": __version__,
    })


def _data_key(pcfg):
    doc = pcfg.to_json()
    return canonical_json({k: doc[k] for k in DATA_FIELDS})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(run, args, out):
    cfg = run.sim_config()
    cohort = generate(cfg)
    target = write_cohort(cohort, cfg, out / "cohort", run.cohort_format)
    manifest = json.loads((out / "cohort" / "manifest.json").read_text())
    manifest["config_fingerprint"] = run.fingerprint()
    _write_json(out / "cohort" / "manifest.json", manifest)
    print(f"wrote {len(cohort)} patients to {target}")
    _finish(out, "simulate", run, [out / "cohort"])


def _cohort_path(args, out, run):
    if args.cohort:
        return Path(args.cohort)
    base = out / "cohort"
    return base / "cohort.json" if run.cohort_format == "json" else base


def cmd_impute(run, args, out):
    path = _cohort_path(args, out, run)
    if not path.exists():
        raise CliError(f"cohort not found: {path}")
    cohort = load_cohort(path)
    # a content digest rather than the input path keeps outputs location independent
    cohort.provenance = ""
    cohort.provenance = f"cohort sha256={cohort_digest(cohort)}"
    pcfg = run.pipeline_config()
    prep = prepare(cohort, pcfg)
    imp, (tr, te) = impute_splits(prep, pcfg, with_fits=True)
    d = out / "impute"
    save_cohort(imp.train, d / "train.json")
    save_cohort(imp.test, d / "test.json")
    save_fits(tr, d / "gp_train.json")
    save_fits(te, d / "gp_test.json")
    fp = pcfg.fingerprint()
    _write_json(d / "prepared.json", {
        "config_fingerprint": fp,
        "data_key": _data_key(pcfg),
        "cutoff": prep.cutoff,
        "funnel": prep.funnel,
        "encoder": prep.encoder.to_json(),
        "scalers": {k: list(v) for k, v in prep.scalers.items()},
        "train_ids": prep.train.ids,
        "test_ids": prep.test.ids,
    })
    _write_json(d / "summary.json", {"config_fingerprint": fp, **imp.summary})
    for split, s in imp.summary.items():
        print(f"{split}: fits {s['fits_succeeded']}/{s['fits_attempted']}, "
              f"mean lml {s['mean_lml'] if s['mean_lml'] is None else round(s['mean_lml'], 3)}, "
              f"records {s['output_records']}")
    _finish(out, "impute", run, [d])


def _load_stage(out, pcfg):
    d = out / "impute"
    doc = _read_json(d / "prepared.json", "imputation output")
    if doc["data_key"] != _data_key(pcfg):
        raise CliError("config differs from the one used by `impute` in fields "
                       f"{', '.join(DATA_FIELDS)}; re-run impute")
    train = load_cohort(d / "train.json")
    test = load_cohort(d / "test.json")
    prep = Prepared(train, test, doc["cutoff"], doc["funnel"], EncoderState.from_json(doc["encoder"]),
                    {k: tuple(v) for k, v in doc["scalers"].items()})
    summary = json.loads((d / "summary.json").read_text())
    summary.pop("config_fingerprint", None)
    return prep, Imputed(train, test, summary)


def cmd_features(run, args, out):
    pcfg = run.pipeline_config()
    prep, imp = _load_stage(out, pcfg)
    inp = build_inputs(prep, imp, pcfg, windows=True)
    d = out / "features"
    inp.windows_train.to_csv(d / "windows_train.csv")
    inp.windows_test.to_csv(d / "windows_test.csv")
    inp.static_train.to_csv(d / "static_train.csv")
    inp.static_test.to_csv(d / "static_test.csv")
    print(f"{inp.windows_train.shape[1]} window features, {inp.static_train.shape[1]} static columns")
    _finish(out, "features", run, [d])


def cmd_train(run, args, out):
    pcfg = run.pipeline_config()
    prep, imp = _load_stage(out, pcfg)
    inp = build_inputs(prep, imp, pcfg)
    trained = fit_model(inp, pcfg)
    _write_json(out / "model.json", {"config_fingerprint": pcfg.fingerprint(), "config": pcfg.to_json(),
                                     **trained.to_json()})
    print(f"trained {pcfg.model} on {len(inp.y_train)} records")
    _finish(out, "train", run, [out / "model.json"])


def cmd_evaluate(run, args, out):
    path = Path(args.checkpoint) if args.checkpoint else out / "model.json"
    doc = _read_json(path, "checkpoint")
    if "config" not in doc:
        raise CliError(f"{path} is not a model checkpoint")
    # the checkpoint's own config decides the model; data fields must match impute
    pcfg = from_dict(PipelineConfig, doc["config"])
    prep, imp = _load_stage(out, pcfg)
    inp = build_inputs(prep, imp, pcfg)
    report = evaluate(TrainedModel.from_json(doc), inp, prep, pcfg, {"imputation": imp.summary})
    _write_json(out / "report.json", report.to_json())
    (out / "roc.csv").write_text(report.roc_csv())
    print(_report_line(str(out), report.to_json()))
    _finish(out, "evaluate", run, [out / "report.json", out / "roc.csv"])


def _report_line(name, doc):
    d = doc["details"]
    return (f"{name}: model={d.get('model')} target={d.get('target')} auroc={doc['auroc']:.4f} "
            f"n_pos={doc['n_pos']} n_neg={doc['n_neg']} fingerprint={doc['config_fingerprint'][:12]}")


def cmd_report(run, args, out):
    dirs = [Path(p) for p in args.runs] or [out]
    rows = []
    for d in dirs:
        doc = _read_json(d / "report.json", "report")
        rows.append({"run": str(d), "auroc": doc["auroc"], "model": doc["details"].get("model"),
                     "target": doc["details"].get("target"), "n_pos": doc["n_pos"], "n_neg": doc["n_neg"],
                     "config_fingerprint": doc["config_fingerprint"]})
        print(_report_line(str(d), doc))
    _write_json(out / "summary.json", {"runs": rows})
    _finish(out, "report", run, [out / "summary.json"])


COMMANDS = {
    "simulate": cmd_simulate,
    "impute": cmd_impute,
    "features": cmd_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _non_negative(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must be in [0, 1]")
    return v


def build_parser():
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given
    # before the subcommand name
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=_u64, help="master seed")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--preset", choices=PRESETS, help="pipeline settings preset")

    parser = argparse.ArgumentParser(prog="msfusion", parents=[common],
                                     description="GP-imputed multimodal progression modelling")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic cohort")
    p.add_argument("--n", type=_positive, help="number of patients")
    p.add_argument("--signal", choices=sorted(SIGNAL_LEVELS))
    p.add_argument("--signal-split", type=_fraction, help="share of signal carried by static features")
    p.add_argument("--format", choices=["csv-pair", "json"])

    for name, text in (("impute", "split, fit GPs and complete trajectories"),
                       ("features", "export windowed and static feature tables"),
                       ("train", "fit a model on the train split"),
                       ("evaluate", "score the test split")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--target", choices=["w48", "w72"])
        p.add_argument("--augment", type=_non_negative, help="GP samples per train patient")
        p.add_argument("--model", choices=["multimodal", "unimodal-ts", "logistic"])
        if name == "impute":
            p.add_argument("--cohort", help="cohort directory or .json (default: <out>/cohort)")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="model file (default: <out>/model.json)")

    p = sub.add_parser("report", parents=[common], help="summarize evaluated runs")
    p.add_argument("runs", nargs="*", help="run directories (default: --out)")
    return parser


def _overrides(args):
    doc = {}
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "preset", None):
        doc["preset"] = args.preset
    sim, pipe = {}, {}
    for flag, key in (("n", "n_patients"), ("signal", "signal_strength"), ("signal_split", "signal_split")):
        if getattr(args, flag, None) is not None:
            sim[key] = getattr(args, flag)
    if getattr(args, "format", None):
        doc["cohort_format"] = args.format
    if getattr(args, "target", None):
        pipe["target"] = args.target
    if getattr(args, "augment", None) is not None:
        pipe["augment"] = args.augment
    if getattr(args, "model", None):
        pipe["model"] = args.model.replace("-", "_")
    if sim:
        doc["simulate"] = sim
    if pipe:
        doc["pipeline"] = pipe
    return doc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, getattr(args, "log_level", "WARNING")),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = getattr(args, "config", None)
        file_doc = load_file(config) if config else None
        run = resolve(file_doc, _overrides(args))
        out = Path(getattr(args, "out", "out"))
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](run, args, out)
    except (CliError, ConfigError, CohortError, ExperimentError, FileNotFoundError, ValueError) as exc:
        print(f"msfusion {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
