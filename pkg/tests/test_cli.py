import json

import pytest
import yaml

from msfusion.cli import main
from msfusion.cohort import load_cohort
from msfusion.config import ConfigError, RunConfig, resolve


def run(tmp, *args):
    return main(["--out", str(tmp), "--preset", "quick", *args])


@pytest.fixture(scope="module")
def strong_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("strong")
    assert run(out, "--seed", "2", "simulate", "--n", "415", "--signal", "strong") == 0
    assert run(out, "--seed", "2", "impute") == 0
    return out


class TestConfig:
    def test_defaults(self):
        assert resolve() == RunConfig()

    def test_precedence(self):
        file_doc = {"seed": 3, "simulate": {"n_patients": 50, "signal_strength": "weak"}}
        r = resolve(file_doc, {"seed": 4, "simulate": {"n_patients": 60}})
        assert r.seed == 4
        assert r.simulate.n_patients == 60
        assert r.simulate.signal_strength == "weak"

    def test_preset_then_file(self):
        r = resolve({"preset": "quick", "pipeline": {"gp": {"restarts": 2}}})
        assert r.pipeline.gp.restarts == 2
        assert r.pipeline.model_config.d_model == 16

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            resolve({"pipeline": {"colour": "red"}})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            resolve({"simulate": {"missingness": 3.0}})

    def test_dump_reloads(self, tmp_path):
        r = resolve({"seed": 8, "pipeline": {"target": "w48"}})
        r.dump(tmp_path / "c.yaml")
        assert resolve(yaml.safe_load((tmp_path / "c.yaml").read_text())) == r

    def test_seed_drives_stages(self):
        r = resolve({"seed": 12})
        assert r.sim_config().seed == 12 and r.pipeline_config().seed == 12


class TestSimulate:
    def test_twice_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(a, "--seed", "7", "simulate", "--n", "50") == 0
        assert run(b, "--seed", "7", "simulate", "--n", "50") == 0
        for name in ("patients.csv", "samples.csv", "manifest.json"):
            assert (a / "cohort" / name).read_bytes() == (b / "cohort" / name).read_bytes()
        assert (a / "simulate.manifest.json").read_bytes() == (b / "simulate.manifest.json").read_bytes()

    def test_null_signal_manifest(self, tmp_path):
        assert run(tmp_path, "--seed", "1", "simulate", "--n", "400", "--signal", "none") == 0
        doc = json.loads((tmp_path / "cohort" / "manifest.json").read_text())
        assert abs(doc["event_rate_w72"] - 0.35) < 0.07
        assert doc["config"]["signal_strength"] == "none"
        assert len(doc["config_fingerprint"]) == 64

    def test_invalid_flag_value(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run(tmp_path, "simulate", "--n", "-3")
        assert exc.value.code != 0
        assert "usage" in capsys.readouterr().err

    def test_config_file_and_echo(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("seed: 5\nsimulate:\n  n_patients: 30\ncohort_format: json\n")
        assert main(["--config", str(cfg), "--out", str(tmp_path / "o"), "simulate", "--n", "20"]) == 0
        echoed = yaml.safe_load((tmp_path / "o" / "simulate.config.yaml").read_text())
        assert echoed["seed"] == 5 and echoed["simulate"]["n_patients"] == 20
        assert len(load_cohort(tmp_path / "o" / "cohort" / "cohort.json")) == 20

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path), "simulate"]) == 1
        assert "nope.yaml" in capsys.readouterr().err


class TestImpute:
    def test_missing_cohort_names_path(self, tmp_path, capsys):
        assert run(tmp_path, "impute", "--cohort", str(tmp_path / "absent")) == 1
        assert "absent" in capsys.readouterr().err

    def test_augment_triples_train(self, tmp_path):
        assert run(tmp_path, "--seed", "3", "simulate", "--n", "40") == 0
        assert run(tmp_path, "--seed", "3", "impute", "--augment", "2") == 0
        prepared = json.loads((tmp_path / "impute" / "prepared.json").read_text())
        train = load_cohort(tmp_path / "impute" / "train.json")
        assert len(train) == 3 * len(prepared["train_ids"])

    def test_observed_values_preserved(self, tmp_path):
        assert run(tmp_path, "--seed", "4", "simulate", "--n", "30") == 0
        assert run(tmp_path, "--seed", "4", "impute") == 0
        raw = {p.patient_id: p for p in load_cohort(tmp_path / "cohort")}
        for split in ("train", "test"):
            for p in load_cohort(tmp_path / "impute" / f"{split}.json"):
                for cid, ch in raw[p.patient_id].channels.items():
                    ok = ch.qc_pass
                    out = p.channels[cid].values
                    assert out[ch.days[ok]].tobytes() == ch.values[ok].tobytes()


class TestTrainEvaluate:
    def test_logistic_end_to_end(self, strong_run):
        assert run(strong_run, "--seed", "2", "features") == 0
        assert run(strong_run, "--seed", "2", "train", "--model", "logistic") == 0
        assert run(strong_run, "--seed", "2", "evaluate") == 0
        report = json.loads((strong_run / "report.json").read_text())
        assert report["auroc"] >= 0.8
        assert report["details"]["model"] == "logistic"
        assert (strong_run / "roc.csv").read_text().startswith("fpr,tpr")
        manifest = json.loads((strong_run / "train.manifest.json").read_text())
        model = json.loads((strong_run / "model.json").read_text())
        assert model["config_fingerprint"] == manifest["pipeline_fingerprint"]
        assert run(strong_run, "report") == 0

    def test_evaluate_missing_checkpoint(self, strong_run, capsys):
        assert run(strong_run, "--seed", "2", "evaluate", "--checkpoint", str(strong_run / "none.json")) == 1
        assert "none.json" in capsys.readouterr().err

    def test_mismatched_impute_config(self, strong_run, capsys):
        assert run(strong_run, "--seed", "2", "train", "--target", "w48") == 1
        assert "re-run impute" in capsys.readouterr().err

    def test_target_changes_fingerprint(self):
        a = resolve(None, {"pipeline": {"target": "w72"}})
        b = resolve(None, {"pipeline": {"target": "w48"}})
        assert a.fingerprint() != b.fingerprint()
        assert a.pipeline_config().fingerprint() != b.pipeline_config().fingerprint()
