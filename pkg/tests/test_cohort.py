import datetime as dt
import logging

import numpy as np
import pytest

from msfusion.cohort import (
    CHANNELS,
    Cohort,
    CohortError,
    CohortSchemaError,
    DigitalChannel,
    PatientRecord,
    StaticFeatures,
    load_cohort,
    save_cohort,
)
from msfusion.preprocessing import (
    EncodeReport,
    EncodingSpec,
    FilterConfig,
    encode_static,
    filter_cohort,
    fit_static_encoder,
    quantile_cutoff,
    temporal_split,
)
from msfusion.synth import SimConfig, generate


def patient(pid, date="2020-01-01", **static):
    s = StaticFeatures()
    for k, v in static.items():
        setattr(s, k, v)
    return PatientRecord(pid, dt.date.fromisoformat(date), s)


def write_pair(tmp_path, patients_rows, sample_rows):
    from msfusion.cohort import STATIC_COLUMNS

    header = ["patient_id", "enrollment_date", *STATIC_COLUMNS, "label_w48", "label_w72"]
    lines = [",".join(header)]
    for pid, date, extra in patients_rows:
        row = {"patient_id": pid, "enrollment_date": date, **extra}
        lines.append(",".join(str(row.get(c, "")) for c in header))
    (tmp_path / "patients.csv").write_text("\n".join(lines) + "\n")
    body = ["patient_id,channel_id,day,value"] + [",".join(map(str, r)) for r in sample_rows]
    (tmp_path / "samples.csv").write_text("\n".join(body) + "\n")
    return tmp_path


@pytest.fixture(scope="module")
def small_cohort():
    return generate(SimConfig(n_patients=30, seed=3))


class TestLoad:
    def test_empty_patient_file(self, tmp_path):
        c = load_cohort(write_pair(tmp_path, [], []))
        assert len(c) == 0

    def test_single_patient_three_samples_in_order(self, tmp_path):
        rows = [("P1", "step_duration_med", d, v) for d, v in ((2, 1.5), (7, 1.25), (40, 0.5))]
        c = load_cohort(write_pair(tmp_path, [("P1", "2020-02-03", {"AGE": 40})], rows))
        assert len(c) == 1
        ch = c.patients[0].channels["step_duration_med"]
        assert ch.days.tolist() == [2, 7, 40]
        assert ch.values.tolist() == [1.5, 1.25, 0.5]

    def test_day_out_of_range_names_row(self, tmp_path):
        rows = [("P1", "pinch_count", 3, 1.0), ("P1", "pinch_count", 90, 2.0)]
        with pytest.raises(CohortError) as exc:
            load_cohort(write_pair(tmp_path, [("P1", "2020-01-01", {})], rows))
        assert any("row 3" in e and "90" in e for e in exc.value.errors)

    def test_errors_collected_not_first_only(self, tmp_path):
        rows = [("P1", "pinch_count", 99, 1.0), ("P1", "pinch_count", "x", 2.0), ("P1", "pinch_count", 5, "nan")]
        with pytest.raises(CohortError) as exc:
            load_cohort(write_pair(tmp_path, [("P1", "2020-01-01", {"AGE": "abc"})], rows))
        assert len(exc.value.errors) == 4

    def test_duplicate_patient_id(self, tmp_path):
        with pytest.raises(CohortSchemaError):
            load_cohort(write_pair(tmp_path, [("P1", "2020-01-01", {}), ("P1", "2020-01-02", {})], []))

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cohort(tmp_path / "nope")

    @pytest.mark.parametrize("fmt", ["csv-pair", "json"])
    def test_round_trip_bitwise(self, tmp_path, small_cohort, fmt):
        target = tmp_path / ("c.json" if fmt == "json" else "c")
        save_cohort(small_cohort, target, format=fmt)
        back = load_cohort(target, format=fmt)
        again_path = tmp_path / ("d.json" if fmt == "json" else "d")
        save_cohort(back, again_path, format=fmt)
        again = load_cohort(again_path, format=fmt)
        for a, b, c in zip(small_cohort, back, again):
            assert a.patient_id == b.patient_id == c.patient_id
            assert a.static.as_flat() == b.static.as_flat() == c.static.as_flat()
            assert (a.label_w48, a.label_w72) == (b.label_w48, b.label_w72)
            assert a.channels == b.channels == c.channels

    def test_duplicate_patients_in_memory(self):
        with pytest.raises(CohortSchemaError):
            Cohort([patient("A"), patient("A")])


class TestStaticInvariants:
    def test_edss_grid(self):
        assert StaticFeatures(edss=4.5).validate() == []
        assert StaticFeatures(edss=4.3).validate()
        assert StaticFeatures(edss=10.5).validate()

    def test_nhpt_range(self):
        ok = StaticFeatures(nhpt_min=20.0, nhpt_max=25.0, nhpt_range=5.0)
        bad = StaticFeatures(nhpt_min=20.0, nhpt_max=25.0, nhpt_range=4.0)
        assert ok.validate() == []
        assert bad.validate()

    def test_channel_validation(self):
        assert DigitalChannel("pinch_count", [1, 1], [0.0, 1.0]).validate()
        assert DigitalChannel("bogus", [1], [0.0]).validate()


def gait_patient(pid, n_samples, date="2020-01-01", **labels):
    p = patient(pid, date, age=40.0, sex="F", edss=3.0)
    if n_samples:
        p.channels["step_duration_med"] = DigitalChannel("step_duration_med", np.arange(n_samples), np.ones(n_samples))
    p.label_w48 = labels.get("w48", False)
    p.label_w72 = labels.get("w72", False)
    return p


class TestFilter:
    def test_gait_rule_counts(self):
        c = Cohort([gait_patient(f"P{i}", 0 if i < 4 else 3) for i in range(10)])
        out, rep = filter_cohort(c, FilterConfig(min_samples=1))
        assert len(out) == 6
        assert rep.excluded["longitudinal_density"] == 4
        assert rep.retained_count == 6

    def test_no_op_rules(self, small_cohort):
        out, rep = filter_cohort(small_cohort, FilterConfig.none())
        assert out.ids == small_cohort.ids
        assert all(a is b for a, b in zip(out, small_cohort))
        assert sum(rep.excluded.values()) == 0

    def test_missing_label_excluded(self):
        c = Cohort([gait_patient("A", 10), gait_patient("B", 10, w72=None)])
        out, rep = filter_cohort(c, FilterConfig(target="w72"))
        assert out.ids == ["A"]
        assert rep.excluded["label_w72"] == 1

    def test_idempotent(self, small_cohort):
        rules = FilterConfig(target="w72")
        once, _ = filter_cohort(small_cohort, rules)
        twice, _ = filter_cohort(once, rules)
        assert once.ids == twice.ids
        assert all(a.channels == b.channels for a, b in zip(once, twice))

    def test_qc_samples_dropped(self):
        p = gait_patient("A", 0)
        p.channels["pinch_count"] = DigitalChannel("pinch_count", [1, 2, 3], [1.0, 2.0, 3.0], [True, False, True])
        out, rep = filter_cohort(Cohort([p]), FilterConfig(min_samples=0, required_static=()))
        assert out.patients[0].channels["pinch_count"].days.tolist() == [1, 3]
        assert rep.qc_samples_removed == 1
        assert p.channels["pinch_count"].days.tolist() == [1, 2, 3]

    def test_report_json(self):
        c = Cohort([gait_patient("A", 10)])
        doc = filter_cohort(c)[1].to_json()
        assert doc["initial_count"] == 1 and doc["retained_count"] == 1


class TestSplit:
    def test_cutoff_after_everything(self, small_cohort, caplog):
        with caplog.at_level(logging.WARNING):
            train, test = temporal_split(small_cohort, dt.date(2100, 1, 1))
        assert len(train) == len(small_cohort) and len(test) == 0
        assert "degenerate" in caplog.text

    def test_quantile_cutoff_roughly_80_20(self):
        c = generate(SimConfig(n_patients=200, seed=1))
        train, test = temporal_split(c, quantile_cutoff(c, 0.8))
        assert len(train) + len(test) == 200
        assert 0.7 <= len(train) / 200 <= 0.85

    def test_ties_go_to_test(self):
        c = Cohort([patient("A", "2020-01-01"), patient("B", "2020-05-05"), patient("C", "2020-05-05")])
        train, test = temporal_split(c, dt.date(2020, 5, 5))
        assert train.ids == ["A"] and test.ids == ["B", "C"]

    def test_partition(self, small_cohort):
        train, test = temporal_split(small_cohort, quantile_cutoff(small_cohort))
        assert set(train.ids).isdisjoint(test.ids)
        assert sorted(train.ids + test.ids) == sorted(small_cohort.ids)


class TestEncoder:
    def test_hand_example(self):
        c = Cohort([patient("A", age=2.0), patient("B", age=4.0)])
        enc = fit_static_encoder(c, EncodingSpec(numeric=("AGE",), categorical=()))
        assert enc.numeric[0].mean == 3.0 and enc.numeric[0].std == 1.0
        np.testing.assert_array_equal(encode_static(c, enc).matrix[:, 0], [-1.0, 1.0])

    def test_one_hot_sex(self):
        c = Cohort([patient("A", sex="F"), patient("B", sex="M"), patient("C", sex="F")])
        enc = fit_static_encoder(c, EncodingSpec(numeric=(), categorical=("SEX",)))
        t = encode_static(c, enc)
        assert t.column_names == ("SEX=F", "SEX=M")
        np.testing.assert_array_equal(t.matrix.sum(axis=1), 1.0)

    def test_all_missing_column(self):
        c = Cohort([patient("A"), patient("B")])
        enc = fit_static_encoder(c, EncodingSpec(numeric=("BBMI",), categorical=()))
        t = encode_static(c, enc)
        assert t.column_names == ("BBMI", "BBMI__missing")
        np.testing.assert_array_equal(t.matrix, [[0.0, 1.0], [0.0, 1.0]])

    def test_zero_variance_flagged(self):
        c = Cohort([patient("A", age=5.0), patient("B", age=5.0)])
        enc = fit_static_encoder(c, EncodingSpec(numeric=("AGE",), categorical=()))
        assert enc.numeric[0].zero_variance and enc.numeric[0].std == 1.0

    def test_train_standardization(self, small_cohort):
        enc = fit_static_encoder(small_cohort)
        t = encode_static(small_cohort, enc)
        for state in enc.numeric:
            if state.indicator or state.zero_variance:
                continue  # mean imputation shrinks the spread of incomplete columns
            col = t.matrix[:, t.column_names.index(state.name)]
            assert abs(col.mean()) < 1e-9
            assert abs(col.std() - 1.0) < 1e-9

    def test_unseen_category(self, caplog):
        train = Cohort([patient("A", sex="F"), patient("B", sex="M")])
        enc = fit_static_encoder(train, EncodingSpec(numeric=(), categorical=("SEX",)))
        rep = EncodeReport()
        with caplog.at_level(logging.WARNING):
            t = encode_static(Cohort([patient("C", sex="X")]), enc, rep)
        np.testing.assert_array_equal(t.matrix, [[0.0, 0.0]])
        assert rep.unseen_categories == {"SEX": ["C"]}
        assert "unseen category" in caplog.text

    def test_single_patient(self):
        c = Cohort([patient("A", age=30.0, sex="F")])
        t = encode_static(c, fit_static_encoder(c))
        assert t.shape[0] == 1

    def test_state_json_round_trip(self, small_cohort):
        from msfusion.preprocessing import EncoderState

        enc = fit_static_encoder(small_cohort)
        assert EncoderState.from_json(enc.to_json()) == enc


def test_generated_cohort_is_valid():
    c = generate(SimConfig(n_patients=40, seed=9))
    assert c.validate() == []
    assert all(set(p.channels) == set(CHANNELS) for p in c)
