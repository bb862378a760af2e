import numpy as np
import pandas as pd
import pytest
from conftest import data_path

from analysis.errors import SchemaError, SpecError
from analysis.pulse_control import U3Params
from utils.data_loader import (
    RECORD_COLUMNS,
    DecayCurve,
    ExperimentKind,
    ExperimentRecord,
    bootstrap_curve,
    curves_by_key,
    empirical_curve,
    load_experiment_records,
    read_curve,
    relative_error,
    relative_error_summary,
    spam_normalize,
    write_curve,
    write_experiment_records,
)


def _record(p=0.5, n=50, shots=8192, kind="free", start=None):
    counts0 = np.full(n, int(round(p * shots)))
    if start is not None:
        counts0[0] = int(round(start * shots))
    return ExperimentRecord(state=U3Params.from_degrees(90.0), kind=kind, instants=np.arange(n) * 280.0,
                            shots=shots, counts0=counts0)


def _rows(**overrides):
    row = {"theta_deg": 180, "phi_deg": 0, "lambda_deg": 0, "kind": "free", "shots": 100, "instant_ns": 0,
           "count0": 90, "count1": 10}
    rows = [dict(row), dict(row, instant_ns=280, count0=80, count1=20)]
    rows[1].update(overrides)
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def test_records_round_trip(tmp_path):
    records = [_record(kind="free"), _record(p=0.8, kind="dd")]
    path = write_experiment_records(records, tmp_path / "data.csv")
    loaded = load_experiment_records(path)
    assert [r.key for r in loaded] == [r.key for r in records]
    np.testing.assert_array_equal(loaded[1].counts0, records[1].counts0)
    assert loaded[0].kind is ExperimentKind.FREE
    assert loaded[0].total_ns == pytest.approx(50 * 280.0)
    assert path.read_text().startswith("record,theta_deg=90,")


BLOCKS = """# synthetic counts
record,theta_deg=180,phi_deg=0,lambda_deg=0,kind=free,shots=100,total_ns=560,n_instants=2
instant_ns,count0,count1
0,90,10
280,80,20

record,theta_deg=90,phi_deg=0,lambda_deg=0,kind=dd,shots=100,total_ns=560,n_instants=2
instant_ns,count0,count1
0,95,5
280,85,15
"""


def test_record_block_layout(tmp_path):
    path = tmp_path / "blocks.csv"
    path.write_text(BLOCKS)
    records = load_experiment_records(path)
    assert [r.key for r in records] == [("free", (180.0, 0.0, 0.0)), ("dd", (90.0, 0.0, 0.0))]
    assert records[0].total_ns == 560.0 and records[0].shots == 100
    np.testing.assert_array_equal(records[1].counts0, [95, 85])
    np.testing.assert_allclose(records[1].instants, [0.0, 280.0])


@pytest.mark.parametrize("old, new, line, field", [
    ("n_instants=2\ninstant_ns,count0,count1\n0,90", "n_instants=3\ninstant_ns,count0,count1\n0,90", 2,
     "n_instants"),
    ("kind=free", "kind=echo", 2, "kind"),
    ("shots=100,total_ns=560,n_instants=2\ninstant_ns,count0,count1\n0,90", "total_ns=560,n_instants=2\n"
     "instant_ns,count0,count1\n0,90", 2, "shots"),
    ("280,80,20", "280,80,25", 5, "count0+count1"),
    ("280,80,20", "600,80,20", 5, "instant_ns"),
    ("280,85,15", "280,lots,15", 10, "count0"),
])
def test_record_block_errors(tmp_path, old, new, line, field):
    path = tmp_path / "bad.csv"
    path.write_text(BLOCKS.replace(old, new, 1))
    with pytest.raises(SchemaError) as info:
        load_experiment_records(path)
    assert info.value.line == line
    assert info.value.field == field


def test_long_layout_round_trip(tmp_path):
    records = [_record(kind="free"), _record(p=0.8, kind="dd")]
    path = write_experiment_records(records, tmp_path / "long.csv", layout="long")
    assert list(pd.read_csv(path).columns) == RECORD_COLUMNS
    loaded = load_experiment_records(path)
    np.testing.assert_array_equal(loaded[1].counts0, records[1].counts0)
    with pytest.raises(SpecError):
        write_experiment_records(records, tmp_path / "other.csv", layout="wide")


def test_record_span():
    assert _record(n=50).span == pytest.approx(50 * 280.0)
    declared = ExperimentRecord(state=U3Params(0.0), kind="dd", instants=[0.0, 280.0], shots=10, counts0=[9, 8],
                                total_ns=560.0)
    assert declared.span == 560.0
    with pytest.raises(SpecError):
        ExperimentRecord(state=U3Params(0.0), kind="dd", instants=[0.0, 700.0], shots=10, counts0=[9, 8],
                         total_ns=560.0)


def test_empty_dataset(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert load_experiment_records(empty) == []
    header = tmp_path / "header.csv"
    header.write_text(",".join(RECORD_COLUMNS) + "\n")
    assert load_experiment_records(header) == []


def test_missing_dataset_file(tmp_path):
    with pytest.raises(SchemaError):
        load_experiment_records(tmp_path / "absent.csv")


def test_count_mismatch_names_the_instant(tmp_path):
    path = tmp_path / "bad.csv"
    _rows(count1=25).to_csv(path, index=False)
    with pytest.raises(SchemaError) as info:
        load_experiment_records(path)
    assert info.value.line == 3
    assert "280" in str(info.value)


@pytest.mark.parametrize("overrides, field", [({"shots": 0, "count0": 0, "count1": 0}, "shots"),
                                              ({"kind": "echo"}, "kind"),
                                              ({"count0": "many"}, "count0")])
def test_schema_errors(tmp_path, overrides, field):
    path = tmp_path / "bad.csv"
    _rows(**overrides).to_csv(path, index=False)
    with pytest.raises(SchemaError) as info:
        load_experiment_records(path)
    assert info.value.field == field
    assert info.value.line == 3


def test_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    _rows().drop(columns=["count1"]).to_csv(path, index=False)
    with pytest.raises(SchemaError) as info:
        load_experiment_records(path)
    assert info.value.field == "count1"


def test_record_validation():
    with pytest.raises(SpecError):
        ExperimentRecord(state=U3Params(0.0), kind="free", instants=[0.0], shots=10, counts0=[4], counts1=[5])
    with pytest.raises(SpecError):
        ExperimentRecord(state=U3Params(0.0), kind="free", instants=[0.0], shots=0, counts0=[0])


def test_bootstrap_half_width_matches_binomial():
    curve = bootstrap_curve(_record(p=0.5), n_resamples=100, seed=1)
    assert np.mean(curve.half_width) == pytest.approx(2.0 * np.sqrt(0.25 / 8192), rel=0.05)
    np.testing.assert_allclose(curve.mean, 0.5, atol=0.01)


def test_bootstrap_is_seeded():
    a = bootstrap_curve(_record(), seed=(3, 0))
    b = bootstrap_curve(_record(), seed=(3, 0))
    np.testing.assert_array_equal(a.mean, b.mean)
    with pytest.raises(SpecError):
        bootstrap_curve(_record(), n_resamples=1)


def test_bootstrap_mean_converges_to_the_empirical_mean():
    rec = _record(p=0.3, n=20, start=0.95)
    curve = bootstrap_curve(rec, n_resamples=1000, seed=8)
    standard_error = np.sqrt(rec.empirical * (1.0 - rec.empirical) / rec.shots)
    assert np.all(np.abs(curve.mean - rec.empirical) < 3.0 * standard_error)


@pytest.mark.parametrize("name", ["quito_synthetic.csv", "lima_synthetic.csv"])
def test_shipped_synthetic_fixtures(name):
    path = data_path("datasets", name)
    with open(path) as handle:
        assert "SYNTHETIC" in handle.readline()
    records = load_experiment_records(path)
    assert len(records) == 12
    assert {r.kind for r in records} == {ExperimentKind.FREE, ExperimentKind.DD}
    for rec in records:
        assert rec.total_ns == 9800.0 and rec.shots == 8192
        np.testing.assert_allclose(rec.instants, np.arange(35) * 280.0)
    curves = curves_by_key(records, seed=1)
    assert curves[("free", (180.0, 0.0, 0.0))].mean[-1] < curves[("dd", (90.0, 0.0, 0.0))].mean[-1]


def test_additive_spam_is_idempotent():
    curve = bootstrap_curve(_record(p=0.9, start=0.95), seed=2)
    once = spam_normalize(curve)
    assert once.mean[0] == pytest.approx(1.0)
    np.testing.assert_allclose(spam_normalize(once).mean, once.mean)
    np.testing.assert_array_equal(once.half_width, curve.half_width)


def test_multiplicative_spam():
    curve = DecayCurve(instants=[0.0, 1.0], mean=[0.8, 0.4], half_width=[0.02, 0.02])
    scaled = spam_normalize(curve, mode="multiplicative")
    np.testing.assert_allclose(scaled.mean, [1.0, 0.5])
    np.testing.assert_allclose(scaled.half_width, [0.025, 0.025])
    with pytest.raises(SpecError):
        spam_normalize(curve, mode="affine")


def test_spam_needs_time_zero():
    curve = DecayCurve(instants=[10.0, 20.0], mean=[0.8, 0.4], half_width=[0.0, 0.0])
    with pytest.raises(SpecError):
        spam_normalize(curve)


def test_spam_overshoot_is_logged(caplog):
    curve = DecayCurve(instants=[0.0, 1.0], mean=[0.9, 0.95], half_width=[0.0, 0.0], label="rising")
    with caplog.at_level("WARNING"):
        out = spam_normalize(curve)
    assert out.exceeds_one
    assert "exceeds one" in caplog.text


def test_spam_orders_agree_on_the_mean():
    rec = _record(p=0.9, start=0.95)
    a = empirical_curve(rec, seed=5, spam_order="bootstrap-then-shift")
    b = empirical_curve(rec, seed=5, spam_order="shift-then-bootstrap")
    np.testing.assert_allclose(a.mean, b.mean, atol=0.01)
    with pytest.raises(SpecError):
        empirical_curve(rec, spam_order="sideways")


def test_curves_by_key():
    records = [_record(kind="free"), _record(kind="dd")]
    curves = curves_by_key(records, seed=4)
    assert set(curves) == {("free", (90.0, 0.0, 0.0)), ("dd", (90.0, 0.0, 0.0))}
    again = curves_by_key(records, seed=4)
    np.testing.assert_array_equal(curves[("dd", (90.0, 0.0, 0.0))].mean, again[("dd", (90.0, 0.0, 0.0))].mean)


def test_relative_error():
    exp = DecayCurve(instants=[0.0, 1.0], mean=[1.0, 0.5], half_width=[0.0, 0.0])
    sim = DecayCurve(instants=[0.0, 1.0], mean=[0.9, 0.55], half_width=[0.0, 0.0])
    np.testing.assert_allclose(relative_error(exp, sim), [0.1, -0.1])
    with pytest.raises(SpecError):
        relative_error(exp, DecayCurve(instants=[0.0, 2.0], mean=[1.0, 1.0], half_width=[0.0, 0.0]))
    with pytest.raises(SpecError):
        relative_error(DecayCurve(instants=[0.0, 1.0], mean=[1.0, 0.0], half_width=[0.0, 0.0]), sim)


def test_relative_error_summary():
    summary = relative_error_summary(np.array([-0.2, 0.0, 0.1, 0.3]))
    assert summary["mean"] == pytest.approx(0.05)
    assert summary["max_abs"] == pytest.approx(0.3)
    assert summary["mean_abs"] == pytest.approx(0.15)
    assert summary["p05"] <= summary["median"] <= summary["p95"]


def test_curve_validation_and_io(tmp_path):
    with pytest.raises(SpecError):
        DecayCurve(instants=[0.0, 1.0], mean=[1.0], half_width=[0.0])
    with pytest.raises(SpecError):
        DecayCurve(instants=[0.0], mean=[1.0], half_width=[-0.1])
    curve = DecayCurve(instants=[0.0, 280.0], mean=[1.0, 0.97], half_width=[0.01, 0.02])
    loaded = read_curve(write_curve(curve, tmp_path / "curve.csv"))
    np.testing.assert_allclose(loaded.mean, curve.mean)
    assert loaded.label == "curve"
    assert curve.stderr[1] == pytest.approx(0.01)
