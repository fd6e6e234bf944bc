import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cacemi.data import (BINARY, CONTINUOUS, Dataset, TrialRecord, derive_compliance, ensure_compliance,
                         load_csv, observed_summary, write_csv)
from cacemi.errors import DataError

from conftest import make_dataset


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_complete_csv(tmp_path):
    p = _write(tmp_path, "id,z,d,y\n1,1,1,2.5\n2,1,0,1\n3,0,0,0\n4,0,0,-1\n")
    ds = load_csv(p, CONTINUOUS)
    assert ds.n == 4
    assert not ds.missing_y.any()
    assert ds.y.tolist() == [2.5, 1.0, 0.0, -1.0]


@pytest.mark.parametrize("token", ["", "NA"])
def test_load_missing_outcome(tmp_path, token):
    p = _write(tmp_path, f"id,z,d,y\n1,1,1,2\n2,1,0,1\n3,0,0,{token}\n4,0,0,0\n")
    ds = load_csv(p, CONTINUOUS)
    assert ds.missing_y.tolist() == [False, False, True, False]
    assert list(ds.records())[2].y is None


def test_one_way_violation(tmp_path):
    p = _write(tmp_path, "id,z,d,y\n1,1,1,2\n2,0,1,1\n")
    with pytest.raises(DataError, match="one-way noncompliance violated"):
        load_csv(p, CONTINUOUS)


@pytest.mark.parametrize("text,msg", [
    ("id,z,y\n1,1,2\n", "missing column"),
    ("id,z,d,y\n1,2,1,2\n2,0,0,1\n", "0/1"),
    ("id,z,d,y\n1,1,1,2\n2,1,0,1\n", "both arms"),
    ("id,z,d,y\n1,1,1,0.5\n2,0,0,1\n", "outside"),
])
def test_load_errors(tmp_path, text, msg):
    kind = BINARY if "0.5" in text else CONTINUOUS
    with pytest.raises(DataError, match=msg):
        load_csv(_write(tmp_path, text), kind)


def test_column_map_and_covariates(tmp_path):
    p = _write(tmp_path, "pid,arm,got,out,age,sex\n1,1,1,2,30,0\n2,0,0,1,40,1\n")
    ds = load_csv(p, CONTINUOUS, {"id": "pid", "z": "arm", "d": "got", "y": "out"})
    assert ds.covariate_names == ("age", "sex")
    assert ds.covariates(["sex"]).ravel().tolist() == [0.0, 1.0]


def test_comment_lines_skipped(tmp_path):
    p = _write(tmp_path, "# made by hand\nid,z,d,y\n1,1,1,2\n2,0,0,1\n")
    assert load_csv(p, CONTINUOUS).n == 2


def test_derive_compliance():
    ds = derive_compliance(make_dataset([1, 1, 0], [1, 0, 0], [1.0, 2.0, 3.0]))
    recs = list(ds.records())
    assert recs[0].c == 1
    assert recs[1].c == 0
    assert recs[2].c is None


def test_ensure_compliance_keeps_known_classes():
    ds = make_dataset([1, 0, 0], [1, 0, 0], [1.0, 2.0, 3.0], c=[np.nan, 1.0, np.nan])
    out = ensure_compliance(ds)
    assert out.c[0] == 1.0 and out.c[1] == 1.0 and math.isnan(out.c[2])


def test_class_must_match_d_in_active_arm():
    with pytest.raises(DataError, match="contradicts"):
        make_dataset([1, 0], [1, 0], [1.0, 0.0], c=[0.0, np.nan])


def test_arrays_are_read_only(wald_fixture):
    with pytest.raises(ValueError):
        wald_fixture.y[0] = 5.0


def test_observed_summary_counts():
    z = [0] * 5 + [1] * 5
    d = [0] * 5 + [1, 1, 0, 0, 0]
    y = [np.nan, 1, 2, 3, 4, 1, 2, 3, 4, 5]
    s = observed_summary(make_dataset(z, d, y))
    assert s["control"]["variables"]["y"]["pct_missing"] == 20.0
    assert s["active"]["variables"]["y"]["pct_missing"] == 0.0
    assert s["active"]["pct_noncompliant"] == 60.0
    assert s["active"]["variables"]["y"]["mean"] == 3.0


def test_records_round_trip():
    ds = make_dataset([1, 0], [0, 0], [np.nan, 1.5], x=[[1.0], [2.0]], names=("a",))
    back = Dataset.from_records(list(ds.records()), CONTINUOUS, ("a",))
    assert np.array_equal(back.y, ds.y, equal_nan=True)
    assert np.array_equal(back.x, ds.x)
    assert isinstance(next(ds.records()), TrialRecord)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.one_of(st.none(), finite), finite),
                min_size=2, max_size=25))
def test_csv_round_trip_is_exact(tmp_path_factory, rows):
    rows = [(z, d if z == 1 else 0, y, x) for z, d, y, x in rows]
    rows[0] = (1,) + rows[0][1:]
    rows[1] = (0, 0) + rows[1][2:]
    ds = make_dataset([r[0] for r in rows], [r[1] for r in rows],
                      [np.nan if r[2] is None else r[2] for r in rows],
                      x=[[r[3]] for r in rows], names=("x1",))
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, p)
    back = load_csv(p, CONTINUOUS)
    assert np.array_equal(back.y, ds.y, equal_nan=True)
    assert np.array_equal(back.x, ds.x)
    assert np.array_equal(back.z, ds.z) and np.array_equal(back.d, ds.d)
    write_csv(back, p.with_name("e.csv"))
    assert p.read_text() == p.with_name("e.csv").read_text()
