import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mulaaip.data import (ManifestError, NonPositiveKdError, PairRecord, TooFewRecordsError, LengthMismatchError,
                          classification_metrics, ddg_from_dg, dg_from_ddg, dg_from_kd, format_manifest,
                          format_metrics_csv, kfold_split, parse_manifest, parse_metrics_csv, regression_metrics,
                          roc_auc)

from oracles import auc_pairs, classification_loop, mae_loop, pcc_loop

HEADER = ("pair_id,ab_heavy_seq,ab_light_seq,ag_seq,ab_structure_path,ag_structure_path,"
          "ab_chains,ag_chains,label,label_kind,temperature_k\n")


def test_manifest_parses_and_round_trips():
    text = HEADER + "p1,EVQL,DIQM,KVFG,ab.pdb,ag.pdb,H;L,A,-9.5,dG,\np2,qvql,,KVFG,,,H,A;B,1,neutralization,310\n"
    recs = parse_manifest(text)
    assert [r.pair_id for r in recs] == ["p1", "p2"]
    assert recs[0].ab_chains == ("H", "L") and recs[1].ag_chains == ("A", "B")
    assert recs[1].ab_heavy_seq == "QVQL" and recs[1].ab_light_seq == ""
    assert recs[0].temperature_k == 298.0 and recs[1].temperature_k == 310.0
    assert recs[1].ab_structure_path is None
    assert parse_manifest(format_manifest(recs)) == recs


@pytest.mark.parametrize("body, needle", [
    ("p1,A,,K,,,,,x,dG,\n", "bad label"),
    ("p1,A,,K,,,,,nan,dG,\n", "non-finite"),
    ("p1,A,,K,,,,,0.5,neutralization,\n", "0 or 1"),
    ("p1,A,,K,,,,,1,kd,\n", "label_kind"),
    ("p1,A,,K,,,,,1,dG,\np1,A,,K,,,,,1,dG,\n", "duplicate"),
    ("p1,,,K,,,,,1,dG,\n", "required"),
    ("p1,A,,K,,,,,,dG,\n", "missing label"),
])
def test_manifest_errors(body, needle):
    with pytest.raises(ManifestError, match=needle):
        parse_manifest(HEADER + body)


def test_manifest_header_checks():
    with pytest.raises(ManifestError, match="unknown"):
        parse_manifest(HEADER.strip() + ",extra\n")
    with pytest.raises(ManifestError, match="missing"):
        parse_manifest("pair_id,label\n")
    with pytest.raises(ManifestError, match="empty"):
        parse_manifest("")


def test_unlabelled_manifest_allowed_for_prediction():
    recs = parse_manifest(HEADER + "q,A,,K,,,,,,dG,\n", require_label=False)
    assert math.isnan(recs[0].label)


def test_dg_from_kd():
    assert dg_from_kd(1.0, 310.0) == 0.0
    assert dg_from_kd(1e-9, 298.0) == pytest.approx(-12.28, abs=0.01)
    rt_ln2 = 1.9872e-3 * 298.0 * math.log(2.0)
    assert dg_from_kd(1e-9) - dg_from_kd(0.5e-9) == pytest.approx(rt_ln2, rel=1e-12)
    for bad in (0.0, -1e-9):
        with pytest.raises(NonPositiveKdError):
            dg_from_kd(bad)


@given(st.floats(1e-15, 1.0), st.floats(1e-15, 1.0))
def test_dg_monotone_in_kd(a, b):
    if a < b:
        assert dg_from_kd(a) < dg_from_kd(b)


def test_dg_from_ddg():
    assert dg_from_ddg(0.0, -11.3) == -11.3
    assert dg_from_ddg(2.0, -12.0) == -10.0


@given(st.integers(-2560, 2560), st.integers(-2560, 2560))
def test_ddg_round_trip_exact(a, b):
    # dyadic values on a 1/128 grid sum exactly; arbitrary floats round in x + w
    x, w = a / 128, b / 128
    assert ddg_from_dg(dg_from_ddg(x, w), w) == x


def test_kfold_sizes_and_partition():
    ids = [f"r{i}" for i in range(103)]
    folds = kfold_split(ids, 10, seed=5)
    sizes = sorted(len(t) for _, t in folds)
    assert sizes == [10] * 7 + [11] * 3
    tests = [i for _, t in folds for i in t]
    assert sorted(tests) == sorted(ids)
    for train, test in folds:
        assert set(train).isdisjoint(test) and len(train) + len(test) == 103
    assert folds == kfold_split(ids, 10, seed=5)
    assert folds != kfold_split(ids, 10, seed=6)


def test_kfold_one_per_fold_and_errors():
    assert all(len(t) == 1 for _, t in kfold_split(range(10), 10, 0))
    with pytest.raises(TooFewRecordsError):
        kfold_split(range(9), 10, 0)
    with pytest.raises(ValueError):
        kfold_split(range(9), 1, 0)


def test_kfold_groups_never_straddle():
    ids = list(range(40))
    groups = [i // 4 for i in ids]
    for train, test in kfold_split(ids, 5, 1, groups=groups):
        assert {groups[i] for i in train}.isdisjoint({groups[i] for i in test})
    with pytest.raises(TooFewRecordsError, match="groups"):
        kfold_split(ids, 11, 1, groups=groups)


def test_regression_examples():
    y = np.array([1.0, 2.0, 3.0])
    rep = regression_metrics(y, y)
    assert rep.mae == 0.0 and rep.pcc == pytest.approx(1.0, abs=1e-15)
    assert regression_metrics(-y, y).pcc == pytest.approx(-1.0, abs=1e-15)
    rep = regression_metrics([1, 2, 4], y)
    assert rep.mae == pytest.approx(1 / 3, abs=1e-15)
    assert rep.pcc == pytest.approx(pcc_loop([1, 2, 4], [1, 2, 3]), abs=1e-15)
    flat = regression_metrics([2, 2, 2], y)
    assert flat.pcc == 0.0 and "pcc_zero_variance" in flat.flags
    with pytest.raises(LengthMismatchError):
        regression_metrics([1, 2], y)


def test_classification_examples():
    perfect = classification_metrics([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert (perfect.acc, perfect.f1, perfect.roc_auc, perfect.g_mean, perfect.mcc) == (1, 1, 1, 1, 1)
    allpos = classification_metrics([0.9, 0.9, 0.9, 0.9], [1, 1, 0, 0])
    assert allpos.acc == 0.5 and allpos.g_mean == 0.0 and allpos.mcc == 0.0
    assert "mcc_zero_denominator" in allpos.flags
    assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == (0.75, True)
    one = classification_metrics([0.2, 0.7], [1, 1])
    assert one.roc_auc == 0.5 and "roc_auc_single_class" in one.flags
    with pytest.raises(LengthMismatchError):
        classification_metrics([0.1], [1, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.booleans())
def test_metrics_match_loop_oracles(seed, n, coarse):
    g = np.random.default_rng(seed)
    # coarse grids force ties in scores and at the threshold
    p = np.round(g.random(n), 1) if coarse else g.random(n)
    y = g.integers(0, 2, n).astype(float)
    rep = classification_metrics(p, y)
    want = classification_loop(p.tolist(), y.tolist())
    for k, v in want.items():
        assert abs(getattr(rep, k) - v) <= 1e-12, k
    assert abs(rep.roc_auc - auc_pairs(p.tolist(), y.tolist())) <= 1e-12
    x, t = g.normal(size=n), g.normal(size=n)
    reg = regression_metrics(x, t)
    assert abs(reg.mae - mae_loop(x, t)) <= 1e-12
    assert abs(reg.pcc - pcc_loop(x.tolist(), t.tolist())) <= 1e-12


def test_metrics_csv_format():
    reps = [regression_metrics([1, 2, 4], [1, 2, 3]), regression_metrics([1, 2, 3], [1, 2, 3])]
    for k, r in enumerate(reps):
        r.fold_id = str(k)
    rows = parse_metrics_csv(format_metrics_csv(reps, "affinity"))
    assert [r["fold"] for r in rows] == ["0", "1", "mean±std"]
    assert rows[2]["mae"] == f"{1 / 6:.6f}±{1 / 6:.6f}"
    head = format_metrics_csv(reps, "affinity").splitlines()[0]
    assert head == "fold,mae,pcc"
    cls = classification_metrics([0.9, 0.1], [1, 0])
    cls.fold_id = "0"
    assert format_metrics_csv([cls], "neutralization").splitlines()[0] == "fold,acc,f1,roc_auc,g_mean,mcc"


def test_pair_record_keys_share_antigens():
    a = PairRecord("a", "EV", "DI", "KV", ab_chains=("H", "L"), ag_chains=("A",), label=1.0)
    b = PairRecord("b", "QV", "", "KV", ab_chains=("H",), ag_chains=("A",), label=1.0)
    assert a.antigen_key == b.antigen_key and a.antibody_key != b.antibody_key
