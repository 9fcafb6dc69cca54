from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandsel.bench import (
    BenchKey,
    BenchRecord,
    BenchTable,
    EvaluationError,
    SchemaError,
    all_combinations,
    build_table,
    load_table,
    oracle,
    predict_and_expand,
    query,
    rank_correlation,
    regret,
    save_table,
    spearman,
    top_overlap,
)
from bandsel.evaluators import LiveReconstructionEvaluator, TableEvaluator
from bandsel.hsi import CLASSIFICATION, RECONSTRUCTION


def cls_table_from(values: dict, seeds=(0,)):
    """Table whose OA per seed is given; AA and Kappa mirror OA."""
    records = {}
    for bc, v in values.items():
        key = BenchKey("classification", "toy", "fixed", bc)
        per_seed = v if isinstance(v, dict) else {s: v for s in seeds}
        records[key] = BenchRecord(key, {s: {"OA": x, "AA": x, "Kappa": x} for s, x in per_seed.items()})
    return BenchTable(CLASSIFICATION, records)


class ConstEvaluator:
    task = CLASSIFICATION
    dataset_id = "toy"
    backbone_id = "const"

    def __init__(self, fail_on=None):
        self.fail_on = fail_on

    def __call__(self, bc, seed=0):
        if bc == self.fail_on:
            raise RuntimeError("boom")
        v = sum(bc) / 100 + seed / 1000
        return {"OA": v, "AA": v, "Kappa": v}


def test_build_small():
    t = build_table(ConstEvaluator(), [(0, 1, 2)], [0])
    assert len(t) == 1
    with pytest.raises(ValueError, match="duplicate"):
        build_table(ConstEvaluator(), [(0, 1, 2), (0, 1, 2)], [0])
    with pytest.raises(EvaluationError) as info:
        build_table(ConstEvaluator(fail_on=(1, 2, 3)), [(0, 1, 2), (1, 2, 3)], [0])
    assert info.value.bc == (1, 2, 3)


def test_build_threads_match_serial():
    bcs = all_combinations(8, 3)
    serial = build_table(ConstEvaluator(), bcs, [0, 1], workers=1)
    threaded = build_table(ConstEvaluator(), bcs, [0, 1], workers=4)
    assert {k: r.seeds for k, r in serial.records.items()} == {k: r.seeds for k, r in threaded.records.items()}


def test_synthetic_table_counts(cls_table):
    assert len(cls_table) == 560
    assert sum(len(r.seeds) for r in cls_table.records.values()) == 1120


def test_query_mean():
    t = cls_table_from({(0, 1): {0: 0.9, 1: 1.0}, (0, 2): {0: 0.7}})
    assert query(t, (0, 1))["OA"] == pytest.approx(0.95)
    assert query(t, (0, 2))["OA"] == 0.7
    with pytest.raises(KeyError) as info:
        query(t, (1, 2))
    assert (1, 2) in info.value.args


def test_query_equals_loop_mean(cls_table):
    for key, rec in list(cls_table.records.items())[:50]:
        got = query(cls_table, key)
        for m in ("OA", "AA", "Kappa"):
            assert got[m] == pytest.approx(sum(s[m] for s in rec.seeds.values()) / len(rec.seeds), abs=1e-15)


def test_oracle_and_regret(cls_table):
    best, value = oracle(cls_table)
    values = cls_table.values("OA")
    scan_bc, scan_v = None, -1.0
    for bc in sorted(values):
        if values[bc] > scan_v:
            scan_bc, scan_v = bc, values[bc]
    assert (best, value) == (scan_bc, scan_v)
    assert regret(cls_table, best) == 0.0
    assert all(regret(cls_table, bc) >= 0 for bc in values)
    bc = (0, 5, 7)
    assert regret(cls_table, bc) == pytest.approx(scan_v - values[bc], abs=1e-15)


def test_oracle_ties_and_directions():
    t = cls_table_from({(1, 2): 0.9, (0, 3): 0.9, (0, 1): 0.5})
    assert oracle(t) == ((0, 3), 0.9)
    t2 = cls_table_from({(0, 1): 0.98, (0, 2): 0.95})
    assert regret(t2, (0, 2)) == pytest.approx(0.03)
    assert oracle(cls_table_from({(4, 5): 0.1})) == ((4, 5), 0.1)
    with pytest.raises(ValueError):
        oracle(BenchTable(CLASSIFICATION, {}))


def test_regret_lower_is_better(rec_table):
    best, v = oracle(rec_table, "MRAE")
    assert regret(rec_table, best, "MRAE") == 0.0
    other = (0, 1, 2)
    assert regret(rec_table, other, "MRAE") == pytest.approx(query(rec_table, other)["MRAE"] - v)


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(20))))
def test_query_independent_of_insertion_order(order):
    bcs = all_combinations(7, 2)[:20]
    values = {bcs[i]: (i * 7919 % 13) / 13 for i in range(20)}
    shuffled = cls_table_from({bcs[i]: values[bcs[i]] for i in order})
    base = cls_table_from(values)
    assert oracle(shuffled) == oracle(base)
    assert all(query(shuffled, bc) == query(base, bc) for bc in bcs)


def test_save_load_round_trip(cls_table, tmp_path):
    p = tmp_path / "t.jsonl"
    save_table(cls_table, p)
    back = load_table(p)
    assert back == cls_table
    save_table(back, tmp_path / "t2.jsonl")
    assert p.read_bytes() == (tmp_path / "t2.jsonl").read_bytes()
    lines = p.read_text().splitlines()
    random.Random(0).shuffle(lines)
    (tmp_path / "perm.jsonl").write_text("\n".join(lines) + "\n")
    assert load_table(tmp_path / "perm.jsonl") == cls_table
    first = json.loads(lines[0])
    assert set(first) == {"task", "dataset_id", "backbone_id", "bands", "seeds", "cost_seconds"}


def test_load_errors(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(SchemaError, match="empty"):
        load_table(p)
    good = {"task": "classification", "dataset_id": "d", "backbone_id": "b", "bands": [0, 1],
            "seeds": {"0": {"OA": 1.0, "AA": 1.0, "Kappa": 1.0}}, "cost_seconds": 0.1}
    bad = dict(good, bands=[0, 2], seeds={"0": {"OA": 1.0, "AA": 1.0}})
    p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(SchemaError, match=r"line 2: .*seeds\.0\.Kappa"):
        load_table(p)
    p.write_text(json.dumps(dict(good, extra=1)) + "\n")
    with pytest.raises(SchemaError, match="unknown field"):
        load_table(p)
    p.write_text("{not json\n")
    with pytest.raises(SchemaError, match="line 1"):
        load_table(p)


def test_infinite_psnr_survives_round_trip(tmp_path):
    key = BenchKey("reconstruction", "d", "b", (0,))
    t = BenchTable(RECONSTRUCTION, {key: BenchRecord(key, {0: {"MRAE": 0.0, "PSNR": float("inf")}})})
    save_table(t, tmp_path / "inf.jsonl")
    assert load_table(tmp_path / "inf.jsonl") == t
    assert regret(t, (0,)) == 0.0


def test_predict_and_expand_degenerate(rec_cube):
    ev = LiveReconstructionEvaluator(rec_cube)
    space = all_combinations(16, 3)
    out = predict_and_expand(ev, space, 30, 30, seed=1)
    assert len(out) == 30 and len(set(out)) == 30
    small = all_combinations(6, 3)
    assert sorted(predict_and_expand(ev, small, 5, len(small), seed=0)) == small
    with pytest.raises(ValueError):
        predict_and_expand(ev, small, 5, 21)


def test_predict_and_expand_size_and_uniqueness(rec_table, rec_cube):
    ev = TableEvaluator(rec_table)
    out = predict_and_expand(ev, all_combinations(16, 3), 50, 100, seed=3, cube=rec_cube)
    assert len(out) == 100 and len(set(out)) == 100
    again = predict_and_expand(ev, all_combinations(16, 3), 50, 100, seed=3, cube=rec_cube)
    assert out == again


def test_top_overlap():
    vals = {bc: i / 100 for i, bc in enumerate(all_combinations(8, 2))}
    a = cls_table_from(vals)
    assert top_overlap(a, a, frac=0.25) == 1.0
    rev = cls_table_from({bc: -v for bc, v in vals.items()})
    assert top_overlap(a, rev, frac=0.25) == 0.0
    other = cls_table_from({(10, 11): 0.5})
    with pytest.raises(ValueError):
        top_overlap(a, other)


def rank_then_pearson(x, y):
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for t in range(i, j + 1):
                r[order[t]] = (i + j) / 2 + 1
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    return cov / (sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry)) ** 0.5


def test_rank_correlation(rng):
    bcs = all_combinations(5, 2)
    x = rng.uniform(size=10).round(1)  # rounding forces ties
    y = rng.uniform(size=10)
    a = cls_table_from(dict(zip(bcs, x)))
    b = cls_table_from(dict(zip(bcs, y)))
    assert rank_correlation(a, a) == pytest.approx(1.0)
    assert rank_correlation(a, b) == pytest.approx(rank_then_pearson(list(x), list(y)), abs=1e-12)
    rev = cls_table_from(dict(zip(bcs, -np.arange(10.0))))
    fwd = cls_table_from(dict(zip(bcs, np.arange(10.0))))
    assert rank_correlation(fwd, rev) == pytest.approx(-1.0)
    short = cls_table_from(dict(zip(bcs[:9], x[:9])))
    with pytest.raises(ValueError, match="3-4"):
        rank_correlation(a, short)
    with pytest.raises(ValueError):
        spearman([1, 1, 1], [1, 2, 3])
