"""Descriptor database, exact search, localization metrics, pair mining."""

import io
import math

import numpy as np
import pytest

from sparseloc.errors import DuplicateId, EmptyDb
from sparseloc.retrieval import DbEntry, DescriptorDB, db_add, db_query, evaluate, mine_pairs


def entry(eid, easting=0.0, northing=0.0, desc=(0.0,)):
    return DbEntry(eid, easting, northing, np.asarray(desc, dtype=np.float64))


class TestDb:
    def test_add_and_count(self):
        db = DescriptorDB()
        db_add(db, entry("a"))
        assert len(db) == 1

    def test_duplicate_id(self):
        db = DescriptorDB()
        db.add(entry("a"))
        with pytest.raises(DuplicateId):
            db.add(entry("a"))

    def test_roundtrip_bytes_identical(self, rng):
        db = DescriptorDB()
        for i in range(1000):
            db.add(entry(f"e{i:04d}", float(rng.uniform(0, 100)),
                         float(rng.uniform(0, 100)), rng.normal(0, 1, 8)))
        buf1 = io.StringIO()
        db.save(buf1)
        reloaded = DescriptorDB.load(io.StringIO(buf1.getvalue()))
        assert len(reloaded) == 1000
        buf2 = io.StringIO()
        reloaded.save(buf2)
        assert buf1.getvalue() == buf2.getvalue()
        for e in db.entries():
            r = reloaded.get(e.id)
            assert np.array_equal(r.descriptor, e.descriptor)
            assert (r.easting, r.northing) == (e.easting, e.northing)

    def test_query_self_match(self):
        db = DescriptorDB()
        db.add(entry("a", desc=[1.0, 2.0]))
        db.add(entry("b", desc=[5.0, 5.0]))
        assert db.query(np.array([1.0, 2.0]), 1) == [("a", 0.0)]

    def test_query_345_distance(self):
        db = DescriptorDB()
        db.add(entry("a", desc=[0.0, 0.0]))
        db.add(entry("b", desc=[3.0, 4.0]))
        got = db.query(np.array([0.0, 0.0]), 2)
        assert got == [("a", 0.0), ("b", 5.0)]

    def test_tie_broken_by_id(self):
        db = DescriptorDB()
        db.add(entry("zz", desc=[1.0]))
        db.add(entry("aa", desc=[1.0]))
        got = db.query(np.array([0.0]), 2)
        assert [g[0] for g in got] == ["aa", "zz"]

    def test_unrelated_insert_keeps_order(self, rng):
        db = DescriptorDB()
        for i in range(20):
            db.add(entry(f"e{i}", desc=rng.normal(0, 1, 4)))
        q = rng.normal(0, 1, 4)
        before = [eid for eid, _ in db.query(q, 20)]
        db.add(entry("far", desc=q + 100.0))
        after = [eid for eid, _ in db.query(q, 21)]
        assert after[:-1] == before and after[-1] == "far"

    def test_empty_db(self):
        with pytest.raises(EmptyDb):
            db_query(DescriptorDB(), np.zeros(2), 1)


class TestEvaluate:
    def test_colocated_perfect(self):
        db = DescriptorDB()
        db.add(entry("a", 10.0, 20.0, [1.0]))
        report = evaluate([(np.array([1.0]), 10.0, 20.0)], db)
        assert report.ar_at_1 == 100.0
        assert report.ar_at_1pct == 100.0

    def test_hand_line_scenario(self):
        # entries at 0/30/60/90 m; a query 10 m along the line retrieving the
        # 0 m entry succeeds (10 <= 25); retrieving the 60 m entry fails
        db = DescriptorDB()
        for i, pos in enumerate((0.0, 30.0, 60.0, 90.0)):
            db.add(entry(f"e{i}", pos, 0.0, [float(i)]))
        good = (np.array([0.1]), 10.0, 0.0)
        bad = (np.array([2.05]), 10.0, 0.0)
        report = evaluate([good, bad], db)
        assert report.query_count == 2
        assert report.ar_at_1 == 50.0
        assert report.ar_at_1pct == 50.0

    def test_one_percent_ceiling(self, rng):
        db = DescriptorDB()
        for i in range(200):
            db.add(entry(f"e{i:03d}", float(i), 0.0, rng.normal(0, 1, 4)))
        assert math.ceil(len(db) / 100) == 2
        # a query whose top-1 misses but top-2 hits counts for recall@1% only
        target = db.get("e000").descriptor
        decoy = db.get("e150").descriptor
        q = target + 0.45 * (decoy - target)
        report = evaluate([(q, 0.0, 0.0)], db)
        assert report.ar_at_1pct >= report.ar_at_1

    def test_query_without_positive_excluded(self):
        db = DescriptorDB()
        db.add(entry("a", 0.0, 0.0, [0.0]))
        report = evaluate([(np.array([0.0]), 500.0, 0.0),
                           (np.array([0.0]), 0.0, 0.0)], db)
        assert report.excluded == 1
        assert report.query_count == 1
        assert report.ar_at_1 == 100.0

    def test_insertion_order_irrelevant(self, rng):
        entries = [entry(f"e{i}", float(5 * i), 0.0, rng.normal(0, 1, 3))
                   for i in range(30)]
        queries = [(rng.normal(0, 1, 3), float(rng.uniform(0, 150)), 0.0)
                   for _ in range(10)]
        db1, db2 = DescriptorDB(), DescriptorDB()
        for e in entries:
            db1.add(e)
        for e in reversed(entries):
            db2.add(e)
        r1, r2 = evaluate(queries, db1), evaluate(queries, db2)
        assert (r1.ar_at_1, r1.ar_at_1pct) == (r2.ar_at_1, r2.ar_at_1pct)

    def test_recall1_never_exceeds_recall_1pct(self, rng):
        db = DescriptorDB()
        for i in range(120):
            db.add(entry(f"e{i:03d}", float(rng.uniform(0, 300)),
                         float(rng.uniform(0, 300)), rng.normal(0, 1, 4)))
        queries = [(rng.normal(0, 1, 4), float(rng.uniform(0, 300)),
                    float(rng.uniform(0, 300))) for _ in range(40)]
        report = evaluate(queries, db)
        assert report.ar_at_1 <= report.ar_at_1pct


class TestMinePairs:
    def test_close_pair_positive_only(self):
        pos, neg = mine_pairs([("a", 0.0, 0.0), ("b", 5.0, 0.0)])
        assert pos == [("a", "b")]
        assert neg == []

    def test_middle_band_neither(self):
        pos, neg = mine_pairs([("a", 0.0, 0.0), ("b", 30.0, 0.0)])
        assert pos == [] and neg == []

    def test_boundaries_are_strict(self):
        pos, neg = mine_pairs([("a", 0.0, 0.0), ("b", 10.0, 0.0)])
        assert pos == [] and neg == []
        pos, neg = mine_pairs([("a", 0.0, 0.0), ("b", 50.0, 0.0)])
        assert pos == [] and neg == []

    def test_matches_quadratic_oracle(self, rng):
        catalog = [(f"c{i:02d}", float(rng.uniform(0, 120)), float(rng.uniform(0, 120)))
                   for i in range(50)]
        pos, neg = mine_pairs(catalog)
        bpos, bneg = set(), set()
        for i in range(len(catalog)):
            for j in range(i + 1, len(catalog)):
                d = math.hypot(catalog[i][1] - catalog[j][1],
                               catalog[i][2] - catalog[j][2])
                pair = tuple(sorted((catalog[i][0], catalog[j][0])))
                if d < 10.0:
                    bpos.add(pair)
                elif d > 50.0:
                    bneg.add(pair)
        assert set(pos) == bpos and set(neg) == bneg
        assert pos == sorted(pos) and neg == sorted(neg)
