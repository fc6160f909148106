"""Submap IO, catalogs, and the synthetic world generator."""

import numpy as np
import pytest

from sparseloc import data
from sparseloc.errors import BadSize, DuplicateId, NonFinite, OutOfRange, ParseError
from sparseloc.retrieval import mine_pairs


class TestBinIO:
    def test_zeros_file(self, tmp_path):
        path = tmp_path / "z.bin"
        path.write_bytes(b"\x00" * (4096 * 3 * 8))
        pts = data.load_bin(path)
        assert pts.shape == (4096, 3)
        assert np.all(pts == 0.0)

    def test_bad_size(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(BadSize):
            data.load_bin(path)

    def test_out_of_range(self, tmp_path):
        pts = np.zeros((4096, 3))
        pts[0, 0] = 1.5
        path = tmp_path / "big.bin"
        path.write_bytes(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        with pytest.raises(OutOfRange):
            data.load_bin(path)

    def test_nonfinite(self, tmp_path):
        pts = np.zeros((4096, 3))
        pts[5, 1] = np.nan
        path = tmp_path / "nan.bin"
        path.write_bytes(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        with pytest.raises(NonFinite):
            data.load_bin(path)

    def test_roundtrip_bit_identical(self, tmp_path, rng):
        pts = rng.uniform(-1.0, 1.0, (4096, 3))
        path = tmp_path / "r.bin"
        data.save_bin(path, pts)
        assert np.array_equal(data.load_bin(path), pts)


class TestCatalog:
    def write(self, tmp_path, text):
        path = tmp_path / "catalog.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_two_rows(self, tmp_path):
        path = self.write(tmp_path,
                          "id,file,easting,northing\na,a.bin,1.0,2.0\nb,b.bin,3.0,4.0\n")
        rows = data.load_catalog(path, check_files=False)
        assert [r.id for r in rows] == ["a", "b"]
        assert rows[1].northing == 4.0

    def test_duplicate_id(self, tmp_path):
        path = self.write(tmp_path,
                          "id,file,easting,northing\na,a.bin,1,2\na,b.bin,3,4\n")
        with pytest.raises(DuplicateId):
            data.load_catalog(path, check_files=False)

    def test_field_count_line_number(self, tmp_path):
        path = self.write(tmp_path,
                          "id,file,easting,northing\na,a.bin,1,2\nb,b.bin,3\n")
        with pytest.raises(ParseError) as err:
            data.load_catalog(path, check_files=False)
        assert err.value.line == 3

    def test_missing_file_checked(self, tmp_path):
        path = self.write(tmp_path, "id,file,easting,northing\na,gone.bin,1,2\n")
        with pytest.raises(ParseError):
            data.load_catalog(path, check_files=True)

    def test_roundtrip(self, tmp_path):
        rows = [data.CatalogRow("a", "a.bin", 1.25, -3.5),
                data.CatalogRow("b", "b.bin", 100000.0, 500000.0)]
        path = tmp_path / "cat.csv"
        data.save_catalog(path, rows)
        loaded = data.load_catalog(path, check_files=False)
        assert [(r.id, r.file, r.easting, r.northing) for r in loaded] == \
               [(r.id, r.file, r.easting, r.northing) for r in rows]


class TestSceneElements:
    def test_pole_variance_concentrated_on_z(self, rng):
        pole = data.Pole(x=3.0, y=-2.0, height=6.0)
        pts = pole.sample(rng, 500)
        var = pts.var(axis=0)
        assert var[2] > 0.1
        assert var[0] == 0.0 and var[1] == 0.0

    def test_wall_variance_small_along_y(self, rng):
        wall = data.Wall(x0=0.0, y=5.0, length=10.0, height=6.0)
        pts = wall.sample(rng, 500)
        var = pts.var(axis=0)
        assert var[1] < 0.1 * max(var[0], var[2])

    def test_corner_spans_both_arms(self, rng):
        corner = data.Corner(x=0.0, y=0.0, arm_x=5.0, arm_y=5.0, height=4.0)
        pts = corner.sample(rng, 500)
        on_x_arm = pts[:, 1] == 0.0
        assert 0.2 < on_x_arm.mean() < 0.8


class TestGenerateWorld:
    def test_deterministic(self):
        w1 = data.generate_world(seed=5, n_places=4)
        w2 = data.generate_world(seed=5, n_places=4)
        assert [r.id for r in w1.catalog] == [r.id for r in w2.catalog]
        for rid in w1.submaps:
            assert np.array_equal(w1.submaps[rid], w2.submaps[rid])

    def test_pair_structure(self):
        world = data.generate_world(seed=5, n_places=4, spacing=30.0)
        pos, neg = mine_pairs([(r.id, r.easting, r.northing) for r in world.catalog])
        # positives are exactly the revisit pairs of each place
        assert pos == [(f"p{i:03d}_r0", f"p{i:03d}_r1") for i in range(4)]
        for a, b in neg:
            assert a.rsplit("_", 1)[0] != b.rsplit("_", 1)[0]

    def test_submaps_pass_loader_validation(self, tmp_path):
        world = data.generate_world(seed=5, n_places=4)
        out = data.materialize(world, tmp_path / "w")
        rows = data.load_catalog(out / "catalog.csv")
        assert len(rows) == 8
        for row in rows:
            pts = data.load_bin(out / row.file)
            assert pts.shape == (4096, 3)

    def test_revisit_within_jitter_bound(self):
        world = data.generate_world(seed=5, n_places=4)
        coords = {r.id: (r.easting, r.northing) for r in world.catalog}
        for i in range(4):
            a = np.array(coords[f"p{i:03d}_r0"])
            b = np.array(coords[f"p{i:03d}_r1"])
            assert np.linalg.norm(a - b) <= 2.0

    def test_manifest_records_seed(self, tmp_path):
        world = data.generate_world(seed=17, n_places=4)
        out = data.materialize(world, tmp_path / "w")
        text = (out / "world.txt").read_text()
        assert "seed = 17" in text

    def test_extra_pass_ids(self):
        world = data.generate_world(seed=5, n_places=4, n_passes=3)
        assert len(world.catalog) == 12
        assert any(r.id.endswith("_r2") for r in world.catalog)

    def test_subset_keeps_only_selected_places(self):
        world = data.generate_world(seed=5, n_places=6)
        sub = world.subset(range(2))
        assert {r.id.rsplit("_", 1)[0] for r in sub.catalog} == {"p000", "p001"}
        assert set(sub.submaps) == {r.id for r in sub.catalog}
