import json
import math

import numpy as np
import pytest

from poiattr.domain import GeoPoint, Poi, PoiCatalog, CategoryVocab, ProjectedPoint, Stay, Trajectory, unproject, validate_trajectory
from poiattr.ingest import (
    DuplicateIdError,
    EmptyCategoryError,
    NoiseConfig,
    ParseError,
    SpatialGridIndex,
    SyntheticConfig,
    add_gaussian_noise,
    build_candidate_set,
    generate_synthetic,
    load_pois,
    load_stays,
    normalize_timestamps,
    split_train_test,
    write_stays,
    write_synthetic,
)
from poiattr.kde import hour_of_day


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadPois:
    def test_multi_category_row(self, tmp_path):
        p = _write(tmp_path, "pois.csv", "poi_id,lat,lon,categories\np1,34.02,-118.28,restaurant;cafe\n")
        cat = load_pois(p)
        assert cat["p1"].categories == frozenset({"restaurant", "cafe"})
        assert cat.vocab.names == ("cafe", "restaurant")

    def test_duplicate_id(self, tmp_path):
        p = _write(tmp_path, "pois.csv",
                   "poi_id,lat,lon,categories\np1,34.0,-118.0,a\np1,34.1,-118.1,b\n")
        with pytest.raises(DuplicateIdError):
            load_pois(p)

    def test_empty_category(self, tmp_path):
        p = _write(tmp_path, "pois.csv", "poi_id,lat,lon,categories\np1,34.0,-118.0,\n")
        with pytest.raises(EmptyCategoryError):
            load_pois(p)

    def test_parse_error_has_line_number(self, tmp_path):
        p = _write(tmp_path, "pois.csv", "poi_id,lat,lon,categories\np1,34.0,-118.0,a\np2,abc,1,a\n")
        with pytest.raises(ParseError) as e:
            load_pois(p)
        assert e.value.line == 3

    def test_bad_header(self, tmp_path):
        p = _write(tmp_path, "pois.csv", "id,lat,lon\n")
        with pytest.raises(ParseError):
            load_pois(p)


class TestStaysIO:
    def test_round_trip_and_normalization(self, tmp_path):
        p = _write(tmp_path, "stays.csv",
                   "user_id,lat,lon,arrival_epoch_s,departure_epoch_s,poi_id\n"
                   "u1,34.0,-118.0,1000,1100,p1\n"
                   "u1,34.0,-118.0,1160,1200,\n"
                   "u0,34.0,-118.0,1200,1300,p2\n")
        trajs = load_stays(p)
        assert [t.user_id for t in trajs] == ["u0", "u1"]
        u1 = trajs[1].stays
        assert [s.arrival for s in u1] == [0, 160]
        assert u1[1].true_poi is None
        assert u1[0].epoch_arrival == 1000
        out = tmp_path / "out.csv"
        write_stays(out, trajs)
        again = load_stays(out)
        assert again == trajs


class TestNormalize:
    def _s(self, a, d):
        return Stay(GeoPoint(0, 0), a, d)

    def test_shift(self):
        out = normalize_timestamps([self._s(100, 130), self._s(160, 200)])
        assert [s.arrival for s in out] == [0, 60]
        assert [s.departure - s.arrival for s in out] == [30, 40]
        assert [s.epoch_arrival for s in out] == [100, 160]

    def test_explicit_origin(self):
        out = normalize_timestamps([self._s(100, 130), self._s(160, 200)], t0=40)
        assert [s.arrival for s in out] == [60, 120]
        again = normalize_timestamps(out, t0=40)
        assert [s.arrival for s in again] == [60, 120]

    def test_single(self):
        assert normalize_timestamps([self._s(12345, 12400)])[0].arrival == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            normalize_timestamps([])

    def test_hour_survives_normalization(self):
        out = normalize_timestamps([self._s(45_000, 45_100), self._s(50_000, 50_001)])
        assert hour_of_day(out[0].raw_arrival) == pytest.approx(12.5)


class TestNoise:
    def _stays(self, n):
        return [Stay(GeoPoint(34.0, -118.0), i * 10, i * 10 + 5, f"p{i}") for i in range(n)]

    def test_zero_sigma_is_identity(self):
        s = self._stays(20)
        assert add_gaussian_noise(s, NoiseConfig((0.0,), 1)) == s

    def test_sample_std(self):
        s = self._stays(10_000)
        out = add_gaussian_noise(s, NoiseConfig((0.0002,), 123))
        dlat = np.array([o.location.lat - 34.0 for o in out])
        dlon = np.array([o.location.lon + 118.0 for o in out])
        assert 0.000186 <= dlat.std() <= 0.000214
        assert 0.000186 <= dlon.std() <= 0.000214
        assert abs(np.corrcoef(dlat, dlon)[0, 1]) < 0.05

    def test_deterministic(self):
        s = self._stays(50)
        cfg = NoiseConfig((0.0002, 0.0001, 0.00005), 9)
        assert add_gaussian_noise(s, cfg) == add_gaussian_noise(s, cfg)

    def test_only_location_changes(self):
        s = self._stays(50)
        out = add_gaussian_noise(s, NoiseConfig((0.0001,), 3))
        for a, b in zip(s, out):
            assert (a.arrival, a.departure, a.true_poi) == (b.arrival, b.departure, b.true_poi)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            NoiseConfig((-1.0,), 0)


def _catalog_at(offsets_m, origin=GeoPoint(34.0, -118.0)):
    pois = [Poi(f"p{i}", unproject(ProjectedPoint(dx, dy), origin), {"a"})
            for i, (dx, dy) in enumerate(offsets_m)]
    return PoiCatalog(pois, CategoryVocab(["a"]), origin=origin)


class TestCandidates:
    def test_poi_at_stay(self):
        cat = _catalog_at([(0, 0)])
        c = build_candidate_set(Stay(cat.origin, 0, 1), SpatialGridIndex(cat), 200, 64)
        assert c.poi_ids == ("p0",)
        assert c.mask.sum() == 1 and len(c.mask) == 64

    def test_radius_and_order(self):
        cat = _catalog_at([(300, 0), (0, 50), (10, 0)])
        c = build_candidate_set(Stay(cat.origin, 0, 1), SpatialGridIndex(cat, 40.0), 100, 8)
        assert c.poi_ids == ("p2", "p1")
        assert c.slots[:3] == ["p2", "p1", None]

    def test_truncation_matches_brute_force(self):
        rng = np.random.default_rng(0)
        ang = rng.uniform(0, 2 * np.pi, 200)
        rad = 190 * np.sqrt(rng.uniform(0, 1, 200))
        offsets = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        cat = _catalog_at(offsets)
        c = build_candidate_set(Stay(cat.origin, 0, 1), SpatialGridIndex(cat, 50.0), 200, 64)
        d = np.hypot(cat.xy[:, 0], cat.xy[:, 1])
        expected = [cat.ids[i] for i in sorted(range(len(d)), key=lambda i: (d[i], cat.ids[i]))[:64]]
        assert list(c.poi_ids) == expected

    def test_grid_equals_brute_force_radius_query(self):
        rng = np.random.default_rng(1)
        cat = _catalog_at(rng.uniform(-800, 800, size=(300, 2)))
        for cell in (25.0, 100.0, 333.0):
            grid = SpatialGridIndex(cat, cell)
            assert sum(len(v) for v in grid.cells.values()) == len(cat)
            for q in rng.uniform(-900, 900, size=(40, 2)):
                stay = Stay(unproject(ProjectedPoint(*q), cat.origin), 0, 1)
                got = build_candidate_set(stay, grid, 150.0, 10_000).poi_ids
                p = cat.project(stay.location)
                d = np.hypot(cat.xy[:, 0] - p.x, cat.xy[:, 1] - p.y)
                want = tuple(cat.ids[i] for i in sorted(np.flatnonzero(d <= 150.0), key=lambda i: (d[i], cat.ids[i])))
                assert got == want

    def test_empty_set_is_legal(self):
        cat = _catalog_at([(1000, 1000)])
        c = build_candidate_set(Stay(cat.origin, 0, 1), SpatialGridIndex(cat), 50, 4)
        assert c.empty and not c.mask.any()

    def test_bad_parameters(self):
        cat = _catalog_at([(0, 0)])
        grid = SpatialGridIndex(cat)
        with pytest.raises(ValueError):
            build_candidate_set(Stay(cat.origin, 0, 1), grid, 0, 4)
        with pytest.raises(ValueError):
            build_candidate_set(Stay(cat.origin, 0, 1), grid, 10, 0)


class TestSplit:
    def _trajs(self, n):
        return [Trajectory(f"u{i}", []) for i in range(n)]

    def test_sizes_and_partition(self):
        t = self._trajs(10)
        train, test = split_train_test(t, 0.8, 3)
        assert (len(train), len(test)) == (8, 2)
        ids_a, ids_b = {x.user_id for x in train}, {x.user_id for x in test}
        assert ids_a | ids_b == {x.user_id for x in t} and not ids_a & ids_b

    def test_deterministic(self):
        t = self._trajs(10)
        assert split_train_test(t, 0.7, 5) == split_train_test(t, 0.7, 5)

    def test_errors(self):
        with pytest.raises(ValueError):
            split_train_test(self._trajs(1), 0.5, 0)
        with pytest.raises(ValueError):
            split_train_test(self._trajs(4), 1.0, 0)


class TestSynthetic:
    def test_single_category_hours(self):
        cfg = SyntheticConfig(n_users=10, n_pois=30, n_categories=1, days=5,
                              hour_means=[12.0], hour_stds=0.5, rng_seed=4)
        _, trajs = generate_synthetic(cfg)
        hours = np.array([hour_of_day(s.raw_arrival) for t in trajs for s in t.stays])
        assert np.mean((hours >= 10) & (hours <= 14)) >= 0.95

    def test_deterministic(self):
        cfg = SyntheticConfig(n_users=5, n_pois=40, days=3, rng_seed=11)
        a, b = generate_synthetic(cfg), generate_synthetic(SyntheticConfig(n_users=5, n_pois=40, days=3, rng_seed=11))
        assert a[1] == b[1]
        assert [a[0][p] for p in a[0].ids] == [b[0][p] for p in b[0].ids]

    def test_trajectories_valid_and_truth_in_candidates(self):
        cfg = SyntheticConfig(n_users=6, n_pois=120, days=4, rng_seed=2)
        cat, trajs = generate_synthetic(cfg)
        grid = SpatialGridIndex(cat)
        for t in trajs:
            assert validate_trajectory(t) == []
            for s in t.stays:
                c = build_candidate_set(s, grid, 200.0, 64)
                assert s.true_poi in c

    def test_every_category_used_and_sizes(self):
        cfg = SyntheticConfig(n_users=3, n_pois=50, n_categories=8, days=2, rng_seed=0)
        cat, _ = generate_synthetic(cfg)
        used = {c for p in cat.ids for c in cat[p].categories}
        assert len(used) == 8
        assert all(1 <= len(cat[p].categories) <= 3 for p in cat.ids)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SyntheticConfig(n_users=0)
        with pytest.raises(ValueError):
            SyntheticConfig(extent_m=0)

    def test_write_synthetic(self, tmp_path):
        cfg = SyntheticConfig(n_users=5, n_pois=30, days=2, rng_seed=1)
        write_synthetic(tmp_path, cfg)
        for f in ("pois.csv", "stays.csv", "train.csv", "test.csv", "manifest.json"):
            assert (tmp_path / f).exists()
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["seed"] == 1 and man["config"]["n_users"] == 5
        assert len(load_pois(tmp_path / "pois.csv")) == 30
        assert len(load_stays(tmp_path / "train.csv")) + len(load_stays(tmp_path / "test.csv")) == 5
