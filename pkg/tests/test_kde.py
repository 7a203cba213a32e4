import math

import numpy as np
import pytest

from poiattr.binfmt import FormatError, VersionMismatchError
from poiattr.domain import CategoryVocab, GeoPoint, Poi, PoiCatalog, ProjectedPoint, Stay, unproject
from poiattr.kde import (
    CategoryKde,
    FeatureScaler,
    feature_matrix,
    fit_kde_bank,
    load_bank,
    save_bank,
    scott_bandwidth,
    stay_features,
)

from .oracles import mc_integral


def _naive_log_density(points, bw, q):
    # textbook loop: (1/m) sum_j prod_d N(q_d; p_jd, bw_d)
    total = 0.0
    for p in points:
        k = 1.0
        for d in range(len(q)):
            z = (q[d] - p[d]) / bw[d]
            k *= math.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * bw[d])
        total += k
    return math.log(total / len(points))


class TestFeatures:
    def test_origin_noon(self):
        o = GeoPoint(34.0, -118.0)
        x, y, h = stay_features(Stay(o, 0, 10, epoch_arrival=43_200), o)
        assert (x, y, h) == (0.0, 0.0, 12.0)

    def test_utc_offset_and_wrap(self):
        o = GeoPoint(0.0, 0.0)
        f = feature_matrix([0.0], [0.0], [3600.0 * 23], o, utc_offset_s=2 * 3600)
        assert f[0, 2] == pytest.approx(1.0)

    def test_cyclic_hour(self):
        o = GeoPoint(0.0, 0.0)
        f = feature_matrix([0.0], [0.0], [6 * 3600.0], o, cyclic_hour=True)
        np.testing.assert_allclose(f[0, 2:], [1.0, 0.0], atol=1e-15)


class TestCategoryKde:
    def test_single_point_mode(self):
        kde = CategoryKde(0, np.zeros((1, 3)), np.array([0.5, 1.0, 2.0]))
        expected = -1.5 * math.log(2 * math.pi) - math.log(0.5 * 1.0 * 2.0)
        assert kde.log_density(np.zeros(3))[0] == pytest.approx(expected, rel=1e-12)

    def test_matches_naive_loop(self, rng):
        pts = rng.normal(size=(30, 3))
        bw = np.array([0.3, 0.7, 0.2])
        kde = CategoryKde(0, pts, bw)
        for q in rng.normal(size=(20, 3)):
            assert kde.log_density(q)[0] == pytest.approx(_naive_log_density(pts, bw, q), abs=1e-10)

    def test_symmetric_in_query_and_point(self, rng):
        a, b = rng.normal(size=3), rng.normal(size=3)
        bw = np.array([0.4, 0.4, 0.9])
        assert CategoryKde(0, a[None], bw).log_density(b)[0] == pytest.approx(
            CategoryKde(0, b[None], bw).log_density(a)[0], abs=1e-14)

    def test_translation_invariance(self, rng):
        pts, q = rng.normal(size=(10, 3)), rng.normal(size=(5, 3))
        bw = np.array([0.5, 0.5, 0.5])
        shift = np.array([3.0, -2.0, 7.0])
        np.testing.assert_allclose(CategoryKde(0, pts + shift, bw).log_density(q + shift),
                                   CategoryKde(0, pts, bw).log_density(q), atol=1e-12)

    def test_decays_with_distance(self):
        kde = CategoryKde(0, np.zeros((1, 3)), np.ones(3))
        r = np.linspace(0, 10, 50)
        d = kde.log_density(np.column_stack([r, np.zeros(50), np.zeros(50)]))
        assert np.all(np.diff(d) < 0)

    def test_integrates_to_one(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(50, 3))
        kde = CategoryKde(0, pts, scott_bandwidth(pts))
        assert abs(mc_integral(kde, 1_000_000, rng) - 1.0) < 0.05

    def test_invalid(self):
        with pytest.raises(ValueError):
            CategoryKde(0, np.zeros((1, 3)), np.array([1.0, 0.0, 1.0]))


class TestBandwidth:
    def test_scott(self, rng):
        pts = rng.normal(size=(100, 3))
        np.testing.assert_allclose(scott_bandwidth(pts), pts.std(axis=0, ddof=1) * 100 ** (-1 / 7))

    def test_single_point_fallback(self):
        np.testing.assert_array_equal(scott_bandwidth(np.zeros((1, 3))), np.ones(3))

    def test_constant_dimension_fallback(self, rng):
        pts = np.column_stack([rng.normal(size=20), np.full(20, 4.0), rng.normal(size=20)])
        assert scott_bandwidth(pts)[1] == pytest.approx(20 ** (-1 / 7))


class TestScaler:
    def test_identity_on_standardized(self, rng):
        pts = rng.normal(size=(500, 3))
        pts = (pts - pts.mean(0)) / pts.std(0)
        s = FeatureScaler.fit(pts)
        np.testing.assert_allclose(s.transform(pts), pts, atol=1e-12)

    def test_degenerate_dimension(self):
        s = FeatureScaler.fit(np.array([[1.0, 2.0], [3.0, 2.0]]))
        assert s.degenerate == (1,) and s.std[1] == 1.0


def _bank_fixture():
    origin = GeoPoint(34.0, -118.0)
    vocab = CategoryVocab(["a", "b", "c"])
    pois = [
        Poi("p0", unproject(ProjectedPoint(0, 0), origin), {"a"}),
        Poi("p1", unproject(ProjectedPoint(100, 0), origin), {"a", "b"}),
        Poi("p2", unproject(ProjectedPoint(0, 100), origin), {"b"}),
    ]
    cat = PoiCatalog(pois, vocab, origin=origin)
    rng = np.random.default_rng(3)
    stays = []
    for i in range(60):
        pid = ["p0", "p1", "p2"][i % 3]
        t = int(rng.integers(0, 86400 * 3))
        stays.append(Stay(cat[pid].location, t, t + 600, pid))
    return cat, stays


class TestBank:
    def test_fit_and_empty_category(self):
        cat, stays = _bank_fixture()
        bank = fit_kde_bank(stays, cat)
        assert bank.empty_categories == [2]
        assert bank.kdes[0].m == 40 and bank.kdes[1].m == 40
        assert bank.log_density(2, stays[0]) == bank.floor
        assert bank.log_density_matrix(stays[:4]).shape == (4, 3)

    def test_floor_applies(self):
        cat, stays = _bank_fixture()
        bank = fit_kde_bank(stays, cat)
        far = Stay(unproject(ProjectedPoint(50_000, 50_000), cat.origin), 0, 1)
        assert bank.log_density(0, far) == bank.floor

    def test_subsample_cap(self):
        cat, stays = _bank_fixture()
        bank = fit_kde_bank(stays, cat, subsample_cap=7, seed=1)
        assert bank.kdes[0].m == 7
        assert fit_kde_bank(stays, cat, subsample_cap=7, seed=1).kdes[0].points.tobytes() == bank.kdes[0].points.tobytes()

    def test_needs_labels(self):
        cat, stays = _bank_fixture()
        with pytest.raises(ValueError):
            fit_kde_bank([Stay(s.location, s.arrival, s.departure) for s in stays], cat)

    def test_save_load_bit_identical(self, tmp_path):
        cat, stays = _bank_fixture()
        bank = fit_kde_bank(stays, cat)
        path = tmp_path / "bank.bin"
        save_bank(bank, path)
        again = load_bank(path, cat.vocab)
        a, b = bank.log_density_matrix(stays), again.log_density_matrix(stays)
        assert a.tobytes() == b.tobytes()
        save_bank(again, tmp_path / "bank2.bin")
        assert path.read_bytes() == (tmp_path / "bank2.bin").read_bytes()

    def test_truncated_and_corrupt(self, tmp_path):
        cat, stays = _bank_fixture()
        path = tmp_path / "bank.bin"
        save_bank(fit_kde_bank(stays, cat), path)
        data = path.read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-9])
        with pytest.raises(FormatError):
            load_bank(tmp_path / "t.bin")
        flipped = bytearray(data)
        flipped[len(data) // 2] ^= 0xFF
        (tmp_path / "f.bin").write_bytes(bytes(flipped))
        with pytest.raises(FormatError):
            load_bank(tmp_path / "f.bin")

    def test_vocab_mismatch(self, tmp_path):
        cat, stays = _bank_fixture()
        path = tmp_path / "bank.bin"
        save_bank(fit_kde_bank(stays, cat), path)
        with pytest.raises(VersionMismatchError):
            load_bank(path, CategoryVocab(["a", "b", "z"]))
