from dataclasses import replace

import numpy as np
import pytest

from poiattr.domain import ProjectedPoint, Trajectory
from poiattr.encoding import (
    MASK,
    CategoryEmbedding,
    Space2Vec,
    StayEncoder,
    Time2Vec,
    build_token_sequence,
    encode_categories,
    encode_space,
    encode_time,
    make_sequence_batch,
    positional_encoding,
    window_bounds,
)

from .conftest import central_difference, rel_err


class TestTime2Vec:
    def test_all_zero_params(self, rng):
        t2v = Time2Vec(8, rng)
        for p in t2v.parameters():
            p.data[:] = 0.0
        np.testing.assert_array_equal(encode_time(t2v, 123456.0), np.zeros(8))

    def test_formula(self, rng):
        t2v = Time2Vec(6, rng)
        t = 200_000.0
        tau = t / 86400.0
        out = encode_time(t2v, t)
        assert out[0] == pytest.approx(t2v.w0.data[0] * tau + t2v.b0.data[0])
        np.testing.assert_allclose(out[1:], np.sin(t2v.w.data * tau + t2v.b.data), rtol=1e-12)

    def test_periodicity(self, rng):
        t2v = Time2Vec(6, rng)
        t = 54_321.0
        for i in range(1, 6):
            period = t2v.period_seconds(i)
            a = encode_time(t2v, t)[i]
            b = encode_time(t2v, t + period)[i]
            assert a == pytest.approx(b, abs=1e-9)

    def test_one_channel_is_daily(self, rng):
        t2v = Time2Vec(16, rng)
        assert any(abs(t2v.period_seconds(i) - 86400.0) < 1e-6 for i in range(1, 16))

    def test_frequency_gradient(self, rng):
        t2v = Time2Vec(5, rng)
        t = np.array([3600.0, 90_000.0, 400_000.0])
        w = rng.normal(size=(3, 5))
        out = t2v(t)
        out.backward(w)
        f = lambda: float((t2v(t).data * w).sum())
        for i in range(4):
            num = central_difference(f, t2v.w, (i,))
            assert rel_err(t2v.w.grad[i], num) < 1e-5

    def test_min_dim(self, rng):
        with pytest.raises(ValueError):
            Time2Vec(1, rng)


class TestSpace2Vec:
    def test_origin_features(self, rng):
        s2v = Space2Vec(8, rng, levels=4)
        f = s2v.features(np.zeros(2))
        half = s2v.n_features // 2
        np.testing.assert_array_equal(f[:half], 0.0)
        np.testing.assert_array_equal(f[half:], 1.0)

    def test_translation_by_wavelength(self, rng):
        s2v = Space2Vec(8, rng, levels=5, min_wavelength=10, max_wavelength=1000)
        p = np.array([123.4, -56.7])
        f0 = s2v.features(p).reshape(2, 5, 2)  # (sin/cos, level, direction)
        for lvl, lam in enumerate(s2v.wavelengths):
            f1 = s2v.features(p + np.array([lam, 0.0])).reshape(2, 5, 2)
            np.testing.assert_allclose(f1[:, lvl, 0], f0[:, lvl, 0], atol=1e-9)
            np.testing.assert_allclose(f1[:, :, 1], f0[:, :, 1], atol=1e-12)

    def test_wavelengths_geometric(self, rng):
        s2v = Space2Vec(4, rng, levels=6, min_wavelength=5, max_wavelength=5000)
        ratios = s2v.wavelengths[1:] / s2v.wavelengths[:-1]
        np.testing.assert_allclose(ratios, ratios[0])
        assert s2v.wavelengths[0] == pytest.approx(5) and s2v.wavelengths[-1] == pytest.approx(5000)

    def test_projection_gradient(self, rng):
        s2v = Space2Vec(6, rng, levels=3)
        xy = rng.uniform(-500, 500, size=(4, 2))
        w = rng.normal(size=(4, 6))
        s2v(xy).backward(w)
        f = lambda: float((s2v(xy).data * w).sum())
        W = s2v.proj.weight
        for flat in rng.choice(W.data.size, 8, replace=False):
            idx = np.unravel_index(flat, W.shape)
            assert rel_err(W.grad[idx], central_difference(f, W, idx)) < 1e-5

    def test_encode_space_accepts_projected_point(self, rng):
        s2v = Space2Vec(6, rng, levels=3)
        np.testing.assert_array_equal(encode_space(s2v, ProjectedPoint(3.0, 4.0)),
                                      encode_space(s2v, np.array([3.0, 4.0])))


class TestCategories:
    def test_singleton_and_duplicates(self, rng):
        emb = CategoryEmbedding(5, 4, rng)
        np.testing.assert_array_equal(encode_categories(emb, {2}), emb.table.data[2])
        np.testing.assert_array_equal(encode_categories(emb, [2, 2]), emb.table.data[2])

    def test_mean_pooling(self, rng):
        emb = CategoryEmbedding(5, 4, rng)
        got = encode_categories(emb, {1, 3, 4})
        expected = np.zeros(4)
        for c in (1, 3, 4):
            expected += emb.table.data[c]
        np.testing.assert_allclose(got, expected / 3, rtol=1e-14)

    def test_mask_row(self, rng):
        emb = CategoryEmbedding(5, 4, rng)
        assert emb.table.shape == (6, 4)
        np.testing.assert_array_equal(encode_categories(emb, MASK), emb.table.data[5])

    def test_unknown_category(self, rng):
        emb = CategoryEmbedding(3, 4, rng)
        with pytest.raises(KeyError):
            encode_categories(emb, {7})
        with pytest.raises(ValueError):
            encode_categories(emb, set())


class TestTokenSequence:
    def _enc(self, catalog, rng):
        return StayEncoder(len(catalog.vocab), rng, d_space=8, d_time=4, d_cat=6, space_levels=3)

    def test_single_stay(self, small_dataset, rng):
        catalog, trajs = small_dataset
        enc = self._enc(catalog, rng)
        t = Trajectory("x", trajs[0].stays[:1])
        tok, pos = build_token_sequence(t, 0, enc, catalog)
        assert tok.shape == (1, enc.d_model) and pos == 0
        s = t.stays[0]
        xy = catalog.project(s.location)
        parts = np.concatenate([
            encode_space(enc.space, xy), encode_time(enc.arrival, s.arrival),
            encode_time(enc.departure, s.departure), enc.categories.table.data[enc.categories.mask_index],
        ])
        np.testing.assert_allclose(tok[0], parts + positional_encoding(1, enc.d_model)[0], atol=1e-12)

    def test_components_and_mask(self, small_dataset, rng):
        catalog, trajs = small_dataset
        enc = self._enc(catalog, rng)
        t = trajs[1]
        target = 3
        tok, pos = build_token_sequence(t, target, enc, catalog)
        pe = positional_encoding(len(t), enc.d_model)
        ds, dt = 8, 4
        for i, s in enumerate(t.stays):
            row = tok[i] - pe[i]
            np.testing.assert_allclose(row[:ds], encode_space(enc.space, catalog.project(s.location)), atol=1e-12)
            np.testing.assert_allclose(row[ds:ds + dt], encode_time(enc.arrival, s.arrival), atol=1e-12)
            np.testing.assert_allclose(row[ds + dt:ds + 2 * dt], encode_time(enc.departure, s.departure), atol=1e-12)
            cats = MASK if i == target else catalog.category_indices(s.true_poi)
            np.testing.assert_allclose(row[ds + 2 * dt:], encode_categories(enc.categories, cats), atol=1e-12)

    def test_no_label_leak(self, small_dataset, rng):
        catalog, trajs = small_dataset
        enc = self._enc(catalog, rng)
        t = trajs[2]
        tok_a, _ = build_token_sequence(t, 2, enc, catalog)
        stays = list(t.stays)
        other = next(p for p in catalog.ids if catalog[p].categories != catalog[stays[2].true_poi].categories)
        stays[2] = replace(stays[2], true_poi=other)
        tok_b, _ = build_token_sequence(Trajectory(t.user_id, stays), 2, enc, catalog)
        np.testing.assert_array_equal(tok_a, tok_b)

    def test_invalid_index(self, small_dataset, rng):
        catalog, trajs = small_dataset
        with pytest.raises(IndexError):
            build_token_sequence(trajs[0], len(trajs[0]), self._enc(catalog, rng), catalog)

    def test_windowing(self, small_dataset):
        assert window_bounds(10, 3, None) == (0, 10)
        assert window_bounds(10, 0, 4) == (0, 4)
        assert window_bounds(10, 9, 4) == (6, 10)
        assert window_bounds(10, 5, 4) == (3, 7)
        catalog, trajs = small_dataset
        b = make_sequence_batch([(trajs[0], 7), (trajs[1], 0)], catalog, max_len=5)
        assert b.xy.shape[1] == 5
        assert b.target.tolist() == [2, 0]
