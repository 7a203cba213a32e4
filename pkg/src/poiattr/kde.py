"""Per-category Gaussian KDEs over scaled (x, y, hour-of-day) features."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import logsumexp
from .binfmt import FormatError, Reader, VersionMismatchError, Writer
from .domain import CategoryVocab, GeoPoint, PoiCatalog, Stay, project_array

log = logging.getLogger(__name__)

BANK_MAGIC = b"PKDE"
BANK_VERSION = 1
DEFAULT_FLOOR = -30.0
DEFAULT_SUBSAMPLE_CAP = 20_000
_LOG_2PI = math.log(2 * math.pi)
_CHUNK = 2_000_000  # elements per (query, point, dim) block


def hour_of_day(epoch_s, utc_offset_s=0.0):
    return np.mod(np.asarray(epoch_s, dtype=np.float64) + utc_offset_s, 86400.0) / 3600.0


def feature_matrix(lat, lon, epoch_arrival, origin: GeoPoint, utc_offset_s=0.0, cyclic_hour=False):
    """Unscaled features ``(n, D)``: projected x, y in meters, then the hour
    (or its sin/cos pair when ``cyclic_hour``)."""
    xy = project_array(lat, lon, origin).reshape(-1, 2)
    hour = hour_of_day(epoch_arrival, utc_offset_s).reshape(-1)
    if cyclic_hour:
        ang = 2 * np.pi * hour / 24.0
        return np.column_stack([xy, np.sin(ang), np.cos(ang)])
    return np.column_stack([xy, hour])


def stay_features(stay: Stay, origin: GeoPoint, utc_offset_s=0.0, cyclic_hour=False) -> tuple:
    """``(x, y, hour)`` for one stay; hour is in ``[0, 24)``."""
    row = feature_matrix([stay.location.lat], [stay.location.lon], [stay.raw_arrival],
                         origin, utc_offset_s, cyclic_hour)[0]
    return tuple(float(v) for v in row)


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple = ()

    @classmethod
    def fit(cls, points):
        points = np.asarray(points, dtype=np.float64)
        mean = points.mean(axis=0)
        std = points.std(axis=0)
        bad = tuple(int(d) for d in np.flatnonzero(~(std > 0)))
        if bad:
            log.warning("degenerate feature dimensions %s; stddev forced to 1", bad)
            std = std.copy()
            std[list(bad)] = 1.0
        return cls(mean, std, bad)

    def transform(self, points):
        return (np.asarray(points, dtype=np.float64) - self.mean) / self.std


@dataclass
class CategoryKde:
    """Product-Gaussian KDE; ``points`` are already scaled."""

    category: int
    points: np.ndarray
    bandwidth: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.bandwidth = np.asarray(self.bandwidth, dtype=np.float64)
        if len(self.points) < 1:
            raise ValueError("a KDE needs at least one point")
        if np.any(self.bandwidth <= 0):
            raise ValueError("bandwidths must be positive")

    @property
    def m(self):
        return len(self.points)

    def log_density(self, queries) -> np.ndarray:
        """Log-density at each row of ``queries`` (scaled space)."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64)) / self.bandwidth
        p = self.points / self.bandwidth
        D = p.shape[1]
        const = -math.log(self.m) - 0.5 * D * _LOG_2PI - float(np.log(self.bandwidth).sum())
        out = np.empty(len(q))
        step = max(1, _CHUNK // max(1, self.m * D))
        for s in range(0, len(q), step):
            diff = q[s : s + step, None, :] - p[None, :, :]
            out[s : s + step] = logsumexp(-0.5 * np.einsum("qmd,qmd->qm", diff, diff), axis=1)
        return out + const


def scott_bandwidth(points) -> np.ndarray:
    """``sigma_d * m ** (-1 / (D + 4))`` per dimension; a dimension with no
    spread falls back to sigma = 1 (the pooled scaled stddev)."""
    points = np.atleast_2d(points)
    m, D = points.shape
    sigma = points.std(axis=0, ddof=1) if m > 1 else np.ones(D)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return sigma * m ** (-1.0 / (D + 4))


@dataclass
class KdeBank:
    vocab: CategoryVocab
    scaler: FeatureScaler
    kdes: dict  # category index -> CategoryKde; absent means "no evidence"
    origin: GeoPoint
    floor: float = DEFAULT_FLOOR
    utc_offset_s: float = 0.0
    cyclic_hour: bool = False
    n_features: int = field(init=False)

    def __post_init__(self):
        self.n_features = 4 if self.cyclic_hour else 3

    @property
    def empty_categories(self):
        return [c for c in range(len(self.vocab)) if c not in self.kdes]

    def scaled_features(self, stays: Sequence[Stay]) -> np.ndarray:
        raw = feature_matrix(
            [s.location.lat for s in stays], [s.location.lon for s in stays],
            [s.raw_arrival for s in stays], self.origin, self.utc_offset_s, self.cyclic_hour,
        )
        return self.scaler.transform(raw)

    def log_density_scaled(self, category: int, queries) -> np.ndarray:
        q = np.atleast_2d(queries)
        kde = self.kdes.get(int(category))
        if kde is None:
            return np.full(len(q), self.floor)
        return np.maximum(kde.log_density(q), self.floor)

    def log_density(self, category: int, stay: Stay) -> float:
        if not 0 <= int(category) < len(self.vocab):
            raise KeyError(f"category {category} not in bank")
        return float(self.log_density_scaled(category, self.scaled_features([stay]))[0])

    def log_density_matrix(self, stays: Sequence[Stay]) -> np.ndarray:
        """``(len(stays), V)`` floored log-densities for all categories."""
        q = self.scaled_features(stays)
        return np.column_stack([self.log_density_scaled(c, q) for c in range(len(self.vocab))])


def fit_kde_bank(stays: Sequence[Stay], catalog: PoiCatalog, subsample_cap=DEFAULT_SUBSAMPLE_CAP,
                 seed=0, floor=DEFAULT_FLOOR, utc_offset_s=0.0, cyclic_hour=False) -> KdeBank:
    """Fit one KDE per category from labeled stays.

    A stay adds one point to the KDE of every category of its true POI. The
    scaler is fitted on the pooled (per-category) points.
    """
    labeled = [s for s in stays if s.true_poi is not None and s.true_poi in catalog]
    if not labeled:
        raise ValueError("fit_kde_bank needs at least one labeled stay with a known POI")
    V = len(catalog.vocab)
    raw = feature_matrix(
        [s.location.lat for s in labeled], [s.location.lon for s in labeled],
        [s.raw_arrival for s in labeled], catalog.origin, utc_offset_s, cyclic_hour,
    )
    members = [[] for _ in range(V)]
    for row, s in enumerate(labeled):
        for c in catalog.category_indices(s.true_poi):
            members[c].append(row)
    pooled = np.concatenate([raw[idx] for idx in members if idx])
    scaler = FeatureScaler.fit(pooled)
    rng = np.random.default_rng(seed)
    kdes = {}
    for c, idx in enumerate(members):
        if not idx:
            continue
        pts = scaler.transform(raw[idx])
        if subsample_cap is not None and len(pts) > subsample_cap:
            pick = np.sort(rng.choice(len(pts), size=subsample_cap, replace=False))
            pts = pts[pick]
        kdes[c] = CategoryKde(c, pts, scott_bandwidth(pts))
    return KdeBank(catalog.vocab, scaler, kdes, catalog.origin, floor, utc_offset_s, cyclic_hour)


def save_bank(bank: KdeBank, path) -> None:
    w = Writer(BANK_MAGIC, BANK_VERSION)
    w.raw(bank.vocab.digest())
    w.blob(json.dumps(list(bank.vocab.names)).encode("utf-8"))
    w.u8(1 if bank.cyclic_hour else 0)
    for v in (bank.floor, bank.utc_offset_s, bank.origin.lat, bank.origin.lon):
        w.f64(v)
    D = bank.n_features
    w.u32(D)
    w.u32(len(bank.scaler.degenerate))
    for d in bank.scaler.degenerate:
        w.u32(d)
    w.array(bank.scaler.mean)
    w.array(bank.scaler.std)
    for c in range(len(bank.vocab)):
        kde = bank.kdes.get(c)
        if kde is None:
            w.u8(0)
            continue
        w.u8(1)
        w.u32(kde.m)
        w.array(kde.bandwidth)
        w.array(kde.points)
    w.save(path)


def load_bank(path, expected_vocab: Optional[CategoryVocab] = None) -> KdeBank:
    r = Reader.open(path, BANK_MAGIC, BANK_VERSION, "KDE bank")
    digest = r.raw(32)
    try:
        names = json.loads(r.blob().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"KDE bank vocab block unreadable: {exc}") from None
    vocab = CategoryVocab(names)
    if vocab.digest() != digest:
        raise FormatError("KDE bank vocab block does not match its hash")
    if expected_vocab is not None and expected_vocab.digest() != digest:
        raise VersionMismatchError("KDE bank was built for a different category vocabulary")
    cyclic = bool(r.u8())
    floor, offset, lat, lon = (r.f64() for _ in range(4))
    D = r.u32()
    degenerate = tuple(r.u32() for _ in range(r.u32()))
    mean, std = r.array((D,)), r.array((D,))
    kdes = {}
    for c in range(len(vocab)):
        if r.u8():
            m = r.u32()
            bw = r.array((D,))
            kdes[c] = CategoryKde(c, r.array((m, D)), bw)
    r.done()
    return KdeBank(vocab, FeatureScaler(mean, std, degenerate), kdes, GeoPoint(lat, lon),
                   floor, offset, cyclic)
