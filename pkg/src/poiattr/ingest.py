"""Dataset loading, timestamp normalization, GPS noise, candidate sets,
train/test splitting and the synthetic dataset generator."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .domain import (
    CategoryVocab,
    GeoPoint,
    Poi,
    PoiCatalog,
    ProjectedPoint,
    Stay,
    Trajectory,
    unproject,
)

log = logging.getLogger(__name__)

POI_HEADER = ["poi_id", "lat", "lon", "categories"]
STAY_HEADER = ["user_id", "lat", "lon", "arrival_epoch_s", "departure_epoch_s", "poi_id"]

DEFAULT_SIGMAS = (0.0002, 0.0001, 0.00005)


class IngestError(ValueError):
    """Malformed input file."""


class ParseError(IngestError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class DuplicateIdError(IngestError):
    pass


class EmptyCategoryError(IngestError):
    pass


# ---------------------------------------------------------------------------
# CSV I/O


def _check_header(path, header, expected):
    if header is None or [h.strip() for h in header] != expected:
        raise ParseError(path, 1, f"expected header {','.join(expected)!r}, got {header!r}")


def load_pois(path) -> PoiCatalog:
    """Read a POI CSV (``poi_id,lat,lon,categories``, categories ``;``-separated)."""
    pois, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(path, next(reader, None), POI_HEADER)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(row)}")
            pid, lat, lon, cats = (v.strip() for v in row)
            if pid in seen:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate poi_id {pid!r}")
            seen.add(pid)
            names = [c.strip() for c in cats.split(";") if c.strip()]
            if not names:
                raise EmptyCategoryError(f"{path}:{lineno}: POI {pid!r} has no categories")
            try:
                loc = GeoPoint(float(lat), float(lon))
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            pois.append(Poi(pid, loc, frozenset(names)))
    vocab = CategoryVocab(c for p in pois for c in p.categories)
    return PoiCatalog(pois, vocab)


def write_pois(path, catalog: PoiCatalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POI_HEADER)
        for pid in catalog.ids:
            p = catalog[pid]
            w.writerow([pid, repr(p.location.lat), repr(p.location.lon), ";".join(sorted(p.categories))])


def _num(s):
    v = float(s)
    return int(v) if v.is_integer() else v


def load_stays(path, normalize=True, t0=None) -> list:
    """Read a stays CSV into per-user trajectories (sorted by user id, then
    arrival). With ``normalize`` the dataset's earliest arrival becomes 0,
    or ``t0`` (epoch seconds) is subtracted when given."""
    by_user = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(path, next(reader, None), STAY_HEADER)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(path, lineno, f"expected 6 fields, got {len(row)}")
            uid, lat, lon, arr, dep, pid = (v.strip() for v in row)
            try:
                stay = Stay(GeoPoint(float(lat), float(lon)), _num(arr), _num(dep), pid or None)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            by_user[uid].append(stay)
    trajs = [Trajectory(u, sorted(s, key=lambda s: s.arrival)) for u, s in sorted(by_user.items())]
    if normalize and trajs:
        trajs = normalize_trajectories(trajs, t0)
    return trajs


def write_stays(path, trajectories: Sequence[Trajectory]) -> None:
    """Write stays with their raw epoch timestamps."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STAY_HEADER)
        for t in trajectories:
            for s in t.stays:
                arr = s.raw_arrival
                dep = arr + (s.departure - s.arrival)
                w.writerow([t.user_id, repr(s.location.lat), repr(s.location.lon),
                            _fmt(arr), _fmt(dep), s.true_poi or ""])


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


# ---------------------------------------------------------------------------
# timestamps and noise


def normalize_timestamps(stays: Sequence[Stay], t0=None) -> list:
    """Shift arrival/departure so the earliest arrival is 0 seconds (or by a
    given origin ``t0``), keeping the raw arrival epoch on each stay for
    hour-of-day features."""
    if not stays:
        raise ValueError("normalize_timestamps needs at least one stay")
    if t0 is None:
        t0 = time_origin(stays)
    out = []
    for s in stays:
        raw = s.raw_arrival
        dur = s.departure - s.arrival
        out.append(replace(s, arrival=raw - t0, departure=raw - t0 + dur, epoch_arrival=raw))
    return out


def time_origin(stays: Sequence[Stay]):
    """Earliest raw arrival epoch."""
    return min(s.raw_arrival for s in stays)


def normalize_trajectories(trajs: Sequence[Trajectory], t0=None) -> list:
    flat = normalize_timestamps([s for t in trajs for s in t.stays], t0)
    out, i = [], 0
    for t in trajs:
        out.append(Trajectory(t.user_id, flat[i : i + len(t)]))
        i += len(t)
    return out


@dataclass(frozen=True)
class NoiseConfig:
    sigma_choices: tuple = DEFAULT_SIGMAS
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sigma_choices", tuple(float(s) for s in self.sigma_choices))
        if not self.sigma_choices:
            raise ValueError("sigma_choices must not be empty")
        if any(s < 0 for s in self.sigma_choices):
            raise ValueError("noise sigmas must be non-negative")


def add_gaussian_noise(stays: Sequence[Stay], cfg: NoiseConfig) -> list:
    """Perturb lat and lon of every stay by independent N(0, sigma^2) degrees,
    with sigma drawn per stay uniformly from ``cfg.sigma_choices``."""
    rng = np.random.default_rng(cfg.rng_seed)
    n = len(stays)
    sig = rng.choice(np.asarray(cfg.sigma_choices), size=n)
    eps = rng.standard_normal((n, 2)) * sig[:, None]
    out = []
    for s, (dlat, dlon) in zip(stays, eps):
        if dlat == 0.0 and dlon == 0.0:
            out.append(s)
            continue
        lat = min(90.0, max(-90.0, s.location.lat + dlat))
        lon = min(180.0, max(-180.0, s.location.lon + dlon))
        out.append(s.with_location(GeoPoint(lat, lon)))
    return out


def noise_trajectories(trajs: Sequence[Trajectory], cfg: NoiseConfig) -> list:
    flat = add_gaussian_noise([s for t in trajs for s in t.stays], cfg)
    out, i = [], 0
    for t in trajs:
        out.append(Trajectory(t.user_id, flat[i : i + len(t)]))
        i += len(t)
    return out


# ---------------------------------------------------------------------------
# spatial index and candidate sets


class SpatialGridIndex:
    """Uniform grid over projected POI coordinates for radius queries."""

    def __init__(self, catalog: PoiCatalog, cell_size_m: float = 200.0):
        if cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")
        self.catalog = catalog
        self.cell_size = float(cell_size_m)
        self.xy = catalog.xy
        cells = defaultdict(list)
        for row, (x, y) in enumerate(self.xy):
            cells[self._cell(x, y)].append(row)
        self.cells = {k: np.asarray(v, dtype=np.int64) for k, v in cells.items()}
        # rank of each POI id in lexicographic order, for tie-breaking
        self.id_rank = np.empty(len(catalog), dtype=np.int64)
        self.id_rank[np.argsort(np.asarray(catalog.ids, dtype=object), kind="stable")] = np.arange(len(catalog))

    def _cell(self, x, y):
        return (math.floor(x / self.cell_size), math.floor(y / self.cell_size))

    def query_radius(self, point: ProjectedPoint, radius_m: float):
        """Rows and distances of POIs within ``radius_m``, ordered by distance
        then POI id."""
        cx, cy = self._cell(point.x, point.y)
        reach = int(math.ceil(radius_m / self.cell_size))
        chunks = [
            self.cells[(i, j)]
            for i in range(cx - reach, cx + reach + 1)
            for j in range(cy - reach, cy + reach + 1)
            if (i, j) in self.cells
        ]
        if not chunks:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        rows = np.concatenate(chunks)
        d = np.hypot(self.xy[rows, 0] - point.x, self.xy[rows, 1] - point.y)
        keep = d <= radius_m
        rows, d = rows[keep], d[keep]
        order = np.lexsort((self.id_rank[rows], d))
        return rows[order], d[order]


@dataclass(frozen=True)
class CandidateSet:
    """Feasible POIs for one stay, nearest first, padded to ``max_size``."""

    stay: Stay
    poi_ids: tuple
    distances: np.ndarray
    max_size: int

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.max_size, dtype=bool)
        m[: len(self.poi_ids)] = True
        return m

    @property
    def slots(self) -> list:
        return list(self.poi_ids) + [None] * (self.max_size - len(self.poi_ids))

    @property
    def empty(self) -> bool:
        return not self.poi_ids

    def __len__(self):
        return len(self.poi_ids)

    def __contains__(self, pid):
        return pid in self.poi_ids

    def index(self, pid) -> int:
        return self.poi_ids.index(pid)


def build_candidate_set(stay: Stay, index: SpatialGridIndex, radius_m=200.0, K=64) -> CandidateSet:
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    if K < 1:
        raise ValueError("K must be at least 1")
    rows, d = index.query_radius(index.catalog.project(stay.location), radius_m)
    rows, d = rows[:K], d[:K]
    ids = tuple(index.catalog.ids[r] for r in rows)
    return CandidateSet(stay, ids, d, int(K))


# ---------------------------------------------------------------------------
# splitting


def split_train_test(trajectories: Sequence[Trajectory], ratio=0.8, seed=0):
    """Split by user into disjoint train/test partitions."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    if len({t.user_id for t in trajectories}) < 2 or len(trajectories) < 2:
        raise ValueError("need at least two users to split")
    n = len(trajectories)
    n_train = min(n - 1, max(1, int(round(ratio * n))))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = set(perm[:n_train].tolist())
    train = [t for i, t in enumerate(trajectories) if i in train_idx]
    test = [t for i, t in enumerate(trajectories) if i not in train_idx]
    return train, test


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    n_users: int = 50
    n_pois: int = 300
    n_categories: int = 8
    days: int = 14
    extent_m: float = 1000.0
    #: per-category hour-of-day mean (None: evenly spread over 7h..21h)
    hour_means: Optional[list] = None
    hour_stds: object = 0.5
    #: Dirichlet concentration of each user's category preference
    preference_concentration: float = 0.3
    #: probability of a POI carrying 1, 2, 3 ... categories
    categories_per_poi: list = field(default_factory=lambda: [0.5, 0.3, 0.2])
    stays_per_day: tuple = (3, 6)
    dwell_minutes: tuple = (20.0, 90.0)
    origin_lat: float = 34.05
    origin_lon: float = -118.25
    start_epoch: int = 1_700_006_400  # a UTC midnight
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_pois", "n_categories", "days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.extent_m <= 0:
            raise ValueError("extent_m must be positive")
        if self.hour_means is None:
            k = self.n_categories
            self.hour_means = [14.0] if k == 1 else list(np.linspace(7.0, 21.0, k))
        if len(self.hour_means) != self.n_categories:
            raise ValueError("hour_means needs one entry per category")
        if np.isscalar(self.hour_stds):
            self.hour_stds = [float(self.hour_stds)] * self.n_categories
        if len(self.hour_stds) != self.n_categories:
            raise ValueError("hour_stds needs one entry per category")
        self.stays_per_day = tuple(self.stays_per_day)
        self.dwell_minutes = tuple(self.dwell_minutes)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        d = asdict(self)
        d["hour_means"] = [float(v) for v in self.hour_means]
        d["hour_stds"] = [float(v) for v in self.hour_stds]
        d["stays_per_day"] = list(self.stays_per_day)
        d["dwell_minutes"] = list(self.dwell_minutes)
        return d


def category_names(n):
    width = len(str(n - 1))
    return [f"cat_{i:0{width}d}" for i in range(n)]


def generate_synthetic(cfg: SyntheticConfig):
    """Generate ``(catalog, trajectories)``; every stay sits exactly on its
    labeled POI (apply noise separately)."""
    rng = np.random.default_rng(cfg.rng_seed)
    names = category_names(cfg.n_categories)
    origin = GeoPoint(cfg.origin_lat, cfg.origin_lon)

    half = cfg.extent_m / 2
    xy = rng.uniform(-half, half, size=(cfg.n_pois, 2))
    probs = np.asarray(cfg.categories_per_poi, dtype=float)
    probs = probs / probs.sum()
    max_k = min(len(probs), cfg.n_categories)
    probs = probs[:max_k] / probs[:max_k].sum()
    pois, members = [], defaultdict(list)
    for i in range(cfg.n_pois):
        k = int(rng.choice(np.arange(1, max_k + 1), p=probs))
        cats = set(rng.choice(cfg.n_categories, size=k, replace=False).tolist())
        if i < cfg.n_categories:
            # every category gets at least one POI
            cats = {i} | set(list(cats)[: k - 1])
        geo = unproject(ProjectedPoint(float(xy[i, 0]), float(xy[i, 1])), origin)
        pid = f"p{i:05d}"
        pois.append(Poi(pid, geo, frozenset(names[c] for c in cats)))
        for c in cats:
            members[c].append(i)
    catalog = PoiCatalog(pois, CategoryVocab(names), origin=origin)

    lo, hi = cfg.stays_per_day
    dlo, dhi = cfg.dwell_minutes
    uid_width = len(str(cfg.n_users - 1))
    trajectories = []
    for u in range(cfg.n_users):
        pref = rng.dirichlet(np.full(cfg.n_categories, cfg.preference_concentration))
        # numerical floor so that every category keeps some mass
        pref = (pref + 1e-9) / (pref + 1e-9).sum()
        raw = []
        for day in range(cfg.days):
            n = int(rng.integers(lo, hi + 1))
            cats = rng.choice(cfg.n_categories, size=n, p=pref)
            for c in cats:
                hour = rng.normal(cfg.hour_means[c], cfg.hour_stds[c])
                hour = float(np.clip(hour, 0.0, 24.0 - 1e-6))
                poi = pois[members[c][int(rng.integers(len(members[c])))]]
                arr = cfg.start_epoch + day * 86400 + int(round(hour * 3600))
                dwell = int(round(rng.uniform(dlo, dhi) * 60))
                raw.append((arr, dwell, poi))
        raw.sort(key=lambda r: (r[0], r[2].id))
        stays = []
        for j, (arr, dwell, poi) in enumerate(raw):
            dep = arr + dwell
            if j + 1 < len(raw):
                dep = min(dep, raw[j + 1][0])
            stays.append(Stay(poi.location, arr, dep, poi.id))
        trajectories.append(Trajectory(f"u{u:0{uid_width}d}", stays))
    return catalog, trajectories


def write_synthetic(out_dir, cfg: SyntheticConfig, split_ratio=0.8):
    """Generate a dataset and write ``pois.csv``, ``stays.csv``, per-split
    ``train.csv``/``test.csv`` and ``manifest.json`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    catalog, trajs = generate_synthetic(cfg)
    train, test = split_train_test(trajs, split_ratio, cfg.rng_seed)
    write_pois(os.path.join(out_dir, "pois.csv"), catalog)
    write_stays(os.path.join(out_dir, "stays.csv"), trajs)
    write_stays(os.path.join(out_dir, "train.csv"), train)
    write_stays(os.path.join(out_dir, "test.csv"), test)
    manifest = {
        "seed": cfg.rng_seed,
        "config": cfg.to_dict(),
        "split_ratio": split_ratio,
        "files": ["pois.csv", "stays.csv", "train.csv", "test.csv"],
        "counts": {
            "pois": len(catalog),
            "users": len(trajs),
            "stays": sum(len(t) for t in trajs),
            "train_users": len(train),
            "test_users": len(test),
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return catalog, trajs, manifest
