"""Core data types shared across the package, plus coordinate projection."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
_DEG = math.pi / 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class ProjectedPoint:
    """Meters east (``x``) and north (``y``) of a projection origin."""

    x: float
    y: float


def project(p: GeoPoint, origin: GeoPoint) -> ProjectedPoint:
    """Local equirectangular projection around ``origin``."""
    x = (p.lon - origin.lon) * math.cos(origin.lat * _DEG) * EARTH_RADIUS_M * _DEG
    y = (p.lat - origin.lat) * EARTH_RADIUS_M * _DEG
    return ProjectedPoint(x, y)


def unproject(q: ProjectedPoint, origin: GeoPoint) -> GeoPoint:
    lat = origin.lat + q.y / (EARTH_RADIUS_M * _DEG)
    lon = origin.lon + q.x / (math.cos(origin.lat * _DEG) * EARTH_RADIUS_M * _DEG)
    return GeoPoint(lat, lon)


def project_array(lat, lon, origin: GeoPoint) -> np.ndarray:
    """Vectorized :func:`project`; returns an ``(n, 2)`` array of meters."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    x = (lon - origin.lon) * math.cos(origin.lat * _DEG) * EARTH_RADIUS_M * _DEG
    y = (lat - origin.lat) * EARTH_RADIUS_M * _DEG
    return np.stack([x, y], axis=-1)


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    phi1, phi2 = a.lat * _DEG, b.lat * _DEG
    dphi = phi2 - phi1
    dlmb = (b.lon - a.lon) * _DEG
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


class CategoryVocab:
    """Dense, deterministic index over category names (lexicographic order)."""

    def __init__(self, names: Iterable[str]):
        self._names = tuple(sorted(set(names)))
        self._index = {n: i for i, n in enumerate(self._names)}

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, CategoryVocab) and self._names == other._names

    def __repr__(self):
        return f"CategoryVocab({list(self._names)!r})"

    @property
    def names(self) -> tuple:
        return self._names

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown category: {name!r}") from None

    def name(self, idx: int) -> str:
        return self._names[idx]

    def digest(self) -> bytes:
        """32-byte fingerprint used to tie checkpoints and banks to a vocab."""
        return hashlib.sha256("\n".join(self._names).encode("utf-8")).digest()


@dataclass(frozen=True)
class Poi:
    id: str
    location: GeoPoint
    categories: frozenset

    def __post_init__(self):
        if not self.categories:
            raise ValueError(f"POI {self.id!r} has no categories")
        object.__setattr__(self, "categories", frozenset(self.categories))


@dataclass(frozen=True)
class Stay:
    """One visit. ``arrival``/``departure`` are seconds; after normalization
    ``epoch_arrival`` keeps the raw arrival epoch so hour-of-day survives."""

    location: GeoPoint
    arrival: float
    departure: float
    true_poi: Optional[str] = None
    epoch_arrival: Optional[float] = None

    def __post_init__(self):
        if self.departure < self.arrival:
            raise ValueError(f"departure {self.departure} precedes arrival {self.arrival}")

    @property
    def raw_arrival(self) -> float:
        return self.arrival if self.epoch_arrival is None else self.epoch_arrival

    def with_location(self, location: GeoPoint) -> "Stay":
        return replace(self, location=location)


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    stays: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "stays", tuple(self.stays))

    def __len__(self):
        return len(self.stays)


@dataclass(frozen=True)
class Violation:
    index: int
    kind: str
    detail: str


def validate_trajectory(traj: Trajectory) -> list:
    """Return one :class:`Violation` per consecutive pair that is out of
    order or overlapping; an empty list means the trajectory is valid."""
    out = []
    for i, (a, b) in enumerate(zip(traj.stays, traj.stays[1:])):
        if b.arrival < a.arrival:
            out.append(Violation(i, "unsorted", f"arrival {b.arrival} < {a.arrival}"))
        elif a.departure > b.arrival:
            out.append(Violation(i, "overlap", f"departure {a.departure} > next arrival {b.arrival}"))
    return out


class PoiCatalog:
    """POIs keyed by id, their vocab, and cached projected arrays.

    The projection origin defaults to the centroid of the catalog.
    """

    def __init__(self, pois: Sequence[Poi], vocab: CategoryVocab, origin: Optional[GeoPoint] = None):
        ids = [p.id for p in pois]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate POI ids in catalog")
        for p in pois:
            for c in p.categories:
                if c not in vocab:
                    raise ValueError(f"POI {p.id!r} has category {c!r} missing from vocab")
        self.pois = {p.id: p for p in pois}
        self.ids = ids
        self.vocab = vocab
        if origin is None:
            if pois:
                origin = GeoPoint(
                    float(np.mean([p.location.lat for p in pois])),
                    float(np.mean([p.location.lon for p in pois])),
                )
            else:
                origin = GeoPoint(0.0, 0.0)
        self.origin = origin
        self._row = {pid: i for i, pid in enumerate(ids)}
        self.xy = project_array(
            [p.location.lat for p in pois], [p.location.lon for p in pois], origin
        ).reshape(-1, 2)
        self.max_categories = max((len(p.categories) for p in pois), default=1)
        # sorted per-POI category indices, padded with 0 and masked
        self.cat_index = np.zeros((len(pois), self.max_categories), dtype=np.int64)
        self.cat_mask = np.zeros((len(pois), self.max_categories), dtype=np.float64)
        for i, p in enumerate(pois):
            idx = sorted(vocab.index(c) for c in p.categories)
            self.cat_index[i, : len(idx)] = idx
            self.cat_mask[i, : len(idx)] = 1.0

    def __len__(self):
        return len(self.ids)

    def __contains__(self, pid):
        return pid in self.pois

    def __getitem__(self, pid) -> Poi:
        return self.pois[pid]

    def row(self, pid) -> int:
        return self._row[pid]

    def category_indices(self, pid) -> list:
        return sorted(self.vocab.index(c) for c in self.pois[pid].categories)

    def project(self, p: GeoPoint) -> ProjectedPoint:
        return project(p, self.origin)
