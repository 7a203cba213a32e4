"""Reference attribution methods."""

from __future__ import annotations

from .domain import Stay
from .ingest import SpatialGridIndex


def closest_centroid_topk(stay: Stay, index: SpatialGridIndex, k: int, threshold_m: float = 200.0) -> list:
    """POIs within ``threshold_m`` of the stay, nearest first (ties by id)."""
    if threshold_m <= 0:
        raise ValueError("threshold_m must be positive")
    if k < 1:
        raise ValueError("k must be at least 1")
    rows, _ = index.query_radius(index.catalog.project(stay.location), threshold_m)
    return [index.catalog.ids[r] for r in rows[:k]]
