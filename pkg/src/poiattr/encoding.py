"""Per-stay token construction: location, arrival/departure time and
category embeddings, plus a fixed sinusoidal positional encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Linear, Module, Tensor, concat, parameter
from .domain import PoiCatalog, Trajectory, project_array

SECONDS_PER_DAY = 86400.0

#: sentinel accepted by :func:`encode_categories`
MASK = "MASK"


class Time2Vec(Module):
    """``out[0] = w0*tau + b0``, ``out[i] = sin(w_i*tau + b_i)``.

    ``tau`` is time in units of ``time_scale`` seconds (one day by default),
    so frequencies are expressed in radians per day. Periodic frequencies
    are initialised on a log grid spanning a few hours to a week.
    """

    def __init__(self, dim, rng, time_scale=SECONDS_PER_DAY):
        if dim < 2:
            raise ValueError("Time2Vec dimension must be at least 2")
        self.dim = dim
        self.time_scale = float(time_scale)
        k = dim - 1
        periods = np.geomspace(0.125, 7.0, k) if k > 1 else np.array([1.0])
        # pin one channel to exactly one day
        periods[np.argmin(np.abs(np.log(periods)))] = 1.0
        self.w0 = parameter(rng.normal(0.0, 0.1, size=1))
        self.b0 = parameter(np.zeros(1))
        self.w = parameter(2 * np.pi / periods)
        self.b = parameter(rng.uniform(-np.pi, np.pi, size=k))

    def __call__(self, t):
        tau = np.asarray(t, dtype=np.float64)[..., None] / self.time_scale
        linear = self.w0 * tau + self.b0
        periodic = (self.w * tau + self.b).sin()
        return concat([linear, periodic], axis=-1)

    def period_seconds(self, i):
        """Period of output channel ``i >= 1`` in seconds."""
        return 2 * np.pi / self.w.data[i - 1] * self.time_scale


def encode_time(params: Time2Vec, t) -> np.ndarray:
    return params(t).data


class Space2Vec(Module):
    """Multi-scale sinusoidal grid encoding of projected coordinates.

    For each of ``levels`` wavelengths (geometric between ``min_wavelength``
    and ``max_wavelength`` meters) and each fixed unit direction, the phase
    ``2*pi*<p, dir>/wavelength`` yields a sin and a cos feature; a learnable
    linear layer maps the ``2 * levels * n_dirs`` features to ``dim``.
    """

    def __init__(self, dim, rng, levels=8, min_wavelength=10.0, max_wavelength=10_000.0):
        if dim < 2:
            raise ValueError("Space2Vec dimension must be at least 2")
        if not 0 < min_wavelength <= max_wavelength:
            raise ValueError("need 0 < min_wavelength <= max_wavelength")
        self.dim = dim
        self.wavelengths = np.geomspace(min_wavelength, max_wavelength, levels)
        self.directions = np.array([[1.0, 0.0], [0.0, 1.0]])
        self.proj = Linear(2 * levels * len(self.directions), dim, rng)

    @property
    def n_features(self):
        return 2 * len(self.wavelengths) * len(self.directions)

    def features(self, xy) -> np.ndarray:
        """Raw sinusoidal features, laid out as ``[sin block | cos block]``
        with level-major, direction-minor order inside each block."""
        xy = np.asarray(xy, dtype=np.float64)
        along = xy @ self.directions.T  # (..., n_dirs)
        phase = 2 * np.pi * along[..., None, :] / self.wavelengths[:, None]
        phase = phase.reshape(*xy.shape[:-1], -1)
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)

    def __call__(self, xy):
        return self.proj(self.features(xy))


def encode_space(params: Space2Vec, p) -> np.ndarray:
    xy = np.array([p.x, p.y]) if hasattr(p, "x") else np.asarray(p)
    return params(xy).data


class CategoryEmbedding(Module):
    """``V`` category rows plus one learnable MASK row (index ``V``)."""

    def __init__(self, n_categories, dim, rng):
        self.n_categories = n_categories
        self.dim = dim
        self.table = parameter(rng.normal(0.0, 0.1, size=(n_categories + 1, dim)))

    @property
    def mask_index(self):
        return self.n_categories

    def __call__(self, idx, weights):
        """Weighted sum of rows ``table[idx]`` along the last index axis."""
        rows = self.table[np.asarray(idx)]
        return (rows * np.asarray(weights, dtype=np.float64)[..., None]).sum(axis=-2)


def encode_categories(table: CategoryEmbedding, cats) -> np.ndarray:
    """Mean of the member rows, or the MASK row."""
    if isinstance(cats, str) and cats == MASK:
        return table.table.data[table.mask_index].copy()
    cats = sorted(set(cats))
    if not cats:
        raise ValueError("need at least one category (or MASK)")
    for c in cats:
        if not 0 <= c < table.n_categories:
            raise KeyError(f"unknown category index {c}")
    return table(np.array(cats), np.full(len(cats), 1.0 / len(cats))).data


def positional_encoding(n, dim) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class SequenceBatch:
    """Padded inputs for ``B`` (trajectory window, target) examples."""

    xy: np.ndarray  # (B, n, 2) meters
    arrival: np.ndarray  # (B, n) normalized seconds
    departure: np.ndarray  # (B, n)
    cat_index: np.ndarray  # (B, n, C) int
    cat_weight: np.ndarray  # (B, n, C); pooling weights, 0 on padding
    key_mask: np.ndarray  # (B, n) bool, True for real stays
    target: np.ndarray  # (B,) position of the target inside its window

    def __len__(self):
        return len(self.target)


def window_bounds(n, target_index, max_len):
    """Slice ``[lo, hi)`` of length ``<= max_len`` that contains the target,
    centered on it where possible."""
    if max_len is None or n <= max_len:
        return 0, n
    lo = min(max(0, target_index - max_len // 2), n - max_len)
    return lo, lo + max_len


def make_sequence_batch(examples: Sequence, catalog: PoiCatalog, max_len=None) -> SequenceBatch:
    """Build a padded batch from ``(trajectory, target_index)`` pairs.

    The target stay's categories are never read: its slot points at the MASK
    row. Context stays without a known POI also use the MASK row.
    """
    V = len(catalog.vocab)
    C = catalog.max_categories
    spans = []
    for traj, i in examples:
        if not 0 <= i < len(traj):
            raise IndexError(f"target index {i} out of range for trajectory of length {len(traj)}")
        spans.append(window_bounds(len(traj), i, max_len))
    B = len(examples)
    n = max(hi - lo for lo, hi in spans)
    xy = np.zeros((B, n, 2))
    arr = np.zeros((B, n))
    dep = np.zeros((B, n))
    cidx = np.zeros((B, n, C), dtype=np.int64)
    cw = np.zeros((B, n, C))
    key = np.zeros((B, n), dtype=bool)
    target = np.zeros(B, dtype=np.int64)
    for b, ((traj, i), (lo, hi)) in enumerate(zip(examples, spans)):
        stays = traj.stays[lo:hi]
        m = len(stays)
        key[b, :m] = True
        target[b] = i - lo
        lat = [s.location.lat for s in stays]
        lon = [s.location.lon for s in stays]
        xy[b, :m] = project_array(lat, lon, catalog.origin)
        arr[b, :m] = [s.arrival for s in stays]
        dep[b, :m] = [s.departure for s in stays]
        for j, s in enumerate(stays):
            if j == i - lo or s.true_poi is None or s.true_poi not in catalog:
                cidx[b, j, 0] = V
                cw[b, j, 0] = 1.0
            else:
                r = catalog.row(s.true_poi)
                k = int(catalog.cat_mask[r].sum())
                cidx[b, j] = catalog.cat_index[r]
                cw[b, j, :k] = 1.0 / k
    return SequenceBatch(xy, arr, dep, cidx, cw, key, target)


class StayEncoder(Module):
    """Concatenates the sub-encoders into a token of width
    ``d_space + 2*d_time + d_cat`` and adds positional encoding."""

    def __init__(self, n_categories, rng, d_space=32, d_time=16, d_cat=32,
                 space_levels=8, min_wavelength=10.0, max_wavelength=10_000.0):
        self.space = Space2Vec(d_space, rng, space_levels, min_wavelength, max_wavelength)
        self.arrival = Time2Vec(d_time, rng)
        self.departure = Time2Vec(d_time, rng)
        self.categories = CategoryEmbedding(n_categories, d_cat, rng)
        self.d_model = d_space + 2 * d_time + d_cat

    def __call__(self, batch: SequenceBatch) -> Tensor:
        parts = concat(
            [
                self.space(batch.xy),
                self.arrival(batch.arrival),
                self.departure(batch.departure),
                self.categories(batch.cat_index, batch.cat_weight),
            ],
            axis=-1,
        )
        return parts + positional_encoding(batch.xy.shape[1], self.d_model)


def build_token_sequence(traj: Trajectory, target_index: int, tables: StayEncoder,
                         catalog: PoiCatalog, max_len=None):
    """Tokens ``(n, d_model)`` for one trajectory with the target masked;
    returns ``(tokens, target position within the token window)``."""
    batch = make_sequence_batch([(traj, target_index)], catalog, max_len)
    m = int(batch.key_mask[0].sum())
    return tables(batch).data[0, :m], int(batch.target[0])
