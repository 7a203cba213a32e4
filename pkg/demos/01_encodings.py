"""
Encoding a stay as a token
==========================

A stay is turned into one transformer token by concatenating four pieces:
a multi-scale sinusoidal encoding of its projected location, periodic
encodings of arrival and departure time, and a pooled category embedding
(or the MASK row for the stay being attributed).
"""

import numpy as np

from poiattr.encoding import (
    MASK,
    CategoryEmbedding,
    Space2Vec,
    StayEncoder,
    Time2Vec,
    build_token_sequence,
    encode_categories,
)
from poiattr.ingest import SyntheticConfig, generate_synthetic, normalize_trajectories

rng = np.random.default_rng(0)

# Time: one linear channel plus sinusoids. The initial periods run from a
# few hours to a week, and one channel repeats exactly once per day.
t2v = Time2Vec(8, rng)
print("initial periods (hours):", np.round([t2v.period_seconds(i) / 3600 for i in range(1, 8)], 2))
noon, next_noon = t2v(np.array([12 * 3600.0])).data[0], t2v(np.array([36 * 3600.0])).data[0]
daily = [i for i in range(1, 8) if abs(t2v.period_seconds(i) - 86400) < 1e-6][0]
print("daily channel at noon, day 0 vs day 1:", noon[daily], next_noon[daily])

# Space: sin/cos of the projection onto e_x and e_y at wavelengths from 10 m
# to 10 km. Raw features at the origin are all-zero sines and all-one cosines.
s2v = Space2Vec(16, rng)
f = s2v.features(np.zeros(2))
print("wavelengths (m):", np.round(s2v.wavelengths, 1))
print("features at origin: sin block max", np.abs(f[: f.size // 2]).max(), "cos block min", f[f.size // 2 :].min())

# Shifting by one wavelength along x leaves that level's x features unchanged.
lam = s2v.wavelengths[3]
a = s2v.features(np.array([17.0, 5.0])).reshape(2, -1, 2)
b = s2v.features(np.array([17.0 + lam, 5.0])).reshape(2, -1, 2)
print(f"level 3 x-features after moving {lam:.1f} m:", np.allclose(a[:, 3, 0], b[:, 3, 0]))

# Categories: a multi-category POI averages its rows; the target uses MASK.
emb = CategoryEmbedding(4, 6, rng)
pooled = encode_categories(emb, {0, 2})
print("pooled == mean of rows 0 and 2:", np.allclose(pooled, (emb.table.data[0] + emb.table.data[2]) / 2))
print("MASK row index:", emb.mask_index, "same as encode_categories(MASK):",
      np.array_equal(encode_categories(emb, MASK), emb.table.data[emb.mask_index]))

# A whole trajectory becomes a (n, d) token matrix with positional encoding.
catalog, trajs = generate_synthetic(SyntheticConfig(n_users=2, n_pois=40, n_categories=4, days=2, rng_seed=1))
trajs = normalize_trajectories(trajs)
enc = StayEncoder(len(catalog.vocab), rng)
tokens, pos = build_token_sequence(trajs[0], 3, enc, catalog)
print("trajectory of", len(trajs[0]), "stays ->", tokens.shape, "tokens; target at row", pos)
