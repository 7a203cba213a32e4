"""Candidate scoring: per-category log-likelihood plus log-prior, summed over
each candidate's categories, and top-k ranking."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import PoiCatalog, Stay
from .ingest import CandidateSet
from .kde import KdeBank

ATTRIBUTION_HEADER = ["user_id", "stay_index", "rank", "poi_id", "logit",
                      "log_likelihood_part", "log_prior_part"]


def category_weights(cat_mask, mean_categories=False):
    cat_mask = np.asarray(cat_mask, dtype=np.float64)
    if not mean_categories:
        return cat_mask
    count = np.maximum(cat_mask.sum(axis=-1, keepdims=True), 1.0)
    return cat_mask / count


def combine_terms(prior_terms, likelihood_terms, weights, use_kde=True, use_prior=True):
    """Return ``(logit, likelihood_part, prior_part)`` summed over the last
    axis. Works on numpy arrays and autodiff tensors alike; the likelihood
    terms are always plain arrays."""
    if not (use_kde or use_prior):
        raise ValueError("at least one of the likelihood and prior terms must be enabled")
    lik = (np.asarray(likelihood_terms) * weights).sum(axis=-1) if use_kde else None
    pri = (prior_terms * weights).sum(axis=-1) if use_prior else None
    if lik is None:
        return pri, np.zeros(np.shape(weights)[:-1]), pri
    if pri is None:
        return lik, lik, np.zeros_like(lik)
    return pri + lik, lik, pri


@dataclass
class CandidateScores:
    poi_ids: list  # length K, None on padding slots
    logits: np.ndarray  # -inf on padding slots
    mask: np.ndarray
    likelihood_part: np.ndarray
    prior_part: np.ndarray

    def __len__(self):
        return len(self.poi_ids)


def score_candidates(log_prior, bank: KdeBank, stay: Stay, candidates: CandidateSet,
                     catalog: PoiCatalog, use_kde=True, use_prior=True,
                     mean_categories=False) -> CandidateScores:
    """Score every valid candidate of one stay; padding slots are masked."""
    log_prior = np.asarray(log_prior, dtype=np.float64)
    if log_prior.shape != (len(catalog.vocab),):
        raise ValueError(f"log_prior must have length {len(catalog.vocab)}")
    for pid in candidates.poi_ids:
        if pid not in catalog:
            raise KeyError(f"unknown candidate POI {pid!r}")
    K = candidates.max_size
    logits = np.full(K, -np.inf)
    lik_part = np.zeros(K)
    pri_part = np.zeros(K)
    n = len(candidates)
    if n:
        rows = np.array([catalog.row(p) for p in candidates.poi_ids])
        cidx, cmask = catalog.cat_index[rows], catalog.cat_mask[rows]
        ld = bank.log_density_matrix([stay])[0] if use_kde else np.zeros(len(catalog.vocab))
        logit, lik, pri = combine_terms(log_prior[cidx], ld[cidx], category_weights(cmask, mean_categories),
                                        use_kde, use_prior)
        logits[:n], lik_part[:n], pri_part[:n] = logit, lik, pri
    return CandidateScores(candidates.slots, logits, candidates.mask, lik_part, pri_part)


def rank_order(logits, ids):
    """Indices of valid entries sorted by logit descending, then id."""
    return sorted((i for i, pid in enumerate(ids) if pid is not None and np.isfinite(logits[i])),
                  key=lambda i: (-logits[i], ids[i]))


def attribute_topk(scores: CandidateScores, k: int) -> list:
    if k < 1:
        raise ValueError("k must be at least 1")
    ids = [pid if m else None for pid, m in zip(scores.poi_ids, scores.mask)]
    return [ids[i] for i in rank_order(scores.logits, ids)[:k]]


def attribution_rows(user_id, stay_index, scores: CandidateScores, k: int):
    ids = [pid if m else None for pid, m in zip(scores.poi_ids, scores.mask)]
    for rank, i in enumerate(rank_order(scores.logits, ids)[:k], start=1):
        yield [user_id, stay_index, rank, ids[i], repr(float(scores.logits[i])),
               repr(float(scores.likelihood_part[i])), repr(float(scores.prior_part[i]))]


def write_attributions(path, rows: Sequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ATTRIBUTION_HEADER)
        w.writerows(rows)


def read_attributions(path) -> dict:
    """``{(user_id, stay_index): [poi_id, ...]}`` in rank order."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["user_id"], int(row["stay_index"]))
            out.setdefault(key, []).append((int(row["rank"]), row["poi_id"]))
    return {k: [pid for _, pid in sorted(v)] for k, v in out.items()}
