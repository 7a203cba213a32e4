"""Top-k accuracy and experiment orchestration over noise conditions and
methods (model variants and baselines)."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baselines import closest_centroid_topk
from .domain import PoiCatalog, Trajectory
from .ingest import NoiseConfig, SpatialGridIndex, build_candidate_set, noise_trajectories
from .kde import KdeBank
from .model import AttributionModel
from .scorer import attribute_topk, attribution_rows, score_candidates

REPORT_VERSION = 1
DEFAULT_KS = (1, 3, 5)


def top_k_accuracy(predictions: Sequence, truths: Sequence, k: int) -> float:
    """Fraction of items whose truth is among the first ``k`` predictions."""
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} prediction lists for {len(truths)} truths")
    if k < 1:
        raise ValueError("k must be at least 1")
    if not truths:
        return 0.0
    return sum(t in list(p)[:k] for p, t in zip(predictions, truths)) / len(truths)


def labeled_targets(trajectories: Sequence[Trajectory]):
    return [(t, i) for t in trajectories for i, s in enumerate(t.stays) if s.true_poi is not None]


@dataclass
class Attribution:
    user_id: str
    stay_index: int
    truth: Optional[str]
    n_candidates: int
    truth_in_candidates: bool
    ranking: list
    rows: list = field(default_factory=list)


class ModelMethod:
    """Attribute with the learned model (optionally ablated)."""

    def __init__(self, model: AttributionModel, bank: KdeBank, catalog: PoiCatalog,
                 grid: SpatialGridIndex, radius_m=200.0, K=64, use_kde=True, use_prior=True,
                 mean_categories=False, batch_size=64, threads=1):
        self.model, self.bank, self.catalog, self.grid = model, bank, catalog, grid
        self.radius_m, self.K = radius_m, K
        self.use_kde, self.use_prior, self.mean_categories = use_kde, use_prior, mean_categories
        self.batch_size, self.threads = batch_size, max(1, int(threads))

    def _chunk(self, targets, k):
        if self.use_prior:
            priors = self.model.log_priors(targets, self.catalog, self.batch_size)
        else:
            priors = np.zeros((len(targets), len(self.catalog.vocab)))
        out = []
        for (traj, i), lp in zip(targets, priors):
            stay = traj.stays[i]
            cands = build_candidate_set(stay, self.grid, self.radius_m, self.K)
            scores = score_candidates(lp, self.bank, stay, cands, self.catalog,
                                      self.use_kde, self.use_prior, self.mean_categories)
            out.append(Attribution(
                traj.user_id, i, stay.true_poi, len(cands),
                stay.true_poi is not None and stay.true_poi in cands,
                attribute_topk(scores, k) if not cands.empty else [],
                list(attribution_rows(traj.user_id, i, scores, k)),
            ))
        return out

    def attribute(self, targets: Sequence, k=5) -> list:
        chunks = [targets[s : s + self.batch_size] for s in range(0, len(targets), self.batch_size)]
        if self.threads == 1 or len(chunks) < 2:
            parts = [self._chunk(c, k) for c in chunks]
        else:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(lambda c: self._chunk(c, k), chunks))
        return [a for p in parts for a in p]


class CentroidMethod:
    def __init__(self, grid: SpatialGridIndex, threshold_m=200.0):
        self.grid, self.threshold_m = grid, threshold_m

    def attribute(self, targets: Sequence, k=5) -> list:
        catalog = self.grid.catalog
        out = []
        for traj, i in targets:
            stay = traj.stays[i]
            ranking = closest_centroid_topk(stay, self.grid, max(1, len(catalog)), self.threshold_m)
            q = catalog.project(stay.location)
            rows = []
            for rank, pid in enumerate(ranking[:k], start=1):
                x, y = catalog.xy[catalog.row(pid)]
                d = float(np.hypot(x - q.x, y - q.y))
                rows.append([traj.user_id, i, rank, pid, repr(-d), "0.0", "0.0"])
            out.append(Attribution(traj.user_id, i, stay.true_poi, len(ranking),
                                   stay.true_poi in ranking, ranking[:k], rows))
        return out


@dataclass
class EvalReport:
    rows: list  # dicts: method, condition, top1/top3/top5, counts
    config: dict
    seed: int
    version: int = REPORT_VERSION

    def to_dict(self):
        return {"version": self.version, "seed": self.seed, "config": self.config, "rows": self.rows}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')}")
        return cls(d["rows"], d["config"], d["seed"], d["version"])

    def get(self, method, condition):
        for r in self.rows:
            if r["method"] == method and r["condition"] == condition:
                return r
        raise KeyError((method, condition))

    def format_table(self) -> str:
        conds = list(dict.fromkeys(r["condition"] for r in self.rows))
        methods = list(dict.fromkeys(r["method"] for r in self.rows))
        ks = [k for k in DEFAULT_KS]
        head = f"{'Method':<24}" + "".join(
            f"| {c[:26]:^26} " for c in conds)
        sub = f"{'':<24}" + "".join("| " + " ".join(f"{'Top-' + str(k):>8}" for k in ks) + " " for _ in conds)
        lines = [head, sub, "-" * len(sub)]
        for m in methods:
            cells = []
            for c in conds:
                try:
                    r = self.get(m, c)
                    cells.append("| " + " ".join(f"{r[f'top{k}']:>8.4f}" for k in ks) + " ")
                except KeyError:
                    cells.append("| " + " ".join(f"{'-':>8}" for _ in ks) + " ")
            lines.append(f"{m:<24}" + "".join(cells))
        return "\n".join(lines)


def summarize(attributions: Sequence[Attribution], ks=DEFAULT_KS) -> dict:
    preds = [a.ranking for a in attributions]
    truths = [a.truth for a in attributions]
    out = {f"top{k}": top_k_accuracy(preds, truths, k) for k in ks}
    out["evaluated"] = len(attributions)
    out["skipped_no_candidates"] = sum(a.n_candidates == 0 for a in attributions)
    out["truth_outside_radius"] = sum(a.n_candidates > 0 and not a.truth_in_candidates for a in attributions)
    return out


def condition_seed(seed, i):
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def run_experiment(test_trajectories: Sequence[Trajectory], methods: dict, conditions: dict,
                   seed: int, ks=DEFAULT_KS, config: Optional[dict] = None, keep=None) -> EvalReport:
    """Evaluate every method under every noise condition.

    ``conditions`` maps a label to a tuple of sigma choices (degrees); an
    empty tuple or ``(0,)`` leaves coordinates untouched. Stays whose truth
    falls outside the candidate radius count as misses and are tallied.
    """
    rows = []
    for ci, (label, sigmas) in enumerate(conditions.items()):
        sigmas = tuple(sigmas) or (0.0,)
        trajs = test_trajectories
        if any(s > 0 for s in sigmas):
            trajs = noise_trajectories(test_trajectories, NoiseConfig(sigmas, condition_seed(seed, ci)))
        targets = labeled_targets(trajs)
        for name, method in methods.items():
            atts = method.attribute(targets, max(ks))
            if keep is not None:
                keep[(name, label)] = atts
            row = {"method": name, "condition": label, "sigmas": list(map(float, sigmas))}
            row.update(summarize(atts, ks))
            rows.append(row)
    cfg = dict(config or {})
    cfg.setdefault("conditions", {k: list(map(float, v)) for k, v in conditions.items()})
    cfg.setdefault("methods", list(methods))
    return EvalReport(rows, cfg, int(seed))
