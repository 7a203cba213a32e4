"""End-to-end training: masked sequences, candidate cross-entropy, AdamW,
checkpointing and finite-difference gradient checks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, log_softmax
from .binfmt import FormatError, Reader, VersionMismatchError, Writer
from .domain import CategoryVocab, GeoPoint, Poi, PoiCatalog, Stay, Trajectory
from .encoder import BIDIRECTIONAL
from .encoding import make_sequence_batch
from .ingest import CandidateSet, SpatialGridIndex, build_candidate_set
from .kde import KdeBank, fit_kde_bank
from .model import AttributionModel, ModelConfig
from .scorer import category_weights, combine_terms

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PFMR"
CHECKPOINT_VERSION = 1
_MASKED = -1e30


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    jitter_sigma_deg: float = 1e-4
    seed: int = 0
    attention: str = BIDIRECTIONAL
    use_kde: bool = True
    use_prior: bool = True
    mean_categories: bool = False
    radius_m: float = 200.0
    max_candidates: int = 64

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if not (self.use_kde or self.use_prior):
            raise ValueError("at least one of use_kde/use_prior must be on")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            data = p.data
            if self.wd and data.ndim >= 2:
                data = data - self.lr * self.wd * data
            p.data = data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# loss


@dataclass
class Example:
    """One training target: a trajectory (target possibly jittered), the
    target position, its candidate set, and the truth's slot in that set."""

    trajectory: Trajectory
    index: int
    candidates: CandidateSet
    truth_slot: int

    @property
    def stay(self) -> Stay:
        return self.trajectory.stays[self.index]


def _candidate_arrays(examples: Sequence[Example], catalog: PoiCatalog):
    B = len(examples)
    Kb = max(1, max(len(e.candidates) for e in examples))
    C = catalog.max_categories
    cidx = np.zeros((B, Kb, C), dtype=np.int64)
    cmask = np.zeros((B, Kb, C))
    valid = np.zeros((B, Kb), dtype=bool)
    for b, e in enumerate(examples):
        rows = np.array([catalog.row(p) for p in e.candidates.poi_ids], dtype=np.int64)
        n = len(rows)
        if n:
            cidx[b, :n] = catalog.cat_index[rows]
            cmask[b, :n] = catalog.cat_mask[rows]
            valid[b, :n] = True
    return cidx, cmask, valid


def batch_logits(model: AttributionModel, bank: KdeBank, examples: Sequence[Example],
                 catalog: PoiCatalog, use_kde=True, use_prior=True, mean_categories=False, rng=None):
    """Candidate logits ``(B, K)`` with padding at ``-1e30``; KDE terms enter
    as constants."""
    batch = make_sequence_batch([(e.trajectory, e.index) for e in examples], catalog, model.cfg.max_seq_len)
    cidx, cmask, valid = _candidate_arrays(examples, catalog)
    B = len(examples)
    lp = model.forward_log_prior(batch, rng) if use_prior else None
    prior_terms = lp[np.arange(B)[:, None, None], cidx] if use_prior else None
    if use_kde:
        ld = bank.log_density_matrix([e.stay for e in examples])
        lik_terms = ld[np.arange(B)[:, None, None], cidx]
    else:
        lik_terms = None
    logits, lik, pri = combine_terms(prior_terms, lik_terms, category_weights(cmask, mean_categories),
                                     use_kde, use_prior)
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    return logits + np.where(valid, 0.0, _MASKED), valid


def batch_loss(model, bank, examples, catalog, use_kde=True, use_prior=True, mean_categories=False, rng=None):
    """Mean candidate cross-entropy; also returns logits for diagnostics."""
    logits, valid = batch_logits(model, bank, examples, catalog, use_kde, use_prior, mean_categories, rng)
    ls = log_softmax(logits, axis=-1)
    truth = np.array([e.truth_slot for e in examples])
    picked = ls[np.arange(len(examples)), truth]
    return -picked.mean(), logits.data


def make_example(traj: Trajectory, index: int, grid: SpatialGridIndex, radius_m=200.0,
                 K=64) -> Optional[Example]:
    """Build an example, or ``None`` when the truth is missing from the
    candidate set."""
    stay = traj.stays[index]
    cands = build_candidate_set(stay, grid, radius_m, K)
    if stay.true_poi is None or stay.true_poi not in cands:
        return None
    return Example(traj, index, cands, cands.index(stay.true_poi))


def training_loss(model, bank, trajectory, target_index, candidates: CandidateSet, catalog,
                  use_kde=True, use_prior=True):
    """Cross-entropy of the true POI among ``candidates``; ``None`` (with a
    warning) when the truth is not a candidate."""
    truth = trajectory.stays[target_index].true_poi
    if truth is None or truth not in candidates:
        log.warning("true POI %r not among candidates; example skipped", truth)
        return None
    ex = Example(trajectory, target_index, candidates, candidates.index(truth))
    loss, _ = batch_loss(model, bank, [ex], catalog, use_kde, use_prior)
    return float(loss.data)


def jitter_target(traj: Trajectory, index: int, sigma_deg: float, rng) -> Trajectory:
    if sigma_deg <= 0:
        return traj
    s = traj.stays[index]
    dlat, dlon = rng.normal(0.0, sigma_deg, size=2)
    loc = GeoPoint(min(90.0, max(-90.0, s.location.lat + dlat)),
                   min(180.0, max(-180.0, s.location.lon + dlon)))
    stays = list(traj.stays)
    stays[index] = s.with_location(loc)
    return Trajectory(traj.user_id, stays)


def train(model: AttributionModel, bank: KdeBank, trajectories: Sequence[Trajectory],
          catalog: PoiCatalog, cfg: TrainConfig, grid: SpatialGridIndex = None, metrics_path=None):
    """Train in place; returns ``(model, metrics)`` with one dict per epoch."""
    targets = [(t, i) for t in trajectories for i, s in enumerate(t.stays)
               if s.true_poi is not None and s.true_poi in catalog]
    if not targets:
        raise ValueError("training set has no labeled stays")
    grid = grid or SpatialGridIndex(catalog, cfg.radius_m)
    model.set_attention(cfg.attention)
    opt = AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(targets))
        examples, skipped = [], 0
        for j in order:
            traj, i = targets[j]
            ex = make_example(jitter_target(traj, i, cfg.jitter_sigma_deg, rng), i, grid,
                              cfg.radius_m, cfg.max_candidates)
            if ex is None:
                skipped += 1
            else:
                examples.append(ex)
        if not examples:
            raise ValueError("no training example has its true POI among the candidates")
        tot_loss = tot_raw = 0.0
        hits = 0
        for s in range(0, len(examples), cfg.batch_size):
            chunk = examples[s : s + cfg.batch_size]
            loss, logits = batch_loss(model, bank, chunk, catalog, cfg.use_kde, cfg.use_prior,
                                      cfg.mean_categories, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, batch {s // cfg.batch_size}; "
                    f"max |logit| {np.nanmax(np.abs(logits[logits > _MASKED])):.3g}"
                )
            if loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
            truth = np.array([e.truth_slot for e in chunk])
            tot_loss += value * len(chunk)
            tot_raw += float(-logits[np.arange(len(chunk)), truth].sum())
            hits += int(np.sum(np.argmax(logits, axis=1) == truth))
        rec = {
            "epoch": epoch,
            "mean_loss": tot_loss / len(examples),
            "train_top1": hits / len(examples),
            "mean_raw_nll": tot_raw / len(examples),
            "examples": len(examples),
            "skipped_truth_not_candidate": skipped,
        }
        log.info("epoch %d loss %.4f top1 %.3f", epoch, rec["mean_loss"], rec["train_top1"])
        metrics.append(rec)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return model, metrics


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: AttributionModel, path, train_config: Optional[dict] = None,
                    bank_path: Optional[str] = None, extra: Optional[dict] = None) -> None:
    meta = {
        "model_config": model.cfg.to_dict(),
        "vocab": list(model.vocab.names),
        "train_config": train_config or {},
        "bank_path": bank_path,
        "extra": extra or {},
    }
    w = Writer(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    w.raw(model.vocab.digest())
    w.blob(json.dumps(meta, sort_keys=True).encode("utf-8"))
    params = model.named_parameters()
    w.u32(len(params))
    for name, p in params.items():
        w.blob(name.encode("utf-8"))
        w.u32(p.data.ndim)
        for n in p.data.shape:
            w.u32(n)
        w.array(p.data)
    w.save(path)


def load_checkpoint(path, expected_vocab: Optional[CategoryVocab] = None):
    """Return ``(model, meta)``."""
    r = Reader.open(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    digest = r.raw(32)
    if expected_vocab is not None and expected_vocab.digest() != digest:
        raise VersionMismatchError("checkpoint was trained on a different category vocabulary")
    try:
        meta = json.loads(r.blob().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint config block unreadable: {exc}") from None
    vocab = CategoryVocab(meta["vocab"])
    if vocab.digest() != digest:
        raise FormatError("checkpoint vocab block does not match its hash")
    state = {}
    for _ in range(r.u32()):
        name = r.blob().decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        state[name] = r.array(shape)
    r.done()
    model = AttributionModel(vocab, ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------------------
# gradient checking


def parameter_group(name: str) -> str:
    if name.startswith(("stay.arrival.", "stay.departure.")):
        leaf = name.rsplit(".", 1)[1]
        return {"w": "time2vec_frequency", "b": "time2vec_phase"}.get(leaf, "time2vec_linear")
    if name.startswith("stay.space"):
        return "space2vec_projection"
    if name.startswith("stay.categories"):
        return "category_embedding"
    if ".attn." in name:
        return "attention"
    if name.startswith("encoder"):
        return "feedforward_layernorm"
    if name.startswith("prior"):
        return "prior_head"
    return "other"


def toy_instance(seed=0, n_stays=4, model_cfg: ModelConfig = None):
    """A tiny catalog, one ``n_stays`` trajectory, a fitted bank, a fresh
    model and the corresponding examples (no dropout)."""
    rng = np.random.default_rng(seed)
    origin = GeoPoint(34.05, -118.25)
    names = ["cafe", "gym", "office", "shop"]
    vocab = CategoryVocab(names)
    pois = []
    for i in range(12):
        lat = origin.lat + rng.uniform(-4e-4, 4e-4)
        lon = origin.lon + rng.uniform(-4e-4, 4e-4)
        k = 1 + i % 2
        cats = frozenset(rng.choice(names, size=k, replace=False).tolist())
        pois.append(Poi(f"t{i:02d}", GeoPoint(lat, lon), cats))
    catalog = PoiCatalog(pois, vocab, origin)
    stays, t = [], 1_700_006_400 + 8 * 3600
    for j in range(n_stays):
        p = pois[int(rng.integers(len(pois)))]
        loc = GeoPoint(p.location.lat + rng.normal(0, 5e-5), p.location.lon + rng.normal(0, 5e-5))
        dur = int(rng.integers(1200, 5400))
        stays.append(Stay(loc, t - 1_700_006_400, t - 1_700_006_400 + dur, p.id, t))
        t += dur + int(rng.integers(600, 7200))
    traj = Trajectory("toy", stays)
    bank = fit_kde_bank(stays, catalog)
    cfg = model_cfg or ModelConfig(seed=seed, dropout=0.0)
    model = AttributionModel(vocab, cfg)
    grid = SpatialGridIndex(catalog, 200.0)
    examples = [make_example(traj, i, grid, 200.0, 64) for i in range(n_stays)]
    return model, bank, catalog, [e for e in examples if e is not None]


def gradient_check(model, bank, examples, catalog, sample_frac=0.01, step=1e-3, seed=0,
                   use_kde=True, use_prior=True, denom_floor=1e-8):
    """Compare backprop gradients to central differences on a random sample
    of parameter entries (at least one per tensor). Dropout is off."""
    params = model.named_parameters()

    def loss_value():
        return float(batch_loss(model, bank, examples, catalog, use_kde, use_prior)[0].data)

    model.zero_grad()
    loss, _ = batch_loss(model, bank, examples, catalog, use_kde, use_prior)
    loss.backward()
    rng = np.random.default_rng(seed)
    groups, worst = {}, []
    n_checked = 0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        n = max(1, int(round(sample_frac * p.data.size)))
        picks = rng.choice(p.data.size, size=n, replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + step
            up = loss_value()
            p.data[idx] = orig - step
            down = loss_value()
            p.data[idx] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            g = parameter_group(name)
            groups[g] = max(groups.get(g, 0.0), rel)
            worst.append((rel, name, tuple(int(i) for i in idx), a, numeric))
            n_checked += 1
    model.zero_grad()
    worst.sort(reverse=True)
    return {
        "max_rel_error": max(groups.values()),
        "groups": groups,
        "n_checked": n_checked,
        "step": step,
        "worst": worst[:5],
    }
