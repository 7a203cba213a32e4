"""Command-line entry point: ``poiattr <subcommand> [--flags]``.

Exit codes: 0 success, 1 validation error (including bad flags), 2 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import metadata

from .binfmt import FormatError
from .evaluation import REPORT_VERSION, CentroidMethod, ModelMethod, labeled_targets, run_experiment
from .ingest import (
    IngestError,
    NoiseConfig,
    SpatialGridIndex,
    SyntheticConfig,
    load_pois,
    load_stays,
    noise_trajectories,
    time_origin,
    write_synthetic,
)
from .kde import BANK_VERSION, DEFAULT_FLOOR, DEFAULT_SUBSAMPLE_CAP, fit_kde_bank, load_bank, save_bank
from .model import AttributionModel, ModelConfig
from .scorer import write_attributions
from .train import (
    CHECKPOINT_VERSION,
    TrainConfig,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    toy_instance,
    train,
)

log = logging.getLogger("poiattr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _version_text():
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return (f"poiattr {pkg}\ncheckpoint format PFMR v{CHECKPOINT_VERSION}\n"
            f"KDE bank format PKDE v{BANK_VERSION}\nevaluation report v{REPORT_VERSION}")


def _sigmas(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"sigmas must be non-negative, got {text!r}")
    return vals


def _read_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _merge(config, args, names):
    """Config values overridden by the flags that were given."""
    out = dict(config)
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    return out


def _require_seed(args):
    if args.seed is None:
        raise ValueError(f"{args.command} is randomized; pass --seed")


# ---------------------------------------------------------------------------
# subcommands


SYNTH_FLAGS = ("n_users", "n_pois", "n_categories", "days", "extent_m")


def cmd_gen_synthetic(args):
    _require_seed(args)
    raw = _merge(_read_config(args.config), args, SYNTH_FLAGS)
    raw["rng_seed"] = args.seed
    split = raw.pop("split_ratio", 0.8) if args.split_ratio is None else args.split_ratio
    cfg = SyntheticConfig.from_dict(raw)
    _, _, manifest = write_synthetic(args.out, cfg, split)
    print(json.dumps(manifest["counts"], sort_keys=True))


def cmd_fit_kde(args):
    catalog = load_pois(args.pois)
    trajs = load_stays(args.stays)
    if args.noise_sigma is not None:
        _require_seed(args)
        trajs = noise_trajectories(trajs, NoiseConfig(args.noise_sigma, args.seed))
    stays = [s for t in trajs for s in t.stays]
    cap = args.subsample_cap
    if args.seed is None:
        counts = {}
        for s in stays:
            if s.true_poi in catalog:
                for c in catalog.category_indices(s.true_poi):
                    counts[c] = counts.get(c, 0) + 1
        if counts and max(counts.values()) > cap:
            raise ValueError("a category exceeds --subsample-cap, so fitting is randomized; pass --seed")
    bank = fit_kde_bank(stays, catalog, cap, args.seed or 0, args.floor, args.utc_offset_s, args.cyclic_hour)
    save_bank(bank, args.out)
    sizes = {catalog.vocab.name(c): k.m for c, k in sorted(bank.kdes.items())}
    print(json.dumps({"kde_points": sizes, "empty_categories": [catalog.vocab.name(c) for c in bank.empty_categories]}))


MODEL_FLAGS = ("layers", "heads", "d_ff", "dropout", "max_seq_len")
TRAIN_FLAGS = ("epochs", "batch_size", "learning_rate", "weight_decay", "jitter_sigma_deg",
               "attention", "radius_m", "max_candidates")


def cmd_train(args):
    _require_seed(args)
    config = _read_config(args.config)
    model_cfg = ModelConfig.from_dict({**_merge(config, args, MODEL_FLAGS), "seed": args.seed})
    raw = _merge(config, args, TRAIN_FLAGS)
    raw["seed"] = args.seed
    for flag, key in (("no_kde", "use_kde"), ("no_prior", "use_prior")):
        if getattr(args, flag):
            raw[key] = False
    if args.mean_categories:
        raw["mean_categories"] = True
    train_cfg = TrainConfig.from_dict(raw)
    catalog = load_pois(args.pois)
    bank = load_bank(args.bank, catalog.vocab)
    trajs = load_stays(args.stays)
    t0 = time_origin([s for t in trajs for s in t.stays])
    if args.noise_sigma is not None:
        trajs = noise_trajectories(trajs, NoiseConfig(args.noise_sigma, args.seed))
    model = AttributionModel(catalog.vocab, model_cfg)
    if train_cfg.use_prior:
        _, metrics = train(model, bank, trajs, catalog, train_cfg, metrics_path=args.metrics)
    else:
        metrics = []  # nothing trainable when only the KDE scores
    save_checkpoint(model, args.out, train_cfg.to_dict(), str(args.bank), {"t0": t0})
    print(json.dumps(metrics[-1] if metrics else {"epochs": 0}, sort_keys=True))


def _load_run(args):
    catalog = load_pois(args.pois)
    model, meta = load_checkpoint(args.checkpoint, catalog.vocab)
    bank = load_bank(args.bank, catalog.vocab)
    t0 = meta.get("extra", {}).get("t0")
    trajs = load_stays(args.stays, t0=t0)
    tcfg = TrainConfig.from_dict(meta.get("train_config", {}))
    radius = args.radius_m if args.radius_m is not None else tcfg.radius_m
    K = args.max_candidates if args.max_candidates is not None else tcfg.max_candidates
    return catalog, model, t0, bank, trajs, tcfg, radius, K


def _model_method(model, bank, catalog, grid, tcfg, radius, K, threads, **over):
    kw = dict(use_kde=tcfg.use_kde, use_prior=tcfg.use_prior, mean_categories=tcfg.mean_categories)
    kw.update(over)
    return ModelMethod(model, bank, catalog, grid, radius, K, threads=threads, **kw)


def cmd_attribute(args):
    catalog, model, _, bank, trajs, tcfg, radius, K = _load_run(args)
    grid = SpatialGridIndex(catalog, radius)
    targets = [(t, i) for t in trajs for i in range(len(t))]
    method = _model_method(model, bank, catalog, grid, tcfg, radius, K, args.threads)
    atts = method.attribute(targets, args.k)
    write_attributions(args.out, [r for a in atts for r in a.rows])
    print(json.dumps({"stays": len(atts), "without_candidates": sum(a.n_candidates == 0 for a in atts)}))


def cmd_evaluate(args):
    _require_seed(args)
    catalog, model, t0, bank, trajs, tcfg, radius, K = _load_run(args)
    grid = SpatialGridIndex(catalog, radius)
    methods = {args.name: _model_method(model, bank, catalog, grid, tcfg, radius, K, args.threads)}
    for item in args.compare or ():
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ValueError(f"--compare expects NAME=PATH, got {item!r}")
        other, ometa = load_checkpoint(path, catalog.vocab)
        if ometa.get("extra", {}).get("t0") != t0:
            log.warning("checkpoint %s was trained with a different time origin", path)
        ocfg = TrainConfig.from_dict(ometa.get("train_config", {}))
        methods[name] = _model_method(other, bank, catalog, grid, ocfg, radius, K, args.threads)
    if not args.no_baseline:
        methods["closest_centroid"] = CentroidMethod(grid, radius)
    sigma_sets = args.noise_sigma or [(0.0,)]
    conditions = {}
    for sig in sigma_sets:
        label = "clean" if all(s == 0 for s in sig) else "sigma=" + ",".join(f"{s:g}" for s in sig)
        conditions[label] = sig
    config = {"checkpoint": str(args.checkpoint), "bank": str(args.bank), "stays": str(args.stays),
              "radius_m": radius, "max_candidates": K}
    report = run_experiment(trajs, methods, conditions, args.seed, config=config)
    report.to_json(args.out)
    table = report.format_table()
    if args.table:
        with open(args.table, "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    print(table)


def cmd_baseline(args):
    catalog = load_pois(args.pois)
    trajs = load_stays(args.stays)
    grid = SpatialGridIndex(catalog, args.threshold_m)
    targets = [(t, i) for t in trajs for i in range(len(t))]
    atts = CentroidMethod(grid, args.threshold_m).attribute(targets, args.k)
    write_attributions(args.out, [r for a in atts for r in a.rows])
    labeled = labeled_targets(trajs)
    print(json.dumps({"stays": len(atts), "labeled": len(labeled)}))


def cmd_gradcheck(args):
    _require_seed(args)
    model, bank, catalog, examples = toy_instance(args.seed)
    rep = gradient_check(model, bank, examples, catalog, args.sample_frac, args.step, args.seed)
    out = {k: rep[k] for k in ("max_rel_error", "groups", "n_checked", "step")}
    out["worst"] = [{"rel": r, "param": n, "index": list(i), "analytic": a, "numeric": num}
                    for r, n, i, a, num in rep["worst"]]
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    if rep["max_rel_error"] >= args.tolerance:
        raise ValueError(f"gradient check failed: max relative error {rep['max_rel_error']:.3g}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="poiattr", description="Attribute stays to points of interest.")
    p.add_argument("--version", action="store_true", help="print format versions and exit")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    g = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--split-ratio", type=float)
    g.add_argument("--n-users", type=int)
    g.add_argument("--n-pois", type=int)
    g.add_argument("--n-categories", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--extent-m", type=float)

    f = add("fit-kde", cmd_fit_kde, "fit the per-category KDE bank")
    f.add_argument("--pois", required=True)
    f.add_argument("--stays", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--subsample-cap", type=int, default=DEFAULT_SUBSAMPLE_CAP)
    f.add_argument("--floor", type=float, default=DEFAULT_FLOOR)
    f.add_argument("--utc-offset-s", type=float, default=0.0)
    f.add_argument("--cyclic-hour", action="store_true")
    f.add_argument("--noise-sigma", type=_sigmas, help="perturb fitting stays (degrees, comma list)")

    t = add("train", cmd_train, "train the category-prior model")
    t.add_argument("--pois", required=True)
    t.add_argument("--stays", required=True)
    t.add_argument("--bank", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--metrics")
    t.add_argument("--noise-sigma", type=_sigmas, help="perturb training stays (degrees, comma list)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--jitter-sigma-deg", type=float)
    t.add_argument("--attention", choices=["bidirectional", "causal"])
    t.add_argument("--radius-m", type=float)
    t.add_argument("--max-candidates", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--d-ff", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--max-seq-len", type=int)
    t.add_argument("--no-kde", action="store_true")
    t.add_argument("--no-prior", action="store_true")
    t.add_argument("--mean-categories", action="store_true")

    for name, func, help_ in (("attribute", cmd_attribute, "rank candidate POIs for every stay"),
                              ("evaluate", cmd_evaluate, "top-k accuracy under noise conditions")):
        a = add(name, func, help_)
        a.add_argument("--checkpoint", required=True)
        a.add_argument("--bank", required=True)
        a.add_argument("--pois", required=True)
        a.add_argument("--stays", required=True)
        a.add_argument("--out", required=True)
        a.add_argument("--radius-m", type=float)
        a.add_argument("--max-candidates", type=int)
        a.add_argument("--threads", type=int, default=1)
        if name == "attribute":
            a.add_argument("--k", type=int, default=5)
        else:
            a.add_argument("--seed", type=int)
            a.add_argument("--noise-sigma", type=_sigmas, action="append",
                           help="one condition per occurrence; comma list = per-stay choice set")
            a.add_argument("--name", default="model")
            a.add_argument("--compare", action="append", metavar="NAME=PATH")
            a.add_argument("--no-baseline", action="store_true")
            a.add_argument("--table")

    b = add("baseline", cmd_baseline, "closest-centroid attribution")
    b.add_argument("--pois", required=True)
    b.add_argument("--stays", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--threshold-m", type=float, default=200.0)
    b.add_argument("--k", type=int, default=5)

    c = add("gradcheck", cmd_gradcheck, "finite-difference check on a toy instance")
    c.add_argument("--seed", type=int)
    c.add_argument("--sample-frac", type=float, default=0.01)
    c.add_argument("--step", type=float, default=1e-3)
    c.add_argument("--tolerance", type=float, default=1e-3)
    c.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.version:
        print(_version_text())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
    except (OSError, FormatError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
