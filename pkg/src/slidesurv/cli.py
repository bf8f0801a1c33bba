"""Command-line entry points: synth, train, eval, predict, export-curves.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DataError, SynthConfig, content_hash, generate_synthetic_cohort, load_cohort,
                   load_slide, write_cohort)
from .metrics import (CohortPredictions, brier_score, kaplan_meier, log_rank, risk_scores,
                      stratify_by_median_risk)
from .model import SlideSurvivalModel, TrainConfig
from .plotting import plot_km, plot_losses, plot_survival_curves
from .train import cross_validate, evaluate, summarize_folds

log = logging.getLogger("slidesurv")

EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(Exception):
    pass


def provenance(cfg_dict, seed, input_hash, **extra):
    out = {"tool": f"slidesurv {__version__}", "config": cfg_dict, "seed": seed, "input_sha256": input_hash}
    out.update(extra)
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows, prov):
    with open(path, "w", newline="") as fh:
        fh.write("# provenance: " + json.dumps(prov, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- argument parsing

def add_run_config(p):
    d = TrainConfig()
    g = p.add_argument_group("model / training")
    g.add_argument("--quantile", type=float, default=d.quantile)
    g.add_argument("--knn", type=int, default=d.knn)
    g.add_argument("--cluster-size", type=int, default=d.cluster_size)
    g.add_argument("--clusters", type=int, default=None, help="fixed cluster count (overrides --cluster-size)")
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--experts", type=int, default=d.experts)
    g.add_argument("--components", type=int, default=d.components, help="GMM components per expert")
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--dropout", type=float, default=d.dropout)
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--folds", type=int, default=d.folds)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--lambda-div", type=float, default=d.lambda_div)
    g.add_argument("--lambda-ent", type=float, default=d.lambda_ent)
    g.add_argument("--time-scale", type=float, default=None,
                   help="divide label times by this (default 365 for days, else 1)")
    g.add_argument("--no-dynamic-filtering", action="store_true")
    g.add_argument("--no-cluster-attention", action="store_true")
    g.add_argument("--unweighted-brier", action="store_true", help="disable IPCW in the Brier score")
    g.add_argument("--grid-points", type=int, default=d.grid_points)


def config_from_args(a):
    try:
        return TrainConfig(quantile=a.quantile, knn=a.knn, cluster_size=a.cluster_size, n_clusters=a.clusters,
                           heads=a.heads, experts=a.experts, components=a.components, lr=a.lr,
                           weight_decay=a.weight_decay, dropout=a.dropout, epochs=a.epochs, folds=a.folds,
                           seed=a.seed, lambda_div=a.lambda_div, lambda_ent=a.lambda_ent,
                           time_scale=a.time_scale, dynamic_filtering=not a.no_dynamic_filtering,
                           cluster_attention=not a.no_cluster_attention, ipcw=not a.unweighted_brier,
                           grid_points=a.grid_points)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_parser():
    p = argparse.ArgumentParser(prog="slidesurv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic cohort directory")
    d = SynthConfig()
    s.add_argument("--out", required=True)
    s.add_argument("--n-slides", type=int, default=d.n_slides)
    s.add_argument("--patches-min", type=int, default=d.patches[0])
    s.add_argument("--patches-max", type=int, default=d.patches[1])
    s.add_argument("--dim", type=int, default=d.d)
    s.add_argument("--phenotypes", type=int, default=d.n_phenotypes)
    s.add_argument("--beta", type=float, default=d.beta)
    s.add_argument("--censoring", type=float, default=d.censoring)
    s.add_argument("--mean-time", type=float, default=d.mean_time)
    s.add_argument("--seed", type=int, default=d.seed)

    t = sub.add_parser("train", help="k-fold training with per-fold checkpoints and metrics")
    t.add_argument("--data", required=True, help="cohort directory")
    t.add_argument("--labels", default=None, help="label CSV (default <data>/labels.csv)")
    t.add_argument("--units", default=None, help="time unit of the labels (default: file header, else days)")
    t.add_argument("--out", required=True)
    t.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes")
    add_run_config(t)

    e = sub.add_parser("eval", help="metrics, survival curves and KM stratification for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--labels", default=None)
    e.add_argument("--units", default=None, help="time unit of the labels (default: file header, else days)")
    e.add_argument("--split", choices=["val", "train", "all"], default="all",
                   help="slides to evaluate; val/train use the fold stored in the checkpoint")
    e.add_argument("--out", required=True)

    pr = sub.add_parser("predict", help="risk score and median survival time per slide")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True, help="output CSV")

    x = sub.add_parser("export-curves", help="write predicted survival curves as CSV and PNG")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--t-max", type=float, default=None, help="grid end in label units")
    x.add_argument("--grid-points", type=int, default=100)
    return p


# ---------------------------------------------------------------- commands

def cmd_synth(a):
    try:
        cfg = SynthConfig(n_slides=a.n_slides, patches=(a.patches_min, a.patches_max), d=a.dim,
                          n_phenotypes=a.phenotypes, beta=a.beta, censoring=a.censoring,
                          mean_time=a.mean_time, seed=a.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.n_slides < 1 or cfg.patches[0] < 1 or cfg.patches[1] < cfg.patches[0]:
        raise ConfigError("need n_slides >= 1 and 1 <= patches-min <= patches-max")
    cohort = generate_synthetic_cohort(cfg)
    write_cohort(cohort, a.out)
    cfg_dict = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    write_json(Path(a.out) / "synth_config.json", cfg_dict)
    log.info("wrote %d slides to %s (censored %.1f%%)", cfg.n_slides, a.out,
             100.0 * (1.0 - cohort.labels.events.mean()))
    return 0


def cmd_train(a):
    cfg = config_from_args(a)
    bags, labels = load_cohort(a.data, a.labels, a.units)
    if cfg.folds > len(labels):
        raise ConfigError(f"{cfg.folds} folds for {len(labels)} slides")
    d = {b.feature_dim for b in bags.values()}
    if len(d) != 1:
        raise DataError(f"bags have mixed feature dims {sorted(d)}")
    if d.pop() % cfg.heads:
        raise ConfigError("feature dim must be divisible by --heads")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg.to_dict(), cfg.seed, content_hash(a.data, a.labels))
    results = cross_validate(bags, labels, cfg, jobs=a.jobs)
    folds = []
    for r in results:
        fdir = out / f"fold_{r.fold}"
        fdir.mkdir(exist_ok=True)
        r.model.save(fdir / "checkpoint.npz", extra={"fold": r.fold, "train_ids": r.train_ids,
                                                     "val_ids": r.val_ids, "provenance": prov})
        folds.append({"fold": r.fold, "n_train": len(r.train_ids), "n_val": len(r.val_ids),
                      "final_train_loss": r.epoch_losses[-1] if r.epoch_losses else None, **r.metrics})
    report = {"provenance": prov, "folds": folds, "summary": summarize_folds(results)}
    write_json(out / "metrics.json", report)
    write_csv(out / "train_log.csv", ["fold", "epoch", "loss"],
              [[r.fold, i + 1, repr(v)] for r in results for i, v in enumerate(r.epoch_losses)], prov)
    if cfg.epochs > 0:
        plot_losses({r.fold: r.epoch_losses for r in results}, out / "loss.png", prov)
    s = report["summary"]
    print(f"TDC {s['tdc']['mean']:.4f} ± {s['tdc']['std']:.4f}  IBS {s['ibs']['mean']:.4f} ± {s['ibs']['std']:.4f}")
    return 0


def _load_model(path):
    try:
        return SlideSurvivalModel.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc


def _check_dims(model, bags):
    for b in bags:
        if b.feature_dim != model.d:
            raise DataError(f"slide {b.slide_id} has feature dim {b.feature_dim}, checkpoint expects {model.d}")


def _slide_dirs(root):
    root = Path(root)
    base = root / "slides" if (root / "slides").is_dir() else root
    dirs = sorted(p for p in base.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise DataError(f"no slide directories under {base}")
    return dirs


def cmd_eval(a):
    model = _load_model(a.checkpoint)
    bags, labels = load_cohort(a.data, a.labels, a.units)
    extra = getattr(model, "checkpoint_extra", {})
    if a.split != "all":
        ids = extra.get(f"{a.split}_ids")
        if not ids:
            raise ConfigError(f"checkpoint carries no {a.split} split")
        missing = [s for s in ids if s not in bags]
        if missing:
            raise DataError(f"{len(missing)} split slides missing from cohort, e.g. {missing[0]}")
        labels = labels.subset(ids)
    _check_dims(model, [bags[s] for s in labels.slide_ids])
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, preds = evaluate(model, bags, labels, model.cfg.ipcw)
    t_med = float(np.median(preds.grid))
    metrics["brier_at_median_time"] = brier_score(preds, t_med, model.cfg.ipcw)
    high, low = stratify_by_median_risk(preds)
    lr = log_rank(labels.times[high], labels.events[high], labels.times[low], labels.events[low])
    prov = provenance(model.cfg.to_dict(), model.cfg.seed, content_hash(a.data, a.labels),
                      checkpoint=str(a.checkpoint), split=a.split)
    write_json(out / "metrics.json", {
        "provenance": prov, "n": len(labels), "metrics": metrics,
        "stratification": {"high": [labels.slide_ids[i] for i in high], "low": [labels.slide_ids[i] for i in low],
                           "logrank_statistic": lr.statistic, "logrank_p": lr.p_value,
                           "risk_time": t_med}})
    write_csv(out / "curves.csv", ["slide_id", "time", "spf"],
              [[s, repr(float(t)), repr(float(v))] for s, row in zip(labels.slide_ids, preds.spf)
               for t, v in zip(preds.grid, row)], prov)
    km_rows, km_curves = [], {}
    for name, idx in (("high", high), ("low", low)):
        if idx.size == 0:
            continue
        curve = kaplan_meier(labels.times[idx], labels.events[idx])
        km_curves[name] = (curve, labels.times[idx])
        km_rows.append([name, repr(0.0), repr(1.0), int(idx.size), 0])
        km_rows += [[name, repr(float(t)), repr(float(s)), int(n), int(d)]
                    for t, s, n, d in zip(curve.times, curve.surv, curve.at_risk, curve.n_events)]
    write_csv(out / "km.csv", ["group", "time", "survival", "at_risk", "events"], km_rows,
              {**prov, "logrank_statistic": lr.statistic, "logrank_p": lr.p_value})
    plot_km(km_curves, out / "km.png", lr, f"time ({labels.units})", prov)
    plot_survival_curves(preds.grid, preds.spf, out / "curves.png", time_label=f"time ({labels.units})",
                         provenance=prov)
    print(f"TDC {metrics['tdc']:.4f}  IBS {metrics['ibs']:.4f}  log-rank p {lr.p_value:.4g}")
    return 0


def _unlabelled_bags(model, data):
    bags = [load_slide(d) for d in _slide_dirs(data)]
    _check_dims(model, bags)
    return bags


def _default_grid(model, t_max, n):
    t_max = t_max if t_max is not None else 5.0 * model.time_scale
    return np.linspace(t_max / n, t_max, n)


def cmd_predict(a):
    model = _load_model(a.checkpoint)
    bags = _unlabelled_bags(model, a.data)
    grid = _default_grid(model, None, 200)
    spf = model.survival_curves(bags, grid)
    preds = CohortPredictions(grid, spf, np.ones(len(bags)), np.zeros(len(bags)))
    risk = risk_scores(preds)
    rows = []
    for b, row, r in zip(bags, spf, risk):
        below = np.flatnonzero(row <= 0.5)
        median = repr(float(grid[below[0]])) if below.size else ""
        rows.append([b.slide_id, repr(float(r)), median])
    prov = provenance(model.cfg.to_dict(), model.cfg.seed, content_hash(a.data), checkpoint=str(a.checkpoint))
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(a.out, ["slide_id", "risk", "median_survival_time"], rows, prov)
    return 0


def cmd_export_curves(a):
    model = _load_model(a.checkpoint)
    bags = _unlabelled_bags(model, a.data)
    grid = _default_grid(model, a.t_max, a.grid_points)
    spf = model.survival_curves(bags, grid)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(model.cfg.to_dict(), model.cfg.seed, content_hash(a.data), checkpoint=str(a.checkpoint))
    write_csv(out / "curves.csv", ["slide_id", "time", "spf"],
              [[b.slide_id, repr(float(t)), repr(float(v))] for b, row in zip(bags, spf)
               for t, v in zip(grid, row)], prov)
    plot_survival_curves(grid, spf, out / "curves.png", provenance=prov)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "export-curves": cmd_export_curves}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
