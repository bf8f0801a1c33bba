"""Training loop, fold evaluation and k-fold cross-validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import kfold_splits
from .metrics import (CohortPredictions, concordance_index, integrated_brier_score, risk_scores,
                      summarize, time_dependent_concordance)
from .model import SlideSurvivalModel, default_time_scale
from .moe import FloorCounter
from .nn import Adam

log = logging.getLogger(__name__)


def evaluation_grid(times, n_points=100):
    """Uniform grid over the observed range merged with every observed time."""
    t = np.asarray(times, dtype=np.float64)
    lo, hi = t.min(), t.max()
    uniform = np.linspace(lo, hi, n_points) if hi > lo else np.array([lo])
    return np.unique(np.concatenate([uniform, t]))


@dataclass
class FoldResult:
    fold: int
    model: SlideSurvivalModel
    train_ids: list
    val_ids: list
    epoch_losses: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    floored: int = 0


def evaluate(model, bags, labels, ipcw=True, grid=None):
    """Metrics and curves of ``model`` on the slides named in ``labels``."""
    grid = evaluation_grid(labels.times, model.cfg.grid_points) if grid is None else grid
    spf = model.survival_curves([bags[s] for s in labels.slide_ids], grid)
    preds = CohortPredictions(grid, spf, labels.times, labels.events)
    metrics = {"tdc": time_dependent_concordance(preds),
               "ibs": integrated_brier_score(preds, ipcw=ipcw),
               "c_index": concordance_index(risk_scores(preds), labels.times, labels.events)}
    return metrics, preds


def train_model(bags, labels, cfg, d=None, seed=None, on_epoch=None):
    """Fit one model on the labelled slides; one Adam step per slide."""
    seed = cfg.seed if seed is None else seed
    init_seq, drop_seq, order_seq = np.random.SeedSequence(seed).spawn(3)
    d = d if d is not None else next(iter(bags.values())).feature_dim
    scale = cfg.time_scale or default_time_scale(labels.units)
    model = SlideSurvivalModel(d, cfg, np.random.default_rng(init_seq), time_scale=scale)
    model.head.init_anchors(labels.times / scale)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    drop_rng = np.random.default_rng(drop_seq)
    order_rng = np.random.default_rng(order_seq)
    counter = FloorCounter()
    losses = []
    model.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for i in order_rng.permutation(len(labels)):
            bag = bags[labels.slide_ids[i]]
            opt.zero_grad()
            loss = model.loss(bag, float(labels.times[i]), int(labels.events[i]), drop_rng, counter)
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total / len(labels))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    model.eval()
    return model, losses, counter.count


def run_fold(fold, bags, labels, train_ids, val_ids, cfg):
    tr, va = labels.subset(train_ids), labels.subset(val_ids)

    def report(epoch, loss):
        log.info("fold %d epoch %d loss %.6f", fold, epoch + 1, loss)

    model, losses, floored = train_model(bags, tr, cfg, on_epoch=report)
    metrics, _ = evaluate(model, bags, va, cfg.ipcw)
    metrics["floored_loss_terms"] = floored
    return FoldResult(fold, model, list(train_ids), list(val_ids), losses, metrics, floored)


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(bags, labels, cfg, jobs=1):
    """k-fold CV; folds are independent and may run in parallel processes."""
    splits = kfold_splits(labels.slide_ids, cfg.folds, cfg.seed)
    tasks = [(k, bags, labels, tr, va, cfg) for k, (tr, va) in enumerate(splits)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_fold_job, tasks))
    else:
        results = [run_fold(*t) for t in tasks]
    return results


def summarize_folds(results):
    keys = ["tdc", "ibs", "c_index"]
    return {k: summarize([r.metrics[k] for r in results]) for k in keys}
