"""Toy slide and finite-difference sweep over every parameter group of the full model."""

import numpy as np

from slidesurv import autograd as ag
from slidesurv.data import SlideBag
from slidesurv.model import SlideSurvivalModel, TrainConfig

from _gradcheck import directional_grad, numeric_grad, rel_err


def toy_model(seed=0):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(components=3, n_clusters=2, heads=8, selector_hidden=32, pool_hidden=16,
                      encoder_hidden=16, embed_dim=16, seed=seed)
    model = SlideSurvivalModel(16, cfg, rng, time_scale=1.0)
    model.head.init_anchors(np.array([0.2, 5.0]))
    # move off the symmetric initial point so every term carries signal
    model.head.w_mu.data += rng.normal(0, 0.1, size=model.head.w_mu.shape)
    model.head.lam_b.data += rng.normal(0, 0.3, size=model.head.lam_b.shape)
    for norm in (model.attention.intra.norm, model.attention.inter.norm):
        norm.gamma.data += rng.normal(0, 0.1, size=norm.gamma.shape)
        norm.beta.data += rng.normal(0, 0.1, size=norm.beta.shape)
    bag = SlideBag("toy", rng.normal(size=(10, 16)), rng.uniform(0, 2000, size=(10, 2)))
    model.eval()
    return model, bag


def gradient_check(seed=0, time=1.3, event=1, coords_per_group=4, directions=2, step=1e-6):
    """Largest relative error per parameter group between backprop and central differences."""
    model, bag = toy_model(seed)
    rng = np.random.default_rng(seed + 1000)
    f = lambda: model.loss(bag, time, event).item()
    named = list(model.named_parameters())
    analytic = ag.grad(model.loss(bag, time, event), [p for _, p in named])
    worst = {}
    for (name, p), g in zip(named, analytic):
        g = np.asarray(g).reshape(-1)
        idx = rng.choice(p.data.size, size=min(coords_per_group, p.data.size), replace=False)
        errs = [rel_err(g[i], v, floor=1e-6) for i, v in numeric_grad(f, p, step, idx).items()]
        for _ in range(directions):
            u = rng.normal(size=p.shape)
            u /= np.linalg.norm(u)
            errs.append(rel_err(float(g @ u.reshape(-1)), directional_grad(f, p, u, step), floor=1e-6))
        worst[name] = max(errs)
    return worst
