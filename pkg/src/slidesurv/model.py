"""End-to-end slide survival model: selection, clustering, attention, pooling, experts."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import AttentionPool, ClusterAttention
from .graph import SimilarityFusion, cluster_patches
from .moe import MixtureDensityExperts, SurvivalPrediction, total_loss
from .nn import Module
from .selection import PatchSelector, quantile_threshold, split_patches

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    quantile: float = 0.25
    knn: int = 10
    cluster_size: int = 64
    n_clusters: int | None = None
    heads: int = 8
    experts: int = 2
    components: int = 100
    lr: float = 2e-4
    weight_decay: float = 1e-3
    dropout: float = 0.1
    epochs: int = 20
    folds: int = 5
    seed: int = 0
    selector_hidden: int = 256
    pool_hidden: int = 128
    encoder_hidden: int = 128
    embed_dim: int = 128
    lambda_div: float = 0.01
    lambda_ent: float = 0.01
    time_scale: float | None = None
    dynamic_filtering: bool = True
    cluster_attention: bool = True
    grid_points: int = 100
    ipcw: bool = True

    def __post_init__(self):
        if not 0.0 <= self.quantile < 1.0:
            raise ValueError("quantile must lie in [0, 1)")
        if self.knn < 1 or self.cluster_size < 1 or self.heads < 1 or self.components < 1:
            raise ValueError("knn, cluster_size, heads and components must be positive")
        if self.n_clusters is not None and self.n_clusters < 1:
            raise ValueError("n_clusters must be positive")
        if self.experts != 2:
            raise ValueError("the mixture head uses exactly two experts")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.folds < 2:
            raise ValueError("epochs must be >= 0 and folds >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def default_time_scale(units):
    return 365.0 if str(units).lower().startswith("day") else 1.0


def cluster_seed(seed, slide_id):
    return (zlib.crc32(str(slide_id).encode()) ^ (int(seed) * 2654435761)) & 0xFFFFFFFF


@dataclass
class ForwardInfo:
    selection: object = None
    clustering: object = None
    pool_weights: np.ndarray = None


class SlideSurvivalModel(Module):
    def __init__(self, d, cfg, rng=None, time_scale=1.0):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.d = d
        self.time_scale = float(time_scale)
        self.selector = PatchSelector(d, rng, cfg.selector_hidden)
        self.fusion = SimilarityFusion()
        self.attention = ClusterAttention(d, rng, cfg.heads, cfg.dropout)
        self.pool = AttentionPool(d, rng, cfg.pool_hidden)
        self.head = MixtureDensityExperts(d, rng, cfg.components, cfg.experts,
                                          cfg.encoder_hidden, cfg.embed_dim)

    def embed(self, features, coords, slide_id="", rng=None, info=None):
        """Slide vector z (1, d) from one bag."""
        cfg = self.cfg
        X = ag.Tensor(np.asarray(features, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ValueError(f"bag feature dim {X.shape[1]} does not match model dim {self.d}")
        coords = np.asarray(coords, dtype=np.float64)
        if cfg.dynamic_filtering:
            logits = self.selector(X)
            sel = split_patches(ag.mul(X, logits), logits, quantile_threshold(logits.data, cfg.quantile),
                                cfg.quantile)
            P_sel, P_rem, sel_idx = sel.P_sel, sel.P_rem, sel.sel_idx
        else:
            sel = None
            P_sel, P_rem, sel_idx = X, None, np.arange(X.shape[0])
        if info is not None:
            info.selection = sel
        if cfg.cluster_attention:
            clus = cluster_patches(P_sel.data, coords[sel_idx], self.fusion, cfg.knn, cfg.n_clusters,
                                   cfg.cluster_size, cluster_seed(cfg.seed, slide_id))
            groups = [g for g in clus.groups()]
            clusters = [ag.take_rows(P_sel, g) for g in groups]
            P_final = self.attention(clusters, P_rem, rng)
            if info is not None:
                info.clustering = clus
        else:
            P_final = P_sel if P_rem is None else ag.concat([P_sel, P_rem], axis=0)
        z = self.pool(P_final)
        if info is not None:
            info.pool_weights = self.pool.last_weights
        return z

    def __call__(self, features, coords, slide_id="", rng=None, info=None):
        return self.head(self.embed(features, coords, slide_id, rng, info))

    def loss(self, bag, time, event, rng=None, counter=None):
        out = self(bag.features, bag.coords, bag.slide_id, rng)
        return total_loss(out, time / self.time_scale, event, self.cfg.lambda_div, self.cfg.lambda_ent, counter)

    def predict(self, bag):
        """SurvivalPrediction for one bag (eval mode, model time units)."""
        was = self.training
        self.eval()
        try:
            return self(bag.features, bag.coords, bag.slide_id).prediction()
        finally:
            self.train(was)

    def survival_curves(self, bags, grid):
        """(n, G) SPF for each bag on a grid given in original time units."""
        g = np.asarray(grid, dtype=np.float64) / self.time_scale
        return np.stack([self.predict(b).spf(g) for b in bags])

    # -------------------------------------------------------------- checkpoint

    def save(self, path, extra=None):
        meta = {"version": CHECKPOINT_VERSION, "d": self.d, "time_scale": self.time_scale,
                "config": self.cfg.to_dict(), "extra": extra or {}}
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        cfg = TrainConfig.from_dict(meta["config"])
        model = cls(meta["d"], cfg, time_scale=meta["time_scale"])
        model.load_state_dict(state)
        model.checkpoint_extra = meta.get("extra", {})
        return model


def load_checkpoint_meta(path):
    with np.load(Path(path), allow_pickle=False) as z:
        return json.loads(str(z["__meta__"]))


def as_prediction(obj):
    return obj if isinstance(obj, SurvivalPrediction) else obj.prediction()
