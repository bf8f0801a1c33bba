"""Slide feature-bag files, survival labels, synthetic cohorts and k-fold splits.

On-disk layout of a cohort directory::

    <root>/labels.csv              slide_id,time,event  (optional "# units: days" header)
    <root>/truth.csv               synthetic cohorts only
    <root>/slides/<slide_id>/meta.json
    <root>/slides/<slide_id>/features.f32   little-endian float32, row-major n x d
    <root>/slides/<slide_id>/coords.f32     little-endian float32, row-major n x 2
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

F32 = np.dtype("<f4")


class DataError(Exception):
    """Base class for malformed cohort inputs."""


class MissingFileError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class LabelError(DataError):
    pass


@dataclass
class SlideBag:
    slide_id: str
    features: np.ndarray  # (n, d) float32
    coords: np.ndarray  # (n, 2) float32
    patch_size: int = 256
    units: str = "pixels"

    @property
    def n_patches(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]


def write_slide(bag, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(bag.features, dtype=F32)
    coords = np.ascontiguousarray(bag.coords, dtype=F32)
    meta = {"slide_id": bag.slide_id, "n_patches": int(feats.shape[0]),
            "feature_dim": int(feats.shape[1]), "patch_size": int(bag.patch_size), "units": bag.units}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    (d / "features.f32").write_bytes(feats.tobytes())
    (d / "coords.f32").write_bytes(coords.tobytes())


def _read_f32(path, n, cols):
    if not path.is_file():
        raise MissingFileError(f"missing {path}")
    raw = path.read_bytes()
    expected = n * cols * F32.itemsize
    if len(raw) != expected:
        raise SizeMismatchError(f"{path}: {len(raw)} bytes, expected {expected} for {n}x{cols}")
    arr = np.frombuffer(raw, dtype=F32).reshape(n, cols).copy()
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{path}: non-finite values")
    return arr


def load_slide(directory):
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise MissingFileError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        n, dim = int(meta["n_patches"]), int(meta["feature_dim"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"{meta_path}: invalid metadata ({exc})") from exc
    feats = _read_f32(d / "features.f32", n, dim)
    coords = _read_f32(d / "coords.f32", n, 2)
    return SlideBag(str(meta["slide_id"]), feats, coords,
                    int(meta.get("patch_size", 256)), meta.get("units", "pixels"))


@dataclass
class Labels:
    slide_ids: list
    times: np.ndarray
    events: np.ndarray
    units: str = "days"

    def __len__(self):
        return len(self.slide_ids)

    def index(self):
        return {s: i for i, s in enumerate(self.slide_ids)}

    def subset(self, ids):
        idx = self.index()
        rows = [idx[s] for s in ids]
        return Labels(list(ids), self.times[rows], self.events[rows], self.units)


def write_labels(labels, path):
    buf = io.StringIO()
    buf.write(f"# units: {labels.units}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slide_id", "time", "event"])
    for s, t, e in zip(labels.slide_ids, labels.times, labels.events):
        w.writerow([s, repr(float(t)), int(e)])
    Path(path).write_text(buf.getvalue())


def read_labels(path, units=None):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing label file {path}")
    file_units = "days"
    lines = []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            if key.strip() == "units" and val.strip():
                file_units = val.strip()
        elif line.strip():
            lines.append(line)
    rows = list(csv.DictReader(lines))
    if not rows or not {"slide_id", "time", "event"} <= set(rows[0]):
        raise LabelError(f"{path}: expected header slide_id,time,event")
    ids, times, events = [], [], []
    for r in rows:
        try:
            t, e = float(r["time"]), int(r["event"])
        except ValueError as exc:
            raise LabelError(f"{path}: bad row {r}") from exc
        if not (t > 0 and math.isfinite(t)) or e not in (0, 1):
            raise LabelError(f"{path}: invalid time/event in row {r}")
        ids.append(r["slide_id"])
        times.append(t)
        events.append(e)
    if len(set(ids)) != len(ids):
        raise LabelError(f"{path}: duplicate slide ids")
    return Labels(ids, np.array(times), np.array(events, dtype=np.int64), units or file_units)


def load_cohort(root, labels_path=None, units=None):
    """Labels plus the bag of every labelled slide, in label order."""
    root = Path(root)
    labels = read_labels(labels_path or root / "labels.csv", units)
    if len(labels) == 0:
        raise DataError("empty cohort")
    slide_root = root / "slides" if (root / "slides").is_dir() else root
    bags = {}
    for s in labels.slide_ids:
        d = slide_root / s
        if not d.is_dir():
            raise MissingFileError(f"no bag directory for slide {s} under {slide_root}")
        bags[s] = load_slide(d)
    return bags, labels


def content_hash(root, labels_path=None):
    """sha256 over the label file and every slide file, in sorted path order."""
    root = Path(root)
    h = hashlib.sha256()
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in {".json", ".f32", ".csv"})
    if labels_path is not None and Path(labels_path).resolve() not in {f.resolve() for f in files}:
        files.append(Path(labels_path))
    for p in files:
        h.update(str(p.relative_to(root) if p.is_relative_to(root) else p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- synthetic cohorts

PHENOTYPES = ("aggressive", "indolent", "stroma", "immune")


@dataclass
class SynthConfig:
    n_slides: int = 200
    patches: tuple = (60, 140)
    d: int = 32
    n_phenotypes: int = 4
    beta: float = 2.0
    censoring: float = 0.3
    mean_time: float = 1000.0
    # Beta(a, a) law of the aggressive fraction; small a pushes slides toward 0 or 1
    aggressive_concentration: float = 0.1
    feature_noise: float = 0.5
    blob_spread: float = 3.0
    patch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.censoring < 1.0:
            raise ValueError("censoring fraction must lie in [0, 1)")
        if self.n_phenotypes < 2:
            raise ValueError("need at least two phenotypes")
        self.patches = tuple(self.patches)


@dataclass
class SynthCohort:
    bags: dict
    labels: Labels
    true_risk: np.ndarray
    base_rate: float
    event_times: np.ndarray
    aggressive_fraction: np.ndarray
    config: SynthConfig = field(default=None)

    def oracle_survival(self, grid):
        """(n, G) true survival exp(-base_rate * exp(risk) * t)."""
        rate = self.base_rate * np.exp(self.true_risk)
        return np.exp(-rate[:, None] * np.asarray(grid)[None, :])


def generate_synthetic_cohort(cfg):
    """Slides made of phenotype patches placed in spatial blobs, with exponential
    event times whose log-rate is beta times the aggressive-patch fraction."""
    rng = np.random.default_rng(cfg.seed)
    P = cfg.n_phenotypes
    prototypes = rng.normal(0.0, 1.0, size=(P, cfg.d))
    width = len(str(cfg.n_slides - 1))
    bags, fractions = {}, []
    for i in range(cfg.n_slides):
        sid = f"slide_{i:0{width}d}"
        n = int(rng.integers(cfg.patches[0], cfg.patches[1] + 1))
        frac = float(rng.beta(cfg.aggressive_concentration, cfg.aggressive_concentration))
        rest = rng.dirichlet(np.ones(P - 1))
        probs = np.concatenate([[frac], (1.0 - frac) * rest])
        pheno = rng.choice(P, size=n, p=probs)
        fractions.append(float(np.mean(pheno == 0)))
        centers = rng.uniform(0.0, 40.0, size=(P, 2))
        grid_pos = centers[pheno] + rng.normal(0.0, cfg.blob_spread, size=(n, 2))
        feats = prototypes[pheno] + rng.normal(0.0, cfg.feature_noise, size=(n, cfg.d))
        bags[sid] = SlideBag(sid, feats.astype(F32), (grid_pos * cfg.patch_size).astype(F32), cfg.patch_size)
    fractions = np.array(fractions)
    risk = cfg.beta * fractions
    # unit exponentials scaled by each slide's hazard; the shared base rate is then
    # fitted so the realized mean event time equals the target
    scaled = rng.standard_exponential(risk.size) * np.exp(-risk)
    base_rate = float(scaled.mean() / cfg.mean_time)
    T = scaled / base_rate
    u = rng.uniform(0.0, 1.0, size=T.size)
    m = int(round(cfg.censoring * T.size))
    if m > 0:
        # C = c * u is uniform on [0, c]; c is placed so exactly m slides have C < T
        ratio = np.sort(T / u)[::-1]
        c_max = 0.5 * (ratio[m - 1] + ratio[m]) if m < T.size else 0.5 * ratio[-1]
        C = c_max * u
    else:
        C = np.full(T.size, np.inf)
    observed = np.minimum(T, C)
    events = (T <= C).astype(np.int64)
    labels = Labels(list(bags), observed, events, "days")
    return SynthCohort(bags, labels, risk, base_rate, T, fractions, cfg)


def write_cohort(cohort, root):
    root = Path(root)
    (root / "slides").mkdir(parents=True, exist_ok=True)
    for sid, bag in cohort.bags.items():
        write_slide(bag, root / "slides" / sid)
    write_labels(cohort.labels, root / "labels.csv")
    with open(root / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "true_risk", "aggressive_fraction", "event_time", "base_rate"])
        for sid, r, f, t in zip(cohort.labels.slide_ids, cohort.true_risk, cohort.aggressive_fraction,
                                cohort.event_times):
            w.writerow([sid, repr(float(r)), repr(float(f)), repr(float(t)), repr(cohort.base_rate)])


def read_truth(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {r["slide_id"]: (float(r["true_risk"]), float(r["base_rate"])) for r in rows}


def kfold_splits(slide_ids, k, seed=0):
    """Shuffled k-fold partition; returns [(train_ids, val_ids), ...]."""
    ids = list(slide_ids)
    if k < 2 or k > len(ids):
        raise ValueError(f"need 2 <= k <= {len(ids)} folds, got {k}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(perm, k)
    out = []
    for f in range(k):
        val = sorted(int(i) for i in folds[f])
        val_set = set(val)
        out.append(([ids[i] for i in range(len(ids)) if i not in val_set], [ids[i] for i in val]))
    return out
