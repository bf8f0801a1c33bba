"""Censoring-aware evaluation: concordance, Brier/IBS, Kaplan-Meier and log-rank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2


@dataclass
class CohortPredictions:
    """Per-patient survival curves on a shared, strictly increasing time grid."""

    grid: np.ndarray
    spf: np.ndarray  # (n, G)
    times: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.spf = np.atleast_2d(np.asarray(self.spf, dtype=np.float64))
        self.times = np.asarray(self.times, dtype=np.float64)
        self.events = np.asarray(self.events).astype(bool)
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if self.spf.shape != (self.times.size, self.grid.size):
            raise ValueError(f"spf shape {self.spf.shape} does not match cohort/grid")

    def spf_at(self, t):
        """(n, len(t)) survival of every patient at times t, linear between grid points."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return np.stack([np.interp(t, self.grid, row) for row in self.spf])

    def subset(self, idx):
        return CohortPredictions(self.grid, self.spf[idx], self.times[idx], self.events[idx])


def concordance_index(risks, times, events):
    """Harrell's C: pairs with t_i < t_j and an event at t_i; higher risk should die first."""
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    comparable = e[:, None] & (t[:, None] < t[None, :])
    n = comparable.sum()
    if n == 0:
        raise ValueError("no comparable pairs")
    diff = r[:, None] - r[None, :]
    score = (diff > 0) + 0.5 * (diff == 0)
    return float(score[comparable].sum() / n)


def time_dependent_concordance(preds, tau=None):
    """Antolini-style concordance read off the survival curves.

    A pair (i, j) with t_i < t_j <= tau and an event at t_i is concordant when
    S_i(t_i) < S_j(t_i); equal survival counts one half.
    """
    t, e = preds.times, preds.events
    tau = t.max() if tau is None else tau
    S = preds.spf_at(t)  # S[j, i] = S_j(t_i)
    own = np.diag(S)
    comparable = e[:, None] & (t[:, None] < t[None, :]) & (t[None, :] <= tau)
    n = comparable.sum()
    if n == 0:
        raise ValueError("no comparable pairs below tau")
    other = S.T  # other[i, j] = S_j(t_i)
    score = (own[:, None] < other) + 0.5 * (own[:, None] == other)
    return float(score[comparable].sum() / n)


@dataclass
class KMCurve:
    times: np.ndarray
    surv: np.ndarray
    at_risk: np.ndarray = None
    n_events: np.ndarray = None

    def __call__(self, t):
        """Right-continuous S(t)."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate([[1.0], self.surv])[idx]

    def left(self, t):
        """S(t-), the value just before t."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left")
        return np.concatenate([[1.0], self.surv])[idx]


def kaplan_meier(times, events):
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if t.size == 0:
        raise ValueError("empty cohort")
    u = np.unique(t[e])
    at_risk = np.array([(t >= x).sum() for x in u], dtype=np.int64)
    d = np.array([((t == x) & e).sum() for x in u], dtype=np.int64)
    surv = np.cumprod(1.0 - d / at_risk) if u.size else np.zeros(0)
    return KMCurve(u, surv, at_risk, d)


def censoring_km(times, events):
    """Kaplan-Meier estimate of the censoring survival G(t)."""
    return kaplan_meier(times, ~np.asarray(events).astype(bool))


@dataclass
class BrierResult:
    score: float
    excluded: int


def brier_score(preds, t, ipcw=True, return_detail=False):
    """Brier score at time t, inverse-probability-of-censoring weighted by default.

    Patients who died by t contribute S_i(t)^2 / G(t_i-), those still at risk
    (1 - S_i(t))^2 / G(t); censored-before-t patients contribute nothing.
    Terms whose censoring weight is zero are dropped and counted.
    """
    T, E = preds.times, preds.events
    s = preds.spf_at([t])[:, 0]
    died = (T <= t) & E
    alive = T > t
    excluded = 0
    if ipcw:
        G = censoring_km(T, E)
        g_i = G.left(T)
        g_t = float(G(t))
        w = np.zeros_like(T)
        ok_d = died & (g_i > 0)
        w[ok_d] = 1.0 / g_i[ok_d]
        if g_t > 0:
            w[alive] = 1.0 / g_t
        else:
            excluded += int(alive.sum())
        excluded += int((died & ~(g_i > 0)).sum())
        total = (w * np.where(died, s ** 2, 0.0)).sum() + (w * np.where(alive, (1.0 - s) ** 2, 0.0)).sum()
        score = float(total / T.size)
    else:
        known = died | alive
        if not known.any():
            raise ValueError(f"no patient has a known status at t={t}")
        sq = np.where(died, s ** 2, (1.0 - s) ** 2)
        score = float(sq[known].mean())
        excluded = int((~known).sum())
    return BrierResult(score, excluded) if return_detail else score


def integrated_brier_score(preds, tau=None, ipcw=True):
    """Trapezoidal integral of the Brier score over grid points up to tau,
    divided by the length of the integration span."""
    tau = float(np.quantile(preds.times, 0.9)) if tau is None else float(tau)
    pts = preds.grid[preds.grid <= tau]
    if pts.size < 2:
        raise ValueError("need at least two grid points below tau")
    bs = np.array([brier_score(preds, x, ipcw) for x in pts])
    return float(np.trapezoid(bs, pts) / (pts[-1] - pts[0]))


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    observed_a: float
    expected_a: float


def log_rank(times_a, events_a, times_b, events_b):
    """Two-group log-rank chi-square test (1 dof)."""
    ta, tb = np.asarray(times_a, float), np.asarray(times_b, float)
    ea, eb = np.asarray(events_a).astype(bool), np.asarray(events_b).astype(bool)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be nonempty")
    u = np.unique(np.concatenate([ta[ea], tb[eb]]))
    obs = exp_ = var = 0.0
    for x in u:
        na, nb = (ta >= x).sum(), (tb >= x).sum()
        da, db = ((ta == x) & ea).sum(), ((tb == x) & eb).sum()
        n, d = na + nb, da + db
        obs += da
        exp_ += d * na / n
        if n > 1:
            var += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1)
    if var <= 0:
        return LogRankResult(0.0, 1.0, float(obs), float(exp_))
    stat = (obs - exp_) ** 2 / var
    return LogRankResult(float(stat), float(chi2.sf(stat, 1)), float(obs), float(exp_))


def risk_scores(preds):
    """1 - S(t) at the median grid time."""
    t_med = float(np.median(preds.grid))
    return 1.0 - preds.spf_at([t_med])[:, 0]


def stratify_by_median_risk(preds):
    """Indices of (high, low) risk groups; risks equal to the median go low."""
    if preds.times.size < 2:
        raise ValueError("need at least two patients to stratify")
    r = risk_scores(preds)
    high = r > np.median(r)
    return np.flatnonzero(high), np.flatnonzero(~high)


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "values": [float(x) for x in v]}
