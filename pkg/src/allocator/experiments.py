"""Batch Monte Carlo studies of the closed-form Heston policies.

Every study simulates market paths chunk by chunk (paths are keyed individually, so
the chunking and the worker count never change a result), evolves wealth under the
HARA and CRRA policies, computes per-path statistics and then averages them across
paths with standard errors ``sd / sqrt(n)``.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .closed_form_policy import crra_weight, evolve_wealth_batch
from .market_model import (CALIBRATED_PARAMS, DT_DAILY, HestonParams, _require_valid,
                           heston_recursion, market_increments, n_steps_for, realized_variance)
from .utility import UtilitySpec

STEPS_PER_YEAR = 252
STEPS_PER_QUARTER = 63
RV_WINDOW = 22
SHUFFLE_MODES = ("none", "good_ahead", "bad_ahead")
STAT_NAMES = ("mean", "sd", "sharpe", "md", "peak_md")
BULL, BEAR = "bull", "bear"


# ---------------------------------------------------------------------------
# performance statistics


@dataclass(frozen=True)
class PerformanceStats:
    """Annualized excess-return statistics of one wealth path.

    ``max_drawdown`` is ``max_n (1 - min_{k<=n} X_k / max_{k<=n} X_k)``, which equals
    one minus the global minimum over the global maximum; ``peak_drawdown`` is the
    usual largest fall from a running peak.
    """

    mean: float
    sd: float
    sharpe: float | None
    max_drawdown: float
    peak_drawdown: float
    n_days: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "sharpe": self.sharpe,
                "max_drawdown": self.max_drawdown, "peak_drawdown": self.peak_drawdown,
                "n_days": self.n_days}


def _batch_stats(X, dt, r):
    """Per-path statistics for wealth paths along the last axis (NaN Sharpe where undefined)."""
    X = np.asarray(X, dtype=float)
    R = np.diff(np.log(X), axis=-1) / dt - r
    mean = R.mean(axis=-1)
    sd = R.std(axis=-1, ddof=1) * math.sqrt(dt)
    # relative threshold: exact risk-free growth leaves only rounding noise in R
    tiny = sd <= 1e-12 * np.maximum(1.0, np.abs(R).max(axis=-1) * math.sqrt(dt))
    sd = np.where(tiny, 0.0, sd)
    with np.errstate(divide="ignore", invalid="ignore"):
        sharpe = np.where(tiny, np.nan, mean / np.where(tiny, 1.0, sd))
    md = 1.0 - X.min(axis=-1) / X.max(axis=-1)
    peak = (1.0 - X / np.maximum.accumulate(X, axis=-1)).max(axis=-1)
    return {"mean": mean, "sd": sd, "sharpe": sharpe, "md": md, "peak_md": peak}


def performance_stats(wealth, dt: float, r: float) -> PerformanceStats:
    X = np.asarray(wealth, dtype=float)
    if X.ndim != 1 or len(X) < 3:
        raise ValueError("need a 1-D wealth series with at least 3 points")
    if np.any(~(X > 0)):
        raise ValueError("wealth must be positive")
    s = _batch_stats(X, dt, r)
    sharpe = float(s["sharpe"])
    return PerformanceStats(float(s["mean"]), float(s["sd"]), None if math.isnan(sharpe) else sharpe,
                            float(s["md"]), float(s["peak_md"]), len(X) - 1)


def performance_stats_batch(X, dt: float, r: float) -> dict:
    """Vectorized :func:`performance_stats`; Sharpe is NaN where undefined."""
    return _batch_stats(X, dt, r)


# ---------------------------------------------------------------------------
# market regimes


@dataclass(frozen=True)
class RegimeSegments:
    """``(start, end, label)`` triples; ``start`` inclusive, ``end`` exclusive."""

    segments: tuple

    def labels(self) -> np.ndarray:
        n = self.segments[-1][1]
        out = np.empty(n, dtype=object)
        for a, b, lab in self.segments:
            out[a:b] = lab
        return out


def classify_regimes(S, drop=0.15, rise=0.20) -> RegimeSegments:
    """Bull/bear state machine on running extrema; the path starts in a bull market.

    A bull market turns bear at the first step where the price is at or below
    ``(1 - drop)`` times its running high; a bear market turns bull when the price
    reaches ``(1 + rise)`` times its running low.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 1 or len(S) == 0:
        raise ValueError("need a non-empty 1-D price series")
    if np.any(~(S > 0)):
        raise ValueError("prices must be positive")
    eps = 1e-12
    segs, start, label = [], 0, BULL
    ext = S[0]
    for i, s in enumerate(S):
        if label == BULL:
            ext = max(ext, s)
            if s / ext <= 1.0 - drop + eps:
                segs.append((start, i, label))
                start, label, ext = i, BEAR, s
        else:
            ext = min(ext, s)
            if s / ext >= 1.0 + rise - eps:
                segs.append((start, i, label))
                start, label, ext = i, BULL, s
    segs.append((start, len(S), label))
    return RegimeSegments(tuple(seg for seg in segs if seg[1] > seg[0]))


# ---------------------------------------------------------------------------
# shuffling yearly blocks


def shuffle_permutation(annual_returns, mode: str, n_lead: int = 3) -> np.ndarray:
    """New-year -> old-year index map: the ``n_lead`` best (or worst) years first, in rank order."""
    ret = np.asarray(annual_returns, dtype=float)
    if mode not in SHUFFLE_MODES:
        raise ValueError(f"unknown shuffle mode {mode!r}")
    if ret.shape[-1] < n_lead + 1:
        raise ValueError(f"shuffling needs at least {n_lead + 1} years (got {ret.shape[-1]})")
    years = np.arange(ret.shape[-1])
    if mode == "none":
        return np.broadcast_to(years, ret.shape).copy()
    key = -ret if mode == "good_ahead" else ret
    lead = np.argsort(key, axis=-1, kind="stable")[..., :n_lead]
    rest_mask = np.ones(ret.shape, dtype=bool)
    np.put_along_axis(rest_mask, lead, False, axis=-1)
    # stable sort on the mask keeps the remaining years in their original order
    rest = np.argsort(~rest_mask, axis=-1, kind="stable")[..., : ret.shape[-1] - n_lead]
    return np.concatenate([lead, rest], axis=-1)


def hysteresis_shuffle(dW1, dW2, annual_returns, steps_per_year: int = STEPS_PER_YEAR,
                       mode: str = "good_ahead"):
    """Reorder yearly blocks of both increment series (1-D or batched over rows)."""
    dW1 = np.asarray(dW1, dtype=float)
    dW2 = np.asarray(dW2, dtype=float)
    if dW1.shape != dW2.shape:
        raise ValueError("increment arrays differ in shape")
    n = dW1.shape[-1]
    if n % steps_per_year:
        raise ValueError(f"{n} steps is not a whole number of years")
    years = n // steps_per_year
    ret = np.asarray(annual_returns, dtype=float)
    if ret.shape[-1] != years:
        raise ValueError(f"expected {years} annual returns, got {ret.shape[-1]}")
    perm = shuffle_permutation(ret, mode)
    shape = dW1.shape[:-1] + (years, steps_per_year)
    idx = perm[..., None]

    def apply(x):
        return np.take_along_axis(x.reshape(shape), idx, axis=-2).reshape(dW1.shape)
    return apply(dW1), apply(dW2)


# ---------------------------------------------------------------------------
# study configuration and path generation


@dataclass(frozen=True)
class StudyConfig:
    params: HestonParams = CALIBRATED_PARAMS
    spec: UtilitySpec = field(default_factory=lambda: UtilitySpec(gamma=4.0, xbar=1.0))
    x0_ratios: tuple = tuple(float(k) for k in range(1, 11))
    r_grid: tuple | None = None
    T_grid: tuple = (10.0,)
    n_paths: int = 10_000
    dt: float = DT_DAILY
    seed: int = 0
    shuffle_mode: str = "none"
    S0: float = 100.0
    V0: float | None = None
    chunk_size: int = 500

    def __post_init__(self):
        bad = []
        if not self.x0_ratios:
            bad.append("x0_ratios must be non-empty")
        if self.r_grid is not None and not self.r_grid:
            bad.append("r_grid must be non-empty")
        if not self.T_grid:
            bad.append("T_grid must be non-empty")
        if self.n_paths < 1:
            bad.append("n_paths must be >= 1")
        if self.shuffle_mode not in SHUFFLE_MODES:
            bad.append(f"shuffle_mode must be one of {SHUFFLE_MODES}")
        if self.chunk_size < 1:
            bad.append("chunk_size must be >= 1")
        if bad:
            raise ValueError("; ".join(bad))
        _require_valid(self.params)
        for T in self.T_grid:
            n_steps_for(T, self.dt)

    @property
    def rates(self) -> tuple:
        return (self.params.r,) if self.r_grid is None else tuple(self.r_grid)

    @property
    def v0(self) -> float:
        return self.params.theta_bar if self.V0 is None else self.V0

    @property
    def steps_per_year(self) -> int:
        return n_steps_for(1.0, self.dt)


def _workers() -> int:
    env = os.environ.get("ALLOCATOR_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ValueError(f"ALLOCATOR_THREADS must be an integer (got {env!r})") from None
    return cap


def _chunks(n, size):
    return [np.arange(a, min(a + size, n)) for a in range(0, n, size)]


def _map_chunks(fn, config: StudyConfig):
    """Apply ``fn(path_ids)`` to every chunk and return the results in chunk order."""
    chunks = _chunks(config.n_paths, config.chunk_size)
    workers = min(_workers(), len(chunks))
    if workers <= 1:
        return [fn(ids) for ids in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _market(config: StudyConfig, ids, T, mode=None):
    """Prices, variances and the (possibly shuffled) first increments for ``ids`` over ``[0, T]``."""
    p, dt = config.params, config.dt
    n = n_steps_for(T, dt)
    dW1, dW2 = market_increments(config.seed, ids, n, dt)
    S, V = heston_recursion(p, config.S0, config.v0, dW1, dW2, dt)
    mode = config.shuffle_mode if mode is None else mode
    if mode != "none":
        spy = config.steps_per_year
        ret = np.diff(np.log(S[:, ::spy]), axis=-1)
        dW1, dW2 = hysteresis_shuffle(dW1, dW2, ret, spy, mode)
        S, V = heston_recursion(p, config.S0, config.v0, dW1, dW2, dt)
    return S, V, dW1


def _study_points(config: StudyConfig):
    pts = []
    for T in config.T_grid:
        for r in config.rates:
            for ratio in config.x0_ratios:
                pts.append((float(ratio), float(r), float(T)))
            pts.append((math.inf, float(r), float(T)))
    return pts


def _per_path(config: StudyConfig, mode=None):
    """Per-path statistics for every grid point: ``{point: {stat: array, "breached": bool array}}``."""
    points = _study_points(config)
    spec = config.spec

    def work(ids):
        out = {}
        for T in config.T_grid:
            S, V, dW1 = _market(config, ids, T, mode)
            for r in config.rates:
                p = replace(config.params, r=r)
                for ratio in list(config.x0_ratios) + [math.inf]:
                    if math.isinf(ratio):
                        X, _, br = evolve_wealth_batch(p, spec.crra(), V, dW1, 1.0, T, config.dt)
                    else:
                        X, _, br = evolve_wealth_batch(p, spec, V, dW1, ratio * spec.xbar, T, config.dt)
                    with np.errstate(divide="ignore", invalid="ignore"):
                        st = _batch_stats(np.where(X > 0, X, np.nan), config.dt, r)
                    bad = br | ~np.all(X > 0, axis=-1)
                    st["breached"] = bad
                    out[(float(ratio), float(r), float(T))] = st
        return out

    parts = _map_chunks(work, config)
    return {pt: {k: np.concatenate([part[pt][k] for part in parts]) for k in parts[0][pt]}
            for pt in points}


def _mean_se(x):
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return None, None
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(x.mean()), se


STUDY_HEADER = ["X0_ratio", "r", "T", "mean", "mean_se", "sd", "sd_se", "sharpe", "sharpe_se",
                "md", "md_se", "breaches", "peak_md", "peak_md_se", "n_used"]


def _aggregate(point, st) -> dict:
    ratio, r, T = point
    keep = ~st["breached"]
    row = {"X0_ratio": ratio, "r": r, "T": T}
    for name in STAT_NAMES:
        m, se = _mean_se(st[name][keep])
        row[name] = m
        row[name + "_se"] = se
    row["breaches"] = int((~keep).sum())
    row["n_used"] = int(keep.sum())
    return row


def run_study(config: StudyConfig) -> list[dict]:
    """Averaged statistics for each ``(X0/xbar, r, T)``; ``X0_ratio = inf`` is the CRRA row.

    Breached paths (the funded floor was crossed) are excluded from the averages and
    counted in ``breaches``.
    """
    per = _per_path(config)
    return [_aggregate(pt, st) for pt, st in per.items()]


def hysteresis_study(config: StudyConfig) -> dict:
    """Statistics under the three yearly orderings on common random numbers.

    ``gaps`` holds paired differences (``good_ahead - none`` and ``none - bad_ahead``)
    of the mean and the volatility with standard errors of the per-path differences.
    """
    per = {mode: _per_path(config, mode) for mode in SHUFFLE_MODES}
    rows = []
    for mode in SHUFFLE_MODES:
        for pt, st in per[mode].items():
            rows.append({"scenario": mode, **_aggregate(pt, st)})
    gaps = []
    for pt in per["none"]:
        keep = ~(per["none"][pt]["breached"] | per["good_ahead"][pt]["breached"]
                 | per["bad_ahead"][pt]["breached"])
        g = {"X0_ratio": pt[0], "r": pt[1], "T": pt[2]}
        for name in ("mean", "sd"):
            for label, a, b in (("good_minus_none", "good_ahead", "none"),
                                ("none_minus_bad", "none", "bad_ahead"),
                                ("good_minus_bad", "good_ahead", "bad_ahead")):
                diff = per[a][pt][name][keep] - per[b][pt][name][keep]
                m, se = _mean_se(diff)
                g[f"{name}_{label}"] = m
                g[f"{name}_{label}_se"] = se
        gaps.append(g)
    return {"rows": rows, "gaps": gaps}


# ---------------------------------------------------------------------------
# policy ratio and cycles


def _pearson_rows(a, b):
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    scale = np.maximum(np.abs(a).max(axis=-1), 1e-300)
    defined = (na > 1e-12 * scale * math.sqrt(a.shape[-1])) & (nb > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(defined, (a * b).sum(axis=-1) / (na * nb), np.nan)


def policy_ratio_study(config: StudyConfig, X0_high: float, X0_low: float, keep_series: bool = False) -> dict:
    """Correlation of the weight ratio ``pi^H/pi^L`` with the price and with realized variance.

    Both investors trade on identical increments.  Uses the first entries of
    ``T_grid`` and of the rate grid; ``X0_high`` and ``X0_low`` are multiples of
    ``xbar``.  The realized-variance correlation uses the steps where the trailing
    22-step window is complete.  Correlations of constant ratios are absent.
    """
    T, r = float(config.T_grid[0]), float(config.rates[0])
    p = replace(config.params, r=r)
    spec = config.spec

    def work(ids):
        S, V, dW1 = _market(config, ids, T)
        if spec.xbar == 0:
            ratio = np.ones_like(S)
            br = np.zeros(len(ids), dtype=bool)
        else:
            _, qh, bh = evolve_wealth_batch(p, spec, V, dW1, X0_high * spec.xbar, T, config.dt)
            _, ql, bl = evolve_wealth_batch(p, spec, V, dW1, X0_low * spec.xbar, T, config.dt)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = qh / ql
            br = bh | bl | ~np.all(np.isfinite(ratio), axis=-1)
        rv = realized_variance(V, RV_WINDOW)
        c_s = _pearson_rows(ratio, S)
        c_rv = _pearson_rows(ratio[:, RV_WINDOW - 1:], rv)
        return c_s, c_rv, br, (ratio if keep_series else None)

    parts = _map_chunks(work, config)
    c_s = np.concatenate([x[0] for x in parts])
    c_rv = np.concatenate([x[1] for x in parts])
    br = np.concatenate([x[2] for x in parts])
    keep = ~br
    ms, ses = _mean_se(c_s[keep])
    mr, ser = _mean_se(c_rv[keep])
    out = {"X0_high": X0_high, "X0_low": X0_low, "T": T, "r": r,
           "corr_S": ms, "corr_S_se": ses, "corr_RV": mr, "corr_RV_se": ser,
           "n_defined_S": int(np.isfinite(c_s[keep]).sum()), "n_defined_RV": int(np.isfinite(c_rv[keep]).sum()),
           "breaches": int(br.sum()), "per_path_corr_S": c_s, "per_path_corr_RV": c_rv}
    if keep_series:
        out["ratio_series"] = np.concatenate([x[3] for x in parts])
    return out


# ---------------------------------------------------------------------------
# scaled policy quantiles

QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)


def quantile_header(quantiles=QUANTILES) -> list[str]:
    return ["quarter"] + [f"q{q:g}" for q in quantiles]


def scaled_policy_quantiles(config: StudyConfig, quantiles=QUANTILES) -> dict:
    """Quantiles across paths of ``pi'_n = pi_n / mean(pi)`` at each quarter start.

    The weight ``pi_n`` is the one held over step ``n`` (``n = 0..N-1``) and its path
    average runs over those ``N`` steps.  Returns ``{X0_ratio: rows}`` with rows
    ``(quarter, q...)``; the CRRA investor appears under ``inf``.  Uses the first
    entries of ``T_grid`` and of the rate grid.
    """
    T, r = float(config.T_grid[0]), float(config.rates[0])
    p = replace(config.params, r=r)
    spec = config.spec
    n = n_steps_for(T, config.dt)
    pi_c = np.broadcast_to(crra_weight(np.arange(n + 1) * config.dt, T, p, spec.gamma), (n + 1,))[:n]
    starts = np.arange(0, n, STEPS_PER_QUARTER)
    ratios = list(config.x0_ratios) + [math.inf]

    def work(ids):
        _, V, dW1 = _market(config, ids, T)
        out = {}
        for ratio in ratios:
            if math.isinf(ratio):
                q = np.ones((len(ids), n + 1))
                br = np.zeros(len(ids), dtype=bool)
            else:
                _, q, br = evolve_wealth_batch(p, spec, V, dW1, ratio * spec.xbar, T, config.dt)
            pi = q[:, :n] * pi_c
            with np.errstate(divide="ignore", invalid="ignore"):
                scaled = pi / pi.mean(axis=1, keepdims=True)
            out[ratio] = (scaled[:, starts], br)
        return out

    parts = _map_chunks(work, config)
    result = {}
    for ratio in ratios:
        vals = np.concatenate([x[ratio][0] for x in parts])
        br = np.concatenate([x[ratio][1] for x in parts])
        vals = vals[~br]
        qs = np.percentile(vals, quantiles, axis=0).T if len(vals) else np.full((len(starts), len(quantiles)), np.nan)
        result[ratio] = [(int(k), *map(float, row)) for k, row in enumerate(qs)]
    return result
