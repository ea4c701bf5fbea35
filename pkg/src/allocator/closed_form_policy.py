"""Closed-form Heston policies for CRRA and HARA investors, and wealth evolution.

Under constant ``r`` the HARA weight is the CRRA weight scaled by the share of wealth
left after funding the floor, ``Xbar/X`` with ``Xbar = X - xbar e^{-r(T-t)}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import WealthBelowFloor
from .io import write_csv
from .market_model import HestonParams, MarketPath
from .utility import UtilitySpec

COMPONENTS = ("mv", "r_hedge", "h_hedge", "uY_hedge", "uLambda_hedge")


@dataclass(frozen=True)
class PolicyComponents:
    """Risky-asset weights split into mean-variance and hedging parts.

    ``se`` maps component names (plus ``theta_hedge`` and ``total``) to Monte Carlo
    standard errors; it is ``None`` for closed-form results.  Weights are arrays of
    length ``m`` for multi-asset models and floats otherwise.
    """

    mv: float
    r_hedge: float
    h_hedge: float
    uY_hedge: float
    uLambda_hedge: float
    total: float = field(init=False)
    se: dict | None = None
    lambda_star: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "total", self.mv + self.r_hedge + self.h_hedge
                           + self.uY_hedge + self.uLambda_hedge)

    @property
    def theta_hedge(self):
        return self.h_hedge + self.uY_hedge + self.uLambda_hedge

    def scaled(self, factor) -> "PolicyComponents":
        return PolicyComponents(*(factor * getattr(self, c) for c in COMPONENTS),
                                se=None if self.se is None else {k: abs(factor) * v for k, v in self.se.items()},
                                lambda_star=self.lambda_star)

    def as_dict(self) -> dict:
        out = {c: getattr(self, c) for c in COMPONENTS}
        out["theta_hedge"] = self.theta_hedge
        out["total"] = self.total
        if self.se is not None:
            out["se"] = dict(self.se)
        if self.lambda_star is not None:
            out["lambda_star"] = self.lambda_star
        return out


@dataclass(frozen=True)
class HestonPolicyConstants:
    kappa_tilde: float
    delta: float
    varsigma: float


def heston_constants(params: HestonParams, gamma: float) -> HestonPolicyConstants:
    if not gamma > 1:
        raise ValueError(f"closed-form Heston policy needs gamma > 1 (got {gamma})")
    k, sv, lam, rho = params.kappa, params.sigma_v, params.lambda_mpr, params.rho_lev
    kt = k - (1.0 - gamma) * lam * rho * sv / gamma
    delta = -(1.0 - gamma) * lam ** 2 / (2.0 * gamma ** 2)
    vs = math.sqrt(kt ** 2 + 2.0 * delta * sv ** 2 * (rho ** 2 + gamma * (1.0 - rho ** 2)))
    return HestonPolicyConstants(kt, delta, vs)


def phi(tau, consts: HestonPolicyConstants):
    """``2(e^{s tau}-1) / ((kt+s)(e^{s tau}-1) + 2s)``, evaluated through ``e^{-s tau}``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be >= 0")
    kt, vs = consts.kappa_tilde, consts.varsigma
    e = np.exp(-vs * tau)
    one_minus = -np.expm1(-vs * tau)
    val = 2.0 * one_minus / ((kt + vs) * one_minus + 2.0 * vs * e)
    return float(val) if val.ndim == 0 else val


def crra_hedge(t, T, params: HestonParams, gamma: float):
    c = heston_constants(params, gamma)
    return -params.rho_lev * params.sigma_v * c.delta * phi(np.asarray(T, float) - t, c)


def crra_weight(t, T, params: HestonParams, gamma: float):
    """Total CRRA weight; broadcasts over ``t``."""
    return params.lambda_mpr / gamma + crra_hedge(t, T, params, gamma)


def crra_policy(t, T, params: HestonParams, gamma: float) -> PolicyComponents:
    """CRRA weight: ``lambda/gamma`` plus the price-of-risk hedge ``-rho sigma delta phi(T-t)``.

    The closed form does not separate the market and investor-specific channels of the
    hedge, so the whole hedge is reported in ``h_hedge`` and ``uY_hedge`` is zero;
    ``theta_hedge`` is the comparable quantity.
    """
    if t > T:
        raise ValueError("t must not exceed T")
    return PolicyComponents(mv=params.lambda_mpr / gamma, r_hedge=0.0,
                            h_hedge=float(crra_hedge(t, T, params, gamma)),
                            uY_hedge=0.0, uLambda_hedge=0.0)


def _integral(rate, t, s, n=2001):
    if callable(rate):
        u = np.linspace(t, s, n)
        return float(np.trapezoid(np.vectorize(rate)(u), u))
    return rate * (s - t)


def bond_price(r, t, s):
    """Zero-coupon bond price ``exp(-int_t^s r)``; ``r`` is a constant or a callable curve."""
    if np.any(np.asarray(s) < np.asarray(t)):
        raise ValueError("maturity must not precede t")
    if callable(r):
        return math.exp(-_integral(r, t, s))
    out = np.exp(-np.asarray(r, float) * (np.asarray(s, float) - t))
    return float(out) if out.ndim == 0 else out


def annuity(r, t, T, n=2001):
    """``int_t^T B_{t,s} ds``."""
    if callable(r):
        s = np.linspace(t, T, n)
        return float(np.trapezoid([bond_price(r, t, u) for u in s], s))
    tau = T - t
    return tau if r == 0 else -math.expm1(-r * tau) / r


def remaining_wealth(X, spec: UtilitySpec, r, t, T):
    """Wealth above the cost of funding both floors, ``X - xbar B_{t,T} - cbar int B``."""
    out = np.asarray(X, dtype=float) - spec.xbar * bond_price(r, t, T)
    if spec.has_consumption and spec.cbar:
        out = out - spec.cbar * annuity(r, t, T)
    return float(out) if out.ndim == 0 else out


def hara_policy(t, X, T, params: HestonParams, spec: UtilitySpec) -> PolicyComponents:
    """HARA weight: every CRRA component scaled by ``Xbar/X``."""
    if spec.w != 0:
        raise ValueError("the Heston closed form covers terminal-wealth utility only (w = 0)")
    xb = remaining_wealth(X, spec, params.r, t, T)
    if not xb > 0:
        raise WealthBelowFloor(f"wealth {X} does not exceed the funded floor ({X - xb})")
    return crra_policy(t, T, params, spec.gamma).scaled(xb / X)


def theta_u_closed_form(t, V, T, params: HestonParams, gamma: float) -> np.ndarray:
    """Investor-specific price of risk ``(0, gamma rho_bar sigma delta phi(T-t) sqrt(V))``."""
    c = heston_constants(params, gamma)
    V = np.asarray(V, dtype=float)
    if np.any(V < 0):
        raise ValueError("V must be >= 0")
    tau = np.asarray(T, dtype=float) - np.asarray(t, dtype=float)
    out = np.zeros(np.broadcast_shapes(V.shape, tau.shape) + (2,))
    out[..., 1] = gamma * params.rho_bar * params.sigma_v * c.delta * phi(tau, c) * np.sqrt(V)
    return out


# ---------------------------------------------------------------------------
# wealth evolution


@dataclass(frozen=True, eq=False)
class WealthPath:
    times: np.ndarray
    X: np.ndarray
    weight: np.ndarray
    xbar_ratio: np.ndarray
    breached: bool

    def to_csv(self, path):
        rows = ((k, self.times[k], self.X[k], self.weight[k], self.xbar_ratio[k])
                for k in range(len(self.times)))
        return write_csv(path, ["step", "time", "X", "weight", "Xbar_ratio"], rows)


def evolve_wealth_batch(params: HestonParams, spec: UtilitySpec, V, dW1, X0, T, dt):
    """Euler wealth recursion under the closed-form HARA policy, batched over paths.

    ``V`` has shape ``batch + (N+1,)`` (non-negative), ``dW1`` ``batch + (N,)``.
    Returns ``(X, xbar_ratio, breached)``.  When ``Xbar`` turns negative it is
    clamped to zero (no risky position) and the path is flagged.
    """
    V = np.asarray(V, dtype=float)
    dW1 = np.asarray(dW1, dtype=float)
    n = dW1.shape[-1]
    batch = dW1.shape[:-1]
    times = np.arange(n + 1) * dt
    pi_c = np.broadcast_to(crra_weight(times, T, params, spec.gamma), (n + 1,))
    floor = spec.xbar * np.exp(-params.r * (T - times))
    if np.any(np.asarray(X0) <= floor[0]):
        raise WealthBelowFloor(f"X0={X0} must exceed the funded floor {floor[0]}")
    lam, r = params.lambda_mpr, params.r
    X = np.empty(batch + (n + 1,))
    x = np.broadcast_to(np.asarray(X0, dtype=float), batch).copy()
    X[..., 0] = x
    breached = np.zeros(batch, dtype=bool)
    for i in range(n):
        xb = x - floor[i]
        breached |= xb < 0
        xb = np.maximum(xb, 0.0)
        vp = V[..., i]
        x = x + r * x * dt + xb * pi_c[i] * (lam * vp * dt + np.sqrt(vp) * dW1[..., i])
        X[..., i + 1] = x
    breached |= X[..., -1] < spec.xbar
    ratio = np.maximum(X - floor, 0.0) / X
    return X, ratio, breached


def evolve_wealth(path: MarketPath, spec: UtilitySpec, X0: float, T: float | None = None) -> WealthPath:
    """Evolve wealth along ``path`` with the policy re-evaluated at every step."""
    if T is None:
        T = path.times[-1]
    if not math.isclose(path.times[-1], T, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError(f"path ends at {path.times[-1]}, horizon is {T}")
    X, ratio, breached = evolve_wealth_batch(path.params, spec, path.V, path.dW1, X0, T, path.dt)
    weight = ratio * crra_weight(path.times, T, path.params, spec.gamma)
    return WealthPath(path.times, X, weight, ratio, bool(breached))
