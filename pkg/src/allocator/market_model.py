"""Market dynamics: the Heston stochastic-volatility model and a generic diffusion interface.

Two layers live here.  The first is the concrete Heston price/variance simulator used by
the experiments (full-truncation Euler for the variance, log-Euler for the price).  The
second is :class:`DiffusionModel`, a batched coefficient bundle consumed by the Malliavin
engine.  Every model method takes a scalar time ``t`` and a state array ``y`` of shape
``(P, n)`` and returns arrays with a leading path axis ``P``.

Gradient layout follows ``[grad f]_{ij} = d f_j / d y_i``:

* ``grad_rate``    -> ``(P, n)``
* ``grad_theta_h`` -> ``(P, n, d)``
* ``grad_alpha``   -> ``(P, n, n)``
* ``grad_beta``    -> ``(P, d, n, n)`` with ``[p, j, a, b] = d beta_{b j} / d y_a``
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import InvalidParameters, LengthMismatch
from .io import write_csv

DT_DAILY = 1.0 / 252.0


@dataclass(frozen=True)
class HestonParams:
    """Heston coefficients plus the risk-free rate (all annualized)."""

    kappa: float
    theta_bar: float
    sigma_v: float
    lambda_mpr: float
    rho_lev: float
    r: float

    @property
    def feller_margin(self) -> float:
        return 2.0 * self.kappa * self.theta_bar - self.sigma_v ** 2

    @property
    def rho_bar(self) -> float:
        return math.sqrt(max(1.0 - self.rho_lev ** 2, 0.0))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("kappa", "theta_bar", "sigma_v", "lambda_mpr", "rho_lev", "r")}


# SPY daily data 2010-2019, annualized
CALIBRATED_PARAMS = HestonParams(kappa=12.5850, theta_bar=0.0193, sigma_v=0.5385,
                                 lambda_mpr=6.6992, rho_lev=-0.8141, r=0.0051)


def validate(params: HestonParams) -> list[str]:
    """Return every violated invariant; an empty list means the parameters are usable."""
    out = []
    for name, value in params.as_dict().items():
        if not math.isfinite(value):
            out.append(f"{name} must be finite (got {value})")
    if out:
        return out
    if params.kappa <= 0:
        out.append(f"kappa must be > 0 (got {params.kappa})")
    if params.theta_bar <= 0:
        out.append(f"theta_bar must be > 0 (got {params.theta_bar})")
    if params.sigma_v <= 0:
        out.append(f"sigma_v must be > 0 (got {params.sigma_v})")
    if abs(params.rho_lev) > 1:
        out.append(f"|rho_lev| must be <= 1 (got {params.rho_lev})")
    if params.feller_margin <= 0:
        out.append("Feller condition violated: 2*kappa*theta_bar = "
                   f"{2 * params.kappa * params.theta_bar:.6g} <= sigma_v^2 = {params.sigma_v ** 2:.6g}")
    return out


def _require_valid(params):
    bad = validate(params)
    if bad:
        raise InvalidParameters(bad)


def n_steps_for(T: float, dt: float) -> int:
    if dt <= 0 or T <= 0:
        raise ValueError("T and dt must be positive")
    n = T / dt
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, n):
        raise ValueError(f"T={T} is not a positive multiple of dt={dt}")
    return k


# ---------------------------------------------------------------------------
# path simulation


@dataclass(frozen=True, eq=False)
class MarketPath:
    """One simulated price/variance path together with the increments that drove it."""

    params: HestonParams
    dt: float
    times: np.ndarray
    S: np.ndarray
    V: np.ndarray
    dW1: np.ndarray
    dW2: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.dW1)

    def to_csv(self, path):
        n = self.n_steps
        d1 = np.append(self.dW1, np.nan)
        d2 = np.append(self.dW2, np.nan)
        rows = ((k, self.times[k], self.S[k], self.V[k],
                 d1[k] if k < n else "", d2[k] if k < n else "") for k in range(n + 1))
        return write_csv(path, ["step", "time", "S", "V", "dW1", "dW2"], rows)


def heston_recursion(params: HestonParams, S0, V0, dW1, dW2, dt: float):
    """Vectorized scheme over any leading batch shape; time runs along the last axis.

    Returns ``(S, V)`` of shape ``batch + (N+1,)`` with ``V`` stored as ``max(V, 0)``.
    """
    dW1 = np.asarray(dW1, dtype=float)
    dW2 = np.asarray(dW2, dtype=float)
    if dW1.shape != dW2.shape:
        raise LengthMismatch(f"increment shapes differ: {dW1.shape} vs {dW2.shape}")
    batch, n = dW1.shape[:-1], dW1.shape[-1]
    k, th, sv, lam, rho, r = (params.kappa, params.theta_bar, params.sigma_v,
                              params.lambda_mpr, params.rho_lev, params.r)
    rb = params.rho_bar
    lnS = np.empty(batch + (n + 1,))
    Vout = np.empty(batch + (n + 1,))
    ls = np.broadcast_to(np.log(np.asarray(S0, dtype=float)), batch).copy()
    v = np.broadcast_to(np.asarray(V0, dtype=float), batch).copy()
    lnS[..., 0] = ls
    Vout[..., 0] = np.maximum(v, 0.0)
    for i in range(n):
        vp = np.maximum(v, 0.0)
        sq = np.sqrt(vp)
        a, b = dW1[..., i], dW2[..., i]
        ls = ls + (r + lam * vp - 0.5 * vp) * dt + sq * a
        v = v + k * (th - vp) * dt + sv * sq * (rho * a + rb * b)
        lnS[..., i + 1] = ls
        Vout[..., i + 1] = np.maximum(v, 0.0)
    S = np.exp(lnS)
    S[..., 0] = np.broadcast_to(np.asarray(S0, dtype=float), batch)
    return S, Vout


def path_from_increments(params: HestonParams, S0: float, V0: float, dW1, dW2,
                         dt: float = DT_DAILY) -> MarketPath:
    """Build a path from externally supplied increments (same recursion as simulation)."""
    dW1 = np.asarray(dW1, dtype=float)
    dW2 = np.asarray(dW2, dtype=float)
    if dW1.ndim != 1 or dW2.ndim != 1 or len(dW1) != len(dW2):
        raise LengthMismatch(f"need equal-length 1-D increments, got {dW1.shape} and {dW2.shape}")
    _require_valid(params)
    if not S0 > 0:
        raise ValueError(f"initial price must be positive (got {S0})")
    if V0 < 0:
        raise ValueError(f"initial variance must be non-negative (got {V0})")
    S, V = heston_recursion(params, S0, V0, dW1, dW2, dt)
    times = np.arange(len(dW1) + 1) * dt
    return MarketPath(params, dt, times, S, V, dW1.copy(), dW2.copy())


def market_increments(seed: int, path_ids, n_steps: int, dt: float):
    """Increment pairs ``(dW1, dW2)`` each of shape ``(len(path_ids), n_steps)``."""
    z = rng.brownian_increments(seed, path_ids, n_steps, dt, d=2, stream=rng.MARKET)
    return z[..., 0], z[..., 1]


def simulate_heston_path(params: HestonParams, S0: float, V0: float, T: float, dt: float,
                         seed: int, path_id: int = 0) -> MarketPath:
    """Simulate path ``path_id`` of the stream addressed by ``seed``."""
    _require_valid(params)
    n = n_steps_for(T, dt)
    dW1, dW2 = market_increments(seed, [path_id], n, dt)
    return path_from_increments(params, S0, V0, dW1[0], dW2[0], dt)


def _series(path_or_values, attr):
    if isinstance(path_or_values, MarketPath):
        return getattr(path_or_values, attr)
    return np.asarray(path_or_values, dtype=float)


def realized_variance(path, window: int = 22) -> np.ndarray:
    """Trailing mean of the spot variance over ``window`` points.

    Accepts a :class:`MarketPath` or an array of variances (time on the last axis).
    Entry ``k`` of the result belongs to time index ``k + window - 1``.
    """
    V = _series(path, "V")
    if window < 1:
        raise ValueError("window must be >= 1")
    if V.shape[-1] < window:
        raise ValueError(f"window {window} exceeds path length {V.shape[-1]}")
    return np.lib.stride_tricks.sliding_window_view(V, window, axis=-1).mean(axis=-1)


def annual_log_returns(path, steps_per_year: int = 252) -> np.ndarray:
    """Log return of each calendar year; accepts a path or a price array."""
    S = _series(path, "S")
    n = S.shape[-1] - 1
    if n <= 0 or n % steps_per_year:
        raise ValueError(f"{n} steps is not a whole number of {steps_per_year}-step years")
    return np.diff(np.log(S[..., ::steps_per_year]), axis=-1)


# ---------------------------------------------------------------------------
# generic diffusion interface


class DiffusionModel(ABC):
    """Batched coefficient functions of an incomplete-market diffusion model.

    Subclasses set ``m`` (assets), ``d`` (Brownian drivers) and ``n`` (state
    dimension) and implement the abstract coefficients analytically.
    """

    m: int
    d: int
    n: int
    deterministic_rate: bool = False

    @abstractmethod
    def mu(self, t, y): ...

    @abstractmethod
    def sigma(self, t, y): ...

    @abstractmethod
    def rate(self, t, y): ...

    @abstractmethod
    def alpha(self, t, y): ...

    @abstractmethod
    def beta(self, t, y): ...

    @abstractmethod
    def grad_rate(self, t, y): ...

    @abstractmethod
    def grad_theta_h(self, t, y): ...

    @abstractmethod
    def grad_alpha(self, t, y): ...

    @abstractmethod
    def grad_beta(self, t, y): ...

    def div(self, t, y):
        return np.zeros((len(y), self.m))

    def sigma_pinv(self, t, y):
        # batched Moore-Penrose inverse; equals s^T (s s^T)^{-1} at full row rank
        return np.linalg.pinv(self.sigma(t, y))

    def theta_h(self, t, y):
        excess = self.mu(t, y) - self.rate(t, y)[:, None]
        return np.einsum("pjm,pm->pj", self.sigma_pinv(t, y), excess)

    def kernel_projector(self, t, y):
        """``sigma^+ sigma - I``: maps any vector into ``-Ker(sigma)``."""
        sp = self.sigma_pinv(t, y)
        return np.einsum("pim,pmj->pij", sp, self.sigma(t, y)) - np.eye(self.d)

    def check_dims(self) -> list[str]:
        out = []
        if self.d < self.m:
            out.append(f"need d >= m, got d={self.d}, m={self.m}")
        return out

    def step_state(self, t, y, ds, dW):
        """One Euler step of the state SDE."""
        return y + self.alpha(t, y) * ds + np.einsum("pbj,pj->pb", self.beta(t, y), dW)

    def euler_tangent_step(self, t, y, DY, ds, dW):
        """Euler step of every row of the Malliavin derivative ``DY`` (shape ``(P, d, n)``)."""
        drift = np.einsum("pia,pab->pib", DY, self.grad_alpha(t, y)) * ds
        diff = np.einsum("pia,pjab,pj->pib", DY, self.grad_beta(t, y), dW)
        return DY + drift + diff

    def tangent_step(self, t, y, DY, ds, dW):
        return self.euler_tangent_step(t, y, DY, ds, dW)


class HestonModel(DiffusionModel):
    """Heston model with state ``y = (V,)``, one asset and two drivers.

    Coefficients are evaluated at ``V+ = max(V, 0)``; gradients that carry
    ``1/sqrt(V)`` use ``max(V, eps)`` instead.
    """

    m, d, n = 1, 2, 1
    deterministic_rate = True

    def __init__(self, params: HestonParams, eps: float = 1e-12):
        _require_valid(params)
        self.params = params
        self.eps = eps
        self._rho = np.array([params.rho_lev, params.rho_bar])

    def _vp(self, y):
        return np.maximum(y[:, 0], 0.0)

    def mu(self, t, y):
        p = self.params
        return (p.r + p.lambda_mpr * self._vp(y))[:, None]

    def sigma(self, t, y):
        out = np.zeros((len(y), 1, 2))
        out[:, 0, 0] = np.sqrt(self._vp(y))
        return out

    def rate(self, t, y):
        return np.full(len(y), self.params.r)

    def alpha(self, t, y):
        p = self.params
        return (p.kappa * (p.theta_bar - self._vp(y)))[:, None]

    def beta(self, t, y):
        sq = np.sqrt(self._vp(y))
        return (self.params.sigma_v * sq)[:, None, None] * self._rho[None, None, :]

    def grad_rate(self, t, y):
        return np.zeros((len(y), 1))

    def sigma_pinv(self, t, y):
        vp = self._vp(y)
        out = np.zeros((len(y), 2, 1))
        pos = vp > 0
        out[pos, 0, 0] = 1.0 / np.sqrt(vp[pos])
        return out

    def theta_h(self, t, y):
        out = np.zeros((len(y), 2))
        out[:, 0] = self.params.lambda_mpr * np.sqrt(self._vp(y))
        return out

    def kernel_projector(self, t, y):
        out = np.zeros((len(y), 2, 2))
        out[:, 0, 0] = np.where(self._vp(y) > 0, 0.0, -1.0)
        out[:, 1, 1] = -1.0
        return out

    def grad_theta_h(self, t, y):
        out = np.zeros((len(y), 1, 2))
        out[:, 0, 0] = self.params.lambda_mpr / (2.0 * np.sqrt(np.maximum(y[:, 0], self.eps)))
        return out

    def grad_alpha(self, t, y):
        return np.full((len(y), 1, 1), -self.params.kappa)

    def grad_beta(self, t, y):
        g = self.params.sigma_v / (2.0 * np.sqrt(np.maximum(y[:, 0], self.eps)))
        return g[:, None, None, None] * self._rho[None, :, None, None]

    def step_state(self, t, y, ds, dW):
        p = self.params
        vp = self._vp(y)
        shock = p.rho_lev * dW[:, 0] + p.rho_bar * dW[:, 1]
        return (y[:, 0] + p.kappa * (p.theta_bar - vp) * ds + p.sigma_v * np.sqrt(vp) * shock)[:, None]

    def tangent_step(self, t, y, DY, ds, dW):
        """Malliavin derivative through ``U = sqrt(V)``.

        ``D V = 2 sqrt(V) D U`` and ``D U`` solves a linear ODE with the pathwise
        solution ``D U_s = D U_t exp(-int ((kappa theta - sigma^2/4) / (2V) + kappa/2))``,
        which stays bounded where the Euler tangent of ``V`` blows up near zero.
        """
        p = self.params
        v = np.maximum(y[:, 0], self.eps)
        du = DY / (2.0 * np.sqrt(v))[:, None, None]
        rate = (p.kappa * p.theta_bar - 0.25 * p.sigma_v ** 2) / (2.0 * v) + 0.5 * p.kappa
        du = du * np.exp(-rate * ds)[:, None, None]
        y_next = self.step_state(t, y, ds, dW)
        return du * (2.0 * np.sqrt(np.maximum(y_next[:, 0], 0.0)))[:, None, None]


class BlackScholesModel(DiffusionModel):
    """Constant-coefficient single asset; the state is a frozen dummy scalar."""

    m, d, n = 1, 1, 1
    deterministic_rate = True

    def __init__(self, mu: float, sigma: float, r: float):
        if sigma <= 0:
            raise InvalidParameters([f"sigma must be > 0 (got {sigma})"])
        self.mu_, self.sigma_, self.r_ = float(mu), float(sigma), float(r)

    def mu(self, t, y):
        return np.full((len(y), 1), self.mu_)

    def sigma(self, t, y):
        return np.full((len(y), 1, 1), self.sigma_)

    def rate(self, t, y):
        return np.full(len(y), self.r_)

    def alpha(self, t, y):
        return np.zeros((len(y), 1))

    def beta(self, t, y):
        return np.zeros((len(y), 1, 1))

    def grad_rate(self, t, y):
        return np.zeros((len(y), 1))

    def grad_theta_h(self, t, y):
        return np.zeros((len(y), 1, 1))

    def grad_alpha(self, t, y):
        return np.zeros((len(y), 1, 1))

    def grad_beta(self, t, y):
        return np.zeros((len(y), 1, 1, 1))


class VasicekToyModel(DiffusionModel):
    """Single asset with an Ornstein-Uhlenbeck short rate as the state.

    ``dr = a (b - r) ds + sigma_r dW`` and the asset's price of risk is affine in the
    rate, ``theta_h = c0 + c1 r``.  With ``sigma_r > 0`` the rate is random, which
    makes this a negative control for identities that need a deterministic rate.
    """

    m, d, n = 1, 1, 1

    def __init__(self, a=0.5, b=0.03, sigma_r=0.02, sigma_s=0.2, c0=0.3, c1=10.0):
        self.a, self.b, self.sigma_r = a, b, sigma_r
        self.sigma_s, self.c0, self.c1 = sigma_s, c0, c1
        self.deterministic_rate = sigma_r == 0

    def mu(self, t, y):
        r = y[:, :1]
        return r + self.sigma_s * (self.c0 + self.c1 * r)

    def sigma(self, t, y):
        return np.full((len(y), 1, 1), self.sigma_s)

    def rate(self, t, y):
        return y[:, 0].copy()

    def alpha(self, t, y):
        return self.a * (self.b - y)

    def beta(self, t, y):
        return np.full((len(y), 1, 1), self.sigma_r)

    def grad_rate(self, t, y):
        return np.ones((len(y), 1))

    def theta_h(self, t, y):
        return self.c0 + self.c1 * y

    def grad_theta_h(self, t, y):
        return np.full((len(y), 1, 1), self.c1)

    def grad_alpha(self, t, y):
        return np.full((len(y), 1, 1), -self.a)

    def grad_beta(self, t, y):
        return np.zeros((len(y), 1, 1, 1))
