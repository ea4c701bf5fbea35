"""Optimal-payout functionals and weighted ratio estimators.

With ``Lam = lambda^{-1/gamma}`` and ``p = 1 - 1/gamma`` the HARA inverse marginal
utilities split into a floor part linear in ``xi`` and a part proportional to
``Lam xi^p``:

    Gamma^U = xbar xi_T + A xi_T^p            Upsilon^U = -(A/gamma) xi_T^p
    Gamma^u = cbar xi_s + Lam b(s) xi_s^p     Upsilon^u = -(Lam b(s)/gamma) xi_s^p

where ``A = Lam ((1-w) e^{-disc T})^{1/gamma}`` and ``b(s) = (w e^{-disc s})^{1/gamma}``.
:func:`gamma_upsilon` evaluates the same quantities through the generic utility
evaluators and serves as an independent route.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..utility import (CONSUMPTION, TERMINAL, UtilitySpec, inverse_marginal,
                       inverse_marginal_derivative)


@dataclass(frozen=True, eq=False)
class GammaUpsilon:
    """Payout functionals along one or many paths (leading axis = paths)."""

    GammaU: np.ndarray
    UpsilonU: np.ndarray
    GammaC: np.ndarray | None
    UpsilonC: np.ndarray | None
    G: np.ndarray
    Q: np.ndarray


def gamma_upsilon(spec: UtilitySpec, lambda_t, xi_path, times, T) -> GammaUpsilon:
    """``Gamma = xi I(., lambda xi)`` and ``Upsilon = lambda xi^2 dI/dy(., lambda xi)``.

    ``xi_path`` has shape ``(P, len(times))`` (or ``(len(times),)``) and ends at ``T``.
    """
    if not lambda_t > 0:
        raise ValueError("lambda_t must be > 0")
    xi = np.atleast_2d(np.asarray(xi_path, dtype=float))
    times = np.asarray(times, dtype=float)
    if np.any(~(xi > 0)):
        raise ValueError("xi must be positive")
    if xi.shape[1] != len(times):
        raise ValueError("xi_path and times disagree in length")
    G = np.zeros(len(xi))
    Q = np.zeros(len(xi))
    gU = uU = gC = uC = None
    if spec.has_terminal:
        yT = lambda_t * xi[:, -1]
        gU = xi[:, -1] * inverse_marginal(spec, T, yT, TERMINAL)
        uU = lambda_t * xi[:, -1] ** 2 * inverse_marginal_derivative(spec, T, yT, TERMINAL)
        G = G + gU
        Q = Q + uU
    if spec.has_consumption:
        y = lambda_t * xi
        gC = xi * inverse_marginal(spec, times, y, CONSUMPTION)
        uC = lambda_t * xi ** 2 * inverse_marginal_derivative(spec, times, y, CONSUMPTION)
        G = G + np.trapezoid(gC, times, axis=1)
        Q = Q + np.trapezoid(uC, times, axis=1)
    return GammaUpsilon(gU, uU, gC, uC, G, Q)


def _terminal_coef(spec: UtilitySpec, T):
    if not spec.has_terminal:
        return 0.0
    return ((1.0 - spec.w) * np.exp(-spec.discount * T)) ** (1.0 / spec.gamma)


@dataclass(frozen=True, eq=False)
class HaraMoments:
    """Per-path pieces of ``G``, ``Q`` and ``H-calligraphic`` from one :class:`PathSample`.

    ``G = floor + Lam * g`` and ``Q = Lam * q``; ``Hc[kind] = floor_H[kind] + Lam * h[kind]``.
    """

    floor: np.ndarray
    g: np.ndarray
    q: np.ndarray
    floor_H: dict
    h: dict

    @classmethod
    def from_sample(cls, spec: UtilitySpec, sample, kinds) -> "HaraMoments":
        gam = spec.gamma
        p = 1.0 - 1.0 / gam
        a = _terminal_coef(spec, sample.T)
        xi = sample.xi
        xp = xi ** p
        floor = spec.xbar * xi if spec.has_terminal else np.zeros_like(xi)
        g = a * xp
        floor_H = {k: floor[:, None] * sample.H[k] for k in kinds}
        h = {k: (a * p * xp)[:, None] * sample.H[k] for k in kinds}
        if spec.has_consumption:
            floor = floor + spec.cbar * sample.run[("xi", 1.0)]
            g = g + sample.run[("xi", p)]
            for k in kinds:
                floor_H[k] = floor_H[k] + spec.cbar * sample.run[("H", k, 1.0)]
                h[k] = h[k] + p * sample.run[("H", k, p)]
        return cls(floor=floor, g=g, q=-g / gam, floor_H=floor_H, h=h)

    def G(self, Lam):
        return self.floor + Lam * self.g

    def Q(self, Lam):
        return Lam * self.q

    def Hc(self, kind, Lam):
        return self.floor_H[kind] + Lam * self.h[kind]


@dataclass(frozen=True)
class RatioEstimate:
    value: np.ndarray
    se: np.ndarray


def ratio_estimate(weight, num, den, controls=None) -> RatioEstimate:
    """Estimate ``E[num]/E[den]`` from importance weights ``weight``.

    ``num`` has shape ``(P,)`` or ``(P, k)``; ``den`` is ``(P,)``.  Control variates
    (columns with known zero mean) are used through a regression on the linearized
    residual ``weight (num - est den)``; the standard error is that of the residual.
    """
    num = np.asarray(num, dtype=float)
    scalar = num.ndim == 1
    num = num.reshape(len(num), -1)
    L = np.asarray(weight, dtype=float)
    Lden = L * den
    mden = Lden.mean()
    if mden == 0:
        raise ZeroDivisionError("denominator has zero mean")
    est = (L[:, None] * num).sum(axis=0) / Lden.sum()
    y = L[:, None] * num - est[None, :] * Lden[:, None]
    N = len(L)
    if controls is not None and N > controls.shape[1] + 2:
        C = np.asarray(controls, dtype=float)
        keep = C.std(axis=0) > 0
        C = C[:, keep]
        if C.shape[1]:
            Cc = C - C.mean(axis=0)
            beta, *_ = np.linalg.lstsq(Cc, y - y.mean(axis=0), rcond=None)
            est = est - (C.mean(axis=0) @ beta) / mden
            y = y - Cc @ beta
    se = y.std(axis=0, ddof=1) / (np.sqrt(N) * abs(mden))
    if scalar:
        return RatioEstimate(est[0], se[0])
    return RatioEstimate(est, se)


def weighted_mean(weight, values, controls=None) -> RatioEstimate:
    """``E[values]`` with its standard error (a ratio with unit denominator)."""
    L = np.asarray(weight, dtype=float)
    return ratio_estimate(L, values, np.ones_like(L), controls)
