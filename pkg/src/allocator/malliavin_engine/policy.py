"""Multiplier root-finding and Monte Carlo policy components."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import rng
from ..closed_form_policy import COMPONENTS, PolicyComponents
from ..errors import NumericalFailure, WealthBelowFloor
from ..utility import UtilitySpec
from .blocks import simulate_blocks
from .functionals import HaraMoments, ratio_estimate

KIND_OF = {"r_hedge": "r", "h_hedge": "h", "uY_hedge": "uY", "uLambda_hedge": "uLambda"}


@dataclass(frozen=True)
class MCConfig:
    """Monte Carlo settings.  ``tilt=None`` picks ``1 - 1/gamma``; ``0`` disables tilting."""

    n_paths: int = 4096
    dt: float = 1.0 / 252.0
    seed: int = 0
    tilt: float | None = None
    control_variates: bool = True

    def __post_init__(self):
        rng.check_seed(self.seed)
        if self.n_paths < 2:
            raise ValueError("n_paths must be >= 2")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")

    def tilt_for(self, spec: UtilitySpec) -> float:
        return 1.0 - 1.0 / spec.gamma if self.tilt is None else float(self.tilt)


def time_grid(t, T, dt):
    if not T > t:
        raise ValueError(f"need t < T (got t={t}, T={T})")
    n = max(1, int(round((T - t) / dt)))
    return np.linspace(t, T, n + 1)


def _start(model, y_t, P):
    y = np.atleast_2d(np.asarray(y_t, dtype=float))
    if y.shape != (1, model.n):
        raise ValueError(f"y_t must have {model.n} entries")
    return np.repeat(y, P, axis=0)


def simulate_from(model, field, spec, t, y_t, mc: MCConfig, lambda_t=1.0, key=(), record_xi=False):
    """One block simulation from a single starting state on ``[t, field.horizon]``."""
    times = time_grid(t, field.horizon, mc.dt)
    gen = rng.generator(mc.seed, rng.ENGINE, *key)
    return simulate_blocks(model, field, spec, times, _start(model, y_t, mc.n_paths), noise=gen,
                           lambda_t=lambda_t, tilt=mc.tilt_for(spec), record_xi=record_xi)


def _bisect_log(f, lo, hi, rtol, max_iter=400):
    """Root of a decreasing ``f`` in ``ln lambda``; the bracket is widened until it holds."""
    for _ in range(200):
        if f(lo) > 0:
            break
        lo /= 16.0
    else:
        raise NumericalFailure("could not bracket the multiplier from below", residual=f(lo))
    for _ in range(200):
        if f(hi) < 0:
            break
        hi *= 16.0
    else:
        raise NumericalFailure("could not bracket the multiplier from above", residual=f(hi))
    a, b = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        if f(math.exp(m)) > 0:
            a = m
        else:
            b = m
        if b - a < rtol:
            break
    return math.exp(0.5 * (a + b))


def solve_lambda(model, field, spec: UtilitySpec, t, y_t, X_t, mc: MCConfig, *, sample=None, rtol=1e-8):
    """Multiplier ``lambda`` with ``X_t = E[G(lambda)]``, by bisection on ``ln lambda``.

    ``E[G]`` strictly decreases in ``lambda``.  For a multiplier-independent field the
    block paths do not depend on ``lambda`` and one simulation serves every candidate;
    otherwise each candidate re-runs the simulation on the same random numbers.
    """
    if not X_t > 0:
        raise WealthBelowFloor(f"wealth must be positive (got {X_t})")
    gam = spec.gamma
    if not field.lambda_dependent:
        if sample is None:
            sample = simulate_from(model, field, spec, t, y_t, mc)
        mom = HaraMoments.from_sample(spec, sample, ())
        L = sample.weight
        floor = float(np.mean(L * mom.floor))
        scale = float(np.mean(L * mom.g))
        if not X_t > floor:
            raise WealthBelowFloor(f"wealth {X_t} does not exceed the funded floor {floor}")

        def excess(lam):
            return floor + lam ** (-1.0 / gam) * scale - X_t
        guess = ((X_t - floor) / scale) ** (-gam)
    else:
        def excess(lam):
            s = simulate_from(model, field, spec, t, y_t, mc, lambda_t=lam)
            mom = HaraMoments.from_sample(spec, s, ())
            return float(np.mean(s.weight * mom.G(lam ** (-1.0 / gam)))) - X_t
        guess = X_t ** (-gam)
    return _bisect_log(excess, guess / 2.0, guess * 2.0, rtol)


def mc_policy_components(model, field, spec: UtilitySpec, t, y_t, X_t, mc: MCConfig) -> PolicyComponents:
    """Policy decomposition ``-(sigma^+)^T E[H-calligraphic]/X_t`` with standard errors.

    Each component is a ratio ``E[num]/E[G]`` (``X_t = E[G]`` at the multiplier), so
    the standard errors account for the noise in the multiplier as well.
    """
    kinds = ("r", "h", "uY", "uLambda", "theta")
    sample = simulate_from(model, field, spec, t, y_t, mc, lambda_t=1.0)
    lam = solve_lambda(model, field, spec, t, y_t, X_t, mc, sample=None if field.lambda_dependent else sample)
    if field.lambda_dependent:
        sample = simulate_from(model, field, spec, t, y_t, mc, lambda_t=lam)
    Lam = lam ** (-1.0 / spec.gamma)
    mom = HaraMoments.from_sample(spec, sample, kinds)
    y0 = np.atleast_2d(np.asarray(y_t, dtype=float))
    sp = model.sigma_pinv(t, y0)[0]          # (d, m)
    th = model.theta_h(t, y0)[0]             # (d,)
    den = mom.G(Lam)
    L = sample.weight
    C = sample.controls(kinds) if mc.control_variates else None

    values, ses = {}, {}
    mv = ratio_estimate(L, -np.outer(mom.Q(Lam), sp.T @ th), den, C)
    values["mv"], ses["mv"] = mv.value, mv.se
    for comp, kind in KIND_OF.items():
        est = ratio_estimate(L, -mom.Hc(kind, Lam) @ sp, den, C)
        values[comp], ses[comp] = est.value, est.se
    theta = ratio_estimate(L, -mom.Hc("theta", Lam) @ sp, den, C)
    ses["theta_hedge"] = theta.se
    total_num = (-np.outer(mom.Q(Lam), sp.T @ th)
                 - (mom.Hc("r", Lam) + mom.Hc("theta", Lam)) @ sp)
    ses["total"] = ratio_estimate(L, total_num, den, C).se
    if model.m == 1:
        values = {k: float(np.squeeze(v)) for k, v in values.items()}
        ses = {k: float(np.squeeze(v)) for k, v in ses.items()}
    return PolicyComponents(*(values[c] for c in COMPONENTS), se=ses, lambda_star=lam)
