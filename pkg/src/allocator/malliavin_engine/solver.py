"""Backward fixed-point solver for the investor-specific price of risk on a grid.

At a node ``(t_k, y_j)`` the field satisfies

    theta_u = (sigma^+ sigma - I) (E[Hc^r] + E[Hc^theta]) / E[Q]

where the expectations run over block paths started at ``(t_k, y_j)`` that use the
field itself on ``[t_k, T]``.  Slices are solved from ``T`` backwards.  Within a
slice only the first interval ``[t_k, t_{k+1}]`` sees the unknown values, so the
remainder of every path is simulated once and re-attached to a re-simulated first
interval (same random numbers) at each damped iteration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import rng
from ..errors import NumericalFailure
from ..market_model import HestonParams
from ..utility import UtilitySpec
from .blocks import restart, simulate_blocks
from .fields import ThetaUField, ZeroThetaU
from .functionals import HaraMoments, ratio_estimate, weighted_mean
from .policy import MCConfig, simulate_from

KINDS = ("r", "theta")


@dataclass(frozen=True)
class SolverGrid:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if len(t) < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be increasing with at least two nodes")
        if len(s) < 2 or np.any(np.diff(s) <= 0):
            raise ValueError("state grid must be increasing with at least two nodes")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)


def heston_grid(params: HestonParams, T: float, n_time: int = 50, n_state: int = 41,
                v_max: float | None = None) -> SolverGrid:
    """Uniform grid on ``[0, T] x [0, 4 theta_bar]`` (or ``[0, v_max]``)."""
    v_max = 4.0 * params.theta_bar if v_max is None else v_max
    return SolverGrid(np.linspace(0.0, T, n_time), np.linspace(0.0, v_max, n_state))


def _interval_times(t0, t1, dt):
    n = max(1, int(round((t1 - t0) / dt)))
    return np.linspace(t0, t1, n + 1)


def _rest_times(grid_times, k, dt):
    parts = [_interval_times(grid_times[i], grid_times[i + 1], dt)
             for i in range(k + 1, len(grid_times) - 1)]
    return np.concatenate([parts[0]] + [p[1:] for p in parts[1:]])


def _effective_spec(model, spec: UtilitySpec, reduced: bool) -> UtilitySpec:
    if spec.is_crra:
        return spec
    if not model.deterministic_rate:
        raise ValueError("the grid solver covers CRRA utility, or HARA utility with a "
                         "deterministic rate; the multiplier-dependent case is not supported")
    # with a deterministic rate the floors drop out of the fixed point, leaving the
    # CRRA equation; solving that one removes the floor noise
    return spec.crra() if reduced else spec


def _node_estimates(model, spec, sample, t, y_nodes, N, Lam, use_cv):
    """Right-hand side of the fixed point for each state node (paths grouped by node)."""
    mom = HaraMoments.from_sample(spec, sample, KINDS)
    proj = model.kernel_projector(t, y_nodes)                       # (J, d, d)
    J = len(y_nodes)
    H = mom.Hc("r", Lam) + mom.Hc("theta", Lam)                     # (J*N, d)
    num = np.einsum("jab,jnb->jna", proj, H.reshape(J, N, -1))
    den = mom.Q(Lam).reshape(J, N)
    L = sample.weight.reshape(J, N)
    C = sample.controls(("theta",)).reshape(J, N, -1) if use_cv else None
    vals = np.empty((J, model.d))
    ses = np.empty((J, model.d))
    for j in range(J):
        est = ratio_estimate(L[j], num[j], den[j], None if C is None else C[j])
        vals[j], ses[j] = est.value, est.se
    return vals, ses


def solve_theta_u(model, spec: UtilitySpec, grid: SolverGrid, mc: MCConfig, *, damping=0.5,
                  tol=1e-5, max_iter=50, lambda_t=1.0, reduced=True, progress=None) -> ThetaUField:
    """Solve the field slice by slice from the horizon ``grid.times[-1]``.

    ``mc.n_paths`` paths are used per state node.  The returned field carries a
    standard-error array of the same shape and an ``info`` dict with iteration counts.
    """
    if model.n != 1:
        raise ValueError("the grid solver needs a one-dimensional state")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    eff = _effective_spec(model, spec, reduced)
    times, states = grid.times, grid.states
    K, J, d, N = len(times) - 1, len(states), model.d, mc.n_paths
    values = np.zeros((K + 1, J, d))
    se = np.zeros((K + 1, J, d))
    iters = np.zeros(K + 1, dtype=int)
    Lam = lambda_t ** (-1.0 / spec.gamma)
    tilt = mc.tilt_for(spec)
    y0 = np.repeat(states[:, None], N, axis=0)                     # node-major
    field = ThetaUField(times, states, values)
    started = time.perf_counter()
    if model.d == model.m:
        # complete market: the projector vanishes and the field is zero
        return ThetaUField(times, states, values, se=se,
                           info={"iterations": iters.tolist(), "complete_market": True})

    for k in range(K - 1, -1, -1):
        first_t = _interval_times(times[k], times[k + 1], mc.dt)
        ds = np.diff(first_t)
        gen = rng.generator(mc.seed, rng.SOLVER, k, 0)
        q = gen.standard_normal((len(ds), J * N, d)) * np.sqrt(ds)[:, None, None]

        first = simulate_blocks(model, field, eff, first_t, y0, noise=q, lambda_t=lambda_t, tilt=tilt,
                                kinds=KINDS, control_kinds=("theta",))
        rest = None
        if k + 1 < K:
            rest_t = _rest_times(times, k, mc.dt)
            rest = simulate_blocks(model, field, eff, rest_t, noise=rng.generator(mc.seed, rng.SOLVER, k, 1),
                                   lambda_t=lambda_t, tilt=tilt, state0=restart(model, field, first, lambda_t),
                                   kinds=KINDS, control_kinds=("theta",))

        def evaluate(slice_values):
            trial = field.with_slice(k, slice_values)
            first = simulate_blocks(model, trial, eff, first_t, y0, noise=q, lambda_t=lambda_t, tilt=tilt,
                                    kinds=KINDS, control_kinds=("theta",))
            full = first if rest is None else first.then(rest)
            return _node_estimates(model, eff, full, times[k], states[:, None], N, Lam, mc.control_variates)

        # start from the map evaluated at a linear extrapolation of the two later
        # slices; the damped iteration then only has to absorb the weak feedback
        guess = values[k + 1] if k + 2 > K else 2.0 * values[k + 1] - values[k + 2]
        current, _ = evaluate(guess)
        for it in range(1, max_iter + 1):
            target, err = evaluate(current)
            change = float(np.max(np.abs(target - current)))
            current = current + damping * (target - current)
            if change < tol:
                break
        else:
            raise NumericalFailure(f"fixed point at t={times[k]} did not converge in {max_iter} "
                                   "iterations", residual=change)
        values[k], se[k], iters[k] = target, err, it
        field = ThetaUField(times, states, values)
        if progress is not None:
            progress(k, it, change)

    info = {"iterations": iters.tolist(), "paths_per_node": N, "dt": mc.dt, "damping": damping,
            "tol": tol, "seed": mc.seed, "wall_time_s": time.perf_counter() - started,
            "reduced": eff is not spec}
    return ThetaUField(times, states, values, se=se, info=info)


def residual_diagnostics(model, field, spec: UtilitySpec, mc: MCConfig, *, t0=0.0, y0=None,
                         points=None) -> dict:
    """Consistency checks for a solved (or injected) field.

    * ``lemma``: ``E[xi_T H^theta_T]`` from ``(t0, y0)``, which vanishes for a
      deterministic rate.
    * ``fixed_point``: the fixed-point right-hand side re-estimated at ``points``
      (pairs ``(t, y)``, typically between grid nodes) against the field value.
    * ``kernel``: largest ``|sigma theta_u|`` over the field's nodes.
    """
    if y0 is None:
        y0 = np.zeros(model.n) if not hasattr(model, "params") else [model.params.theta_bar]
    sample = simulate_from(model, field, spec, t0, y0, mc, key=(0,))
    C = sample.controls(("theta",)) if mc.control_variates else None
    lemma = weighted_mean(sample.weight, sample.xi[:, None] * sample.H["theta"], C)
    z = lemma.value / np.where(lemma.se > 0, lemma.se, np.inf)
    report = {
        "lemma": {"t0": t0, "y0": np.atleast_1d(y0).tolist(), "estimate": np.atleast_1d(lemma.value).tolist(),
                  "se": np.atleast_1d(lemma.se).tolist(), "z": np.atleast_1d(z).tolist(),
                  "deterministic_rate": bool(model.deterministic_rate)},
    }

    fp = []
    eff = _effective_spec(model, spec, True)
    for i, (t, y) in enumerate(points or ()):
        y_arr = np.atleast_2d(np.asarray(y, dtype=float))
        s = simulate_from(model, field, eff, t, y_arr[0], mc, key=(1, i))
        vals, ses = _node_estimates(model, eff, s, t, y_arr, mc.n_paths, 1.0, mc.control_variates)
        fv = field.value(t, y_arr)[0]
        fp.append({"t": float(t), "y": y_arr[0].tolist(), "field": fv.tolist(), "rhs": vals[0].tolist(),
                   "se": ses[0].tolist(), "residual": (vals[0] - fv).tolist()})
    report["fixed_point"] = fp

    if isinstance(field, ThetaUField):
        nodes = field.states[:, None]
        sig = model.sigma(0.0, nodes)
        worst = max(float(np.max(np.abs(np.einsum("jmd,jd->jm", sig, field.values[k]))))
                    for k in range(len(field.times)))
    elif isinstance(field, ZeroThetaU):
        worst = 0.0
    else:
        pts = np.linspace(0.0, 1.0, 11)[:, None] if y0 is None else np.atleast_2d(y0)
        worst = float(np.max(np.abs(np.einsum("jmd,jd->jm", model.sigma(t0, pts), field.value(t0, pts)))))
    report["kernel"] = {"max_abs_sigma_theta_u": worst}
    return report
