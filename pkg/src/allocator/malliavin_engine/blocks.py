"""Joint simulation of the state, the state price density and the Malliavin H-vectors.

Shapes (``P`` paths, ``d`` drivers, ``n`` state dimensions):

* ``y``       ``(P, n)``
* ``xi``      ``(P,)``
* ``DY``      ``(P, d, n)``, row ``i`` is ``D_{it} Y_s``
* ``H*``      ``(P, d)``

Simulation can run under a tilted measure ``Q`` with ``dW = dW^Q - omega theta_h ds``;
the likelihood ratio ``dP/dQ`` is carried alongside every path so expectations stay
unbiased.  Tilting only by ``theta_h`` keeps the state path independent of the
investor-specific field.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..utility import UtilitySpec

KINDS = ("r", "theta", "h", "u", "uY", "uLambda")
_FIELDS = {"r": "Hr", "theta": "Htheta", "h": "Hh", "u": "Hu", "uY": "HuY", "uLambda": "HuLambda"}


@dataclass(frozen=True, eq=False)
class BuildingBlockState:
    y: np.ndarray
    xi: np.ndarray
    DY: np.ndarray
    Hr: np.ndarray
    Htheta: np.ndarray
    Hh: np.ndarray
    Hu: np.ndarray
    HuY: np.ndarray
    HuLambda: np.ndarray
    theta_start: np.ndarray

    def H(self, kind: str) -> np.ndarray:
        return getattr(self, _FIELDS[kind])


def initial_state(model, field, t, y, lambda_t=1.0, DY=None) -> BuildingBlockState:
    """Blocks at ``s = t``: ``xi = 1``, ``DY = beta(t, Y_t)^T`` and all H-vectors zero.

    Passing ``DY`` restarts the H-vectors and ``xi`` from an intermediate time while
    keeping the Malliavin derivative taken at the original start.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    P, d = len(y), model.d
    if DY is None:
        DY = np.transpose(model.beta(t, y), (0, 2, 1)).copy()
    lam = np.full(P, float(lambda_t))
    theta_s = model.theta_h(t, y) + field.value(t, y, lam)
    z = np.zeros((P, d))
    return BuildingBlockState(y=y.copy(), xi=np.ones(P), DY=np.array(DY, dtype=float),
                              Hr=z, Htheta=z.copy(), Hh=z.copy(), Hu=z.copy(), HuY=z.copy(),
                              HuLambda=z.copy(), theta_start=theta_s)


# explicit loops over the (small) driver axis beat ufunc reductions over it
def _dot(a, b):
    out = a[..., 0] * b[..., 0]
    for j in range(1, a.shape[-1]):
        out += a[..., j] * b[..., j]
    return out


def _field_eval(field, s, y, lam):
    if hasattr(field, "value_and_grad"):
        return field.value_and_grad(s, y, lam)
    return field.value(s, y, lam), field.grad(s, y, lam)


def _step(model, field, state: BuildingBlockState, lambda_t, s, ds, dW, th_h=None):
    y, D = state.y, state.DY
    if th_h is None:
        th_h = model.theta_h(s, y)
    lam_s = lambda_t * state.xi
    th_u, g_u = _field_eval(field, s, y, lam_s)
    th_S = th_h + th_u
    M_h = np.matmul(D, model.grad_theta_h(s, y))
    M_uY = np.matmul(D, g_u)
    if field.lambda_dependent:
        v = state.theta_start + state.Hr + state.Htheta
        M_uL = -(lambda_t * state.xi)[:, None, None] * v[:, :, None] * field.dlambda(s, y, lam_s)[:, None, :]
        M_u = M_uY + M_uL
        dHuL = _mv(M_uL, th_u * ds + dW)
    else:
        M_uL = None
        M_u = M_uY
        dHuL = 0.0
    M_theta = M_h + M_u

    inc_u = th_u * ds + dW
    dHuY = _mv(M_uY, inc_u)
    dHh = _mv(M_h, th_h * ds + dW)
    dHu = dHuY + dHuL
    r = model.rate(s, y)
    new = BuildingBlockState(
        y=model.step_state(s, y, ds, dW),
        xi=state.xi * np.exp(-(r + 0.5 * _dot(th_S, th_S)) * ds - _dot(th_S, dW)),
        DY=model.tangent_step(s, y, D, ds, dW),
        Hr=state.Hr + np.matmul(D, model.grad_rate(s, y)[:, :, None])[:, :, 0] * ds,
        Htheta=state.Htheta + _mv(M_theta, th_S * ds + dW),
        Hh=state.Hh + dHh,
        Hu=state.Hu + dHu,
        HuY=state.HuY + dHuY,
        HuLambda=state.HuLambda + dHuL,
        theta_start=state.theta_start,
    )
    mats = {"theta": M_theta, "h": M_h, "u": M_u, "uY": M_uY, "uLambda": M_uL}
    return new, mats, r


def _mv(M, x):
    out = M[:, :, 0] * x[:, None, 0]
    for j in range(1, x.shape[-1]):
        out += M[:, :, j] * x[:, None, j]
    return out


def advance_blocks(model, field, state: BuildingBlockState, lambda_t, s, ds, dW) -> BuildingBlockState:
    """One Euler step of the coupled system (log-Euler for ``xi``)."""
    if ds <= 0:
        raise ValueError("ds must be positive")
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    new, _, _ = _step(model, field, state, lambda_t, s, ds, dW)
    if not (np.all(np.isfinite(new.y)) and np.all(np.isfinite(new.xi))):
        raise FloatingPointError(f"non-finite state after step at s={s}")
    return new


# ---------------------------------------------------------------------------
# path functionals


@dataclass(frozen=True, eq=False)
class PathSample:
    """Per-path functionals of one block simulation on ``[t, T]``.

    ``run`` holds trapezoid integrals ``int b_q(s) xi_s^q (1, H_s) ds`` for the powers
    ``q`` in ``powers`` (``b = 1`` for the unit power, ``b = (w e^{-disc s})^{1/gamma}``
    for ``q = 1 - 1/gamma``); it is empty when consumption utility is inactive.
    ``ctrl`` holds the zero-mean martingale parts ``int M_ij dW^Q_j`` of each H-vector.
    """

    t: float
    T: float
    weight: np.ndarray
    xi: np.ndarray
    H: dict
    run: dict
    ctrl: dict
    mart_theta_h: np.ndarray
    state: BuildingBlockState
    xi_path: np.ndarray | None = None
    times: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.xi)

    def controls(self, kinds=("theta",)) -> np.ndarray:
        """Zero-mean control variates for the given H kinds, shape ``(P, c)``."""
        cols = [self.weight - 1.0, self.mart_theta_h]
        for k in kinds:
            if k in self.ctrl:
                c = self.ctrl[k]
                cols.extend(c.reshape(len(c), -1).T)
        return np.column_stack(cols)

    def then(self, rest: "PathSample") -> "PathSample":
        """Concatenate with a sample that restarted at ``self.T`` from this sample's end state."""
        if abs(rest.t - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError("segments are not adjacent")
        H = {k: self.H[k] + rest.H[k] for k in KINDS}
        run = {}
        for key, val in self.run.items():
            if key[0] == "xi":
                q = key[1]
                run[key] = val + self.xi ** q * rest.run[key]
            else:
                _, kind, q = key
                xq = (self.xi ** q)[:, None]
                run[key] = val + xq * (self.H[kind] * rest.run[("xi", q)][:, None] + rest.run[key])
        ctrl = {k: self.ctrl[k] + rest.ctrl[k] for k in self.ctrl}
        return PathSample(t=self.t, T=rest.T, weight=self.weight * rest.weight, xi=self.xi * rest.xi,
                          H=H, run=run, ctrl=ctrl, mart_theta_h=self.mart_theta_h + rest.mart_theta_h,
                          state=rest.state)


def _running_terms(spec: UtilitySpec, state, s, kinds, powers):
    out = {}
    for q in powers:
        b = 1.0 if q == 1.0 else (spec.w * np.exp(-spec.discount * s)) ** (1.0 / spec.gamma)
        base = b * state.xi ** q
        out[("xi", q)] = base
        for k in kinds:
            out[("H", k, q)] = base[:, None] * state.H(k)
    return out


def simulate_blocks(model, field, spec: UtilitySpec, times, y0=None, *, noise, lambda_t=1.0,
                    tilt=0.0, state0=None, record_xi=False, kinds=KINDS,
                    control_kinds=("theta", "h", "u", "uY", "uLambda")) -> PathSample:
    """Run the block system over the grid ``times`` and collect path functionals.

    ``noise`` is an array of ``Q``-increments of shape ``(len(times)-1, P, d)`` or a
    :class:`numpy.random.Generator` that is drawn step by step.  ``state0`` replaces
    the default initial state built from ``y0``.  ``kinds`` and ``control_kinds``
    restrict which running integrals and control variates are accumulated.
    """
    times = np.asarray(times, dtype=float)
    if state0 is None:
        state0 = initial_state(model, field, times[0], y0, lambda_t)
    state = state0
    P, d = len(state.y), model.d
    powers = (1.0, 1.0 - 1.0 / spec.gamma) if spec.has_consumption else ()
    run_prev = _running_terms(spec, state, times[0], kinds, powers)
    run = {k: np.zeros_like(v) for k, v in run_prev.items()}
    ctrl = {k: np.zeros((P, d, d)) for k in control_kinds}
    log_w = np.zeros(P)
    mart = np.zeros(P)
    xi_path = [state.xi] if record_xi else None
    for i in range(len(times) - 1):
        s, ds = times[i], times[i + 1] - times[i]
        if isinstance(noise, np.random.Generator):
            q = noise.standard_normal((P, d)) * np.sqrt(ds)
        else:
            q = noise[i]
        th_h = model.theta_h(s, state.y)
        if tilt:
            dW = q - tilt * th_h * ds
            log_w += tilt * _dot(th_h, q) - 0.5 * tilt ** 2 * _dot(th_h, th_h) * ds
        else:
            dW = q
        mart += _dot(th_h, q)
        state, mats, _ = _step(model, field, state, lambda_t, s, ds, dW, th_h=th_h)
        for k in ctrl:
            if mats[k] is not None:
                ctrl[k] += mats[k] * q[:, None, :]
        if powers:
            cur = _running_terms(spec, state, times[i + 1], kinds, powers)
            for key in run:
                run[key] += 0.5 * ds * (run_prev[key] + cur[key])
            run_prev = cur
        if record_xi:
            xi_path.append(state.xi)
    if not (np.all(np.isfinite(state.xi)) and np.all(np.isfinite(state.y))):
        raise FloatingPointError("non-finite values in block simulation")
    return PathSample(t=float(times[0]), T=float(times[-1]), weight=np.exp(log_w), xi=state.xi,
                      H={k: state.H(k) for k in KINDS}, run=run, ctrl=ctrl, mart_theta_h=mart,
                      state=state, xi_path=np.column_stack(xi_path) if record_xi else None,
                      times=times if record_xi else None)


def restart(model, field, sample: PathSample, lambda_t=1.0) -> BuildingBlockState:
    """Initial state for a continuation segment starting where ``sample`` ended."""
    st = sample.state
    return replace(initial_state(model, field, sample.T, st.y, lambda_t, DY=st.DY),
                   theta_start=st.theta_start)
