"""Investor-specific price-of-risk fields.

A field answers three batched queries at time ``s`` and states ``y`` (shape ``(P, n)``):

* ``value(s, y, lam)``   -> ``(P, d)``
* ``grad(s, y, lam)``    -> ``(P, n, d)``, state gradient
* ``dlambda(s, y, lam)`` -> ``(P, d)``, sensitivity to the multiplier

``lam`` is the per-path multiplier level ``lambda_t * xi_{t,s}``; fields that ignore it
set ``lambda_dependent = False``.
"""
from __future__ import annotations

import numpy as np

from ..closed_form_policy import heston_constants, phi
from ..errors import AllocatorError
from ..io import write_csv
from ..market_model import HestonParams


class FieldOutOfRange(AllocatorError, ValueError):
    pass


class ZeroThetaU:
    """``theta_u = 0``; the natural field for complete markets."""

    lambda_dependent = False

    def __init__(self, d: int, horizon: float):
        self.d = d
        self.horizon = float(horizon)

    def value(self, s, y, lam=None):
        return np.zeros((len(y), self.d))

    def grad(self, s, y, lam=None):
        return np.zeros((len(y), y.shape[1], self.d))

    def dlambda(self, s, y, lam=None):
        return np.zeros((len(y), self.d))


class AnalyticThetaU:
    """Closed-form Heston field ``(0, c(T-s) sqrt(V))`` injected into the engine."""

    lambda_dependent = False
    d = 2

    def __init__(self, params: HestonParams, gamma: float, horizon: float, eps: float = 1e-12):
        c = heston_constants(params, gamma)
        self._scale = gamma * params.rho_bar * params.sigma_v * c.delta
        self._consts = c
        self.horizon = float(horizon)
        self.eps = eps

    def coefficient(self, s):
        return self._scale * phi(max(self.horizon - s, 0.0), self._consts)

    def value(self, s, y, lam=None):
        out = np.zeros((len(y), 2))
        out[:, 1] = self.coefficient(s) * np.sqrt(np.maximum(y[:, 0], 0.0))
        return out

    def grad(self, s, y, lam=None):
        out = np.zeros((len(y), 1, 2))
        out[:, 0, 1] = self.coefficient(s) / (2.0 * np.sqrt(np.maximum(y[:, 0], self.eps)))
        return out

    def dlambda(self, s, y, lam=None):
        return np.zeros((len(y), 2))


class ThetaUField:
    """Grid field over a time grid and a one-dimensional state grid.

    Piecewise-linear in the state (clamped below the grid, linearly extrapolated above
    it) and left-constant in time.  State gradients come from central differences of
    the node values.  ``values`` has shape ``(K+1, J, d)``.
    """

    lambda_dependent = False

    def __init__(self, times, states, values, se=None, info=None):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.values = np.array(values, dtype=float)
        self.values.setflags(write=False)
        if self.values.shape[:2] != (len(self.times), len(self.states)):
            raise ValueError("values must have shape (len(times), len(states), d)")
        if len(self.states) < 2 or np.any(np.diff(self.states) <= 0):
            raise ValueError("state grid must be increasing with at least two nodes")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be increasing")
        self.d = self.values.shape[2]
        self.horizon = float(self.times[-1])
        self.grads = np.gradient(self.values, self.states, axis=1)
        spacing = np.diff(self.states)
        self._step = spacing[0]
        self._uniform = bool(np.allclose(spacing, self._step, rtol=1e-12, atol=0.0))
        self.se = None if se is None else np.asarray(se, dtype=float)
        self.info = dict(info or {})

    def time_index(self, s) -> int:
        tol = 1e-12 * max(1.0, abs(self.horizon))
        if s < self.times[0] - tol or s > self.horizon + tol:
            raise FieldOutOfRange(f"time {s} outside [{self.times[0]}, {self.horizon}]")
        k = int(np.searchsorted(self.times, s + tol, side="right")) - 1
        return min(max(k, 0), len(self.times) - 1)

    def _weights(self, y):
        g = self.states
        x = np.maximum(y[:, 0], g[0])
        if self._uniform:
            idx = np.minimum(((x - g[0]) / self._step).astype(np.intp), len(g) - 2)
        else:
            idx = np.clip(np.searchsorted(g, x, side="right") - 1, 0, len(g) - 2)
        w = (x - g[idx]) / (g[idx + 1] - g[idx])
        return idx, w[:, None]

    @staticmethod
    def _interp(table, idx, w):
        lo = table[idx]
        return lo + (table[idx + 1] - lo) * w

    def value(self, s, y, lam=None):
        idx, w = self._weights(y)
        return self._interp(self.values[self.time_index(s)], idx, w)

    def grad(self, s, y, lam=None):
        idx, w = self._weights(y)
        return self._interp(self.grads[self.time_index(s)], idx, np.minimum(w, 1.0))[:, None, :]

    def value_and_grad(self, s, y, lam=None):
        k = self.time_index(s)
        idx, w = self._weights(y)
        return (self._interp(self.values[k], idx, w),
                self._interp(self.grads[k], idx, np.minimum(w, 1.0))[:, None, :])

    def dlambda(self, s, y, lam=None):
        return np.zeros((len(y), self.d))

    def with_slice(self, k: int, slice_values) -> "ThetaUField":
        vals = self.values.copy()
        vals[k] = slice_values
        return ThetaUField(self.times, self.states, vals)

    def to_csv(self, path):
        rows = []
        for k, t in enumerate(self.times):
            for j, v in enumerate(self.states):
                rows.append((t, v, *self.values[k, j]))
        header = ["t", "V"] + [f"theta_u_{i + 1}" for i in range(self.d)]
        return write_csv(path, header, rows)
