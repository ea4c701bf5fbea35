"""HARA utility over consumption and terminal wealth, with CRRA as the zero-floor case.

    u(t, c) = w e^{-disc t} (c - cbar)^{1-gamma} / (1-gamma)
    U(T, x) = (1-w) e^{-disc T} (x - xbar)^{1-gamma} / (1-gamma)

Times are absolute (years from 0).  All evaluators broadcast over numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameters

TERMINAL = "terminal"
CONSUMPTION = "consumption"


@dataclass(frozen=True)
class UtilitySpec:
    gamma: float
    xbar: float = 0.0
    cbar: float = 0.0
    w: float = 0.0
    discount: float = 0.0

    def __post_init__(self):
        bad = []
        if not (self.gamma > 0 and self.gamma != 1):
            bad.append(f"gamma must be > 0 and != 1 (got {self.gamma})")
        if not 0 <= self.w <= 1:
            bad.append(f"w must lie in [0, 1] (got {self.w})")
        if self.xbar < 0:
            bad.append(f"xbar must be >= 0 (got {self.xbar})")
        if self.cbar < 0:
            bad.append(f"cbar must be >= 0 (got {self.cbar})")
        if not math.isfinite(self.discount):
            bad.append("discount must be finite")
        if bad:
            raise InvalidParameters(bad)

    @property
    def is_crra(self) -> bool:
        return self.xbar == 0 and self.cbar == 0

    @property
    def has_terminal(self) -> bool:
        return self.w < 1

    @property
    def has_consumption(self) -> bool:
        return self.w > 0

    def crra(self) -> "UtilitySpec":
        """Same preferences with both floors removed."""
        return UtilitySpec(self.gamma, 0.0, 0.0, self.w, self.discount)

    def as_dict(self) -> dict:
        return {"gamma": self.gamma, "xbar": self.xbar, "cbar": self.cbar,
                "w": self.w, "discount": self.discount}


def _scale(spec: UtilitySpec, t, which: str):
    """Weight ``k`` and floor of the selected utility at time ``t``."""
    if which == TERMINAL:
        if not spec.has_terminal:
            raise ValueError("terminal utility is inactive (w = 1)")
        return (1.0 - spec.w) * np.exp(-spec.discount * np.asarray(t, dtype=float)), spec.xbar
    if which == CONSUMPTION:
        if not spec.has_consumption:
            raise ValueError("consumption utility is inactive (w = 0)")
        return spec.w * np.exp(-spec.discount * np.asarray(t, dtype=float)), spec.cbar
    raise ValueError(f"unknown utility {which!r}")


def _positive(y):
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise ValueError("marginal-utility level must be > 0")
    return y


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def marginal_utility(spec: UtilitySpec, t, x, which: str = TERMINAL):
    k, floor = _scale(spec, t, which)
    x = np.asarray(x, dtype=float)
    if np.any(~(x > floor)):
        raise ValueError("argument must exceed the floor")
    return _out(k * (x - floor) ** (-spec.gamma))


def inverse_marginal(spec: UtilitySpec, t, y, which: str = TERMINAL):
    k, floor = _scale(spec, t, which)
    y = _positive(y)
    return _out(floor + (k / y) ** (1.0 / spec.gamma))


def inverse_marginal_terminal(spec: UtilitySpec, T, y):
    """Terminal wealth at which the marginal utility of ``U(T, .)`` equals ``y``."""
    return inverse_marginal(spec, T, y, TERMINAL)


def inverse_marginal_consumption(spec: UtilitySpec, t, y):
    """Consumption rate at which the marginal utility of ``u(t, .)`` equals ``y``."""
    return inverse_marginal(spec, t, y, CONSUMPTION)


def inverse_marginal_derivative(spec: UtilitySpec, t, y, which: str = TERMINAL):
    """``dI/dy = -(1/gamma) (k/y)^{1/gamma} / y``; strictly negative."""
    k, _ = _scale(spec, t, which)
    y = _positive(y)
    return _out(-(k / y) ** (1.0 / spec.gamma) / (spec.gamma * y))
