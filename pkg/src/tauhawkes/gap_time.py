"""Change-point exponential gap-time distribution.

Under constant regular/hot rates, the waiting time after an event has hazard
``lambda1`` up to the change point ``tau`` and ``lambda0`` afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidInputError


@dataclass(frozen=True)
class ChangePointExp:
    lambda0: float  # post-change rate
    lambda1: float  # pre-change rate
    tau: float

    def __post_init__(self):
        if not (self.lambda0 > 0 and self.lambda1 > 0):
            raise InvalidInputError("rates must be positive")
        if not (self.tau >= 0 and np.isfinite(self.tau)):
            raise InvalidInputError("tau must be finite and non-negative")

    @property
    def mass_before_change(self) -> float:
        """F(tau) = P(Y <= tau)."""
        return float(-np.expm1(-self.lambda1 * self.tau))


def _check_y(y):
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(np.isnan(y)):
        raise DomainError("gap time must be non-negative")
    return y


def gap_pdf(d: ChangePointExp, y):
    y = _check_y(y)
    pre = d.lambda1 * np.exp(-d.lambda1 * y)
    post = d.lambda0 * np.exp(-(d.lambda1 - d.lambda0) * d.tau - d.lambda0 * y)
    out = np.where(y <= d.tau, pre, post)
    return float(out) if out.ndim == 0 else out


def gap_sf(d: ChangePointExp, y):
    y = _check_y(y)
    pre = np.exp(-d.lambda1 * y)
    post = np.exp(-(d.lambda1 - d.lambda0) * d.tau - d.lambda0 * y)
    out = np.where(y <= d.tau, pre, post)
    return float(out) if out.ndim == 0 else out


def gap_cdf(d: ChangePointExp, y):
    y = _check_y(y)
    pre = -np.expm1(-d.lambda1 * y)
    post = -np.expm1(-(d.lambda1 - d.lambda0) * d.tau - d.lambda0 * y)
    out = np.where(y <= d.tau, pre, post)
    return float(out) if out.ndim == 0 else out


def gap_quantile(d: ChangePointExp, u):
    """Closed-form inverse CDF, branch picked by comparing ``u`` with F(tau)."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u >= 1)):
        raise DomainError("quantile level must lie in [0, 1)")
    pre = -np.log1p(-u) / d.lambda1
    post = (-np.log1p(-u) - (d.lambda1 - d.lambda0) * d.tau) / d.lambda0
    out = np.where(u <= d.mass_before_change, pre, post)
    return float(out) if out.ndim == 0 else out


def gap_sample(d: ChangePointExp, rng: np.random.Generator, size=None):
    """Two-stage draw: Exp(lambda1) if it lands before tau, else tau + Exp(lambda0)."""
    w1 = rng.exponential(1.0 / d.lambda1, size=size)
    if size is None:
        if w1 <= d.tau:
            return float(w1)
        return float(d.tau + rng.exponential(1.0 / d.lambda0))
    w1 = np.asarray(w1)
    late = w1 > d.tau
    out = w1.copy()
    out[late] = d.tau + rng.exponential(1.0 / d.lambda0, size=int(late.sum()))
    return out
