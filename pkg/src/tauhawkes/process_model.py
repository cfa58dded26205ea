"""Two-regime intensity model with a latent hot-state duration.

A segment starts in the regular state. Every observed event switches the
process into the hot state, which lasts ``tau`` minutes unless another event
restarts it. The intensity is

    lambda(t) = lambda1(t) exp(beta1 . Z) S(t) + lambda0(t) exp(beta0 . Z) (1 - S(t))

with ``S(t) = 1`` iff ``t - T_last <= tau`` where ``T_last`` is the most
recent event strictly before ``t``. All times are in minutes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence, Union

import numpy as np
from scipy import integrate, special, stats

from .errors import DomainError, InvalidInputError

# 20-point Gauss-Legendre rule on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    """Time-constant baseline rate (events/min)."""

    rate: float

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise InvalidInputError(f"Constant rate must be positive, got {self.rate}")

    def rate_at(self, t):
        return np.full(np.shape(t), self.rate, dtype=float)

    def log_rate_at(self, t):
        return np.full(np.shape(t), math.log(self.rate), dtype=float)

    def cumulative(self, t):
        return self.rate * np.asarray(t, dtype=float)

    def integral(self, a: float, b: float, precise: bool = False) -> float:
        return self.rate * (b - a)

    def sup(self, a: float, b: float) -> float:
        return self.rate

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    smooth = False

    # parameter plumbing
    def names(self, prefix: str) -> list[str]:
        return [prefix]

    def to_x(self) -> np.ndarray:
        return np.array([math.log(self.rate)])

    def from_x(self, x) -> "Constant":
        return Constant(float(np.exp(x[0])))

    def log_mask(self) -> np.ndarray:
        return np.array([True])

    def natural(self) -> np.ndarray:
        return np.array([self.rate])


@dataclass(frozen=True)
class LogDoubleExp:
    """Baseline with ``log rate(t) = theta1 + theta2 (exp(-theta3 t) - exp(-theta4 t))``."""

    theta1: float
    theta2: float
    theta3: float
    theta4: float

    def __post_init__(self):
        vals = (self.theta1, self.theta2, self.theta3, self.theta4)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError("LogDoubleExp parameters must be finite")
        if self.theta3 <= 0 or self.theta4 <= 0:
            raise InvalidInputError("LogDoubleExp requires theta3 > 0 and theta4 > 0")

    def log_rate_at(self, t):
        t = np.asarray(t, dtype=float)
        return self.theta1 + self.theta2 * (np.exp(-self.theta3 * t) - np.exp(-self.theta4 * t))

    def rate_at(self, t):
        return np.exp(self.log_rate_at(t))

    @property
    def _panel(self) -> float:
        return min(1.0, 1.0 / max(self.theta3, self.theta4))

    def cumulative(self, t):
        """Composite 20-point Gauss-Legendre integral from 0 to ``t`` (vectorised)."""
        t = np.asarray(t, dtype=float)
        if t.size == 0:
            return np.zeros_like(t)
        w = self._panel
        tmax = float(np.max(t))
        n = max(int(math.ceil(tmax / w)), 1)
        left = np.arange(n) * w
        nodes = left[:, None] + w * _GL_X[None, :]
        panels = w * (self.rate_at(nodes) @ _GL_W)
        cum = np.concatenate([[0.0], np.cumsum(panels)])
        j = np.minimum(np.floor(t / w).astype(np.int64), n)
        j = np.maximum(j, 0)
        start = j * w
        rem = t - start
        part = rem * (self.rate_at(start[..., None] + rem[..., None] * _GL_X) @ _GL_W)
        return cum[j] + part

    def integral(self, a: float, b: float, precise: bool = False) -> float:
        if b <= a:
            return 0.0
        if precise:
            val, _ = integrate.quad(lambda s: float(self.rate_at(s)), a, b,
                                    epsabs=0.0, epsrel=1e-10, limit=200)
            return val
        c = self.cumulative(np.array([a, b]))
        return float(c[1] - c[0])

    def stationary_point(self) -> float | None:
        if self.theta3 == self.theta4 or self.theta2 == 0:
            return None
        return math.log(self.theta4 / self.theta3) / (self.theta4 - self.theta3)

    def sup(self, a: float, b: float) -> float:
        cand = [a, b]
        ts = self.stationary_point()
        if ts is not None and a < ts < b:
            cand.append(ts)
        return float(np.max(self.rate_at(np.array(cand)))) * 1.001

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    smooth = True

    def names(self, prefix: str) -> list[str]:
        return [f"{prefix}.theta{k}" for k in range(1, 5)]

    def to_x(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, math.log(self.theta3), math.log(self.theta4)])

    def from_x(self, x) -> "LogDoubleExp":
        return LogDoubleExp(float(x[0]), float(x[1]), float(np.exp(x[2])), float(np.exp(x[3])))

    def log_mask(self) -> np.ndarray:
        return np.array([False, False, True, True])

    def natural(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3, self.theta4])


@dataclass(frozen=True)
class PiecewiseConstant:
    """Step baseline: ``levels[j]`` on ``[cuts[j], cuts[j+1])``; the last level extends to infinity."""

    cuts: tuple[float, ...]
    levels: tuple[float, ...]

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        levels = tuple(float(v) for v in self.levels)
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "levels", levels)
        if len(cuts) == 0 or cuts[0] != 0.0:
            raise InvalidInputError("PiecewiseConstant cuts must start at 0")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise InvalidInputError("PiecewiseConstant cuts must be strictly ascending")
        if len(levels) != len(cuts):
            raise InvalidInputError("need one level per cut point (last level extends past the final cut)")
        if not all(np.isfinite(v) and v > 0 for v in levels):
            raise InvalidInputError("PiecewiseConstant levels must be positive")

    @cached_property
    def _cuts(self) -> np.ndarray:
        return np.asarray(self.cuts)

    @cached_property
    def _levels(self) -> np.ndarray:
        return np.asarray(self.levels)

    @cached_property
    def _cum_at_cuts(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self._levels[:-1] * np.diff(self._cuts))])

    def piece_index(self, t):
        idx = np.searchsorted(self._cuts, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, len(self.cuts) - 1)

    def rate_at(self, t):
        return self._levels[self.piece_index(t)]

    def log_rate_at(self, t):
        return np.log(self.rate_at(t))

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        j = self.piece_index(t)
        return self._cum_at_cuts[j] + self._levels[j] * (t - self._cuts[j])

    def integral(self, a: float, b: float, precise: bool = False) -> float:
        c = self.cumulative(np.array([a, b]))
        return float(c[1] - c[0])

    def sup(self, a: float, b: float) -> float:
        lo, hi = self.piece_index(a), self.piece_index(b)
        return float(np.max(self._levels[lo:hi + 1]))

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return self.cuts[1:]

    smooth = False

    def names(self, prefix: str) -> list[str]:
        edges = [f"{c:g}" for c in self.cuts] + ["inf"]
        return [f"{prefix}[{edges[j]},{edges[j + 1]})" for j in range(len(self.cuts))]

    def to_x(self) -> np.ndarray:
        return np.log(self._levels)

    def from_x(self, x) -> "PiecewiseConstant":
        return PiecewiseConstant(self.cuts, tuple(float(v) for v in np.exp(x)))

    def log_mask(self) -> np.ndarray:
        return np.ones(len(self.cuts), dtype=bool)

    def natural(self) -> np.ndarray:
        return self._levels.copy()


BaselineSpec = Union[Constant, LogDoubleExp, PiecewiseConstant]


@dataclass(frozen=True)
class Proportional:
    """Hot baseline equal to the regular baseline times ``exp(nu)``."""

    nu: float

    def __post_init__(self):
        if not np.isfinite(self.nu):
            raise InvalidInputError("nu must be finite")


# --------------------------------------------------------------------------
# Hot-state duration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HotDurationDist:
    """Gamma(shape, rate) distribution of the hot-state duration."""

    shape: float
    rate: float

    def __post_init__(self):
        for name in ("shape", "rate"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidInputError(f"gamma {name} must be positive, got {v}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def var(self) -> float:
        return self.shape / self.rate ** 2

    @property
    def sd(self) -> float:
        return math.sqrt(self.shape) / self.rate

    def logpdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        with np.errstate(divide="ignore"):
            return (self.shape * math.log(self.rate) - special.gammaln(self.shape)
                    + (self.shape - 1.0) * np.log(tau) - self.rate * tau)

    def pdf(self, tau):
        return stats.gamma.pdf(tau, self.shape, scale=1.0 / self.rate)

    def cdf(self, tau):
        return special.gammainc(self.shape, self.rate * np.maximum(np.asarray(tau, dtype=float), 0.0))

    def sf(self, tau):
        return special.gammaincc(self.shape, self.rate * np.maximum(np.asarray(tau, dtype=float), 0.0))

    def ppf(self, q):
        return special.gammaincinv(self.shape, np.asarray(q, dtype=float)) / self.rate

    def isf(self, q):
        return special.gammainccinv(self.shape, np.asarray(q, dtype=float)) / self.rate

    def sample(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)


def gamma_moments(dist: HotDurationDist) -> tuple[float, float]:
    """Mean and standard deviation of the hot-duration gamma distribution."""
    if not (dist.shape > 0 and dist.rate > 0):
        raise InvalidInputError("gamma parameters must be positive")
    return dist.mean, dist.sd


# --------------------------------------------------------------------------
# Model specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Full parameterisation for one team/process.

    ``hot`` is either a :class:`Proportional` multiplier on the regular
    baseline or a baseline of its own. ``beta_hot=None`` means the hot state
    shares ``beta_regular``.
    """

    regular: BaselineSpec
    hot: Union[Proportional, BaselineSpec]
    beta_regular: tuple[float, ...] = ()
    beta_hot: tuple[float, ...] | None = None
    tau_dist: HotDurationDist = field(default_factory=lambda: HotDurationDist(4.0, 2.0))
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "beta_regular", tuple(float(b) for b in self.beta_regular))
        if self.beta_hot is not None:
            object.__setattr__(self, "beta_hot", tuple(float(b) for b in self.beta_hot))
            if len(self.beta_hot) != len(self.beta_regular):
                raise InvalidInputError("beta_hot and beta_regular must have equal length")
        if not all(np.isfinite(self.beta_regular)) or (
                self.beta_hot is not None and not all(np.isfinite(self.beta_hot))):
            raise InvalidInputError("covariate effects must be finite")
        if self.covariate_names and len(self.covariate_names) != len(self.beta_regular):
            raise InvalidInputError("covariate_names length must match beta length")

    @property
    def n_covariates(self) -> int:
        return len(self.beta_regular)

    @property
    def proportional(self) -> bool:
        return isinstance(self.hot, Proportional)

    @property
    def hot_baseline(self) -> BaselineSpec:
        return self.regular if self.proportional else self.hot

    def check_covariates(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.size != self.n_covariates:
            raise InvalidInputError(
                f"covariate vector has length {z.size}, model expects {self.n_covariates}")
        return z

    def linear_predictors(self, z) -> tuple[float, float]:
        """Log multipliers (regular, hot) applied to the respective baselines."""
        z = self.check_covariates(z)
        b0 = np.asarray(self.beta_regular)
        eta0 = float(b0 @ z) if z.size else 0.0
        if self.beta_hot is None:
            eta1 = eta0
        else:
            eta1 = float(np.asarray(self.beta_hot) @ z) if z.size else 0.0
        if self.proportional:
            eta1 += self.hot.nu
        return eta0, eta1

    def regular_rate(self, t, z):
        eta0, _ = self.linear_predictors(z)
        return self.regular.rate_at(t) * math.exp(eta0)

    def hot_rate(self, t, z):
        _, eta1 = self.linear_predictors(z)
        return self.hot_baseline.rate_at(t) * math.exp(eta1)

    # -- parameter vector -------------------------------------------------

    def _blocks(self):
        blocks = [("lambda0", self.regular)]
        if not self.proportional:
            blocks.append(("lambda1", self.hot))
        return blocks

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for prefix, b in self._blocks():
            names += b.names(prefix)
        if self.proportional:
            names.append("nu")
        cov = self.covariate_names or tuple(f"Z{j + 1}" for j in range(self.n_covariates))
        names += [f"beta[{c}]" for c in cov]
        if self.beta_hot is not None:
            names += [f"beta1[{c}]" for c in cov]
        names += ["tau_shape", "tau_rate"]
        return names

    def to_unconstrained(self) -> np.ndarray:
        parts = [b.to_x() for _, b in self._blocks()]
        if self.proportional:
            parts.append(np.array([self.hot.nu]))
        parts.append(np.asarray(self.beta_regular, dtype=float))
        if self.beta_hot is not None:
            parts.append(np.asarray(self.beta_hot, dtype=float))
        parts.append(np.log([self.tau_dist.shape, self.tau_dist.rate]))
        return np.concatenate(parts)

    def log_mask(self) -> np.ndarray:
        parts = [b.log_mask() for _, b in self._blocks()]
        if self.proportional:
            parts.append(np.array([False]))
        parts.append(np.zeros(self.n_covariates, dtype=bool))
        if self.beta_hot is not None:
            parts.append(np.zeros(self.n_covariates, dtype=bool))
        parts.append(np.array([True, True]))
        return np.concatenate(parts)

    def natural_parameters(self) -> np.ndarray:
        parts = [b.natural() for _, b in self._blocks()]
        if self.proportional:
            parts.append(np.array([self.hot.nu]))
        parts.append(np.asarray(self.beta_regular, dtype=float))
        if self.beta_hot is not None:
            parts.append(np.asarray(self.beta_hot, dtype=float))
        parts.append(np.array([self.tau_dist.shape, self.tau_dist.rate]))
        return np.concatenate(parts)

    def with_unconstrained(self, x) -> "ModelSpec":
        x = np.asarray(x, dtype=float)
        if x.size != self.to_unconstrained().size:
            raise InvalidInputError("parameter vector has the wrong length")
        pos = 0

        def take(n):
            nonlocal pos
            out = x[pos:pos + n]
            pos += n
            return out

        regular = self.regular.from_x(take(self.regular.to_x().size))
        if self.proportional:
            hot = Proportional(float(take(1)[0]))
        else:
            hot = self.hot.from_x(take(self.hot.to_x().size))
        p = self.n_covariates
        beta0 = tuple(take(p))
        beta1 = tuple(take(p)) if self.beta_hot is not None else None
        shape, rate = np.exp(take(2))
        return replace(self, regular=regular, hot=hot, beta_regular=beta0, beta_hot=beta1,
                       tau_dist=HotDurationDist(float(shape), float(rate)))

    def tau_slice(self) -> slice:
        n = self.to_unconstrained().size
        return slice(n - 2, n)


# --------------------------------------------------------------------------
# Standard model variants
# --------------------------------------------------------------------------

REGULAR_CUTS = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 27.5, 40.0)
HOT_CUTS = (0.0, 5.0, 10.0, 15.0, 20.0, 30.0)


def model_a(rate, nu, beta=(), tau=(4.0, 2.0), covariate_names=()) -> ModelSpec:
    """Constant baseline with a proportional hot-state multiplier ``exp(nu)``."""
    return ModelSpec(Constant(rate), Proportional(nu), tuple(beta), None,
                     HotDurationDist(*tau), tuple(covariate_names))


def model_b(theta, nu, beta=(), tau=(4.0, 2.0), covariate_names=()) -> ModelSpec:
    """Parametric log-double-exponential baseline with a proportional hot multiplier."""
    return ModelSpec(LogDoubleExp(*theta), Proportional(nu), tuple(beta), None,
                     HotDurationDist(*tau), tuple(covariate_names))


def model_c(levels, nu, beta=(), tau=(4.0, 2.0), cuts=REGULAR_CUTS, covariate_names=()) -> ModelSpec:
    """Piecewise-constant baseline with a proportional hot multiplier."""
    return ModelSpec(PiecewiseConstant(tuple(cuts), tuple(levels)), Proportional(nu), tuple(beta),
                     None, HotDurationDist(*tau), tuple(covariate_names))


def model_d(levels0, levels1, beta0=(), beta1=(), tau=(4.0, 2.0), cuts0=REGULAR_CUTS,
            cuts1=HOT_CUTS, covariate_names=()) -> ModelSpec:
    """Separate piecewise-constant baselines and covariate effects per state."""
    return ModelSpec(PiecewiseConstant(tuple(cuts0), tuple(levels0)),
                     PiecewiseConstant(tuple(cuts1), tuple(levels1)),
                     tuple(beta0), tuple(beta1), HotDurationDist(*tau), tuple(covariate_names))


# --------------------------------------------------------------------------
# Segments and hot timelines
# --------------------------------------------------------------------------


def _validate_events(events, end) -> np.ndarray:
    ev = np.asarray(events, dtype=float).reshape(-1)
    if not np.all(np.isfinite(ev)):
        raise InvalidInputError("event times must be finite")
    if ev.size and np.any(np.diff(ev) <= 0):
        raise InvalidInputError("event times must be strictly ascending")
    if ev.size and (ev[0] <= 0 or ev[-1] > end):
        raise InvalidInputError(f"event times must lie in (0, {end}]")
    return ev


@dataclass(frozen=True, eq=False)
class Segment:
    """One observation window ``(0, end]`` with constant covariates and ordered event times."""

    end: float
    events: tuple[float, ...] = ()
    covariates: tuple[float, ...] = ()
    match_id: str = "0"
    index: int = 0

    def __post_init__(self):
        end = float(self.end)
        if not (np.isfinite(end) and end > 0):
            raise InvalidInputError(f"segment {self.key}: end time must be positive")
        object.__setattr__(self, "end", end)
        try:
            ev = _validate_events(self.events, end)
        except InvalidInputError as exc:
            raise InvalidInputError(f"segment {self.key}: {exc}") from None
        object.__setattr__(self, "events", tuple(float(e) for e in ev))
        z = tuple(float(v) for v in self.covariates)
        if not all(np.isfinite(z)):
            raise InvalidInputError(f"segment {self.key}: covariates must be finite")
        object.__setattr__(self, "covariates", z)
        object.__setattr__(self, "match_id", str(self.match_id))
        object.__setattr__(self, "index", int(self.index))

    @property
    def key(self) -> tuple[str, int]:
        return (str(self.match_id), int(self.index))

    @cached_property
    def times(self) -> np.ndarray:
        a = np.asarray(self.events, dtype=float)
        a.setflags(write=False)
        return a

    @cached_property
    def z(self) -> np.ndarray:
        a = np.asarray(self.covariates, dtype=float)
        a.setflags(write=False)
        return a

    @property
    def n_events(self) -> int:
        return len(self.events)

    @cached_property
    def gaps(self) -> np.ndarray:
        """Time from each event to the next event, or to the segment end for the last one."""
        t = self.times
        if t.size == 0:
            return np.empty(0)
        nxt = np.append(t[1:], self.end)
        return nxt - t

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        return (self.end == other.end and self.events == other.events
                and self.covariates == other.covariates and self.key == other.key)

    def __hash__(self):
        return hash((self.end, self.events, self.covariates, self.key))

    def truncated(self, t: float, include_at_t: bool = True) -> "Segment":
        """History up to time ``t``: a segment ending at ``t``."""
        ev = self.times
        keep = ev[ev <= t] if include_at_t else ev[ev < t]
        return Segment(t, tuple(keep), self.covariates, self.match_id, self.index)


@dataclass(frozen=True)
class HotTimeline:
    """Disjoint ordered hot intervals ``(start, stop]`` inside a segment."""

    intervals: tuple[tuple[float, float], ...]

    @property
    def total_length(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    def contains(self, t: float) -> bool:
        return any(a < t <= b for a, b in self.intervals)

    def __len__(self):
        return len(self.intervals)


def hot_timeline(events, tau: float, end: float) -> HotTimeline:
    """Hot intervals implied by the observed events and a hot duration ``tau``."""
    if tau < 0 or not np.isfinite(tau):
        raise InvalidInputError("tau must be a finite non-negative number")
    ev = _validate_events(events, end)
    out: list[list[float]] = []
    for k, t in enumerate(ev):
        nxt = ev[k + 1] if k + 1 < ev.size else end
        stop = min(t + tau, nxt, end)
        if stop <= t:
            continue
        if out and out[-1][1] >= t:
            out[-1][1] = float(max(out[-1][1], stop))
        else:
            out.append([float(t), float(stop)])
    return HotTimeline(tuple((a, b) for a, b in out))


def is_hot(seg: Segment, tau: float, t) -> np.ndarray:
    """Hot-state indicator S(t) using events strictly before ``t``."""
    t = np.asarray(t, dtype=float)
    ev = seg.times
    idx = np.searchsorted(ev, t, side="left") - 1
    last = np.where(idx >= 0, ev[np.maximum(idx, 0)] if ev.size else 0.0, np.nan)
    with np.errstate(invalid="ignore"):
        return (idx >= 0) & (t - last <= tau)


def intensity_at(spec: ModelSpec, seg: Segment, tau: float, t: float) -> float:
    """Conditional intensity at ``t`` given the history strictly before ``t``."""
    if not (0 < t <= seg.end):
        raise DomainError(f"t={t} outside (0, {seg.end}]")
    if tau < 0:
        raise InvalidInputError("tau must be non-negative")
    if bool(is_hot(seg, tau, t)):
        return float(spec.hot_rate(t, seg.z))
    return float(spec.regular_rate(t, seg.z))


def cumulative_intensity(spec: ModelSpec, seg: Segment, tau: float, a: float, b: float) -> float:
    """Integral of the conditional intensity over ``[a, b]``.

    The interval is split at hot-window boundaries; each piece is integrated in
    closed form (constant / piecewise baselines) or by adaptive Gauss-Kronrod
    quadrature (log-double-exponential baseline).
    """
    if a > b:
        raise DomainError(f"a={a} > b={b}")
    if a < 0 or b > seg.end:
        raise DomainError(f"[{a}, {b}] not within [0, {seg.end}]")
    if a == b:
        return 0.0
    eta0, eta1 = spec.linear_predictors(seg.z)
    reg, hotb = spec.regular, spec.hot_baseline
    total = 0.0
    cursor = a
    for lo, hi in hot_timeline(seg.times, tau, seg.end).intervals:
        lo, hi = max(lo, a), min(hi, b)
        if hi <= lo:
            continue
        if lo > cursor:
            total += math.exp(eta0) * reg.integral(cursor, lo, precise=True)
        total += math.exp(eta1) * hotb.integral(lo, hi, precise=True)
        cursor = hi
    if b > cursor:
        total += math.exp(eta0) * reg.integral(cursor, b, precise=True)
    return float(total)
