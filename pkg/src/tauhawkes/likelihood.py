"""Conditional, marginal and full-data log-likelihoods."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy.special import logsumexp

from .errors import InvalidInputError, ZeroIntensityWarning
from .process_model import ModelSpec, Segment

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}

# prior tail probabilities used to split the tau-integral into well-resolved pieces;
# geometric spacing in both tails keeps the quantile map close to linear on each piece
_TAIL_SPLITS = (1e-12, 1e-10, 1e-8, 1e-6, 1e-5, 1e-4, 1e-3, 0.01, 0.05, 0.1, 0.3)

# panel edges (fractions of 40 e-folds) for quadrature of steeply decaying cells
_PANELS = np.array([0.0, 2.0, 6.0, 14.0, 26.0, 40.0]) / 40.0


def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


@dataclass(frozen=True)
class SegmentTerms:
    """Per-segment quantities that do not depend on tau."""

    seg: Segment
    eta0: float
    eta1: float
    log_reg: np.ndarray  # log regular intensity at each event
    log_hot: np.ndarray  # log hot intensity at each event
    reg_total: float     # integral of the regular intensity over (0, E]


def segment_terms(spec: ModelSpec, seg: Segment) -> SegmentTerms:
    eta0, eta1 = spec.linear_predictors(seg.z)
    t = seg.times
    with np.errstate(divide="ignore"):
        lr = spec.regular.log_rate_at(t) + eta0
        lh = spec.hot_baseline.log_rate_at(t) + eta1
    reg_total = math.exp(eta0) * float(spec.regular.cumulative(np.array([seg.end]))[0])
    return SegmentTerms(seg, eta0, eta1, np.atleast_1d(lr), np.atleast_1d(lh), reg_total)


def _excess(spec: ModelSpec, terms: SegmentTerms, x):
    """D(x) = hot cumulative minus regular cumulative (both with covariate multipliers)."""
    if spec.proportional:
        return (math.exp(terms.eta1) - math.exp(terms.eta0)) * spec.regular.cumulative(x)
    return (math.exp(terms.eta1) * spec.hot.cumulative(x)
            - math.exp(terms.eta0) * spec.regular.cumulative(x))


def cond_loglik_tau(spec: ModelSpec, seg: Segment, taus, strict: bool = False,
                    terms: SegmentTerms | None = None) -> np.ndarray:
    """Conditional log-likelihood evaluated for an array of tau values.

    ``strict=True`` gives the left limit in tau: event k+1 counts as hot only
    when the preceding gap is strictly below tau.
    """
    right, left = cond_loglik_limits(spec, seg, taus, terms=terms, which="left" if strict else "right")
    return left if strict else right


def cond_loglik_limits(spec: ModelSpec, seg: Segment, taus, terms: SegmentTerms | None = None,
                       which: str = "both"):
    """Right and left limits in tau of the conditional log-likelihood.

    The function of tau jumps at every inter-event gap; the integral part is
    continuous, so only the event part differs between the two limits.
    """
    taus = np.asarray(taus, dtype=float)
    if terms is None:
        terms = segment_terms(spec, seg)
    if seg.n_events == 0:
        out = np.full(taus.shape, -terms.reg_total)
        return out, out
    t, g = seg.times, seg.gaps
    flat = taus.reshape(-1)
    stops = t[None, :] + np.minimum(flat[:, None], g[None, :])
    hot_excess = (_excess(spec, terms, stops) - _excess(spec, terms, t)[None, :]).sum(axis=1)
    base = terms.log_reg[0] - terms.reg_total - hot_excess
    prev_gaps = g[:-1]
    diff = terms.log_hot[1:] - terms.log_reg[1:]
    reg_sum = terms.log_reg[1:].sum()
    right = left = None
    if which in ("both", "right"):
        hot = prev_gaps[None, :] <= flat[:, None]
        right = (base + reg_sum + np.where(hot, diff[None, :], 0.0).sum(axis=1)).reshape(taus.shape)
    if which in ("both", "left"):
        hot = prev_gaps[None, :] < flat[:, None]
        left = (base + reg_sum + np.where(hot, diff[None, :], 0.0).sum(axis=1)).reshape(taus.shape)
    return right, left


def cond_loglik(spec: ModelSpec, seg: Segment, tau: float) -> float:
    """Log-likelihood of one segment given its hot duration ``tau``.

    Returns ``-inf`` (with a :class:`ZeroIntensityWarning`) when an event falls
    where the intensity is zero.
    """
    if not (tau >= 0):
        raise InvalidInputError("tau must be non-negative")
    val = float(cond_loglik_tau(spec, seg, np.array([tau]))[0])
    if val == -np.inf or np.isnan(val):
        warnings.warn(f"segment {seg.key}: zero intensity at an event time", ZeroIntensityWarning)
        return -np.inf
    return val


def full_loglik(spec: ModelSpec, segments: Sequence[Segment], taus) -> float:
    """Sum over segments of the conditional log-likelihood plus the log density of tau."""
    taus = np.asarray(taus, dtype=float).reshape(-1)
    if taus.size != len(segments):
        raise InvalidInputError("need exactly one tau per segment")
    if np.any(taus < 0):
        raise InvalidInputError("tau must be non-negative")
    terms = [cond_loglik(spec, seg, tau) + float(spec.tau_dist.logpdf(tau))
             for seg, tau in zip(segments, taus)]
    return math.fsum(terms)


# --------------------------------------------------------------------------
# marginal likelihood
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LikelihoodContext:
    spec: ModelSpec
    segments: tuple[Segment, ...]
    quadrature_nodes: int = 64

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.quadrature_nodes < 16:
            raise InvalidInputError("quadrature_nodes must be >= 16")
        for seg in self.segments:
            if len(seg.covariates) != self.spec.n_covariates:
                raise InvalidInputError(
                    f"segment {seg.key} has {len(seg.covariates)} covariates, "
                    f"model expects {self.spec.n_covariates}")


def likelihood_knots(spec: ModelSpec, seg: Segment, n_smooth: int = 128) -> np.ndarray:
    """Points in tau between which the conditional log-likelihood is linear.

    The log-likelihood jumps at every gap and changes slope wherever a hot
    window end crosses a baseline breakpoint. For smooth baselines a uniform
    grid of ``n_smooth`` points makes the piecewise-linear description an
    approximation.
    """
    t, g = seg.times, seg.gaps
    pts = [np.zeros(1), g]
    cuts = np.array(spec.regular.breakpoints + spec.hot_baseline.breakpoints, dtype=float)
    if cuts.size and t.size:
        c = cuts[None, :] - t[:, None]
        pts.append(c[(c > 0) & (c < g[:, None])])
    if n_smooth and (spec.regular.smooth or spec.hot_baseline.smooth) and g.size:
        pts.append(np.linspace(0.0, g.max(), n_smooth))
    return np.unique(np.concatenate(pts))


def log_tilted_gamma_mass(dist, a, b, la, slope) -> np.ndarray:
    """log of the integral over [a, b] of exp(la + slope (tau - a)) times the gamma density.

    Uses the exponentially tilted gamma law when ``rate > slope``; cells where
    that form is unusable fall back to 32-point Gauss-Legendre.
    """
    a, b, la, slope = (np.asarray(v, dtype=float) for v in (a, b, la, slope))
    k, r = dist.shape, dist.rate
    out = np.full(a.shape, -np.inf)
    rt = r - slope
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        xa, xb = rt * a, rt * b
        pa, pb = special.gammainc(k, xa), special.gammainc(k, xb)
        qa, qb = special.gammaincc(k, xa), special.gammaincc(k, xb)
        bracket = np.where(pa < 0.5, pb - pa, qa - qb)
        val = la - slope * a + k * (math.log(r) - np.log(rt)) + np.log(bracket)
    finite = np.isfinite(la)
    good = finite & (rt > 0) & (bracket > 1e-280) & np.isfinite(val)
    out[good] = val[good]
    slow = np.flatnonzero(finite & ~good & (b > a))
    if slow.size:
        lo, hi = a[slow], b[slow]
        # cells near zero relative to their width: the density's branch point spoils
        # quadrature, so difference the closed form of the integral from zero,
        # int_0^x t^(k-1) e^(c t) dt = x^k / k * e^(c x) * 1F1(1; k+1; -c x)
        # (1F1 overflows for large arguments; such cells sit far out where quadrature is fine)
        zero = (lo < hi - lo) & (np.abs(slope[slow] - r) * hi < 500.0)
        if np.any(zero):
            i = slow[zero]
            c = slope[i] - r

            def log_from_zero(x):
                z = -c * x
                # scipy's hyp1f1 returns nan for denormal-scale arguments; use the series there
                m = np.where(np.abs(z) < 1e-6, 1.0 + z / (k + 1.0) * (1.0 + z / (k + 2.0)),
                             special.hyp1f1(1.0, k + 1.0, z))
                with np.errstate(divide="ignore"):
                    return k * np.log(x) - math.log(k) - z + np.log(m)

            fb, fa = log_from_zero(b[i]), log_from_zero(a[i])
            with np.errstate(divide="ignore"):
                out[i] = (la[i] - slope[i] * a[i] + k * math.log(r) - special.gammaln(k)
                          + fb + np.log1p(-np.exp(fa - fb)))
        slow, lo, hi = slow[~zero], lo[~zero], hi[~zero]
    if slow.size:
        x, w = _gauss_legendre(32)
        if k < 1:
            # substitute u = tau**k to remove the density's singularity at zero
            h = hi ** k - lo ** k
            tau = (lo[:, None] ** k + h[:, None] * x[None, :]) ** (1.0 / k)
            dens = k * math.log(r) - special.gammaln(k) - r * tau - math.log(k)
        else:
            # cells reach this branch when the integrand is monotone across them and may fall
            # by many e-folds; the log-integrand is concave, so everything past 40 e-folds of
            # the initial decay from the high end is negligible. Composite GL on panels of at
            # most 14 e-folds covers the rest
            g_lo = slope[slow] - r + (k - 1.0) / lo
            g_hi = slope[slow] - r + (k - 1.0) / hi
            down = g_lo < 0
            lam = np.where(down, -g_lo, np.maximum(g_hi, 0.0))
            with np.errstate(divide="ignore"):
                reach = np.minimum(hi - lo, np.where(lam > 0, 40.0 / lam, np.inf))
            edges = reach[:, None] * _PANELS[None, :]
            width = np.diff(edges, axis=1)
            off = (edges[:, :-1, None] + width[:, :, None] * x[None, None, :]).reshape(slow.size, -1)
            w = (width[:, :, None] * w[None, None, :]).reshape(slow.size, -1)
            tau = np.where(down[:, None], lo[:, None] + off, hi[:, None] - off)
            dens = dist.logpdf(tau)
            h = np.ones_like(lo)
        lg = la[slow, None] + slope[slow, None] * (tau - lo[:, None]) + dens
        with np.errstate(divide="ignore"):
            out[slow] = logsumexp(lg + np.log(np.broadcast_to(w, lg.shape)), axis=1) + np.log(h)
    return out


def _piecewise_linear_loglik(spec, seg, terms, knots):
    right, left = cond_loglik_limits(spec, seg, knots, terms=terms)
    a, b = knots[:-1], knots[1:]
    la, lb = right[:-1], left[1:]
    with np.errstate(invalid="ignore"):
        slope = np.where(np.isfinite(la) & np.isfinite(lb), (lb - la) / (b - a), 0.0)
    cells = log_tilted_gamma_mass(spec.tau_dist, a, b, la, slope)
    sf = float(spec.tau_dist.sf(knots[-1]))
    tail = right[-1] + math.log(sf) if sf > 0 else -np.inf
    return float(logsumexp(np.append(cells, tail)))


def _prior_space_loglik(spec, seg, terms, nodes):
    """Gauss-Legendre in prior-probability space on each piece between kinks."""
    dist = spec.tau_dist
    g = seg.gaps
    top = float(g.max())
    p = np.array(_TAIL_SPLITS)
    splits = np.concatenate([dist.ppf(p), [float(dist.ppf(0.5))], dist.isf(p)])
    pts = np.unique(np.concatenate([[0.0], g, splits[splits < top], [top]]))
    a, b = pts[:-1], pts[1:]
    fa, fb = dist.cdf(a), dist.cdf(b)
    sa, sb = dist.sf(a), dist.sf(b)
    x, w = _gauss_legendre(nodes)
    lower = fb <= 0.5
    with np.errstate(divide="ignore"):
        mass = np.where(lower, fb - fa, sa - sb)
        tau_lo = dist.ppf(fa[:, None] + (fb - fa)[:, None] * x[None, :])
        tau_hi = dist.isf(sa[:, None] - (sa - sb)[:, None] * x[None, :])
    tau = np.where(lower[:, None], tau_lo, tau_hi)
    tau = np.clip(tau, a[:, None], b[:, None])
    ll = cond_loglik_tau(spec, seg, tau, terms=terms)
    with np.errstate(divide="ignore"):
        parts = (ll + np.log(w)[None, :] + np.log(mass)[:, None]).reshape(-1)
    sf = float(dist.sf(top))
    tail = cond_loglik_tau(spec, seg, np.array([top]), terms=terms)[0] + (math.log(sf) if sf > 0 else -np.inf)
    return float(logsumexp(np.append(parts, tail)))


def segment_marginal_loglik(spec: ModelSpec, seg: Segment, nodes: int = 64) -> float:
    """log of the integral over tau of exp(cond_loglik) times the gamma density.

    For constant and piecewise-constant baselines the conditional
    log-likelihood is piecewise linear in tau, so each piece integrates in
    closed form against the gamma law. Smooth baselines use Gauss-Legendre
    in prior-probability space, which absorbs any singularity of the density.
    """
    terms = segment_terms(spec, seg)
    if seg.n_events == 0:
        return -terms.reg_total
    if spec.regular.smooth or spec.hot_baseline.smooth:
        val = _prior_space_loglik(spec, seg, terms, nodes)
    else:
        val = _piecewise_linear_loglik(spec, seg, terms, likelihood_knots(spec, seg))
    if not np.isfinite(val):
        warnings.warn(f"segment {seg.key}: marginal likelihood integrand vanishes", ZeroIntensityWarning)
        return -np.inf
    return val


def marginal_loglik(ctx: LikelihoodContext, theta: ModelSpec | None = None) -> float:
    """Observed-data log-likelihood with each segment's tau integrated out."""
    spec = ctx.spec if theta is None else theta
    vals = [segment_marginal_loglik(spec, seg, ctx.quadrature_nodes) for seg in ctx.segments]
    return math.fsum(vals)
