"""Monte Carlo EM estimation, tau-posterior sampling and Louis standard errors."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special

from .errors import IdentifiabilityWarning, InvalidInputError, NumericalError
from .likelihood import (cond_loglik_limits, cond_loglik_tau, likelihood_knots, log_tilted_gamma_mass,
                         segment_terms)
from .process_model import (Constant, HotDurationDist, LogDoubleExp, ModelSpec, PiecewiseConstant,
                            Proportional, Segment)

log = logging.getLogger(__name__)

_TAU_FLOOR = 1e-12


# --------------------------------------------------------------------------
# tau posterior on a grid
# --------------------------------------------------------------------------


def tau_grid(dist: HotDurationDist, n_quantile: int = 256, n_uniform: int = 256) -> np.ndarray:
    """Base knots: equal-probability prior quantiles plus a uniform grid up to the 1-1e-10 quantile."""
    q = dist.ppf(np.linspace(0.0, 1.0, n_quantile + 1)[:-1])
    upper = float(dist.isf(1e-10))
    return np.unique(np.concatenate([q, np.linspace(0.0, upper, n_uniform)]))


def _within_cell(dist: HotDurationDist, a, b, frac):
    """Offset from ``a`` at probability ``frac`` within the cell ``[a, b]``.

    The prior density is taken log-linear across the cell, which matches the
    prior-shaped cell masses to second order in the cell width; plain linear
    interpolation leaves a first-order bias in moments such as E[log tau].
    """
    w = b - a
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        c = (dist.logpdf(b) - dist.logpdf(a))  # slope times width
        y = np.log1p(frac * np.expm1(c)) / c * w
    flat = ~np.isfinite(y) | (np.abs(c) < 1e-8)
    return np.where(flat, frac * w, np.clip(y, 0.0, w))


@dataclass(frozen=True)
class TauPosterior:
    """Grid representation of the posterior of one segment's hot duration.

    Cell masses integrate the likelihood against the prior measure with the
    trapezoid rule; above the last knot the likelihood is constant, so the
    tail is the prior tail times that constant. ``nodes is None`` means the
    likelihood is flat in tau and the posterior is the prior.
    """

    dist: HotDurationDist
    nodes: np.ndarray | None = None
    mass: np.ndarray | None = None
    cum: np.ndarray | None = None
    lik: np.ndarray | None = None  # average relative likelihood per cell
    tail: float = 0.0
    tail_lik: float = 0.0
    total: float = 1.0
    log_scale: float = 0.0  # likelihood values are relative to exp(log_scale)

    @property
    def is_prior(self) -> bool:
        return self.nodes is None

    @property
    def log_evidence(self) -> float:
        """log of the integral of the conditional likelihood against the prior (up to the grid rule)."""
        return self.log_scale + math.log(self.total)

    def reweighted(self, dist: HotDurationDist) -> "TauPosterior":
        """Same likelihood grid under a different gamma prior."""
        if self.is_prior:
            return TauPosterior(dist, log_scale=self.log_scale)
        return _assemble(dist, self.nodes, self.lik, self.tail_lik, self.log_scale)

    def sample(self, rng: np.random.Generator, m: int, strata: tuple[int, int] | None = None) -> np.ndarray:
        """Inverse-CDF draws. ``strata=(offset, total)`` puts draw ``j`` in the
        probability stratum ``[(offset + j) / total, (offset + j + 1) / total)``;
        each draw is still uniform within its stratum."""
        if strata is None:
            if self.is_prior:
                return np.maximum(self.dist.sample(rng, m), _TAU_FLOOR)
            v = rng.random(m)
        else:
            offset, total = strata
            v = (offset + np.arange(m) + rng.random(m)) / total
            if self.is_prior:
                return np.maximum(self.dist.ppf(v), _TAU_FLOOR)
        u = v * self.total
        cum, mass, nodes = self.cum, self.mass, self.nodes
        j = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, mass.size - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(mass[j] > 0, (u - cum[j]) / mass[j], 0.0)
        frac = np.clip(frac, 0.0, 1.0)
        out = nodes[j] + _within_cell(self.dist, nodes[j], nodes[j + 1], frac)
        in_tail = u >= cum[-1]
        if np.any(in_tail) and self.tail > 0:
            v = (u[in_tail] - cum[-1]) / self.tail
            out[in_tail] = self.dist.isf(self.dist.sf(nodes[-1]) * (1.0 - v))
        return np.maximum(out, _TAU_FLOOR)

    def cdf(self, x):
        """Posterior CDF; within a cell it follows the prior CDF shape."""
        x = np.asarray(x, dtype=float)
        if self.is_prior:
            return self.dist.cdf(x)
        nodes = self.nodes
        fx = self.dist.cdf(x)
        j = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, self.mass.size - 1)
        fa, fb = self.dist.cdf(nodes[j]), self.dist.cdf(nodes[j + 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(fb > fa, (fx - fa) / (fb - fa),
                         (x - nodes[j]) / (nodes[j + 1] - nodes[j]))
        inside = self.cum[j] + self.mass[j] * np.clip(w, 0.0, 1.0)
        sf_top = self.dist.sf(nodes[-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            tail_part = self.cum[-1] + self.tail * np.where(
                sf_top > 0, 1.0 - self.dist.sf(x) / sf_top, 1.0)
        out = np.where(x >= nodes[-1], tail_part, inside)
        out = np.where(x <= 0, 0.0, out)
        return np.clip(out / self.total, 0.0, 1.0)

    def sf(self, x):
        return 1.0 - self.cdf(x)

    def mean(self) -> float:
        d = self.dist
        if self.is_prior:
            return d.mean
        # E[tau; a < tau < b] under the prior equals mean * (G(b) - G(a)), G = Gamma(shape+1) cdf
        g = special.gammainc(d.shape + 1.0, d.rate * self.nodes)
        part = d.mean * np.diff(g)
        tail = self.tail_lik * d.mean * special.gammaincc(d.shape + 1.0, d.rate * self.nodes[-1])
        return float((np.sum(self.lik * part) + tail) / self.total)


def tau_posterior(spec: ModelSpec, seg: Segment, base_nodes: np.ndarray | None = None,
                  n_quantile: int = 256, n_uniform: int = 256, terms=None) -> TauPosterior:
    dist = spec.tau_dist
    if terms is None:
        terms = segment_terms(spec, seg)
    if seg.n_events == 0:
        return TauPosterior(dist, log_scale=-terms.reg_total)
    if base_nodes is None:
        base_nodes = tau_grid(dist, n_quantile, n_uniform)
    nodes = np.unique(np.concatenate([base_nodes, seg.gaps]))
    ll_r, ll_l = cond_loglik_limits(spec, seg, nodes, terms=terms)
    if np.ptp(ll_r) == 0 and np.ptp(ll_l) == 0 and ll_r[0] == ll_l[0]:
        return TauPosterior(dist, log_scale=float(ll_r[0]))
    c = max(np.max(ll_r), np.max(ll_l))
    if not np.isfinite(c):
        raise NumericalError(f"segment {seg.key}: degenerate tau posterior (log-likelihood {c})")
    lr, ll = np.exp(ll_r - c), np.exp(ll_l - c)
    try:
        return _assemble(dist, nodes, 0.5 * (lr[:-1] + ll[1:]), float(lr[-1]), float(c))
    except NumericalError as exc:
        raise NumericalError(f"segment {seg.key}: {exc}") from None


def cell_probabilities(dist: HotDurationDist, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Prior mass of each cell between consecutive nodes and of the tail beyond the last node."""
    cdf, sf = dist.cdf(nodes), dist.sf(nodes)
    # differences of the survival function keep precision in the upper tail
    prob = np.where(cdf[1:] < 0.5, np.diff(cdf), sf[:-1] - sf[1:])
    return prob, sf[-1]


def _assemble(dist, nodes, lik, tail_lik, log_scale) -> TauPosterior:
    prob, sf_top = cell_probabilities(dist, nodes)
    mass = prob * lik
    tail = float(sf_top) * tail_lik
    cum = np.concatenate([[0.0], np.cumsum(mass)])
    total = float(cum[-1] + tail)
    if not (np.isfinite(total) and total > 0):
        raise NumericalError(f"degenerate tau posterior normaliser {total}")
    return TauPosterior(dist, nodes, mass, cum, lik, tail, tail_lik, total, log_scale)


def sample_tau_posterior(spec: ModelSpec, seg: Segment, m: int, rng: np.random.Generator,
                         n_quantile: int = 256, n_uniform: int = 256) -> np.ndarray:
    """Draw ``m`` hot durations from the segment's posterior by grid inverse-CDF."""
    if m < 1:
        raise InvalidInputError("m must be >= 1")
    return tau_posterior(spec, seg, n_quantile=n_quantile, n_uniform=n_uniform).sample(rng, m)


def segment_rng(seed, *key: int) -> np.random.Generator:
    """Independent stream per (stage, iteration, segment) so results ignore thread count."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


# --------------------------------------------------------------------------
# configuration and results
# --------------------------------------------------------------------------


MIN_SE_DRAWS = 500


@dataclass(frozen=True)
class McemConfig:
    max_iters: int = 100
    initial_draws: int = 200
    growth: float = 1.5
    max_draws: int = 5000
    tol: float = 1e-3
    patience: int = 3
    seed: int = 0
    optimizer: str = "L-BFGS-B"  # finite-difference quasi-Newton; "Nelder-Mead" for simplex
    grid_quantiles: int = 256
    grid_uniform: int = 256
    cell_width: float = 0.02  # occupancy cells for smooth baselines
    fixed: tuple[str, ...] = ()
    fixed_tau: float | None = None
    se_draws: int = 1000
    fd_step: float = 1e-5
    threads: int = 1
    track_mc_error: bool = False
    tau_update: str = "marginal"  # "marginal": maximise the tau-integrated likelihood; "em": draw-based

    def __post_init__(self):
        if self.tol <= 0:
            raise InvalidInputError("tol must be positive")
        if self.patience < 1:
            raise InvalidInputError("patience must be >= 1")
        if self.growth < 1 or self.initial_draws < 1 or self.max_draws < self.initial_draws:
            raise InvalidInputError("draw schedule must be nondecreasing")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        if self.optimizer not in ("L-BFGS-B", "Nelder-Mead"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.tau_update not in ("marginal", "em"):
            raise InvalidInputError(f"unknown tau_update {self.tau_update!r}")
        if self.fixed_tau is not None and self.fixed_tau < 0:
            raise InvalidInputError("fixed_tau must be non-negative")
        if 0 < self.se_draws < MIN_SE_DRAWS:
            raise InvalidInputError(f"se_draws must be 0 (skip) or >= {MIN_SE_DRAWS}")

    def draws(self, d: int) -> int:
        return int(min(round(self.initial_draws * self.growth ** d), self.max_draws))


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    params: dict[str, float]
    q_value: float       # Q~(theta_new | theta_old)
    q_previous: float    # Q~(theta_old | theta_old)
    draws: int
    rel_change: float
    mc_se: float = float("nan")
    loglik: float = float("nan")  # grid approximation of the observed-data log-likelihood at params


@dataclass(frozen=True)
class LouisResult:
    names: tuple[str, ...]
    information: np.ndarray
    se_unconstrained: np.ndarray
    se_natural: np.ndarray
    available: np.ndarray
    min_eigenvalue: float

    @property
    def positive_definite(self) -> bool:
        return bool(self.min_eigenvalue > 0)

    def as_dict(self) -> dict[str, float]:
        return {n: float(s) for n, s in zip(self.names, self.se_natural)}


@dataclass(frozen=True)
class FitResult:
    theta_hat: ModelSpec
    trace: tuple[TraceRecord, ...]
    converged: bool
    fixed: tuple[str, ...] = ()
    fixed_tau: float | None = None
    louis: LouisResult | None = None
    message: str = ""

    @property
    def standard_errors(self) -> dict[str, float]:
        """Natural-scale standard errors; NaN marks a parameter whose SE is unavailable."""
        names = self.theta_hat.parameter_names()
        out = {n: float("nan") for n in names}
        if self.louis is not None:
            out.update(self.louis.as_dict())
        return out

    def estimates(self) -> dict[str, float]:
        return dict(zip(self.theta_hat.parameter_names(), self.theta_hat.natural_parameters()))


# --------------------------------------------------------------------------
# E-step summaries
# --------------------------------------------------------------------------


def _cell_edges(spec: ModelSpec, segments: Sequence[Segment], width: float) -> np.ndarray:
    tmax = max(seg.end for seg in segments)
    pts = [0.0, tmax]
    for b in (spec.regular, spec.hot_baseline):
        pts += [c for c in b.breakpoints if c < tmax]
        if b.smooth:
            pts += list(np.arange(0.0, tmax, width))
    return np.unique(np.asarray(pts, dtype=float))


@dataclass
class _Stats:
    """Draw-averaged sufficient statistics of the E-step."""

    p_hot: np.ndarray        # per event, posterior fraction in hot state (0 for first events)
    occ_seg: np.ndarray      # COO: segment index
    occ_cell: np.ndarray     # COO: cell index
    occ: np.ndarray          # expected hot time in the cell
    sum_tau: float
    sum_log_tau: float
    n: int


def _segment_summary(seg: Segment, draws: np.ndarray, edges: np.ndarray):
    ds = np.sort(draws)
    m = ds.size
    prefix = np.concatenate([[0.0], np.cumsum(ds)])
    p_hot = np.zeros(seg.n_events)
    if seg.n_events > 1:
        p_hot[1:] = 1.0 - np.searchsorted(ds, seg.gaps[:-1], side="left") / m
    cells, occ = [], []
    tmax = ds[-1]
    for t0, g in zip(seg.times, seg.gaps):
        hi = min(g, tmax)
        if hi <= 0:
            continue
        inner = edges[(edges > t0) & (edges < t0 + hi)] - t0
        x = np.concatenate([[0.0], inner, [hi]])
        n_lt = np.searchsorted(ds, x, side="left")
        a = (prefix[n_lt] + x * (m - n_lt)) / m
        cells.append(np.searchsorted(edges, t0 + x[:-1], side="right") - 1)
        occ.append(np.diff(a))
    return p_hot, cells, occ, float(ds.sum() / m), float(np.log(ds).sum() / m)


class _QFunction:
    """Q~(theta) assembled from E-step summaries; cheap to evaluate repeatedly."""

    def __init__(self, template: ModelSpec, segments: Sequence[Segment], edges: np.ndarray, stats: _Stats):
        self.template = template
        self.edges = edges
        self.stats = stats
        self.n = len(segments)
        self.z = np.array([seg.covariates for seg in segments], dtype=float).reshape(self.n, template.n_covariates)
        self.ends = np.array([seg.end for seg in segments])
        self.ev_seg = np.concatenate([np.full(seg.n_events, i) for i, seg in enumerate(segments)] + [np.empty(0, int)]).astype(int)
        self.ev_t = np.concatenate([seg.times for seg in segments] + [np.empty(0)])
        nz = stats.occ != 0
        self.occ_seg, self.occ_cell, self.occ = stats.occ_seg[nz], stats.occ_cell[nz], stats.occ[nz]

    def _cell_rate(self, baseline):
        c = baseline.cumulative(self.edges)
        return np.diff(c) / np.diff(self.edges)

    def lambda_part(self, spec: ModelSpec) -> float:
        b0 = np.asarray(spec.beta_regular)
        eta0 = self.z @ b0 if b0.size else np.zeros(self.n)
        if spec.beta_hot is None:
            eta1 = eta0.copy()
        else:
            eta1 = self.z @ np.asarray(spec.beta_hot) if b0.size else np.zeros(self.n)
        if spec.proportional:
            eta1 = eta1 + spec.hot.nu
        hotb = spec.hot_baseline
        lr = spec.regular.log_rate_at(self.ev_t) + eta0[self.ev_seg]
        lh = hotb.log_rate_at(self.ev_t) + eta1[self.ev_seg]
        p = self.stats.p_hot
        events = float(np.sum(p * lh + (1.0 - p) * lr))
        rho0 = self._cell_rate(spec.regular)
        rho1 = rho0 if spec.proportional else self._cell_rate(hotb)
        h0 = np.bincount(self.occ_seg, self.occ * rho0[self.occ_cell], minlength=self.n)
        h1 = np.bincount(self.occ_seg, self.occ * rho1[self.occ_cell], minlength=self.n)
        reg_total = spec.regular.cumulative(self.ends)
        integral = np.sum(np.exp(eta0) * (reg_total - h0) + np.exp(eta1) * h1)
        return events - float(integral)

    def tau_part(self, dist: HotDurationDist) -> float:
        s = self.stats
        a, b = dist.shape, dist.rate
        return (s.n * (a * math.log(b) - math.lgamma(a)) + (a - 1.0) * s.sum_log_tau - b * s.sum_tau)

    def value(self, spec: ModelSpec, fixed_tau: bool = False) -> float:
        q = self.lambda_part(spec)
        if not fixed_tau:
            q += self.tau_part(spec.tau_dist)
        return q


def _gamma_mle(n: int, sum_tau: float, sum_log_tau: float) -> tuple[float, float]:
    """Maximise the averaged gamma log-density; solves log(a) - digamma(a) = log(mean) - mean(log)."""
    s = math.log(sum_tau / n) - sum_log_tau / n
    if not (s > 0 and np.isfinite(s)):
        raise NumericalError("gamma M-step: degenerate tau draws")
    f = lambda a: math.log(a) - special.digamma(a) - s
    lo, hi = 1e-8, 1.0
    while f(hi) > 0:
        hi *= 2.0
        if hi > 1e12:
            raise NumericalError("gamma M-step: shape diverges")
    a = optimize.brentq(f, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    return a, a * n / sum_tau


# --------------------------------------------------------------------------
# MCEM
# --------------------------------------------------------------------------


def initial_spec(template: ModelSpec, segments: Sequence[Segment]) -> ModelSpec:
    """Starting values: crude event rate, nu = 0.5, zero covariate effects, Gamma(4, 2)."""
    n_ev = sum(seg.n_events for seg in segments)
    expo = sum(seg.end for seg in segments)
    rate = max(n_ev, 1) / expo

    def start(b, scale=1.0):
        if isinstance(b, Constant):
            return Constant(rate * scale)
        if isinstance(b, PiecewiseConstant):
            return PiecewiseConstant(b.cuts, tuple(rate * scale for _ in b.cuts))
        if isinstance(b, LogDoubleExp):
            return LogDoubleExp(math.log(rate * scale), -0.5, 0.1, 1.0)
        raise InvalidInputError(f"unsupported baseline {b!r}")

    hot = Proportional(0.5) if template.proportional else start(template.hot, math.exp(0.5))
    p = template.n_covariates
    return replace(template, regular=start(template.regular), hot=hot, beta_regular=(0.0,) * p,
                   beta_hot=None if template.beta_hot is None else (0.0,) * p,
                   tau_dist=HotDurationDist(4.0, 2.0))


def _free_mask(spec: ModelSpec, fixed: Sequence[str], fixed_tau: bool) -> np.ndarray:
    names = spec.parameter_names()
    unknown = set(fixed) - set(names)
    if unknown:
        raise InvalidInputError(f"unknown fixed parameters: {sorted(unknown)}")
    mask = np.array([n not in fixed for n in names])
    if fixed_tau:
        mask[spec.tau_slice()] = False
    return mask


def _check_identifiability(segments: Sequence[Segment]):
    if not any(seg.n_events >= 1 for seg in segments):
        warnings.warn("no segment contains an event; excitation parameters are unidentifiable",
                      IdentifiabilityWarning)
    elif not any(seg.n_events >= 2 for seg in segments):
        warnings.warn("every segment has at most one event; the hot-duration distribution is "
                      "not identifiable", IdentifiabilityWarning)


def _map_segments(fn, items, threads: int):
    if threads <= 1 or len(items) < 2:
        return [fn(i, it) for i, it in enumerate(items)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda args: fn(*args), enumerate(items)))


def posterior_grids(spec: ModelSpec, segments: Sequence[Segment], cfg: McemConfig) -> list[TauPosterior]:
    base = tau_grid(spec.tau_dist, cfg.grid_quantiles, cfg.grid_uniform)
    return _map_segments(lambda i, seg: tau_posterior(spec, seg, base_nodes=base), list(segments), cfg.threads)


def sample_posteriors(posts: Sequence[TauPosterior], m: int, seed, stage: int, iteration: int,
                      threads: int = 1, strata: tuple[int, int] | None = None) -> list[np.ndarray]:
    """``m`` draws per segment, segment ``i`` using its own (stage, iteration, i) substream."""
    return _map_segments(lambda i, post: post.sample(segment_rng(seed, stage, iteration, i), m, strata),
                         list(posts), threads)


def draw_posterior_taus(spec: ModelSpec, segments: Sequence[Segment], m: int, seed, stage: int,
                        iteration: int, cfg: McemConfig, fixed_tau: float | None = None) -> list[np.ndarray]:
    """One set of ``m`` posterior draws per segment, each from its own RNG substream."""
    if fixed_tau is not None:
        return [np.full(m, float(fixed_tau)) for _ in segments]
    return sample_posteriors(posterior_grids(spec, segments, cfg), m, seed, stage, iteration, cfg.threads)


class TauEvidence:
    """Per-segment likelihood in tau, piecewise log-linear, integrated exactly against gamma priors."""

    def __init__(self, spec: ModelSpec, segments: Sequence[Segment], threads: int = 1):
        def one(i, seg):
            terms = segment_terms(spec, seg)
            if seg.n_events == 0:
                return None, -terms.reg_total
            nodes = likelihood_knots(spec, seg)
            right, left = cond_loglik_limits(spec, seg, nodes, terms=terms)
            return (nodes, right, left), 0.0

        parts = _map_segments(one, list(segments), threads)
        self.constant = math.fsum(c for _, c in parts)
        grids = [g for g, _ in parts if g is not None]
        self.n = len(grids)
        if not grids:
            return
        self.a = np.concatenate([g[0][:-1] for g in grids])
        self.b = np.concatenate([g[0][1:] for g in grids])
        self.la = np.concatenate([g[1][:-1] for g in grids])  # right limit at the cell start
        lb = np.concatenate([g[2][1:] for g in grids])        # left limit at the cell end
        with np.errstate(invalid="ignore"):
            self.slope = np.where(np.isfinite(self.la) & np.isfinite(lb), (lb - self.la) / (self.b - self.a), 0.0)
        self.owner = np.concatenate([np.full(g[0].size - 1, i) for i, g in enumerate(grids)])
        self.top = np.array([g[0][-1] for g in grids])
        self.l_top = np.array([g[1][-1] for g in grids])

    def segment_logliks(self, dist: HotDurationDist) -> np.ndarray:
        if self.n == 0:
            return np.empty(0)
        cells = log_tilted_gamma_mass(dist, self.a, self.b, self.la, self.slope)
        with np.errstate(divide="ignore"):
            tail = self.l_top + np.log(dist.sf(self.top))
        m = np.maximum(tail, np.full(self.n, -np.inf))
        np.maximum.at(m, self.owner, cells)
        m = np.where(np.isfinite(m), m, 0.0)
        tot = np.bincount(self.owner, np.exp(cells - m[self.owner]), minlength=self.n) + np.exp(tail - m)
        with np.errstate(divide="ignore"):
            return m + np.log(tot)

    def loglik(self, dist: HotDurationDist) -> float:
        """Observed-data log-likelihood with each tau integrated out."""
        return self.constant + math.fsum(self.segment_logliks(dist))

    def maximise(self, dist: HotDurationDist) -> HotDurationDist:
        """Gamma parameters maximising the integrated likelihood, started from ``dist``."""
        if self.n == 0:
            return dist

        def neg(v):
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                val = -float(np.sum(self.segment_logliks(HotDurationDist(math.exp(v[0]), math.exp(v[1])))))
            return val if np.isfinite(val) else 1e300

        x0 = np.log([dist.shape, dist.rate])
        bounds = [(math.log(1e-3), math.log(1e4))] * 2
        res = optimize.minimize(neg, x0, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-15, "gtol": 1e-9, "maxiter": 500})
        if not (np.all(np.isfinite(res.x)) and res.fun <= neg(x0)):
            return dist
        return HotDurationDist(float(math.exp(res.x[0])), float(math.exp(res.x[1])))


def _e_step(spec, segments, draws, edges) -> _Stats:
    p_hot, segs, cells, occ = [], [], [], []
    st = sl = 0.0
    for i, (seg, d) in enumerate(zip(segments, draws)):
        p, c, o, mt, mlt = _segment_summary(seg, d, edges)
        p_hot.append(p)
        for cc, oo in zip(c, o):
            cells.append(cc)
            occ.append(oo)
            segs.append(np.full(cc.size, i))
        st += mt
        sl += mlt
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.empty(0, dt)
    return _Stats(cat(p_hot, float), cat(segs, int), cat(cells, int), cat(occ, float), st, sl, len(segments))


def _mc_se(spec, segments, draws) -> float:
    var = 0.0
    for seg, d in zip(segments, draws):
        vals = cond_loglik_tau(spec, seg, d) + spec.tau_dist.logpdf(d)
        if d.size > 1:
            var += float(np.var(vals, ddof=1)) / d.size
    return math.sqrt(var)


def _m_step(q: _QFunction, spec: ModelSpec, mask: np.ndarray, cfg: McemConfig,
            update_tau: bool = True) -> tuple[ModelSpec, bool]:
    x0 = spec.to_unconstrained()
    tau_sl = spec.tau_slice()
    lam_mask = mask.copy()
    lam_mask[tau_sl] = False
    ok = True
    x = x0.copy()
    if lam_mask.any():
        idx = np.flatnonzero(lam_mask)
        scale = max(q.n, 1)

        def neg(v):
            xx = x0.copy()
            xx[idx] = v
            try:
                val = q.lambda_part(spec.with_unconstrained(xx))
            except (InvalidInputError, FloatingPointError, OverflowError):
                return np.inf
            return -val / scale if np.isfinite(val) else np.inf

        opts = {"maxiter": 2000}
        if cfg.optimizer == "L-BFGS-B":
            opts.update(ftol=1e-14, gtol=1e-9)
        else:
            opts.update(xatol=1e-9, fatol=1e-12, maxfev=20000)
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.minimize(neg, x0[idx], method=cfg.optimizer, options=opts)
        if np.all(np.isfinite(res.x)) and res.fun <= neg(x0[idx]):
            x[idx] = res.x
        if not np.isfinite(res.fun):
            ok = False
    if update_tau and mask[tau_sl].all():
        a, b = _gamma_mle(q.stats.n, q.stats.sum_tau, q.stats.sum_log_tau)
        x[tau_sl] = np.log([a, b])
    return spec.with_unconstrained(x), ok


def mcem_fit(segments: Sequence[Segment], init: ModelSpec, cfg: McemConfig = McemConfig(),
             on_iteration: Callable[[TraceRecord], None] | None = None) -> FitResult:
    """Fit the model by Monte Carlo EM.

    Each iteration draws ``cfg.draws(d)`` hot durations per segment from the
    grid posterior under the current estimate, then maximises the draw-averaged
    full-data log-likelihood over the unconstrained parameter vector. Iteration
    stops once the relative sup-norm parameter change stays below ``cfg.tol``
    for ``cfg.patience`` consecutive iterations.
    """
    segments = list(segments)
    if not segments:
        raise InvalidInputError("need at least one segment")
    for seg in segments:
        init.check_covariates(seg.covariates)
    _check_identifiability(segments)
    fixed_tau = cfg.fixed_tau is not None
    mask = _free_mask(init, cfg.fixed, fixed_tau)
    edges = _cell_edges(init, segments, cfg.cell_width)
    spec = init
    trace: list[TraceRecord] = []
    streak = 0
    converged = False
    message = "max_iters reached"
    marginal_tau = cfg.tau_update == "marginal" and not fixed_tau and mask[init.tau_slice()].all()
    posts = None if fixed_tau else posterior_grids(spec, segments, cfg)
    for d in range(cfg.max_iters):
        m = cfg.draws(d)
        if fixed_tau:
            draws = [np.full(m, float(cfg.fixed_tau)) for _ in segments]
        else:
            draws = sample_posteriors(posts, m, cfg.seed, 0, d, cfg.threads)
        stats = _e_step(spec, segments, draws, edges)
        q = _QFunction(spec, segments, edges, stats)
        q_prev = q.value(spec, fixed_tau)
        if not np.isfinite(q_prev):
            bad = next(i for i, (s, dd) in enumerate(zip(segments, draws))
                       if not np.all(np.isfinite(cond_loglik_tau(spec, s, dd))))
            raise NumericalError(f"non-finite Q at segment {segments[bad].key}")
        new, ok = _m_step(q, spec, mask, cfg, update_tau=not marginal_tau)
        loglik = float("nan")
        if marginal_tau:
            evidence = TauEvidence(new, segments, cfg.threads)
            new = replace(new, tau_dist=evidence.maximise(new.tau_dist))
            loglik = evidence.loglik(new.tau_dist)
        if not fixed_tau:
            posts = posterior_grids(new, segments, cfg)
        q_new = q.value(new, fixed_tau)
        x_old, x_new = spec.to_unconstrained()[mask], new.to_unconstrained()[mask]
        rel = float(np.max(np.abs(x_new - x_old)) / max(np.max(np.abs(x_old)), 1e-8)) if mask.any() else 0.0
        mc_se = _mc_se(spec, segments, draws) if cfg.track_mc_error else float("nan")
        rec = TraceRecord(d + 1, dict(zip(new.parameter_names(), map(float, new.natural_parameters()))),
                          q_new, q_prev, m, rel, mc_se, loglik)
        trace.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        log.info("MCEM iter %d: M=%d Q=%.6f loglik=%.6f rel=%.3g", d + 1, m, q_new, loglik, rel)
        spec = new
        if not ok:
            message = "optimizer failure"
            break
        streak = streak + 1 if rel < cfg.tol else 0
        if streak >= cfg.patience:
            converged = True
            message = "converged"
            break
    fit = FitResult(spec, tuple(trace), converged, tuple(cfg.fixed), cfg.fixed_tau, None, message)
    if cfg.se_draws > 0:
        fit = replace(fit, louis=louis_se(fit, segments, cfg.se_draws, cfg.seed, step=cfg.fd_step,
                                          allow_unconverged=True, threads=cfg.threads))
    return fit


# --------------------------------------------------------------------------
# Louis standard errors
# --------------------------------------------------------------------------


class _DrawBatch:
    """Per-draw full-data log-likelihoods for a block of posterior draws."""

    def __init__(self, segments: Sequence[Segment], draws: Sequence[np.ndarray]):
        self.n = len(segments)
        self.m = draws[0].size
        m = self.m
        self.z = np.array([s.covariates for s in segments], dtype=float).reshape(self.n, -1)
        self.ends = np.array([s.end for s in segments])
        self.ev_t = np.concatenate([s.times for s in segments] + [np.empty(0)])
        self.ev_seg = np.concatenate([np.full(s.n_events, i) for i, s in enumerate(segments)] + [np.empty(0, int)]).astype(int)
        self.taus = np.concatenate(draws)
        self.draw_seg = np.repeat(np.arange(self.n), m)
        iv_draw, iv_ev, iv_stop, hot_draw, hot_ev = [], [], [], [], []
        first = 0
        for i, (seg, d) in enumerate(zip(segments, draws)):
            k = seg.n_events
            if k:
                rid = i * m + np.arange(m)
                lens = np.minimum(d[:, None], seg.gaps[None, :])
                iv_draw.append(np.repeat(rid, k))
                iv_ev.append(np.tile(first + np.arange(k), m))
                iv_stop.append((seg.times[None, :] + lens).reshape(-1))
                if k > 1:
                    hot = seg.gaps[None, :-1] <= d[:, None]
                    r, c = np.nonzero(hot)
                    hot_draw.append(rid[r])
                    hot_ev.append(first + 1 + c)
            first += k
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.empty(0, dt)
        self.iv_draw, self.iv_ev, self.iv_stop = cat(iv_draw, int), cat(iv_ev, int), cat(iv_stop, float)
        self.hot_draw, self.hot_ev = cat(hot_draw, int), cat(hot_ev, int)

    def values(self, spec: ModelSpec, include_tau: bool = True) -> np.ndarray:
        n, m = self.n, self.m
        b0 = np.asarray(spec.beta_regular)
        eta0 = self.z @ b0 if b0.size else np.zeros(n)
        if spec.beta_hot is None:
            eta1 = eta0.copy()
        else:
            eta1 = self.z @ np.asarray(spec.beta_hot) if b0.size else np.zeros(n)
        if spec.proportional:
            eta1 = eta1 + spec.hot.nu
        reg, hotb = spec.regular, spec.hot_baseline
        lr = reg.log_rate_at(self.ev_t) + eta0[self.ev_seg]
        lh = hotb.log_rate_at(self.ev_t) + eta1[self.ev_seg]
        base = (np.bincount(self.ev_seg, lr, minlength=n) - np.exp(eta0) * reg.cumulative(self.ends))
        out = base[self.draw_seg]
        out = out + np.bincount(self.hot_draw, (lh - lr)[self.hot_ev], minlength=n * m)
        e0, e1 = np.exp(eta0), np.exp(eta1)
        ivs = self.ev_seg[self.iv_ev]
        if spec.proportional:
            c_stop = reg.cumulative(self.iv_stop)
            c_start = reg.cumulative(self.ev_t)[self.iv_ev]
            excess = (e1 - e0)[ivs] * (c_stop - c_start)
        else:
            excess = (e1[ivs] * (hotb.cumulative(self.iv_stop) - hotb.cumulative(self.ev_t)[self.iv_ev])
                      - e0[ivs] * (reg.cumulative(self.iv_stop) - reg.cumulative(self.ev_t)[self.iv_ev]))
        out = out - np.bincount(self.iv_draw, excess, minlength=n * m)
        if include_tau:
            out = out + spec.tau_dist.logpdf(self.taus)
        return out


def _fd_steps(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(np.abs(x), 1.0)


def louis_se(fit: FitResult, segments: Sequence[Segment], m: int = 1000, rng=0,
             step: float = 1e-5, allow_unconverged: bool = False, chunk: int = 100,
             threads: int = 1) -> LouisResult:
    """Observed information by Louis' identity, with Monte Carlo over posterior draws.

    Information = E[-Hessian of l_full] - Var[score of l_full], both under the
    tau posterior at the fitted value. Because the segments' hot durations are
    independent given the data, the variance term is accumulated segment by
    segment. Derivatives use central finite differences on the unconstrained
    scale. If the information is not positive definite, parameters loading on
    the offending eigenvectors are dropped until the remainder is positive
    definite; their SEs are reported as NaN.
    """
    if m < MIN_SE_DRAWS:
        raise InvalidInputError(f"need at least {MIN_SE_DRAWS} draws per segment")
    if not fit.converged and not allow_unconverged:
        raise InvalidInputError("louis_se requires a converged fit")
    segments = list(segments)
    spec = fit.theta_hat
    names = spec.parameter_names()
    fixed_tau = fit.fixed_tau is not None
    mask = _free_mask(spec, fit.fixed, fixed_tau)
    idx = np.flatnonzero(mask)
    p = idx.size
    x0 = spec.to_unconstrained()
    h = _fd_steps(x0, step)
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2 ** 63))
    else:
        seed = rng
    n = len(segments)
    posts = None if fixed_tau else posterior_grids(spec, segments, McemConfig(threads=threads))

    def point(*moves):
        xx = x0.copy()
        for j, s in moves:
            xx[idx[j]] += s * h[idx[j]]
        return spec.with_unconstrained(xx)

    stencil = {(): point()}
    for a in range(p):
        stencil[((a, 1),)] = point((a, 1))
        stencil[((a, -1),)] = point((a, -1))
        for b in range(a + 1, p):
            for sa in (1, -1):
                for sb in (1, -1):
                    stencil[((a, sa), (b, sb))] = point((a, sa), (b, sb))

    s1 = np.zeros((n, p))
    s2 = np.zeros((n, p, p))
    hess = np.zeros((p, p))
    hp = h[idx]
    done = 0
    block = 0
    while done < m:
        mc = min(chunk, m - done)
        if posts is None:
            draws = [np.full(mc, float(fit.fixed_tau)) for _ in segments]
        else:
            # stratified over the m draws: the variance term is a small difference of large
            # quantities when tau is weakly identified, so plain Monte Carlo noise swamps it
            draws = sample_posteriors(posts, mc, seed, 1, block, threads, strata=(done, m))
        batch = _DrawBatch(segments, draws)
        vals = {k: batch.values(sp, include_tau=not fixed_tau) for k, sp in stencil.items()}
        f0 = vals[()]
        score = np.empty((f0.size, p))
        for a in range(p):
            fp, fm = vals[((a, 1),)], vals[((a, -1),)]
            score[:, a] = (fp - fm) / (2 * hp[a])
            hess[a, a] += np.sum((fp - 2 * f0 + fm)) / hp[a] ** 2
            for b in range(a + 1, p):
                v = (vals[((a, 1), (b, 1))] - vals[((a, 1), (b, -1))]
                     - vals[((a, -1), (b, 1))] + vals[((a, -1), (b, -1))])
                hv = np.sum(v) / (4 * hp[a] * hp[b])
                hess[a, b] += hv
                hess[b, a] += hv
        sc = score.reshape(n, mc, p)
        s1 += sc.sum(axis=1)
        s2 += np.einsum("nmi,nmj->nij", sc, sc)
        done += mc
        block += 1
    exp_neg_hess = -hess / m
    cov = (s2 - np.einsum("ni,nj->nij", s1, s1) / m) / (m - 1)
    info = exp_neg_hess - cov.sum(axis=0)
    info = 0.5 * (info + info.T)
    return _invert_information(spec, names, idx, info)


def _invert_information(spec: ModelSpec, names, idx, info) -> LouisResult:
    p = idx.size
    evals, evecs = np.linalg.eigh(info) if p else (np.array([np.inf]), None)
    min_eig = float(evals.min()) if p else float("inf")
    keep = np.ones(p, dtype=bool)
    while keep.any():
        sub = info[np.ix_(keep, keep)]
        w, v = np.linalg.eigh(sub)
        if w.min() > 1e-10 * max(np.abs(w).max(), 1e-300):  # relative, so a numerically singular block is dropped too
            break
        bad = np.flatnonzero(keep)[np.argmax(np.abs(v[:, 0]))]
        keep[bad] = False
    se_x = np.full(len(names), np.nan)
    if keep.any():
        cov = np.linalg.inv(info[np.ix_(keep, keep)])
        se_x[idx[keep]] = np.sqrt(np.diag(cov))
    if min_eig <= 0:
        log.warning("observed information not positive definite (min eigenvalue %.3g)", min_eig)
    nat = spec.natural_parameters()
    jac = np.where(spec.log_mask(), nat, 1.0)
    se_nat = np.abs(jac) * se_x
    available = np.isfinite(se_x)
    return LouisResult(tuple(names), info, se_x, se_nat, available, min_eig)
