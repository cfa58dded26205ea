"""Event-process simulators: exact gap-time construction and thinning."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .data_model import MatchLog, SegmentTable, build_season
from .errors import InvalidInputError, NumericalError
from .process_model import Constant, ModelSpec, Segment


def simulate_constant(lambda0: float, lambda1: float, tau: float, end: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Event times on ``(0, end]`` for constant regular/hot rates.

    After each event the next gap is an Exp(lambda1) draw if it lands within
    ``tau``, otherwise ``tau`` plus an Exp(lambda0) draw. Before the first
    event the process is regular. Leaving the hot window without an event
    resets the state implicitly through the second branch.
    """
    if not (lambda0 > 0 and lambda1 > 0):
        raise InvalidInputError("rates must be positive")
    if not (tau >= 0):
        raise InvalidInputError("tau must be non-negative")
    if not (end > 0):
        raise InvalidInputError("end must be positive")
    out = []
    t = rng.exponential(1.0 / lambda0)
    while t <= end:
        out.append(t)
        w = rng.exponential(1.0 / lambda1)
        if w > tau:
            w = tau + rng.exponential(1.0 / lambda0)
        t += w
    return np.asarray(out, dtype=float)


def intensity_bound(spec: ModelSpec, z, end: float) -> float:
    """Upper bound of both branches of the intensity over ``[0, end]``."""
    eta0, eta1 = spec.linear_predictors(z)
    bound = max(spec.regular.sup(0.0, end) * math.exp(eta0),
                spec.hot_baseline.sup(0.0, end) * math.exp(eta1))
    if not (np.isfinite(bound) and bound > 0):
        raise NumericalError(f"intensity bound is not finite and positive ({bound})")
    return float(bound)


def simulate_thinning(spec: ModelSpec, z, tau: float, end: float, rng: np.random.Generator,
                      record: list | None = None) -> np.ndarray:
    """Event times by thinning a homogeneous process at the intensity bound.

    A candidate at ``s`` is kept with probability lambda*(s) / bound, where
    lambda* is the hot branch while ``s`` lies within ``tau`` of the last
    accepted event. ``record``, when given, receives one
    ``(s, hot, lambda_star, accepted)`` tuple per candidate.
    """
    if not (tau >= 0):
        raise InvalidInputError("tau must be non-negative")
    if not (end > 0):
        raise InvalidInputError("end must be positive")
    eta0, eta1 = spec.linear_predictors(z)
    m0, m1 = math.exp(eta0), math.exp(eta1)
    reg, hotb = spec.regular, spec.hot_baseline
    bound = intensity_bound(spec, z, end)
    out = []
    hot_end = 0.0  # time at which the current hot window closes
    s = 0.0
    while True:
        s += rng.exponential(1.0 / bound)
        if s > end:
            break
        hot = bool(out) and s <= hot_end
        lam = float(hotb.rate_at(s)) * m1 if hot else float(reg.rate_at(s)) * m0
        if lam > bound * (1.0 + 1e-12):
            raise NumericalError(f"intensity {lam} exceeds thinning bound {bound} at t={s}")
        accept = rng.random() * bound < lam
        if record is not None:
            record.append((s, hot, lam, accept))
        if accept:
            out.append(s)
            hot_end = s + tau
    return np.asarray(out, dtype=float)


def simulate_segment(spec: ModelSpec, z, tau: float, end: float, rng: np.random.Generator) -> np.ndarray:
    """Pick the exact constant-rate engine when both baselines are constant, thinning otherwise."""
    hotb = spec.hot_baseline
    if isinstance(spec.regular, Constant) and isinstance(hotb, Constant):
        eta0, eta1 = spec.linear_predictors(z)
        return simulate_constant(spec.regular.rate * math.exp(eta0), hotb.rate * math.exp(eta1),
                                 tau, end, rng)
    return simulate_thinning(spec, z, tau, end, rng)


# --------------------------------------------------------------------------
# season orchestration
# --------------------------------------------------------------------------


PlanSource = Union[SegmentTable, Callable[[np.random.Generator], SegmentTable]]


@dataclass(frozen=True)
class SimConfig:
    """Replicated-season simulation settings.

    ``plan`` is either a fixed table of empty segments (end times and raw
    covariates) or a callable drawing such a table from an RNG, e.g. a
    terminal-event schedule. ``columns`` selects the design columns fed to
    the model, defaulting to every raw covariate column.
    """

    spec: ModelSpec
    plan: PlanSource
    tau_mode: str = "draw"  # "draw" one tau per segment from the gamma law, or "fixed"
    tau: float | None = None
    columns: tuple[str, ...] | None = None
    replications: int = 1
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise InvalidInputError("replications must be >= 1")
        if self.tau_mode not in ("draw", "fixed"):
            raise InvalidInputError("tau_mode must be 'draw' or 'fixed'")
        if self.tau_mode == "fixed" and (self.tau is None or not self.tau >= 0):
            raise InvalidInputError("fixed tau_mode needs a non-negative tau")
        if isinstance(self.plan, SegmentTable):
            _check_plan(self.plan)


def _check_plan(plan: SegmentTable):
    for seg in plan.segments:
        if not seg.end > 0:
            raise InvalidInputError(f"segment {seg.key}: planned end must be positive")


def _replicate(cfg: SimConfig, r: int) -> SegmentTable:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(r,)))
    plan = cfg.plan if isinstance(cfg.plan, SegmentTable) else cfg.plan(rng)
    _check_plan(plan)
    design = plan.design(cfg.columns) if cfg.columns is not None else plan.segments
    out = []
    for raw, seg in zip(plan.segments, design):
        tau = cfg.tau if cfg.tau_mode == "fixed" else float(cfg.spec.tau_dist.sample(rng))
        ev = simulate_segment(cfg.spec, seg.covariates, tau, seg.end, rng)
        out.append(Segment(raw.end, tuple(ev), raw.covariates, raw.match_id, raw.index))
    return SegmentTable(tuple(out), plan.columns)


def simulate_season(cfg: SimConfig) -> list[SegmentTable]:
    """One simulated table per replication; replication ``r`` uses its own seed substream."""
    reps = range(cfg.replications)
    if cfg.threads <= 1:
        return [_replicate(cfg, r) for r in reps]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(lambda r: _replicate(cfg, r), reps))


def simulate_segments(spec: ModelSpec, ends: Sequence[float], covariates, rng: np.random.Generator,
                      tau: float | None = None) -> list[Segment]:
    """Convenience generator for flat segment lists (no match structure)."""
    covariates = np.asarray(covariates, dtype=float).reshape(len(ends), -1)
    out = []
    for i, (end, z) in enumerate(zip(ends, covariates)):
        t = float(spec.tau_dist.sample(rng)) if tau is None else tau
        ev = simulate_segment(spec, z, t, float(end), rng)
        out.append(Segment(float(end), tuple(ev), tuple(z), str(i), 0))
    return out


# --------------------------------------------------------------------------
# synthetic match schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchSchedule:
    """Terminal-event generator for synthetic seasons.

    Each match has two halves of ``half_length`` minutes plus stoppage time
    drawn from the empirical values in ``stoppage``; goals for each side
    arrive as Poisson processes on the match clock. Defaults give about three
    goals per match.
    """

    n_matches: int = 233
    half_length: float = 45.0
    stoppage: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    goal_rate_home: float = 1.65 / 95.0
    goal_rate_away: float = 1.38 / 95.0
    team: str = "home"

    def __post_init__(self):
        if self.n_matches < 1:
            raise InvalidInputError("n_matches must be >= 1")
        if not self.half_length > 0 or not self.stoppage or min(self.stoppage) < 0:
            raise InvalidInputError("half length must be positive and stoppage times non-negative")
        if self.goal_rate_home < 0 or self.goal_rate_away < 0:
            raise InvalidInputError("goal rates must be non-negative")

    def match_logs(self, rng: np.random.Generator) -> list[MatchLog]:
        logs = []
        for i in range(self.n_matches):
            start, halves, goals = 0.0, [], []
            for _ in range(2):
                stop = start + self.half_length + float(rng.choice(self.stoppage))
                halves.append((start, stop))
                for side, rate in (("home", self.goal_rate_home), ("away", self.goal_rate_away)):
                    n = rng.poisson(rate * (stop - start))
                    goals += [(float(t), side) for t in rng.uniform(start, stop, n)]
                start = stop
            logs.append(MatchLog(f"m{i + 1:03d}", tuple(halves), tuple(goals)))
        return logs

    def __call__(self, rng: np.random.Generator) -> SegmentTable:
        return build_season(self.match_logs(rng), self.team)
