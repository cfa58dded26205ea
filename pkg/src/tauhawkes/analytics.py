"""Dynamic intensity prediction, cluster-size distributions and season summaries."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_model import SegmentTable
from .errors import InvalidInputError
from .inference import TauPosterior, tau_posterior
from .process_model import ModelSpec, Segment

DEFAULT_CLUSTER_THRESHOLDS = (1.0, 2.0, 3.0, 5.0)  # minutes


# --------------------------------------------------------------------------
# dynamic prediction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionCurve:
    """Intensity curve split at the query time into an estimated and a predicted part."""

    query_time: float
    grid: np.ndarray
    estimated: np.ndarray  # values on grid <= query_time
    predicted: np.ndarray  # values on grid > query_time
    events: tuple[float, ...] = ()

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.estimated, self.predicted])

    @property
    def split(self) -> int:
        return self.estimated.size

    def rows(self) -> list[tuple[float, float, str]]:
        part = ["estimated"] * self.split + ["predicted"] * self.predicted.size
        return list(zip(self.grid.tolist(), self.values.tolist(), part))


def _hot_probability(post: TauPosterior | float, elapsed):
    """P(tau >= elapsed) under a posterior, or an indicator for a known tau."""
    elapsed = np.asarray(elapsed, dtype=float)
    if isinstance(post, TauPosterior):
        return np.asarray(post.sf(elapsed), dtype=float)
    return (elapsed <= post).astype(float)


def _history(seg: Segment, u: float, include_at_u: bool) -> Segment:
    ev = seg.times
    keep = ev[ev <= u] if include_at_u else ev[ev < u]
    return Segment(u, tuple(keep), seg.covariates, seg.match_id, seg.index)


def _posterior(spec, seg, u, include_at_u, tau):
    if tau is not None:
        return float(tau)
    if u <= 0:
        return TauPosterior(spec.tau_dist)
    return tau_posterior(spec, _history(seg, u, include_at_u))


def _mixture(spec, z, u, last, post):
    reg = np.asarray(spec.regular_rate(u, z), dtype=float)
    if last is None:
        return reg
    hot = np.asarray(spec.hot_rate(u, z), dtype=float)
    p = _hot_probability(post, u - last)
    return p * hot + (1.0 - p) * reg


def predict_intensity(spec: ModelSpec, seg: Segment, t: float, grid, tau: float | None = None) -> PredictionCurve:
    """Estimated intensity up to ``t`` and predicted intensity after it.

    On ``u <= t`` the curve is the intensity averaged over the posterior of
    tau given the history on ``(0, u)``, so adding a later event never
    changes earlier values. On ``u > t`` it is the hot/regular mixture with
    weights P(tau >= u - T_last | history to t), assuming no further events.
    ``tau`` switches to a known hot duration.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise InvalidInputError("empty prediction grid")
    if np.any(np.diff(grid) <= 0):
        raise InvalidInputError("grid must be strictly ascending")
    if grid[0] <= 0 or grid[-1] > seg.end:
        raise InvalidInputError(f"grid must lie within (0, {seg.end}]")
    if not (0 <= t <= seg.end):
        raise InvalidInputError(f"query time {t} outside [0, {seg.end}]")
    z = spec.check_covariates(seg.covariates)
    ev = seg.times
    past = grid[grid <= t]
    future = grid[grid > t]
    est = np.empty(past.size)
    for j, u in enumerate(past):
        prior = ev[ev < u]
        last = float(prior[-1]) if prior.size else None
        post = _posterior(spec, seg, u, False, tau) if last is not None else None
        est[j] = float(_mixture(spec, z, np.array([u]), last, post)[0])
    seen = ev[ev <= t]
    last = float(seen[-1]) if seen.size else None
    post = _posterior(spec, seg, t, True, tau) if last is not None else None
    pred = _mixture(spec, z, future, last, post) if future.size else np.empty(0)
    return PredictionCurve(float(t), grid, est, np.asarray(pred, dtype=float), tuple(seen.tolist()))


# --------------------------------------------------------------------------
# clusters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterPmf:
    threshold: float
    pmf: dict[int, float] = field(default_factory=dict)
    n_clusters: int = 0

    def probability(self, size: int) -> float:
        return self.pmf.get(size, 0.0)


def cluster_sizes(events, threshold: float) -> list[int]:
    """Sizes of runs of events whose successive gaps are all <= threshold."""
    ev = np.asarray(events, dtype=float).reshape(-1)
    if ev.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(ev) > threshold)
    edges = np.concatenate([[0], breaks + 1, [ev.size]])
    return np.diff(edges).tolist()


def cluster_pmf(events, threshold: float) -> ClusterPmf:
    """Empirical cluster-size PMF.

    ``events`` is one ascending sequence or a collection of them (clusters
    never span two sequences, e.g. two segments).
    """
    if not threshold > 0:
        raise InvalidInputError("threshold must be positive")
    counts: Counter = Counter()
    for g in _event_groups(events):
        counts.update(cluster_sizes(g, threshold))
    n = sum(counts.values())
    if n == 0:
        return ClusterPmf(float(threshold), {}, 0)
    sizes = sorted(counts)
    probs = np.array([counts[s] for s in sizes], dtype=float) / n
    return ClusterPmf(float(threshold), {int(s): float(p) for s, p in zip(sizes, probs)}, n)


def _event_groups(events) -> list[np.ndarray]:
    if isinstance(events, SegmentTable):
        return [s.times for s in events.segments]
    if isinstance(events, Segment):
        return [events.times]
    items = list(events)
    if items and all(isinstance(e, Segment) or np.ndim(e) == 1 for e in items):
        return [e.times if isinstance(e, Segment) else np.asarray(e, dtype=float) for e in items]
    return [np.asarray(items, dtype=float)]


def total_variation(p: ClusterPmf, q: ClusterPmf) -> float:
    keys = set(p.pmf) | set(q.pmf)
    return 0.5 * sum(abs(p.probability(k) - q.probability(k)) for k in keys)


# --------------------------------------------------------------------------
# season summaries
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    statistic: str
    mean: float
    lower: float  # 2.5% percentile across replications
    upper: float  # 97.5% percentile across replications
    per_replication: tuple[float, ...] = ()

    @property
    def band(self) -> str:
        return f"({self.lower:.2f}, {self.upper:.2f})"


def _replication_stats(table: SegmentTable, early: float) -> dict[str, float]:
    matches = table.by_match()
    n_match = max(len(matches), 1)
    n_seg = max(len(table), 1)
    total = table.n_events
    out = {"events_per_match": total / n_match, "events_per_segment": total / n_seg}
    if "X4" in table.columns:
        j = table.columns.index("X4")
        first = sum(int(np.sum(s.times + s.covariates[j] <= early)) for s in table.segments)
        out[f"first_{early:g}_min_per_match"] = first / n_match
    return out


def season_summaries(datasets: Sequence[SegmentTable] | SegmentTable, early: float = 10.0) -> list[SummaryRow]:
    """Per-replication means with 2.5%/97.5% percentile bands across replications.

    The early-window statistic counts events within ``early`` minutes of the
    start of each half (segment start offset X4 plus segment time).
    """
    if isinstance(datasets, SegmentTable):
        datasets = [datasets]
    if not datasets:
        raise InvalidInputError("need at least one dataset")
    per = [_replication_stats(d, early) for d in datasets]
    rows = []
    for key in per[0]:
        vals = np.array([p[key] for p in per], dtype=float)
        lo, hi = np.percentile(vals, [2.5, 97.5])
        rows.append(SummaryRow(key, float(vals.mean()), float(lo), float(hi), tuple(vals.tolist())))
    return rows
