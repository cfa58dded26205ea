import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from tauhawkes import (ChangePointExp, Constant, HotDurationDist, ModelSpec, Segment, gap_cdf, model_a, model_b,
                       model_c, simulate_constant, simulate_thinning)
from tauhawkes.analytics import season_summaries
from tauhawkes.data_model import SegmentTable, dumps_dataset, loads_dataset
from tauhawkes.errors import InvalidInputError
from tauhawkes.simulate import MatchSchedule, SimConfig, simulate_season


@given(st.floats(0.01, 2), st.floats(0.01, 2), st.floats(0, 10), st.floats(0.1, 60), st.integers(0, 2**32 - 1))
def test_output_ordering(l0, l1, tau, end, seed):
    rng = np.random.default_rng(seed)
    ev = simulate_constant(l0, l1, tau, end, rng)
    assert np.all(np.diff(ev) > 0) and (ev.size == 0 or (ev[0] > 0 and ev[-1] <= end))
    spec = model_b((math.log(l0), 0.4, 0.1, 1.0), math.log(l1 / l0))
    ev = simulate_thinning(spec, (), tau, end, rng)
    assert np.all(np.diff(ev) > 0) and (ev.size == 0 or (ev[0] > 0 and ev[-1] <= end))


def test_invalid_inputs(rng):
    with pytest.raises(InvalidInputError):
        simulate_constant(0.0, 0.1, 1.0, 10.0, rng)
    with pytest.raises(InvalidInputError):
        simulate_constant(0.1, 0.1, -1.0, 10.0, rng)
    with pytest.raises(InvalidInputError):
        simulate_thinning(model_a(0.1, 0.3), (), 1.0, 0.0, rng)


@pytest.mark.parametrize("l1, tau", [(0.1, 3.0), (0.3, 0.0)])
def test_poisson_collapse(rng, l1, tau):
    counts = np.array([simulate_constant(0.1, l1, tau, 100.0, rng).size for _ in range(10_000)])
    assert abs(counts.mean() - 10.0) < 3 * math.sqrt(10.0 / counts.size)


def test_gap_distribution(rng):
    d = ChangePointExp(0.1, 0.3, 2.0)
    # one long window: only the final gap is censored, so the pooled gaps follow the change-point law
    ev = simulate_constant(0.1, 0.3, 2.0, 1.2e6, rng)
    gaps = np.diff(ev)[:100_000]
    assert gaps.size == 100_000
    assert stats.kstest(gaps, lambda y: gap_cdf(d, y)).pvalue > 0.01
    # first events of short segments are Exp(0.1) truncated to (0, 40]
    first = np.array([r[0] for r in (simulate_constant(0.1, 0.3, 2.0, 40.0, rng) for _ in range(20_000)) if r.size])
    trunc = lambda y: np.minimum(stats.expon(scale=10).cdf(y) / stats.expon(scale=10).cdf(40.0), 1.0)
    assert stats.kstest(first, trunc).pvalue > 0.01


def test_inhibition_limit(rng):
    spec = ModelSpec(Constant(0.5), Constant(1e-12), (), (), HotDurationDist(2.0, 1.0))
    runs = [simulate_thinning(spec, (), 2.0, 40.0, rng) for _ in range(10_000)]
    assert min(np.diff(r).min() for r in runs if r.size > 1) > 2.0


def test_smooth_baseline_counts(rng):
    spec = model_b((math.log(0.1), 0.8, 0.05, 0.6), 0.0)
    want = integrate.quad(lambda t: float(spec.regular.rate_at(t)), 0, 40)[0]
    counts = np.array([simulate_thinning(spec, (), 1.5, 40.0, rng).size for _ in range(10_000)])
    assert abs(counts.mean() - want) < 3 * counts.std(ddof=1) / math.sqrt(counts.size)


def test_thinning_bookkeeping(rng):
    spec = model_c((0.2, 0.3, 0.1, 0.25, 0.2, 0.3, 0.1, 0.2), 0.9, (0.5,))
    for _ in range(200):
        record = []
        ev = simulate_thinning(spec, (0.3,), 2.5, 40.0, rng, record=record)
        bound = max(lam for _, _, lam, _ in record) if record else 0
        accepted = [s for s, _, _, acc in record if acc]
        assert np.allclose(accepted, ev)
        for s, hot, lam, _ in record:
            prior = ev[ev < s]
            expect = prior.size > 0 and s - prior[-1] <= 2.5
            assert hot == expect
            assert lam <= bound + 1e-12


def test_season_determinism_and_plan_checks():
    spec = model_a(0.1, 0.7, (0.2,), tau=(9.0, 4.5))
    plan = SegmentTable((Segment(40.0, (), (0.0,)),), ("Z",))
    a = simulate_season(SimConfig(spec, plan, seed=4))
    b = simulate_season(SimConfig(spec, plan, seed=4))
    assert dumps_dataset(a[0]) == dumps_dataset(b[0])
    many = simulate_season(SimConfig(spec, MatchSchedule(n_matches=20), columns=("X2",), replications=4, seed=4))
    par = simulate_season(SimConfig(spec, MatchSchedule(n_matches=20), columns=("X2",), replications=4, seed=4, threads=3))
    assert [dumps_dataset(t) for t in many] == [dumps_dataset(t) for t in par]
    with pytest.raises(InvalidInputError):
        SimConfig(spec, plan, replications=0)
    with pytest.raises(InvalidInputError):
        SimConfig(spec, plan, tau_mode="fixed")


def test_tiny_segments_are_nearly_empty():
    spec = model_a(0.1, 0.7, tau=(9.0, 4.5))
    plan = SegmentTable(tuple(Segment(0.001, (), (), str(i)) for i in range(10_000)), ())
    out = simulate_season(SimConfig(spec, plan, seed=1))[0]
    # expected total 1.0; P(Poisson(1) > 5) < 6e-4
    assert out.n_events <= 5


def test_round_trip_through_file_format():
    spec = model_a(0.1, 0.7, (-0.1,), (9.0, 4.5))
    table = simulate_season(SimConfig(spec, MatchSchedule(n_matches=15), columns=("X2",), seed=2))[0]
    again = loads_dataset(dumps_dataset(table))
    assert again == table


def test_replicated_band_brackets_truth():
    spec = model_a(0.055, 0.7, (-0.12,), (9.0, 4.5))
    sched = MatchSchedule()
    reps = simulate_season(SimConfig(spec, sched, columns=("X2",), replications=200, seed=11))
    row = season_summaries(reps)[0]
    assert row.statistic == "events_per_match"
    # truth from an independent, much larger run
    big = simulate_season(SimConfig(spec, MatchSchedule(n_matches=20_000), columns=("X2",), seed=12))[0]
    truth = big.n_events / 20_000
    assert row.lower < truth < row.upper
    assert row.band.startswith("(") and row.band.count(".") == 2
