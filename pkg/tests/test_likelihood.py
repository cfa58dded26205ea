import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from tauhawkes import (ChangePointExp, cumulative_intensity, HotDurationDist, LikelihoodContext, Segment, cond_loglik, full_loglik,
                       gap_pdf, gap_sf, intensity_at, marginal_loglik, model_a, model_b, model_c, model_d,
                       segment_marginal_loglik)
from tauhawkes.errors import InvalidInputError
from tauhawkes.likelihood import cond_loglik_tau, log_tilted_gamma_mass


def grid_loglik(spec, seg, tau, n=400_001):
    """Independent evaluation: sum of log intensities plus a fine trapezoid of intensity_at."""
    t = np.linspace(0, seg.end, n)[1:]
    lam = np.array([intensity_at(spec, seg, tau, u) for u in t])
    comp = np.trapezoid(np.concatenate([[lam[0]], lam]), np.concatenate([[0.0], t]))
    return sum(math.log(intensity_at(spec, seg, tau, e)) for e in seg.events) - comp


def test_cond_loglik_examples():
    spec = model_a(0.1, 0.7)
    assert cond_loglik(spec, Segment(40.0), 3.3) == pytest.approx(-4.0)
    assert cond_loglik(spec, Segment(40.0, (10.0,)), 0.0) == pytest.approx(math.log(0.1) - 4.0)
    assert math.log(0.1) - 4.0 == pytest.approx(-6.3026, abs=5e-5)
    spec = model_a(0.1, math.log(2))
    seg = Segment(40.0, (10.0, 11.0))
    want = math.log(0.1) + math.log(0.2) - (0.1 * 37 + 0.2 * 3)
    assert cond_loglik(spec, seg, 2.0) == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(-8.2120, abs=5e-5)
    assert grid_loglik(spec, seg, 2.0, 40_001) == pytest.approx(want, abs=1e-5)
    with pytest.raises(InvalidInputError):
        cond_loglik(spec, seg, -1.0)


@pytest.mark.parametrize("tau", [0.0, 0.3, 1.3, 20.0])
def test_cond_loglik_smooth_baseline_vs_quadrature(tau):
    # independent path: hot timeline plus adaptive quadrature of each piece
    spec = model_b((-2.3, 0.6, 0.08, 0.9), 0.5, (0.2,))
    seg = Segment(30.0, (2.0, 2.4, 17.0), (1.0,))
    want = sum(math.log(intensity_at(spec, seg, tau, e)) for e in seg.events) \
        - cumulative_intensity(spec, seg, tau, 0.0, 30.0)
    assert cond_loglik(spec, seg, tau) == pytest.approx(want, abs=1e-9)


@given(st.lists(st.floats(0.05, 20.0), min_size=0, max_size=6, unique=True).map(sorted),
       st.floats(0.02, 1.0), st.floats(0.02, 1.0), st.floats(0.0, 8.0))
def test_gap_time_equivalence(events, l0, l1, tau):
    end = 20.0
    seg = Segment(end, tuple(events))
    spec = model_a(l0, math.log(l1 / l0))
    d = ChangePointExp(l0, l1, tau)
    logs = []
    if events:
        logs.append(math.log(l0) - l0 * events[0])  # first gap: regular state
        logs += [math.log(gap_pdf(d, b - a)) for a, b in zip(events, events[1:])]
        logs.append(math.log(gap_sf(d, end - events[-1])))
    else:
        logs.append(-l0 * end)
    assert cond_loglik(spec, seg, tau) == pytest.approx(math.fsum(logs), rel=1e-10, abs=1e-12)


def test_tau_monotone_without_short_gaps():
    spec = model_a(0.1, 0.5)
    seg = Segment(40.0, (5.0, 15.0, 30.0))  # smallest gap 10
    taus = np.linspace(0.0, 9.9, 100)
    ll = cond_loglik_tau(spec, seg, taus)
    assert np.all(np.diff(ll) < 0)


def mc_marginal(spec, seg, n, rng):
    taus = spec.tau_dist.sample(rng, n)
    ll = cond_loglik_tau(spec, seg, taus)
    mx = ll.max()
    w = np.exp(ll - mx)
    est = math.log(w.mean()) + mx
    se = w.std(ddof=1) / math.sqrt(n) / w.mean()  # delta method on the log scale
    return est, se


def test_marginal_examples(rng):
    spec = model_a(0.1, math.log(2), tau=(9.0, 4.5))
    empty = Segment(40.0)
    assert segment_marginal_loglik(spec, empty) == pytest.approx(-4.0)
    seg = Segment(40.0, (10.0, 11.0))
    est, se = mc_marginal(spec, seg, 1_000_000, rng)
    assert abs(segment_marginal_loglik(spec, seg) - est) < 3 * se
    flat = model_a(0.1, 0.0, tau=(9.0, 4.5))
    segs = [seg, Segment(25.0, (1.0, 1.5, 9.0))]
    ctx = LikelihoodContext(flat, segs)
    assert marginal_loglik(ctx) == pytest.approx(sum(cond_loglik(flat, s, 1.0) for s in segs), rel=1e-12)


@pytest.mark.parametrize("spec", [model_a(0.1, 0.6, (0.2,), (0.7, 0.4)),
                                  model_b((-2.3, 0.6, 0.08, 0.9), 0.5, (0.2,), (3.0, 2.0)),
                                  model_c((0.1, 0.12, 0.08, 0.1, 0.15, 0.11, 0.09, 0.2), 0.4, (0.2,), (9, 4.5)),
                                  model_d((0.1, 0.12, 0.08, 0.1, 0.15, 0.11, 0.09, 0.2),
                                          (0.3, 0.2, 0.25, 0.1, 0.2, 0.3), (0.2,), (-0.1,), (2.0, 1.0))],
                         ids="abcd")
def test_marginal_vs_adaptive_quadrature(spec):
    seg = Segment(35.0, (1.0, 1.8, 4.0, 12.5, 13.0, 31.0), (0.5,))
    g = seg.gaps
    pts = sorted(set(np.concatenate([g, [0.0]])))
    f = lambda t: math.exp(cond_loglik_tau(spec, seg, np.array([t]))[0]) * float(spec.tau_dist.pdf(t))
    total = sum(integrate.quad(f, a, b, limit=200, epsabs=0, epsrel=1e-10)[0] for a, b in zip(pts, pts[1:]))
    total += integrate.quad(f, pts[-1], np.inf, limit=200)[0]
    assert segment_marginal_loglik(spec, seg) == pytest.approx(math.log(total), abs=1e-8)


def test_marginal_invariant_to_node_doubling():
    spec = model_b((-2.3, 0.6, 0.08, 0.9), 0.5, (0.2,), (9.0, 4.5))
    segs = [Segment(35.0, (1.0, 1.8, 4.0, 12.5, 13.0), (0.5,)), Segment(10.0, (9.0, 9.5), (-1.0,))]
    a = marginal_loglik(LikelihoodContext(spec, segs, 64))
    b = marginal_loglik(LikelihoodContext(spec, segs, 128))
    assert a == pytest.approx(b, abs=1e-9)
    with pytest.raises(InvalidInputError):
        LikelihoodContext(spec, segs, 8)


def test_small_shape_prior_exact():
    # single event: the log-likelihood is linear in tau up to E - T1, so the integral is a tilted gamma mass
    spec = model_a(0.1, 0.7, tau=(0.3, 0.5))
    seg = Segment(40.0, (30.0,))
    c = 0.1 * (math.exp(0.7) - 1)
    k, r = 0.3, 0.5
    head = math.log(0.1) - 4.0
    val = (r / (r + c)) ** k * special.gammainc(k, (r + c) * 10) + math.exp(-c * 10) * special.gammaincc(k, r * 10)
    assert segment_marginal_loglik(spec, seg) == pytest.approx(head + math.log(val), abs=1e-10)


@given(st.floats(0.05, 20), st.floats(0.2, 10), st.floats(0.0, 3.0), st.floats(0.01, 3.0), st.floats(-3, 12))
def test_tilted_gamma_mass(shape, rate, a, width, slope):
    d = HotDurationDist(shape, rate)
    b = a + width
    got = log_tilted_gamma_mass(d, np.array([a]), np.array([b]), np.array([0.5]), np.array([slope]))[0]
    # u = t**shape absorbs the density's branch point at zero; tanh-sinh handles what remains
    with mpmath.workdps(30):
        t = lambda u: u ** (mpmath.mpf(1) / shape)
        f = lambda u: mpmath.exp(0.5 + slope * (t(u) - a) - rate * t(u))
        lo, hi = mpmath.mpf(a) ** shape, mpmath.mpf(b) ** shape
        want = float(mpmath.quad(f, [lo, (lo + hi) / 2, hi]) * mpmath.mpf(rate) ** shape / mpmath.gamma(shape + 1))
    assert math.exp(got) == pytest.approx(want, rel=1e-8)


def test_tilted_gamma_mass_far_tail_cell():
    # wide cell from near zero deep in the tail of a concentrated prior: the closed form
    # from zero would overflow here and must give way to quadrature
    k, r, a, b, slope = 101.88340895049645, 80.43793473719874, 12.203226407429252, 24.756808924902163, -0.00638
    got = log_tilted_gamma_mass(HotDurationDist(k, r), np.array([a]), np.array([b]), np.array([0.0]),
                                np.array([slope]))[0]
    with mpmath.workdps(50):
        f = lambda t: mpmath.exp(slope * (t - a) - r * t + (k - 1) * mpmath.log(t))
        pts = [a] + [a + (b - a) * 0.5 ** j for j in range(30, -1, -1)]
        want = float(mpmath.log(mpmath.quad(f, pts)) + k * mpmath.log(r) - mpmath.loggamma(k))
    assert got == pytest.approx(want, rel=1e-10)


def test_full_loglik_examples():
    spec = model_a(0.1, 0.7, tau=(9.0, 4.5))
    assert full_loglik(spec, [], []) == 0.0
    lg = 9 * math.log(4.5) - math.lgamma(9) + 8 * math.log(2.0) - 4.5 * 2.0
    assert full_loglik(spec, [Segment(40.0)], [2.0]) == pytest.approx(-4.0 + lg)
    segs = [Segment(40.0, (3.0, 4.0)), Segment(12.0, (11.0,)), Segment(5.0)]
    taus = [1.0, 2.5, 0.3]
    single = sum(full_loglik(spec, [s], [t]) for s, t in zip(segs, taus))
    assert full_loglik(spec, segs, taus) == pytest.approx(single, rel=1e-14)
    with pytest.raises(InvalidInputError):
        full_loglik(spec, segs, taus[:2])


def test_true_taus_beat_permuted(rng):
    from tauhawkes.simulate import simulate_constant
    spec = model_a(0.15, 1.2, tau=(4.0, 1.0))
    diffs = []
    for _ in range(40):
        taus = spec.tau_dist.sample(rng, 200)
        segs = [Segment(40.0, tuple(simulate_constant(0.15, 0.15 * math.exp(1.2), t, 40.0, rng))) for t in taus]
        perm = rng.permutation(taus)
        diffs.append(full_loglik(spec, segs, taus) - full_loglik(spec, segs, perm))
    diffs = np.array(diffs)
    assert diffs.mean() - 3 * diffs.std(ddof=1) / math.sqrt(diffs.size) > 0
