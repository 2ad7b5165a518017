import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ifmsim import apparatus
from ifmsim.counting import (
    CountRecord,
    RngSeed,
    detection_probability,
    draw_counts,
    expected_rate,
)
from ifmsim.qcore import JointSetting, apply_channels, prepare_bell_state


def test_seed_range():
    RngSeed(0)
    RngSeed(2**64 - 1)
    with pytest.raises(ValueError):
        RngSeed(-1)
    with pytest.raises(ValueError):
        RngSeed(2**64)


def test_derived_seeds_deterministic_and_distinct():
    root = RngSeed(12345)
    assert root.derive(1, 2, 3) == root.derive(1, 2, 3)
    seeds = {root.derive(s, i).seed for s in range(5) for i in range(200)}
    assert len(seeds) == 1000
    assert RngSeed(12346).derive(1, 2, 3) != root.derive(1, 2, 3)


def test_derived_seed_matches_seed_sequence_definition():
    ss = np.random.SeedSequence(entropy=99, spawn_key=(4, 7))
    words = ss.generate_state(2, dtype=np.uint32)
    assert RngSeed(99).derive(4, 7).seed == int(words[0]) | (int(words[1]) << 32)


def test_draw_is_deterministic():
    seed = RngSeed(7).derive(1)
    a = draw_counts(3.0, 100.0, seed)
    b = draw_counts(3.0, 100.0, seed)
    assert a.observed_counts == b.observed_counts
    assert isinstance(a.observed_counts, int)


def test_poisson_mean_and_variance():
    mean = 1e6
    root = RngSeed(2024)
    n = np.array([draw_counts(mean, 1.0, root.derive(i)).observed_counts for i in range(10_000)])
    sem = math.sqrt(mean / n.size)
    assert abs(n.mean() - mean) < 3 * sem
    assert 0.95 < n.var(ddof=1) / mean < 1.05


def test_poisson_goodness_of_fit():
    mean = 12.0
    root = RngSeed(77)
    n = np.array([draw_counts(mean, 1.0, root.derive(i)).observed_counts for i in range(100_000)])
    edges = np.arange(2, 25)  # pooled tails: <=2, 3..24, >=25
    obs = [np.sum(n <= 2)] + [np.sum(n == k) for k in edges[1:]] + [np.sum(n >= 25)]
    pmf = [stats.poisson.cdf(2, mean)] + [stats.poisson.pmf(k, mean) for k in edges[1:]] + [stats.poisson.sf(24, mean)]
    exp = np.array(pmf) * n.size
    _, pvalue = stats.chisquare(obs, exp)
    assert pvalue > 0.001


def test_noise_off_gives_mean():
    r = draw_counts(2.5, 4.0, RngSeed(1), noise=False)
    assert r.observed_counts == 10.0
    assert r.expected_counts == 10.0


def test_zero_rate_gives_zero_counts():
    assert draw_counts(0.0, 100.0, RngSeed(3)).observed_counts == 0


def test_invalid_inputs():
    with pytest.raises(ValueError):
        draw_counts(-1.0, 1.0, RngSeed(1))
    with pytest.raises(ValueError):
        draw_counts(1.0, -1.0, RngSeed(1))
    with pytest.raises(ValueError):
        draw_counts(1e19, 1.0, RngSeed(1))
    with pytest.raises(ValueError):
        CountRecord(JointSetting(0, 0), 1.0, 1.0, -1)
    with pytest.raises(ValueError):
        CountRecord(JointSetting(0, 0), 1.0, 1.0, 1, detector="X")


def test_ideal_rate_follows_cosine():
    bell = prepare_bell_state()
    for a, c in [(0, 0), (0, math.pi), (0.3, 1.1), (math.pi / 2, math.pi / 4)]:
        p = detection_probability(bell, JointSetting(a, c))
        assert p == pytest.approx(0.25 * (1 + math.cos(a + c)), abs=1e-12)
        rate = expected_rate(bell, JointSetting(a, c), base_rate=50.0, efficiency=0.99)
        assert rate == pytest.approx(50 * 0.99 * 0.5 * (1 + math.cos(a + c)), rel=1e-12, abs=1e-12)


def test_h_detector_sees_no_fringe_for_bell_state():
    bell = prepare_bell_state()
    for c in np.linspace(0, 2 * math.pi, 9):
        assert detection_probability(bell, JointSetting(0, c), "H") == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(-7, 7))
def test_fringe_visibility_is_product_of_factors(c, p, f1, f2, alpha):
    chain = [apparatus.make_path_dephasing(c), apparatus.make_spin_depolarizer(p),
             apparatus.make_flipper_inefficiency(f1), apparatus.make_flipper_inefficiency(f2)]
    state = apply_channels(prepare_bell_state(), chain)
    chis = np.linspace(0, 2 * math.pi, 64, endpoint=False)
    rates = np.array([expected_rate(state, JointSetting(alpha, x), 50.0, 1.0) for x in chis])
    vis = (rates.max() - rates.min()) / (rates.max() + rates.min())
    # sampled extremes sit within 1 - cos(pi/64) of the true ones
    assert vis == pytest.approx(c * p * f1 * f2, abs=2e-3)
    # exact: first Fourier coefficient over the offset
    z = np.mean(rates * np.exp(-1j * chis))
    assert 2 * abs(z) / rates.mean() == pytest.approx(c * p * f1 * f2, abs=1e-12)
