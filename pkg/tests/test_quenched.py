import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpin.annealed import annealed_dp, annealed_partition
from corrpin.model import ModelError, build_model, disorder_sample
from corrpin.oracles import brute_quenched, homogeneous_free_energy
from corrpin.quenched import (
    FractionalEstimate,
    draw_disorder,
    estimate_from_traces,
    fractional_moments,
    largest_certified,
    quenched_free_energy,
    quenched_partition,
    relevance_gap_scan,
    restricted_partitions,
    rho_criterion,
)
from corrpin.spectral import annealed_spectrum
from corrpin.validate import dec_residual

KINDS = ("full", "check", "hat", "tilde")


def h_crit(m, beta):
    return -0.5 * beta**2 - math.log(annealed_spectrum(m, beta).eigenvalue)


@pytest.mark.parametrize("case", range(12))
def test_restricted_match_enumeration(case):
    rng = np.random.default_rng(100 + case)
    q = int(rng.integers(1, 3))
    m = build_model(rng.uniform(0.3, 2.0), q, rng.uniform(-1, 1, q + 1), n_cut=50)
    beta, h, N = rng.uniform(0, 1.5), rng.uniform(-1, 0.5), int(rng.integers(3, 11))
    om = disorder_sample(m, N + 1, rng)
    tr = restricted_partitions(m, beta, h, om, N)
    for kind in KINDS:
        for n in range(1, N + 1):
            exact = brute_quenched(m, beta, h, om, n, "start", kind)
            got = tr[kind].log_values[0, n]
            if math.isinf(exact):
                assert got == exact
            else:
                assert got == pytest.approx(exact, abs=1e-9)
    end = quenched_partition(m, beta, h, om, N, "end").log_values[0]
    for n in range(1, N + 1):
        assert end[n] == pytest.approx(brute_quenched(m, beta, h, om, n, "end"), abs=1e-9)


def test_conventions_differ_by_boundary_sites(m_q2, rng):
    beta, h, N = 0.9, -0.3, 200
    om = draw_disorder(m_q2, N, 5, 11)
    end = quenched_partition(m_q2, beta, h, om, N, "end").log_values
    start = quenched_partition(m_q2, beta, h, om, N, "start").log_values
    n = np.arange(1, N + 1)
    np.testing.assert_allclose(end[:, 1:], start[:, 1:] + beta * (om[:, n] - om[:, [0]]), atol=1e-9)


def test_beta_zero_equals_homogeneous(m_q2, rng):
    om = rng.normal(size=(3, 101))
    a = quenched_partition(m_q2, 0.0, -0.2, om, 100).log_values
    b = annealed_dp(m_q2, 0.0, -0.2, 100).traces["full"]
    np.testing.assert_allclose(a, np.broadcast_to(b, a.shape), atol=1e-10)


def test_q1_check_is_forced_path(m_q1, rng):
    om = rng.normal(size=31)
    beta, h = 0.7, 0.1
    tr = restricted_partitions(m_q1, beta, h, om, 30)["check"].log_values[0]
    k1 = math.log(m_q1.k_table[0])
    for n in (1, 7, 30):
        assert tr[n] == pytest.approx(n * k1 + beta * om[:n].sum() + n * h, abs=1e-10)


def test_tilde_bounded_by_full(m_mixed):
    om = draw_disorder(m_mixed, 300, 8, 2)
    tr = restricted_partitions(m_mixed, 1.1, -0.1, om, 300)
    full = tr["full"].log_values
    for kind in ("tilde", "hat", "check"):
        assert np.all(tr[kind].log_values[:, 1:] <= full[:, 1:] + 1e-10)


@pytest.mark.parametrize("n", [3, 4, 17, 64, 512])
def test_decomposition_identity(m_mixed, n):
    rng = np.random.default_rng(n)
    om = disorder_sample(m_mixed, 513, rng)
    assert dec_residual(m_mixed, 0.9, h_crit(m_mixed, 0.9) + 0.02, om, n) <= 1e-10


def test_mean_of_hat_matches_annealed(m_mixed):
    beta, N, M = 0.8, 24, 4000
    h = h_crit(m_mixed, beta)
    est = fractional_moments(m_mixed, beta, h, 1.0, N, M, master_seed=5)
    ann = np.exp(annealed_dp(m_mixed, beta, h, N, "start").traces["hat"])
    for n in range(m_mixed.q + 1, N + 1):
        assert abs(est.K_hat[n] - ann[n]) <= 4 * est.K_hat_se[n]


def test_mean_partition_matches_annealed(m_q2):
    beta, h, N, M = 0.6, -0.2, 40, 20_000
    om = draw_disorder(m_q2, N, M, 8)
    z = np.exp(quenched_partition(m_q2, beta, h, om, N).log_values[:, N])
    exact = math.exp(annealed_partition(m_q2, beta, h, N))
    assert abs(z.mean() - exact) <= 4 * z.std(ddof=1) / math.sqrt(M)


def test_fractional_jensen(m_mixed):
    beta, gamma = 1.0, 0.7
    h = h_crit(m_mixed, beta)
    est = fractional_moments(m_mixed, beta, h, gamma, 60, 400, master_seed=1)
    ann = np.exp(gamma * annealed_dp(m_mixed, beta, h, 60, "start").traces["hat"])
    n = np.arange(m_mixed.q + 1, 61)
    assert np.all(est.K_hat[n] <= ann[n] + 3 * est.K_hat_se[n])
    # Jensen holds exactly for the empirical measure of the replicas
    log_hat = np.log(est.hat_samples[:, n]) / gamma
    assert np.all(np.log(est.K_hat[n]) / gamma >= log_hat.mean(axis=0) - 1e-12)


def test_stderr_scales_like_inverse_sqrt_m(m_mixed):
    # mild disorder: at larger beta the replica law is heavy tailed and the
    # sample standard deviation itself fluctuates by a factor of two
    h = h_crit(m_mixed, 0.4)
    small = fractional_moments(m_mixed, 0.4, h, 0.5, 40, 400, master_seed=3)
    big = fractional_moments(m_mixed, 0.4, h, 0.5, 40, 1600, master_seed=4)
    ratio = np.median(big.K_hat_se[10:] / small.K_hat_se[10:])
    assert 0.4 <= ratio <= 0.6


def test_seed_determinism(m_mixed):
    a = fractional_moments(m_mixed, 0.8, -0.1, 0.9, 30, 100, master_seed=9)
    b = fractional_moments(m_mixed, 0.8, -0.1, 0.9, 30, 100, master_seed=9)
    c = fractional_moments(m_mixed, 0.8, -0.1, 0.9, 30, 100, master_seed=10)
    np.testing.assert_array_equal(a.K_hat, b.K_hat)
    assert not np.array_equal(a.K_hat, c.K_hat)


def test_degenerate_replicas_rejected(m_mixed):
    om = np.tile(disorder_sample(m_mixed, 31, np.random.default_rng(0)), (100, 1))
    tr = restricted_partitions(m_mixed, 0.8, -0.1, om, 30)
    with pytest.raises(ModelError):
        estimate_from_traces(tr, 0.9, m_mixed.q)
    with pytest.raises(ModelError):
        estimate_from_traces(tr, 1.5, m_mixed.q)
    with pytest.raises(ModelError):
        fractional_moments(m_mixed, 0.8, -0.1, 0.9, 30, 50)


def test_tail_slope(m_mixed):
    beta, gamma = 0.8, 0.9
    h = h_crit(m_mixed, beta) + 0.005
    est = fractional_moments(m_mixed, beta, h, gamma, 1000, 300, master_seed=2)
    n = np.arange(100, 1001)
    slope = np.polyfit(np.log(n), np.log(est.K_hat[n]), 1)[0]
    assert slope == pytest.approx(-(1 + m_mixed.alpha) * gamma, abs=0.15)


def test_deep_localized_is_inconclusive(m_mixed):
    beta = 0.8
    h = h_crit(m_mixed, beta) + 1.0
    est = fractional_moments(m_mixed, beta, h, 0.9, 40, 200, master_seed=0)
    crit = rho_criterion(est, 10, 40)
    assert crit.rho > 1
    assert crit.verdict == "inconclusive"
    with pytest.raises(ModelError):
        rho_criterion(est, 30, 40)


def test_tail_bound_covers_longer_truncation(m_mixed):
    beta, delta = 0.8, 0.006
    h = h_crit(m_mixed, beta) + delta
    est = fractional_moments(m_mixed, beta, h, 0.95, 1600, 300, master_seed=6)
    k = 200
    short = rho_criterion(est, k, 400)
    long = rho_criterion(est, k, 1600)
    assert math.isfinite(short.tail_bound)
    assert long.rho - short.rho <= short.tail_bound + 2 * long.stderr
    assert long.rho >= short.rho


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 1.0), st.integers(2, 12))
def test_verdict_rule(seed, gamma, k):
    rng = np.random.default_rng(seed)
    M, N = 20, 4 * k + 10
    hat = np.exp(rng.normal(-2.0, 0.5, (M, N + 1))) * np.arange(1, N + 2) ** -2.0
    tilde = np.exp(rng.normal(-1.0, 0.5, (M, N + 1)))
    est = FractionalEstimate(gamma, hat.mean(0), hat.std(0, ddof=1) / math.sqrt(M),
                             tilde.mean(0), tilde.std(0, ddof=1) / math.sqrt(M), M, 1, hat, tilde)
    est.K_hat[:2] = 0
    est.hat_samples[:, :2] = 0
    c = rho_criterion(est, k, 2 * k)
    assert c.rho >= 0 and c.stderr >= 0
    assert (c.verdict == "certified-small") == (c.rho_ucb + c.tail_bound <= 1.0)


def test_quenched_below_annealed(m_mixed):
    beta = 1.0
    hc = h_crit(m_mixed, beta)
    for h in (hc - 0.1, hc + 0.05, hc + 0.3):
        est = quenched_free_energy(m_mixed, beta, h, 1000, 40, master_seed=1)
        ann = annealed_partition(m_mixed, beta, h, 1000) / 1000
        assert est.mean <= ann + 3 * est.stderr
    with pytest.raises(ModelError):
        quenched_free_energy(m_mixed, beta, hc, 100, 10)


@pytest.mark.parametrize("h", [0.05, 0.2])
def test_beta_zero_quenched_vs_homogeneous(h):
    m = build_model(1.5, 1, [1.0, 0.5], n_cut=4000)
    N = 4000
    est = quenched_free_energy(m, 0.0, h, N, 30)
    assert est.stderr <= 1e-15
    assert abs(est.mean - homogeneous_free_energy(m, h)) <= 2 * math.log(N) / N


def test_quenched_free_energy_at_certified_point(m_mixed):
    beta, delta, N = 0.8, 0.008, 2000
    est = quenched_free_energy(m_mixed, beta, h_crit(m_mixed, beta) + delta, N, 40, master_seed=3)
    assert abs(est.mean) <= 2 * math.log(N) / N


def test_gap_scan_on_correlated_model(m_mixed):
    cells = relevance_gap_scan(m_mixed, [0.8], [0.004, 0.008, 0.2], [0.9, 0.95], M=300, master_seed=1)
    assert {c.k for c in cells if c.delta == 0.004} == {250}
    best = largest_certified(cells)[0.8]
    assert best is not None and best < 0.2
    for c in cells:
        assert c.h == pytest.approx(h_crit(m_mixed, 0.8) + c.delta)


@pytest.mark.slow
def test_certified_gap_scales_like_beta_squared():
    m = build_model(1.5, 2, [1.0, 0.5, -0.3])
    avals = [0.0025, 0.005, 0.01, 0.02, 0.04]
    best = []
    for b in (0.5, 0.75, 1.0):
        cells = relevance_gap_scan(m, [b], [a * b * b for a in avals], [0.9, 0.95, 0.98], M=400, master_seed=3)
        d = largest_certified(cells)[b]
        assert d is not None
        best.append(d / b**2)
    assert max(best) / min(best) <= 4.0
