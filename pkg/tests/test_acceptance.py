"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (``pytest tests/test_acceptance.py -s``) or directly with
``python3 tests/test_acceptance.py``.  Each criterion function returns
``(passed, detail)``; the pytest wrappers print the line and assert.
"""

import contextlib
import io
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from corrpin.annealed import annealed_dp, annealed_partition, fit_exponent
from corrpin.cli import main as cli_main
from corrpin.model import build_model, build_state_space
from corrpin.oracles import brute_annealed
from corrpin.quenched import (
    fractional_moments,
    largest_certified,
    quenched_free_energy,
    relevance_gap_scan,
)
from corrpin.sampler import (
    contact_fraction,
    laplace_matrix,
    mean_with_se,
    sample_paths,
    sample_steps,
    stationary_mean_gap,
    transition_counts,
)
from corrpin.spectral import (
    annealed_spectrum,
    build_annealed_operator,
    dense_perron,
    find_beta0,
    fractional_eigenvalue,
    normalized_kernel,
    relevance_derivative,
    small_beta_coefficient,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
MIXED = dict(alpha=1.5, q=2, ma_coeffs=[1.0, 0.5, -0.3])


def h_crit(m, beta, ss=None):
    return -0.5 * beta**2 - math.log(annealed_spectrum(m, beta, ss).eigenvalue)


def criterion_1():
    """Exact identities to 1e-10."""
    worst = 0.0
    for kw in (dict(alpha=1.5, q=1, ma_coeffs=[1.0, 0.6]), MIXED, dict(alpha=0.6, q=3, ma_coeffs=[1, -0.4, 0.3, 0.2])):
        m = build_model(**kw)
        ss = build_state_space(m)
        worst = max(worst, abs(annealed_spectrum(m, 0.0, ss).eigenvalue - 1.0))
        for b in (0.1, 0.5, 1.0, 2.0):
            worst = max(worst, abs(fractional_eigenvalue(m, ss, b, 1.0) - 1.0))
        sd = annealed_spectrum(m, 1.0, ss)
        kern = normalized_kernel(m, ss, 1.0, sd)
        worst = max(worst, np.abs(kern.row_sums() - 1.0).max())
        worst = max(worst, np.abs(kern.rmatvec(sd.pi) - sd.pi).max())
        worst = max(worst, abs(sd.left @ sd.right - 1.0))
    m0 = build_model(1.5, 2, [1.0, 0.0, 0.0])
    for b in (0.1, 0.5, 1.0, 2.0):
        worst = max(worst, abs(h_crit(m0, b) + 0.5 * b * b))
    return worst <= 1e-10, f"max deviation {worst:.2e} (tol 1e-10)"


def criterion_2():
    """Closed form at q=1 on 50 betas; dense vs power iteration at q=2."""
    m = build_model(1.5, 1, [1.0, 0.6])
    ss = build_state_space(m)
    worst = 0.0
    for b in np.linspace(0.0, 3.0, 50):
        closed = math.exp(b * b * m.rho[0]) * m.k_table[0] + m.k_star
        worst = max(worst, abs(annealed_spectrum(m, b, ss).eigenvalue - closed) / closed)
    m2 = build_model(**MIXED)
    ss2 = build_state_space(m2)
    worst_d = 0.0
    for b in (0.3, 1.0, 2.0, 4.0):
        lam = annealed_spectrum(m2, b, ss2).eigenvalue
        worst_d = max(worst_d, abs(dense_perron(build_annealed_operator(m2, ss2, b)) - lam) / lam)
    ok = worst <= 1e-10 and worst_d <= 1e-10
    return ok, f"closed form {worst:.2e}, dense vs power {worst_d:.2e} (tol 1e-10)"


def criterion_3():
    """Small-beta asymptote of the annealed critical curve at beta = 1e-3."""
    b = 1e-3
    ratios = []
    for a in ([1.0, 0.5], [1.0, -0.5], [1.0, 0.5, -0.3]):
        m = build_model(1.5, len(a) - 1, a)
        ratios.append(h_crit(m, b) / (-0.5 * b * b * small_beta_coefficient(m)))
    dev = max(abs(r - 1.0) for r in ratios)
    return dev <= 1e-3, "ratios " + ", ".join(f"{r:.6f}" for r in ratios) + " (within 1e-3 of 1)"


def _richardson_left(f, eps=1e-3):
    d1 = (f(1.0) - f(1.0 - eps)) / eps
    d2 = (f(1.0) - f(1.0 - eps / 2)) / (eps / 2)
    d4 = (f(1.0) - f(1.0 - eps / 4)) / (eps / 4)
    r1, r2 = 2 * d2 - d1, 2 * d4 - d2
    return (4 * r2 - r1) / 3


def criterion_4():
    """Derivative at gamma = 1-: analytic vs entropy form vs finite differences."""
    m = build_model(**MIXED)
    ss = build_state_space(m)
    forms, fd = 0.0, 0.0
    for b in (0.5, 1.5, 2.5):
        rep = relevance_derivative(m, b, ss)
        forms = max(forms, abs(rep.direct - rep.entropy_form))
        lam = annealed_spectrum(m, b, ss).eigenvalue
        num = _richardson_left(lambda g: fractional_eigenvalue(m, ss, b, g, lam))
        fd = max(fd, abs(rep.direct - num))
    rng = np.random.default_rng(4)
    worst_re = math.inf
    for _ in range(20):
        q = int(rng.integers(1, 4))
        mm = build_model(rng.uniform(0.2, 2.5), q, rng.uniform(-1, 1, q + 1), n_cut=200)
        rep = relevance_derivative(mm, rng.uniform(0.05, 3.0))
        forms = max(forms, abs(rep.direct - rep.entropy_form))
        worst_re = min(worst_re, rep.relative_entropy)
    ok = forms <= 1e-9 and fd <= 1e-4 and worst_re >= -1e-12
    return ok, f"forms {forms:.2e} (1e-9), finite difference {fd:.2e} (1e-4), min rel. entropy {worst_re:.2e}"


def criterion_5():
    """Uncorrelated disorder: beta0 = sqrt(2 h(K))."""
    m = build_model(2.0, 1, [1.0, 0.0], n_cut=1_000_000)
    K = m.k_table
    h_table = float(-(K * np.log(K)).sum())  # remainder beyond the table is below 1e-11
    b0 = find_beta0(m)
    err = abs(b0 - math.sqrt(2 * h_table))
    return err <= 1e-6, f"beta0 {b0:.9f} vs {math.sqrt(2 * h_table):.9f}, error {err:.2e} (1e-6)"


def criterion_6():
    """Annealed DP vs enumeration; critical free energy; exponent fit."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        q = int(rng.integers(1, 3))
        m = build_model(rng.uniform(0.3, 2.0), q, rng.uniform(-1, 1, q + 1), n_cut=100)
        beta, h, N = rng.uniform(0, 1.5), rng.uniform(-1.5, 0.5), int(rng.integers(4, 13))
        for conv in ("end", "start"):
            dp = annealed_dp(m, beta, h, N, conv)
            for kind in ("full", "tilde", "hat", "check"):
                exact = brute_annealed(m, beta, h, N, conv, kind)
                if math.isfinite(exact):
                    worst = max(worst, abs(dp.log_z(kind) - exact))
    m = build_model(**MIXED)
    ss = build_state_space(m)
    N = 4096
    f_crit = max(abs(annealed_partition(m, b, h_crit(m, b, ss), N, ss)) / N for b in (0.5, 1.0))
    bound = 2 * math.log(N) / N
    slopes = []
    for alpha, deltas in ((0.8, np.geomspace(1e-6, 1e-5, 6)), (2.0, np.geomspace(1e-4, 1e-3, 6))):
        fit = fit_exponent(build_model(alpha, 2, MIXED["ma_coeffs"]), 1.0, deltas)
        slopes.append((alpha, fit.slope, max(1.0, 1.0 / alpha)))
    ok = worst <= 1e-9 and f_crit <= bound and all(abs(s - e) <= 0.1 for _, s, e in slopes)
    fits = ", ".join(f"alpha={a}: {s:.3f} vs {e:.3f}" for a, s, e in slopes)
    return ok, f"enumeration {worst:.2e}; |F_N| {f_crit:.2e} <= {bound:.2e}; {fits}"


def criterion_7():
    """Quenched Monte Carlo: annealed bound on a 5x5 grid; tail slope of K_hat."""
    m = build_model(**MIXED)
    ss = build_state_space(m)
    N, M = 2048, 50
    viol = 0
    worst_z = -math.inf
    for bi, b in enumerate(np.linspace(0.4, 1.2, 5)):
        hc = h_crit(m, b, ss)
        for hi, d in enumerate(np.linspace(-0.1, 0.3, 5)):
            est = quenched_free_energy(m, b, hc + d, N, M, master_seed=100 * bi + hi)
            fa = annealed_partition(m, b, hc + d, N, ss) / N
            worst_z = max(worst_z, (est.mean - fa) / est.stderr)
            viol += est.mean > fa + 3 * est.stderr
    gamma = 0.95
    est = fractional_moments(m, 0.8, h_crit(m, 0.8, ss), gamma, 2000, 500, master_seed=7)
    n = np.arange(200, 2001)
    slope = np.polyfit(np.log(n), np.log(est.K_hat[n]), 1)[0]
    target = -(1 + m.alpha) * gamma
    ok = viol == 0 and abs(slope - target) <= 0.15
    return ok, (f"annealed bound violations {viol}/25 (max z {worst_z:.2f}); "
                f"tail slope {slope:.3f} vs {target:.3f} (+-0.15)")


def criterion_8():
    """rho criterion: certifies for alpha=1.5, nothing for the irrelevant control."""
    m = build_model(**MIXED)
    cells = relevance_gap_scan(m, [0.8], [0.004, 0.008, 0.016, 0.032], [0.8, 0.9, 0.95, 0.98], M=1000,
                               master_seed=1, r_factor=4)
    cert = [c for c in cells if c.criterion.verdict == "certified-small"]
    best = min(cells, key=lambda c: c.criterion.rho_ucb + c.criterion.tail_bound)
    ctrl_model = build_model(0.3, 2, MIXED["ma_coeffs"])
    ctrl = relevance_gap_scan(ctrl_model, [0.2], [0.05], [0.8, 0.9, 0.95, 0.98], M=500,
                              master_seed=1, k_cap=1024)
    ctrl_cert = [c for c in ctrl if c.criterion.verdict == "certified-small"]
    ok = bool(cert) and best.criterion.rho_ucb <= 1.0 and not ctrl_cert
    c = best.criterion
    return ok, (f"{len(cert)}/{len(cells)} cells certified, best a={best.a:.4f} gamma={c.gamma} "
                f"ucb {c.rho_ucb:.3f} + tail {c.tail_bound:.3f}; "
                f"control certified {len(ctrl_cert)}/{len(ctrl)} "
                f"(largest certified Delta {largest_certified(cells)[0.8]})")


def criterion_9():
    """Sampler: transitions, contact fraction, Laplace transform."""
    m = build_model(**MIXED)
    ss = build_state_space(m)
    beta = 0.8
    sd = annealed_spectrum(m, beta, ss)
    Q = normalized_kernel(m, ss, beta, sd).weights
    _, states = sample_steps(m, sd, beta, 100_000, seed=21, n_paths=10, ss=ss)
    counts = transition_counts(states, ss)
    tot = counts.sum(axis=1, keepdims=True)
    p = Q[tot[:, 0] > 0]
    emp = counts[tot[:, 0] > 0] / tot[tot[:, 0] > 0]
    z_max = float((np.abs(emp - p) / np.sqrt(p * (1 - p) / tot[tot[:, 0] > 0])).max())

    N = 1_000_000
    paths = sample_paths(m, sd, beta, N, seed=22, n_paths=100, ss=ss)
    cf, cf_se = mean_with_se([contact_fraction(pth) for pth in paths])
    inv_m = 1.0 / stationary_mean_gap(m, sd, ss)
    z_cf = abs(cf - inv_m) / cf_se

    n, lam = 64, 1.0
    exact = laplace_matrix(m, sd, beta, lam / n, ss).transform(n)
    gaps, _ = sample_steps(m, sd, beta, n, seed=23, n_paths=100_000, ss=ss)
    emp_l, se_l = mean_with_se(np.exp(-lam * gaps.sum(axis=1) / n))
    z_l = abs(emp_l - exact) / se_l
    ok = z_max <= 3 and z_cf <= 3 and z_l <= 3
    return ok, (f"transition max z {z_max:.2f} over {states.size} steps; contact fraction "
                f"{cf:.5f} vs 1/m {inv_m:.5f} (z {z_cf:.2f}); Laplace {emp_l:.5f} vs "
                f"{exact:.5f} (z {z_l:.2f})")


def criterion_10():
    """Every command rerun with the same manifest is byte-identical."""
    cfg = CONFIGS / "relevant_alpha15.yaml"
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for cmd in ("annealed-curve", "relevance", "quenched", "sample", "validate"):
            snaps = []
            for run, workers in (("a", "1"), ("b", "2")):
                root = Path(tmp) / run / cmd
                with contextlib.redirect_stdout(io.StringIO()):
                    code = cli_main([cmd, str(cfg), "--out", str(root), "--workers", workers])
                if code != 0:
                    mismatched.append(f"{cmd} exit {code}")
                (d,) = list(root.iterdir())
                snaps.append({f.name: f.read_bytes() for f in sorted(d.iterdir())})
            if snaps[0] != snaps[1]:
                mismatched.append(cmd)
    return not mismatched, "all five commands identical" if not mismatched else f"differences: {mismatched}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


def run_criterion(i):
    t0 = time.perf_counter()
    ok, detail = CRITERIA[i - 1]()
    line = f"{'PASS' if ok else 'FAIL'} criterion {i}: {detail} [{time.perf_counter() - t0:.1f}s]"
    return ok, line


@pytest.mark.acceptance
@pytest.mark.parametrize("i", range(1, 11))
def test_criterion(i, capsys):
    ok, line = run_criterion(i)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [run_criterion(i) for i in range(1, 11)]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
