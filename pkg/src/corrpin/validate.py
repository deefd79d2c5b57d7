"""Invariant suite run by ``corrpin validate`` against a given model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .annealed import annealed_dp
from .model import ModelSpec, build_state_space, disorder_sample
from .oracles import brute_annealed, brute_quenched
from .quenched import restricted_partitions
from .sampler import laplace_matrix, sample_paths
from .spectral import (
    annealed_spectrum,
    build_annealed_operator,
    dense_perron,
    fractional_eigenvalue,
    normalized_kernel,
    relevance_derivative,
)


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(math.isfinite(self.value) and self.value <= self.tolerance)


def dec_residual(spec: ModelSpec, beta: float, h: float, omega: np.ndarray, n: int) -> float:
    """Relative residual of ``tilde_n = sum_l tilde_l hat_{n-l}(shifted disorder)``."""
    base = restricted_partitions(spec, beta, h, omega, n)
    shifted = np.zeros((n, n + 1))
    for l in range(n):
        seg = omega[l : n + 1]
        shifted[l, : seg.size] = seg
    hat_sh = restricted_partitions(spec, beta, h, shifted, n)["hat"].log_values
    tl = base["tilde"].log_values[0]
    terms = np.array([tl[l] + hat_sh[l, n - l] for l in range(n)])
    mx = terms.max()
    rhs = mx + math.log(np.exp(terms - mx).sum())
    return abs(math.expm1(rhs - tl[n]))


def run_checks(spec: ModelSpec, seed: int = 0) -> list[Check]:
    ss = build_state_space(spec)
    out: list[Check] = []
    add = lambda name, val, tol: out.append(Check(name, float(val), tol))

    add("kernel_normalization", abs(spec.k_table.sum() + spec.tail_mass() - 1.0), 1e-10)
    add("ma_unit_variance", abs(sum(a * a for a in spec.ma_coeffs) - 1.0), 1e-12)
    counts = np.bincount(ss.successors.ravel(), minlength=ss.size)
    add("predecessor_counts", np.abs(counts - (spec.q + 1)).max(), 0)

    add("lambda_at_beta0", abs(annealed_spectrum(spec, 0.0, ss).eigenvalue - 1.0), 1e-10)
    for b in (0.1, 0.5, 1.0, 2.0):
        add(f"Lambda_gamma1_beta{b}", abs(fractional_eigenvalue(spec, ss, b, 1.0) - 1.0), 1e-10)

    beta = 1.0
    sd = annealed_spectrum(spec, beta, ss)
    kern = normalized_kernel(spec, ss, beta, sd)
    add("kernel_row_sums", np.abs(kern.row_sums() - 1.0).max(), 1e-12)
    add("pi_stationary", np.abs(kern.rmatvec(sd.pi) - sd.pi).max(), 1e-12)
    add("l_dot_r", abs(sd.left @ sd.right - 1.0), 1e-12)
    if ss.size <= 4096:
        dense = dense_perron(build_annealed_operator(spec, ss, beta))
        add("dense_vs_power", abs(dense - sd.eigenvalue) / sd.eigenvalue, 1e-10)
    der = relevance_derivative(spec, beta, ss, sd)
    add("derivative_forms", abs(der.direct - der.entropy_form), 1e-9)
    add("relative_entropy_nonneg", max(0.0, -der.relative_entropy), 1e-12)

    N, h = 8, -0.3
    dp = annealed_dp(spec, beta, h, N, ss=ss)
    worst = max(abs(dp.log_z(k) - brute_annealed(spec, beta, h, N, "end", k))
                for k in ("full", "tilde", "hat", "check"))
    add("annealed_dp_vs_enumeration", worst, 1e-9)

    omega = disorder_sample(spec, 65, rngmod.stream(seed, 0))
    rp = restricted_partitions(spec, beta, h, omega, N)
    worst = max(abs(rp[k].log_values[0, N] - brute_quenched(spec, beta, h, omega, N, "start", k))
                for k in ("full", "tilde", "hat", "check"))
    add("quenched_vs_enumeration", worst, 1e-9)
    add("dec_identity", dec_residual(spec, beta, h, omega, 64), 1e-10)

    paths = sample_paths(spec, sd, beta, 2000, seed, 4, ss)
    add("path_state_regeneration", sum(not p.check(spec.q) for p in paths), 0)
    lm = laplace_matrix(spec, sd, beta, 0.0, ss)
    add("laplace_phi0_row_sums", np.abs(lm.weights.sum(axis=1) - 1.0).max(), 1e-12)
    return out
