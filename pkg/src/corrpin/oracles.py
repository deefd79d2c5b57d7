"""Independent brute-force references for small instances.

These enumerate renewal configurations directly and share no code path with
the transfer recursions they are used to check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .model import ModelSpec


def _paths(N: int):
    """All renewal sets ``0 = t_0 < t_1 < ... < t_k = N``."""
    inner = range(1, N)
    for r in range(N):
        for combo in itertools.combinations(inner, r):
            yield (0, *combo, N)


def _event_ok(gaps, q: int, kind: str) -> bool:
    if kind == "full":
        return True
    if kind == "tilde":
        return gaps[-1] > q
    if kind == "hat":
        return gaps[-1] > q and all(g <= q for g in gaps[:-1])
    if kind == "check":
        return all(g <= q for g in gaps)
    raise ValueError(kind)


def _energetic(points, convention):
    return points[1:] if convention == "end" else points[:-1]


def _cov(spec: ModelSpec, i: int, j: int) -> float:
    d = abs(i - j)
    if d == 0:
        return 1.0
    return spec.rho[d - 1] if d <= spec.q else 0.0


def brute_annealed(
    spec: ModelSpec, beta, h, N, convention="end", kind="full", shift=None
) -> float:
    """``log`` of the annealed partition function by full enumeration."""
    total = 0.0
    for pts in _paths(N):
        gaps = np.diff(pts)
        if not _event_ok(gaps, spec.q, kind):
            continue
        sites = _energetic(pts, convention)
        var = sum(_cov(spec, a, b) for a in sites for b in sites)
        mean = 0.0 if shift is None else sum(shift[s] for s in sites)
        w = math.prod(spec.tail_const * float(g) ** -(1 + spec.alpha) for g in gaps)
        total += w * math.exp(h * len(sites) + beta * mean + 0.5 * beta**2 * var)
    return math.log(total) if total > 0 else -math.inf


def brute_quenched(spec: ModelSpec, beta, h, omega, N, convention="end", kind="full") -> float:
    """``log Z_N`` for one disorder row ``omega[0..N]`` by full enumeration."""
    total = 0.0
    for pts in _paths(N):
        gaps = np.diff(pts)
        if not _event_ok(gaps, spec.q, kind):
            continue
        sites = _energetic(pts, convention)
        w = math.prod(spec.tail_const * float(g) ** -(1 + spec.alpha) for g in gaps)
        total += w * math.exp(sum(beta * omega[s] + h for s in sites))
    return math.log(total) if total > 0 else -math.inf


def brute_renewal_mass(spec: ModelSpec, n: int) -> float:
    """``P(n in tau)`` by summing over all renewal sets ending at ``n``."""
    if n == 0:
        return 1.0
    return sum(
        math.prod(float(spec.k_table[g - 1]) for g in np.diff(pts)) for pts in _paths(n)
    )


def homogeneous_free_energy(spec: ModelSpec, h: float) -> float:
    """Root ``b`` of ``sum_n K(n) exp(-b n) = exp(-h)`` (0 when ``h <= 0``)."""
    from scipy.optimize import brentq

    if h <= 0:
        return 0.0
    c = spec.tail_const
    s = spec.exponent

    def laplace(b):
        import mpmath

        with mpmath.workdps(30):
            return c * math.exp(-b) * float(mpmath.lerchphi(math.exp(-b), s, 1))

    return float(brentq(lambda b: math.log(laplace(b)) + h, 1e-14, h + 1.0, xtol=1e-14))
