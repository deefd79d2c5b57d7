"""Exact dynamic programming for annealed partition functions.

The disorder average of ``exp(sum_{s in S} (beta omega_s + h))`` over a set
of renewal sites ``S`` is ``exp(h|S| + beta^2/2 Var(sum omega_s))``.  Because
correlations vanish beyond distance ``q``, the variance grows by
``1 + 2 * (covariance with the last q sites)`` at each new site, and the last
``q`` gaps (lumped into ``E^q``) are enough to carry it.  The tables below are
exact: no boundary terms are dropped.

Two site conventions are supported:

``"end"``   energetic sites ``1..N`` (the partition function ``Z_N``)
``"start"`` energetic sites ``0..N-1`` (the restricted partition functions)

Restricted events, for the endpoint ``N``:

``full``   any path pinned at ``N``
``tilde``  the last gap is larger than ``q``
``hat``    the last gap is larger than ``q`` and every earlier gap is not
``check``  every gap is at most ``q``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .model import ModelError, ModelSpec, StateSpace, build_state_space, hurwitz
from .spectral import TransferOperator, annealed_spectrum, normalized_kernel, perron_frobenius

KINDS = ("full", "tilde", "hat", "check")


@dataclass
class _Table:
    mant: np.ndarray  # (N+1, P, S), max entry 1 per row (or all zero)
    logscale: np.ndarray  # (N+1,)
    arrivals: dict = field(default_factory=dict)  # kind -> log trace

    def log_values(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.mant) + self.logscale[:, None, None]


def _logsum(x) -> float:
    x = np.asarray(x, dtype=float)
    m = x.max() if x.size else -np.inf
    if not np.isfinite(m):
        return -np.inf
    return float(m + np.log(np.exp(x - m).sum()))


def _renewal_table(
    ss: StateSpace,
    log_k: np.ndarray,
    N: int,
    energy: list[np.ndarray],
    site: np.ndarray,
    trans: list[np.ndarray] | None,
    init_phase: int,
    init_log: float,
    allow_star: bool,
    final_energy: bool,
) -> _Table:
    """Run the lumped renewal recursion up to ``N``.

    ``energy[p][y]`` is the log weight of arriving in ``y`` after ``p``
    energetic predecessors; ``site[n]`` is an extra log weight for a point
    at ``n``; ``trans[p][x, e]`` multiplies moves out of ``x`` through slot
    ``e``.  Arrival traces ("nonstar", "star") record the total weight of
    paths ending at ``n`` with or without the energy of ``n`` according to
    ``final_energy``.
    """
    q = ss.q
    P = q + 1
    S = ss.size
    sym = ss.last_symbol - 1
    pred = ss.predecessors
    mant = np.zeros((N + 1, P, S))
    logscale = np.full(N + 1, -np.inf)
    mant[0, init_phase, ss.all_star] = 1.0
    logscale[0] = init_log
    nonstar = np.full(N + 1, -np.inf)
    star_tr = np.full(N + 1, -np.inf)
    star_mask = sym == q
    for n in range(1, N + 1):
        g = np.arange(1, n + 1)
        lw = log_k[g] + logscale[n - g]
        ref = lw.max()
        if not np.isfinite(ref):
            continue
        w = np.exp(lw - ref)
        src = np.zeros((q + 1, P, S))
        for e in range(min(q, n)):
            src[e] = w[e] * mant[n - e - 1]
        if allow_star and n > q:
            rows = mant[n - q - 1 :: -1][: n - q]  # mant[n-g] for g = q+1..n
            src[q] = np.tensordot(w[q:], rows, axes=(0, 0))
        if trans is not None:
            for p in range(P):
                src[:, p, :] *= trans[p].T
        # arrivals[p, y] = sum over predecessors x of src[y_q - 1, p, x]
        arr = src[sym[:, None], :, pred].sum(axis=1).T  # (P, S)
        new = np.zeros((P, S))
        fin_ns = 0.0
        fin_s = 0.0
        for p in range(P):
            factor = np.exp(energy[p] + site[n])
            contrib = arr[p] * factor
            tgt = min(p + 1, q)
            new[tgt] += contrib
            fin = contrib if final_energy else arr[p]
            fin_s += fin[star_mask].sum()
            fin_ns += fin[~star_mask].sum()
        with np.errstate(divide="ignore"):
            nonstar[n] = ref + np.log(fin_ns)
            star_tr[n] = ref + np.log(fin_s)
        top = new.max()
        if top > 0:
            mant[n] = new / top
            logscale[n] = ref + np.log(top)
    return _Table(mant, logscale, {"nonstar": nonstar, "star": star_tr})


def _masked_g(spec: ModelSpec, ss: StateSpace) -> list[np.ndarray]:
    return [ss.reversed_prefix_g(spec.rho, p) for p in range(spec.q + 1)]


def site_window(N: int, convention: str) -> np.ndarray:
    if convention == "end":
        return np.arange(1, N + 1)
    if convention == "start":
        return np.arange(0, N)
    raise ModelError(f"unknown convention {convention!r}")


def tilt_means(spec: ModelSpec, lambda_tilt: float, N: int, convention: str = "end") -> np.ndarray:
    """Disorder means on sites ``0..N`` under ``exp(-lambda sum_window omega)``.

    ``m_i = -lambda * sum_{j in window, |i-j| <= q} rho_{|i-j|}``.
    """
    rho = spec.rho_full
    ind = np.zeros(N + 1)
    ind[site_window(N, convention)] = 1.0
    kernel = np.concatenate([rho[::-1], rho[1:]])
    return -lambda_tilt * np.convolve(ind, kernel, mode="same")


@dataclass(frozen=True, eq=False)
class AnnealedDP:
    """Annealed traces ``log E Z_n`` (``n = 0..N``) for every restriction kind."""

    beta: float
    h: float
    N: int
    convention: str
    traces: dict
    log_table: np.ndarray  # (N+1, S) full-event table summed over phases

    def log_z(self, kind: str = "full") -> float:
        return float(self.traces[kind][self.N])


def annealed_dp(
    spec: ModelSpec,
    beta: float,
    h: float,
    N: int,
    convention: str = "end",
    shift: np.ndarray | None = None,
    ss: StateSpace | None = None,
) -> AnnealedDP:
    """Exact annealed recursion up to horizon ``N`` (``N <= n_cut``).

    ``shift`` holds disorder means on sites ``0..N`` (tilted measure).
    """
    if N > spec.n_cut:
        raise ModelError(f"horizon N={N} exceeds n_cut={spec.n_cut}")
    ss = build_state_space(spec) if ss is None else ss
    base = h + 0.5 * beta**2
    energy = [base + beta**2 * g for g in _masked_g(spec, ss)]
    site = np.zeros(N + 1) if shift is None else beta * np.asarray(shift, dtype=float)
    if site.shape != (N + 1,):
        raise ModelError("shift must cover sites 0..N")
    if convention == "end":
        init_phase, init_log, final_energy = 0, 0.0, True
    elif convention == "start":
        init_phase, init_log, final_energy = 1, base + site[0], False
    else:
        raise ModelError(f"unknown convention {convention!r}")
    log_k = spec.log_k_table
    full = _renewal_table(ss, log_k, N, energy, site, None, init_phase, init_log, True, final_energy)
    chk = _renewal_table(ss, log_k, N, energy, site, None, init_phase, init_log, False, final_energy)
    with np.errstate(divide="ignore"):
        traces = {
            "full": np.logaddexp(full.arrivals["nonstar"], full.arrivals["star"]),
            "tilde": full.arrivals["star"].copy(),
            "hat": None,
            "check": chk.arrivals["nonstar"].copy(),
        }
    traces["hat"] = _hat_trace(ss, log_k, N, chk, energy, site, final_energy)
    for tr in traces.values():
        tr[0] = 0.0
    log_table = np.array([_logsum_axis0(row) for row in full.log_values()])
    return AnnealedDP(float(beta), float(h), N, convention, traces, log_table)


def _logsum_axis0(a):
    m = a.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe).sum(axis=0))


def _hat_trace(ss, log_k, N, chk: _Table, energy, site, final_energy):
    """Paths whose only gap above ``q`` is the last one, built from the check table."""
    q = ss.q
    sym = ss.last_symbol - 1
    pred = ss.predecessors
    star_y = np.nonzero(sym == q)[0]
    out = np.full(N + 1, -np.inf)
    for n in range(q + 1, N + 1):
        g = np.arange(q + 1, n + 1)
        lw = log_k[g] + chk.logscale[n - g]
        ref = lw.max()
        if not np.isfinite(ref):
            continue
        w = np.exp(lw - ref)
        rows = chk.mant[n - q - 1 :: -1][: n - q]
        src = np.tensordot(w, rows, axes=(0, 0))  # (P, S)
        total = 0.0
        for p in range(q + 1):
            arr = src[p][pred[star_y]].sum(axis=1)
            if final_energy:
                arr = arr * np.exp(energy[p][star_y] + site[n])
            total += arr.sum()
        if total > 0:
            out[n] = ref + math.log(total)
    return out


def annealed_partition(spec: ModelSpec, beta: float, h: float, N: int, ss=None) -> float:
    """``log Z^a_N`` with energetic sites ``1..N`` and pinned endpoint."""
    return annealed_dp(spec, beta, h, N, "end", ss=ss).log_z("full")


def tilted_annealed_partition(
    spec: ModelSpec, beta: float, h: float, lambda_tilt: float, N: int,
    convention: str = "end", kind: str = "tilde", ss=None,
) -> float:
    """``log E_{N,lambda} Z~_N`` under the exponentially tilted disorder law."""
    if lambda_tilt < 0:
        raise ModelError("lambda must be >= 0")
    shift = tilt_means(spec, lambda_tilt, N, convention)
    return annealed_dp(spec, beta, h, N, convention, shift=shift, ss=ss).log_z(kind)


# ---------------------------------------------------------------------------
# infinite-volume free energy and exponent fit


def _laplace_operator(spec, ss, beta, h, b):
    q = spec.q
    n = np.arange(1, q + 1)
    phi = np.append(spec.k_table[:q] * np.exp(-b * n), spec.star_laplace(b))
    col = np.exp(h + 0.5 * beta**2 + beta**2 * ss.g_values) * phi[ss.last_symbol - 1]
    return TransferOperator("laplace", beta, None, col[ss.successors], ss)


def free_energy_limit(spec: ModelSpec, beta: float, h: float, ss=None) -> float:
    """``F^a(beta, h)``: the ``b >= 0`` at which the Laplace-weighted operator has PF eigenvalue 1."""
    ss = build_state_space(spec) if ss is None else ss

    def log_pf(b):
        return math.log(perron_frobenius(_laplace_operator(spec, ss, beta, h, b)).eigenvalue)

    if log_pf(0.0) <= 0.0:
        return 0.0
    hi = 1.0
    while log_pf(hi) > 0:
        hi *= 2.0
    return float(brentq(log_pf, 0.0, hi, xtol=1e-300, rtol=1e-13, maxiter=500))


@dataclass(frozen=True)
class FreeEnergyCurve:
    beta: float
    h_grid: np.ndarray
    f_values: np.ndarray  # finite-volume (1/N) log Z^a_N
    N: int
    f_limit: np.ndarray  # infinite-volume values


def annealed_free_energy(spec: ModelSpec, beta: float, h_grid, N: int, ss=None) -> FreeEnergyCurve:
    ss = build_state_space(spec) if ss is None else ss
    h_grid = np.asarray(h_grid, dtype=float)
    f_n = np.array([annealed_partition(spec, beta, h, N, ss) / N for h in h_grid])
    f_lim = np.array([free_energy_limit(spec, beta, h, ss) for h in h_grid])
    return FreeEnergyCurve(float(beta), h_grid, f_n, N, f_lim)


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    r2: float
    deltas: np.ndarray
    f_values: np.ndarray


def fit_exponent(spec: ModelSpec, beta: float, deltas, ss=None) -> ExponentFit:
    """Log-log slope of ``F^a(beta, h_c^a + Delta)`` against ``Delta``."""
    ss = build_state_space(spec) if ss is None else ss
    lam = annealed_spectrum(spec, beta, ss).eigenvalue
    hc = -0.5 * beta**2 - math.log(lam)
    deltas = np.asarray(deltas, dtype=float)
    f = np.array([free_energy_limit(spec, beta, hc + d, ss) for d in deltas])
    x, y = np.log(deltas), np.log(f)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - resid.var() / y.var()
    return ExponentFit(float(slope), float(intercept), float(r2), deltas, f)


# ---------------------------------------------------------------------------
# Markov renewal law at the annealed critical point


def _survival(spec: ModelSpec, t: np.ndarray, start: int = 1) -> np.ndarray:
    """``P(T > t, T >= start)`` for the homogeneous kernel, vectorized over ``t``."""
    K = spec.k_table
    tail_beyond = spec.tail_mass()
    # suffix[i] = sum_{n > i} K(n) for i = 0..n_cut
    suffix = np.concatenate([np.cumsum(K[::-1])[::-1], [0.0]]) + tail_beyond
    t = np.maximum(np.asarray(t), start - 1)
    out = np.empty(t.shape)
    inside = t <= spec.n_cut
    out[inside] = suffix[t[inside]]
    far = t[~inside]
    out[~inside] = [spec.tail_const * hurwitz(spec.exponent, int(v) + 1) for v in far]
    return out


def renewal_mgf(spec: ModelSpec, beta: float, c: float, N: int, ss=None, spectral=None) -> float:
    """``log E_beta exp(c |tau cap {1..N}|)`` under the critical Markov renewal law.

    The first ``q`` gaps are i.i.d. ``K``; afterwards the lumped history moves
    with the normalized kernel and gaps are drawn from ``K(n)/K(y_q)``.
    """
    if N > spec.n_cut:
        raise ModelError(f"N={N} exceeds n_cut={spec.n_cut}")
    ss = build_state_space(spec) if ss is None else ss
    q = spec.q
    kern = normalized_kernel(spec, ss, beta, spectral).weights
    k_sym = np.append(spec.k_table[:q], spec.k_star)
    steady = kern / k_sym[None, :]
    trans = [np.ones_like(kern)] * q + [steady]
    energy = [np.zeros(ss.size)] * (q + 1)
    site = np.full(N + 1, float(c))
    tab = _renewal_table(ss, spec.log_k_table, N, energy, site, trans, 0, 0.0, True, True)
    logv = tab.log_values()  # (N+1, P, S)
    # survival of the next gap beyond N - n given (phase, state)
    rem = N - np.arange(N + 1)
    surv_iid = _survival(spec, rem)
    surv_star = _survival(spec, rem, start=q + 1) / spec.k_star
    terms = []
    for n in range(N + 1):
        t = rem[n]
        for p in range(q + 1):
            row = logv[n, p]
            if not np.any(np.isfinite(row)):
                continue
            if p < q:
                s = np.full(ss.size, surv_iid[n])
            else:
                slot_surv = np.array([1.0 if e + 1 > t else 0.0 for e in range(q)] + [surv_star[n]])
                s = kern @ slot_surv
            with np.errstate(divide="ignore"):
                terms.append(row + np.log(s))
    return _logsum(np.concatenate(terms))
