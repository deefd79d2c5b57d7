"""Monte Carlo for quenched and restricted partition functions.

All recursions run on a batch of disorder rows at once (shape ``(M, N+1)``,
sites ``0..N``).  Values are kept as per-replica scaled mantissas: a row is
rescaled only when a new entry exceeds its scale by ``_RESCALE``, and entries
far below the running maximum are allowed to underflow because they are
negligible next to the maximal term (every kernel value up to ``n_cut`` is far
above ``exp(-700)``).

Conventions.  :func:`quenched_partition` attaches energy to sites ``1..N``.
The restricted functions attach it to sites ``0..N-1`` so that the pieces of
the decomposition over hat-renewal points see disjoint, independent stretches
of disorder.  For the full partition function the two differ by the exact
boundary factor ``exp(beta (omega_N - omega_0))``.

Every criterion produced here is a Monte Carlo estimate with a confidence
bound: it is evidence for the inequality it tests, not a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import rng as rngmod
from .model import ModelError, ModelSpec, disorder_sample, hurwitz
from .spectral import annealed_spectrum

_RESCALE = 300.0


class _Scaled:
    """Per-replica log-scaled storage of a sequence ``a_0..a_N``."""

    def __init__(self, M: int, N: int):
        self.E = np.zeros((M, N + 1))
        self.scale = np.full(M, -np.inf)

    def push(self, n: int, log_val: np.ndarray) -> None:
        bump = log_val > self.scale + _RESCALE
        if np.any(bump):
            rows = np.nonzero(bump)[0]
            new = log_val[rows]
            old = self.scale[rows]
            with np.errstate(invalid="ignore"):
                factor = np.where(np.isfinite(old), np.exp(old - new), 0.0)
            self.E[rows, :n] *= factor[:, None]
            self.scale[rows] = new
        with np.errstate(invalid="ignore"):
            self.E[:, n] = np.where(np.isfinite(log_val), np.exp(log_val - self.scale), 0.0)

    def conv(self, lo: int, hi: int, weights: np.ndarray) -> np.ndarray:
        """``log sum_{l=lo}^{hi-1} exp(a_l) w_l``."""
        val = self.E[:, lo:hi] @ weights
        with np.errstate(divide="ignore"):
            return np.log(val) + self.scale


def _as_batch(omega, N):
    om = np.atleast_2d(np.asarray(omega, dtype=float))
    if om.shape[1] < N + 1:
        raise ModelError(f"disorder rows need sites 0..{N} (length {N + 1})")
    return om[:, : N + 1]


@dataclass(frozen=True, eq=False)
class PartitionTrace:
    kind: str
    beta: float
    h: float
    N: int
    log_values: np.ndarray  # (M, N+1)
    convention: str
    disorder_seed: int | None = None


def quenched_partition(spec: ModelSpec, beta, h, omega, N, convention="end", seed=None):
    """``log Z_n`` for ``n = 0..N``: ``Z_n = sum_k Z_k K(n-k) exp(beta omega_n + h)``.

    With ``convention="start"`` the weight of site ``k`` is applied when
    leaving it instead of on arrival.
    """
    if N > spec.n_cut:
        raise ModelError(f"N={N} exceeds n_cut={spec.n_cut}")
    om = _as_batch(omega, N)
    M = om.shape[0]
    K = spec.k_table
    out = np.empty((M, N + 1))
    out[:, 0] = 0.0
    store = _Scaled(M, N)
    site = beta * om + h
    if convention == "end":
        store.push(0, np.zeros(M))
        for n in range(1, N + 1):
            out[:, n] = store.conv(0, n, K[n - 1 :: -1]) + site[:, n]
            store.push(n, out[:, n])
    elif convention == "start":
        store.push(0, site[:, 0])
        for n in range(1, N + 1):
            out[:, n] = store.conv(0, n, K[n - 1 :: -1])
            store.push(n, out[:, n] + site[:, n])
    else:
        raise ModelError(f"unknown convention {convention!r}")
    return PartitionTrace("full", float(beta), float(h), N, out, convention, seed)


def restricted_partitions(spec: ModelSpec, beta, h, omega, N, seed=None) -> dict:
    """Traces of the full, hat, check and tilde partition functions (sites ``0..N-1``).

    ``check``: every gap is at most ``q``.  ``hat``: the only gap above ``q``
    is the last one.  ``tilde``: the last gap is above ``q``.  By convention
    ``hat_0 = tilde_0 = 1`` and both vanish on ``1..q``.
    """
    q = spec.q
    om = _as_batch(omega, N)
    M = om.shape[0]
    K = spec.k_table
    site = beta * om + h

    full = quenched_partition(spec, beta, h, om, N, "start", seed).log_values

    chk = np.full((M, N + 1), -np.inf)
    chk[:, 0] = 0.0
    logk = np.log(K[:q])
    for n in range(1, N + 1):
        g = np.arange(1, min(q, n) + 1)
        terms = chk[:, n - g] + site[:, n - g] + logk[g - 1]
        mx = terms.max(axis=1)
        safe = np.where(np.isfinite(mx), mx, 0.0)
        with np.errstate(divide="ignore"):
            chk[:, n] = safe + np.log(np.exp(terms - safe[:, None]).sum(axis=1))

    hat = np.full((M, N + 1), -np.inf)
    tilde = np.full((M, N + 1), -np.inf)
    hat[:, 0] = tilde[:, 0] = 0.0
    s_chk = _Scaled(M, N)
    s_full = _Scaled(M, N)
    for n in range(N + 1):
        s_chk.push(n, chk[:, n] + site[:, n])
        s_full.push(n, full[:, n] + site[:, n])
    for n in range(q + 1, N + 1):
        # jump of length l = n - m > q from site m
        w = K[n - 1 : q - 1 : -1]  # K(n - m) for m = 0..n-q-1
        hat[:, n] = s_chk.conv(0, n - q, w)
        tilde[:, n] = s_full.conv(0, n - q, w)
    mk = lambda kind, v: PartitionTrace(kind, float(beta), float(h), N, v, "start", seed)
    return {
        "full": mk("full", full),
        "check": mk("check", chk),
        "hat": mk("hat", hat),
        "tilde": mk("tilde", tilde),
    }


def draw_disorder(spec: ModelSpec, N: int, M: int, master_seed: int) -> np.ndarray:
    """``M`` disorder rows on sites ``0..N``; row ``i`` uses stream ``(seed, i)``."""
    return np.stack([disorder_sample(spec, N + 1, rngmod.stream(master_seed, i)) for i in range(M)])


def _pow_mean(log_vals: np.ndarray, gamma: float):
    """Mean and standard error of ``exp(gamma * log_vals)`` over replicas (axis 0)."""
    with np.errstate(over="raise"):
        x = np.exp(gamma * log_vals)
    M = x.shape[0]
    mean = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros_like(mean)
    return x, mean, se


@dataclass(frozen=True, eq=False)
class FractionalEstimate:
    """``K_hat(n) = E hat_n^gamma`` (zero for ``n <= q``) and ``A_l = E tilde_l^gamma``."""

    gamma: float
    K_hat: np.ndarray
    K_hat_se: np.ndarray
    A: np.ndarray
    A_se: np.ndarray
    M: int
    q: int
    hat_samples: np.ndarray = field(repr=False)
    tilde_samples: np.ndarray = field(repr=False)


def estimate_from_traces(traces: dict, gamma: float, q: int) -> FractionalEstimate:
    if not 0 < gamma < 1 and gamma != 1:
        raise ModelError("gamma must lie in (0, 1]")
    hat = traces["hat"].log_values
    if traces["hat"].beta > 0 and hat.shape[0] > 1 and np.array_equal(hat, np.broadcast_to(hat[0], hat.shape)):
        raise ModelError("all replicas are identical (degenerate variance); check seeding")
    hs, kh, kh_se = _pow_mean(hat, gamma)
    ts, a, a_se = _pow_mean(traces["tilde"].log_values, gamma)
    kh[: q + 1] = 0.0
    kh_se[: q + 1] = 0.0
    hs = hs.copy()
    hs[:, : q + 1] = 0.0
    return FractionalEstimate(gamma, kh, kh_se, a, a_se, hs.shape[0], q, hs, ts)


def fractional_moments(spec, beta, h, gamma, N, M, master_seed=0) -> FractionalEstimate:
    """Monte Carlo fractional moments of the restricted partition functions."""
    if M < 100:
        raise ModelError("fractional moments need M >= 100 replicas")
    omega = draw_disorder(spec, N, M, master_seed)
    traces = restricted_partitions(spec, beta, h, omega, N, master_seed)
    return estimate_from_traces(traces, gamma, spec.q)


@dataclass(frozen=True)
class TailFit:
    slope: float
    slope_se: float
    intercept: float
    lo: int
    hi: int


def fit_tail(values: np.ndarray, lo: int, hi: int) -> TailFit:
    """Least-squares fit of ``log values[n]`` against ``log n`` on ``lo..hi``."""
    n = np.arange(lo, hi + 1)
    y = values[lo : hi + 1]
    if np.any(y <= 0) or n.size < 3:
        return TailFit(math.nan, math.nan, math.nan, lo, hi)
    res = stats.linregress(np.log(n), np.log(y))
    return TailFit(float(res.slope), float(res.stderr), float(res.intercept), lo, hi)


@dataclass(frozen=True)
class RhoCriterion:
    k: int
    r_max: int
    gamma: float
    rho: float
    stderr: float
    rho_ucb: float
    tail_bound: float
    verdict: str
    note: str = "heuristic Monte Carlo evidence, not a proof"


def rho_criterion(est: FractionalEstimate, k: int, r_max: int, z: float = 2.0) -> RhoCriterion:
    """Truncated ``rho = sum_{r >= k} sum_{l < k} K_hat(r - l) A_l`` with an upper bound.

    The part ``r > r_max`` is bounded with a power law fitted to the top
    decade of ``K_hat``, using the shallow edge of the slope's confidence band.
    """
    if r_max < 2 * k:
        raise ModelError("r_max must be at least 2k")
    if r_max >= est.K_hat.size or k - 1 >= est.A.size:
        raise ModelError("estimate does not reach r_max")
    kh = est.K_hat
    A = est.A[:k]
    # S_l = sum_{r=k}^{r_max} K_hat(r - l) for l = 0..k-1
    csum = np.concatenate([[0.0], np.cumsum(kh[: r_max + 1])])
    l = np.arange(k)
    S = csum[r_max - l + 1] - csum[k - l]
    rho = float(A @ S)

    hs = est.hat_samples[:, : r_max + 1]
    hs_c = np.concatenate([np.zeros((hs.shape[0], 1)), np.cumsum(hs, axis=1)], axis=1)
    s_i = hs_c[:, r_max - l + 1] - hs_c[:, k - l]
    psi = est.tilde_samples[:, :k] @ S + s_i @ A
    M = est.M
    stderr = float(psi.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0

    lo = max(est.q + 1, r_max // 10)
    fit = fit_tail(kh, lo, r_max)
    tail = math.inf
    if math.isfinite(fit.slope):
        expo = -(fit.slope + z * fit.slope_se)
        if expo > 1.0:
            anchor = max(kh[r_max] + z * est.K_hat_se[r_max],
                         math.exp(fit.intercept + fit.slope * math.log(r_max)))
            tails = np.array([
                anchor * r_max**expo * hurwitz(expo, r_max - li + 1) for li in range(k)
            ])
            tail = float((A + z * est.A_se[:k]) @ tails)
    ucb = rho + z * stderr
    verdict = "certified-small" if ucb + tail <= 1.0 else "inconclusive"
    return RhoCriterion(k, r_max, est.gamma, rho, stderr, ucb, tail, verdict)


@dataclass(frozen=True)
class QuenchedEstimate:
    mean: float
    stderr: float
    drift: float
    N: int
    M: int


def quenched_free_energy(spec, beta, h, N, M, master_seed=0) -> QuenchedEstimate:
    """Replica average of ``(1/N) log Z_N`` with an ``N/2 -> N`` drift diagnostic."""
    if M < 30:
        raise ModelError("need at least 30 replicas")
    omega = draw_disorder(spec, N, M, master_seed)
    tr = quenched_partition(spec, beta, h, omega, N, seed=master_seed).log_values
    f = tr[:, N] / N
    half = tr[:, N // 2] / (N // 2)
    return QuenchedEstimate(
        float(f.mean()), float(f.std(ddof=1) / math.sqrt(M)),
        float(f.mean() - half.mean()), N, M,
    )


@dataclass(frozen=True)
class GapScanCell:
    beta: float
    delta: float
    a: float
    k: int
    r_max: int
    criterion: RhoCriterion
    h: float = math.nan
    estimate: FractionalEstimate | None = field(default=None, repr=False, compare=False)


def scale_k(spec: ModelSpec, beta: float, delta: float, ss=None) -> int:
    """Scale ``k``: ``1/(a beta^2) = 1/Delta`` when ``alpha > 1``, else ``1/F^a``."""
    from .annealed import free_energy_limit

    if spec.alpha > 1:
        return max(1, math.ceil(1.0 / delta))
    lam = annealed_spectrum(spec, beta, ss).eigenvalue
    hc = -0.5 * beta**2 - math.log(lam)
    f = free_energy_limit(spec, beta, hc + delta, ss)
    return max(1, math.ceil(1.0 / f)) if f > 0 else math.inf


def relevance_gap_scan(
    spec: ModelSpec, beta_grid, delta_grid, gamma_grid, M: int, master_seed: int = 0,
    k_cap: int = 4096, r_factor: int = 2, k_override: int | None = None,
    keep_estimates: bool = False,
) -> list[GapScanCell]:
    """Run the rho criterion over ``(beta, Delta, gamma)`` cells.

    Disorder is shared across cells (common random numbers).  ``k`` follows
    :func:`scale_k` capped at ``k_cap``.
    """
    cells = []
    for beta in beta_grid:
        lam = annealed_spectrum(spec, beta).eigenvalue
        hc = -0.5 * beta**2 - math.log(lam)
        for delta in delta_grid:
            k = k_override or min(scale_k(spec, beta, delta), k_cap)
            r_max = r_factor * k
            omega = draw_disorder(spec, r_max, M, master_seed)
            traces = restricted_partitions(spec, beta, hc + delta, omega, r_max, master_seed)
            for gamma in gamma_grid:
                est = estimate_from_traces(traces, gamma, spec.q)
                crit = rho_criterion(est, k, r_max)
                cells.append(GapScanCell(
                    float(beta), float(delta), delta / beta**2, k, r_max, crit, hc + delta,
                    est if keep_estimates else None,
                ))
    return cells


def largest_certified(cells) -> dict[float, float | None]:
    """Per beta, the largest ``Delta`` with a certified cell (``None`` if none)."""
    out: dict[float, float | None] = {}
    for c in cells:
        out.setdefault(c.beta, None)
        if c.criterion.verdict == "certified-small":
            cur = out[c.beta]
            out[c.beta] = c.delta if cur is None else max(cur, c.delta)
    return out
