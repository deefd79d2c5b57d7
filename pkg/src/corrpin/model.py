"""Renewal kernel, correlated Gaussian disorder and the lumped gap-history space.

The interarrival law is ``K(n) = c * n**-(1 + alpha)`` with a constant
slowly varying part, normalized exactly through the Hurwitz zeta function.
Disorder is a Gaussian moving average ``omega_n = sum_i a_i eps_{n-i}`` so its
covariance is positive semidefinite by construction.

Gap histories live in ``E^q`` with ``E = {1, ..., q, *}``.  Inside arrays the
symbol ``*`` is encoded as ``q + 1``; any integer gap larger than ``q`` lumps
to it, so functions such as :func:`g_value` accept lifted integer gaps and
lumped states alike.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import mpmath
import numpy as np
from scipy.special import zeta

#: Largest number of lumped states a StateSpace may hold by default.
STATE_BUDGET = 1 << 16


class ModelError(ValueError):
    """Invalid model input."""


class StateBudgetError(MemoryError):
    """The lumped state space would exceed the configured budget."""


def star(q: int) -> int:
    """Integer code of the lumped symbol for gaps larger than ``q``."""
    return q + 1


def lump(gaps, q: int) -> np.ndarray:
    """Map integer gaps to ``E`` (gaps above ``q`` become ``star(q)``)."""
    return np.minimum(np.asarray(gaps, dtype=np.int64), q + 1)


def hurwitz(s: float, start: int) -> float:
    """``sum_{n >= start} n**-s`` for ``s > 1``."""
    return float(zeta(s, start))


def integral_bracket(s: float, start: int) -> tuple[float, float]:
    """Integral bounds on ``sum_{n >= start} n**-s``.

    ``int_start^inf x^-s dx <= sum <= start^-s + int_start^inf x^-s dx``.
    """
    integral = start ** (1.0 - s) / (s - 1.0)
    return integral, integral + start ** (-s)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Validated model parameters; build with :func:`build_model`."""

    alpha: float
    q: int
    ma_coeffs: tuple[float, ...]
    rho: tuple[float, ...]
    n_cut: int
    k_table: np.ndarray = field(repr=False)
    k_star: float
    tail_const: float
    seed: int | None = None

    @property
    def exponent(self) -> float:
        return 1.0 + self.alpha

    @cached_property
    def log_k_table(self) -> np.ndarray:
        # index n holds log K(n); index 0 is -inf
        out = np.empty(self.n_cut + 1)
        out[0] = -np.inf
        out[1:] = np.log(self.k_table)
        return out

    def K(self, n):
        """Kernel values for integer gaps ``n >= 1`` (table or closed form)."""
        n = np.asarray(n)
        if np.any(n < 1):
            raise ModelError("gaps must be >= 1")
        return self.tail_const * n.astype(float) ** (-self.exponent)

    @property
    def rho_full(self) -> np.ndarray:
        """``rho_0 .. rho_q`` with ``rho_0 = 1``."""
        return np.concatenate([[1.0], self.rho])

    @property
    def rho_bar(self) -> float:
        return 1.0 + 2.0 * sum(self.rho)

    def tail_mass(self) -> float:
        """``sum_{n > n_cut} K(n)``."""
        return self.tail_const * hurwitz(self.exponent, self.n_cut + 1)

    def tail_power_sum(self, gamma: float, start: int | None = None) -> float:
        """``sum_{n >= start} K(n)**gamma`` (default start ``q + 1``)."""
        start = self.q + 1 if start is None else start
        s = self.exponent * gamma
        if s <= 1.0:
            raise ModelError(f"sum of K^gamma diverges for gamma={gamma}")
        return self.tail_const**gamma * hurwitz(s, start)

    @cached_property
    def tail_k_log_k(self) -> float:
        """``sum_{n > q} K(n) log K(n)``."""
        s = self.exponent
        c = self.tail_const
        # sum n^-s log n = -d/ds zeta(s, q+1)
        with mpmath.workdps(30):
            s_log = -float(mpmath.zeta(s, self.q + 1, 1))
        return c * (math.log(c) * hurwitz(s, self.q + 1) - s * s_log)

    @cached_property
    def entropy(self) -> float:
        """``h(K) = -sum_n K(n) log K(n)``."""
        head = self.k_table[: self.q]
        return float(-(head * np.log(head)).sum() - self.tail_k_log_k)

    @cached_property
    def star_entropy(self) -> float:
        """Entropy of the conditional law ``K(n)/K(*)`` on ``n > q``."""
        return math.log(self.k_star) - self.tail_k_log_k / self.k_star

    def mean_gap(self) -> float:
        """``m = sum n K(n)``; infinite when ``alpha <= 1``."""
        if self.alpha <= 1.0:
            return math.inf
        return self.tail_const * hurwitz(self.alpha, 1)

    def star_mean_gap(self) -> float:
        """``m(*) = sum_{n > q} n K(n) / K(*)``."""
        if self.alpha <= 1.0:
            return math.inf
        return self.tail_const * hurwitz(self.alpha, self.q + 1) / self.k_star

    def star_laplace(self, lam: float) -> float:
        """``sum_{n > q} exp(-lam n) K(n)`` (unnormalized)."""
        if lam < 0:
            raise ModelError("Laplace argument must be >= 0")
        if lam == 0:
            return self.k_star
        z = math.exp(-lam)
        with mpmath.workdps(30):
            val = mpmath.lerchphi(z, self.exponent, self.q + 1)
        return self.tail_const * math.exp(-lam * (self.q + 1)) * float(val)

    def to_dict(self) -> dict:
        d = {
            "alpha": self.alpha,
            "q": self.q,
            "ma_coeffs": list(self.ma_coeffs),
            "n_cut": self.n_cut,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @cached_property
    def content_hash(self) -> str:
        """Short content hash naming result files for this model."""
        payload = {k: v for k, v in self.to_dict().items() if k != "seed"}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(alpha, q, ma_coeffs, n_cut=10_000, seed=None) -> ModelSpec:
    """Validate inputs and tabulate the renewal kernel.

    ``ma_coeffs`` (``a_0 .. a_q``) are rescaled to unit variance and the
    correlations follow as ``rho_k = sum_i a_i a_{i+k}``.
    """
    alpha = float(alpha)
    if not alpha > 0 or not math.isfinite(alpha):
        raise ModelError(f"alpha must be positive, got {alpha}")
    if int(q) != q or q < 1:
        raise ModelError(f"q must be an integer >= 1, got {q}")
    q = int(q)
    a = np.asarray(ma_coeffs, dtype=float).ravel()
    if a.size == 0:
        raise ModelError("ma_coeffs is empty")
    if a.size != q + 1:
        raise ModelError(f"expected {q + 1} moving-average coefficients, got {a.size}")
    if not np.all(np.isfinite(a)) or not np.any(a != 0):
        raise ModelError("ma_coeffs must be finite and not all zero")
    if int(n_cut) != n_cut or n_cut < 10 * q:
        raise ModelError(f"n_cut must be an integer >= 10*q = {10 * q}, got {n_cut}")
    n_cut = int(n_cut)

    a = a / math.sqrt(float(a @ a))
    rho = tuple(float(a[: q + 1 - k] @ a[k:]) for k in range(1, q + 1))

    s = 1.0 + alpha
    c = 1.0 / hurwitz(s, 1)
    n = np.arange(1, n_cut + 1, dtype=float)
    k_table = c * n ** (-s)
    k_table.setflags(write=False)
    k_star = c * hurwitz(s, q + 1)
    return ModelSpec(
        alpha=alpha,
        q=q,
        ma_coeffs=tuple(float(x) for x in a),
        rho=rho,
        n_cut=n_cut,
        k_table=k_table,
        k_star=k_star,
        tail_const=c,
        seed=None if seed is None else int(seed),
    )


def g_value(x, rho) -> float:
    """Correlation energy ``rho_{x1} + rho_{x1+x2} + ... + rho_{x1+...+xq}``.

    Prefix sums beyond ``q = len(rho)`` (this includes any ``*`` entry)
    contribute zero.
    """
    q = len(rho)
    total = 0.0
    s = 0
    for t in x:
        s += int(t)
        if s > q:
            break
        total += rho[s - 1]
    return total


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Enumeration of ``E^q`` in lexicographic order with ``*`` last.

    ``successors[i, e]`` is the state obtained by dropping the oldest gap of
    state ``i`` and appending symbol ``e + 1``.  ``predecessors[j, e]`` is the
    state ``(e + 1, y_1, ..., y_{q-1})`` for ``y = states[j]``.
    """

    q: int
    states: np.ndarray = field(repr=False)
    successors: np.ndarray = field(repr=False)
    predecessors: np.ndarray = field(repr=False)
    g_values: np.ndarray = field(repr=False)
    g_reversed: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def last_symbol(self) -> np.ndarray:
        """``y_q`` for each state."""
        return self.states[:, -1]

    def index(self, x) -> int:
        digits = lump(x, self.q) - 1
        if digits.shape != (self.q,):
            raise ModelError(f"state must have {self.q} entries")
        idx = 0
        for d in digits:
            idx = idx * (self.q + 1) + int(d)
        return idx

    def state(self, i: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.states[i])

    @property
    def all_star(self) -> int:
        return self.size - 1

    def reversed_prefix_g(self, rho, depth: int) -> np.ndarray:
        """Covariance of a new point with its last ``depth`` predecessors.

        With ``y`` ordered oldest-first, sums ``rho`` over
        ``y_q, y_q + y_{q-1}, ...`` truncated to ``depth`` terms.
        """
        out = np.zeros(self.size)
        for i, x in enumerate(self.states):
            out[i] = g_value(x[::-1][:depth], rho)
        return out


def build_state_space(spec: ModelSpec, budget: int = STATE_BUDGET) -> StateSpace:
    q = spec.q
    base = q + 1
    size = base**q
    if size > budget:
        raise StateBudgetError(
            f"(q+1)^q = {size} states exceeds budget {budget}; use a smaller q"
        )
    idx = np.arange(size)
    digits = np.empty((size, q), dtype=np.int64)
    rem = idx.copy()
    for pos in range(q - 1, -1, -1):
        digits[:, pos] = rem % base
        rem //= base
    states = digits + 1
    low = size // base
    successors = (idx % low)[:, None] * base + np.arange(base)[None, :]
    predecessors = np.arange(base)[None, :] * low + (idx // base)[:, None]
    g_fwd = np.array([g_value(x, spec.rho) for x in states])
    g_rev = np.array([g_value(x[::-1], spec.rho) for x in states])
    for arr in (states, successors, predecessors, g_fwd, g_rev):
        arr.setflags(write=False)
    return StateSpace(q, states, successors, predecessors, g_fwd, g_rev)


@dataclass(frozen=True, eq=False)
class RenewalMass:
    u: np.ndarray

    def __getitem__(self, n):
        return self.u[n]


def renewal_mass(spec: ModelSpec, N: int) -> RenewalMass:
    """``u_n = P(n in tau)`` for ``n = 0..N`` under the homogeneous renewal."""
    if N > spec.n_cut:
        raise ModelError(f"N={N} exceeds n_cut={spec.n_cut}")
    K = spec.k_table
    u = np.zeros(N + 1)
    u[0] = 1.0
    for n in range(1, N + 1):
        u[n] = K[:n] @ u[n - 1 :: -1]
    return RenewalMass(u)


def disorder_sample(spec: ModelSpec, N: int, rng: np.random.Generator) -> np.ndarray:
    """``N`` consecutive stationary disorder values (one row).

    ``q`` extra innovations are drawn ahead of the window so the first values
    already have the stationary law.
    """
    if N < 1:
        raise ModelError("N must be >= 1")
    eps = rng.standard_normal(N + spec.q)
    return np.convolve(eps, np.asarray(spec.ma_coeffs), mode="valid")


def disorder_batch(spec: ModelSpec, N: int, rngs) -> np.ndarray:
    """Stack one :func:`disorder_sample` row per generator."""
    return np.stack([disorder_sample(spec, N, g) for g in rngs])


def v_N(spec: ModelSpec, N: int) -> float:
    """Exact ``Var(omega_1 + ... + omega_N)``."""
    if N < 1:
        raise ModelError("N must be >= 1")
    return N + 2.0 * sum(max(N - k, 0) * r for k, r in enumerate(spec.rho, start=1))


def v_ratio_sup(spec: ModelSpec) -> float:
    """``sup_{N >= 1} v_N / N``.

    For ``N >= q`` the ratio is monotone in ``N`` so the supremum is attained
    on ``N <= q`` or in the limit ``rho_bar``.
    """
    head = max(v_N(spec, n) / n for n in range(1, spec.q + 1))
    return max(head, spec.rho_bar)
