"""Simulation of the Markov renewal process under the annealed-critical path law.

The first ``q`` gaps are i.i.d. ``K``.  After that the lumped symbol of each
new gap is drawn from the row of the normalized kernel ``Q~`` at the current
state, and a ``*`` symbol is refined to an integer gap ``n > q`` with
probability ``K(n)/K(*)``.  Gaps up to ``n_cut`` come from an inverse CDF on
the tabulated kernel.  Beyond it the law is the exact discrete power tail,
inverted by bisection on the Hurwitz zeta function.  That is exact only
because the slowly varying part of ``K`` is constant.

States are recorded after every gap from the ``q``-th on: ``states[j]`` is the
lumped tuple of gaps ``j+1 .. j+q`` (1-based), i.e. the state at renewal
``tau_{j+q}``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import zeta

from . import rng as rngmod
from .model import ModelError, ModelSpec, StateSpace, build_state_space, lump
from .spectral import SpectralData, annealed_spectrum, normalized_kernel

#: Gaps are clipped here; only reachable for alpha well below 1 and never
#: relevant to a finite horizon, since the path stops at the first overshoot.
MAX_GAP = 1 << 62
_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class RenewalPath:
    gaps: np.ndarray
    points: np.ndarray  # tau_0 = 0, tau_1, ...
    horizon: int
    states: np.ndarray
    beta: float

    def check(self, q: int) -> bool:
        """Regenerate states from the gaps and compare with the recorded ones."""
        return bool(np.array_equal(_states_from_gaps(self.gaps, q), self.states))


def _states_from_gaps(gaps, q):
    sym = lump(gaps, q) - 1
    if sym.size < q:
        return np.zeros(0, dtype=np.int64)
    idx = np.zeros(sym.size - q + 1, dtype=np.int64)
    for i in range(q):
        idx = idx * (q + 1) + sym[i : sym.size - q + 1 + i]
    return idx


class _StarSampler:
    """Inverse CDF for ``K(n)/K(*)``, ``n > q``, with an exact power tail."""

    def __init__(self, spec: ModelSpec):
        q = spec.q
        self.q = q
        self.s = spec.exponent
        self.n_cut = spec.n_cut
        body = spec.k_table[q:] / spec.k_star  # n = q+1..n_cut
        self.cdf = np.cumsum(body)
        self.tail_start = float(zeta(self.s, self.n_cut + 1))

    def __call__(self, u: np.ndarray) -> np.ndarray:
        out = np.searchsorted(self.cdf, u, side="right") + self.q + 1
        far = out > self.n_cut
        if np.any(far):
            # remaining mass (1 - u) relative to the tail beyond n_cut
            mass_left = 1.0 - self.cdf[-1]
            frac = np.clip((1.0 - u[far]) / mass_left, 0.0, 1.0) if mass_left > 0 else np.ones(far.sum())
            out[far] = self._tail(frac)
        return out

    def _tail(self, frac):
        # smallest n > n_cut with zeta(s, n+1) <= frac * zeta(s, n_cut+1)
        target = frac * self.tail_start
        lo = np.full(frac.shape, float(self.n_cut))
        hi = np.full(frac.shape, float(MAX_GAP))
        for _ in range(80):
            mid = np.floor(0.5 * (lo + hi))
            ok = zeta(self.s, mid + 1) <= target
            hi = np.where(ok, mid, hi)
            lo = np.where(ok, lo, mid)
            if np.all(hi - lo <= 1):
                break
        return hi.astype(np.int64)


class _PathEngine:
    def __init__(self, spec, ss, kernel_weights):
        self.spec = spec
        self.ss = ss
        q = spec.q
        init = np.append(spec.k_table[:q], spec.k_star)
        self.init_cdf = np.cumsum(init / init.sum())[:-1]
        if kernel_weights is not None:
            self.row_cdf = np.cumsum(kernel_weights, axis=1)[:, :-1]
        self.star = _StarSampler(spec)
        self.low = ss.size // (q + 1)

    def gaps_from_symbols(self, sym, u):
        gaps = sym + 1
        is_star = sym == self.spec.q
        if np.any(is_star):
            gaps[is_star] = self.star(u[is_star])
        return gaps

    def run(self, gens, n_steps=None, horizon=None):
        """Lockstep simulation; stops after ``n_steps`` gaps or once all paths reach ``horizon``."""
        q = self.spec.q
        P = len(gens)
        gaps_chunks, state_chunks = [], []
        total = np.zeros(P, dtype=np.int64)
        state = np.zeros(P, dtype=np.int64)
        done_steps = 0
        # uniforms are drawn row by row, so a shorter chunk consumes the same stream prefix
        chunk = min(_CHUNK, n_steps) if n_steps is not None else _CHUNK
        while True:
            u = np.stack([g.random((chunk, 2)) for g in gens])
            G = np.empty((P, chunk), dtype=np.int64)
            Sx = np.empty((P, chunk), dtype=np.int64)
            for t in range(chunk):
                k = done_steps + t  # 0-based gap index
                if k < q:
                    sym = (u[:, t, 0][:, None] >= self.init_cdf[None, :]).sum(axis=1)
                    state = state * (q + 1) + sym
                else:
                    cdf = self.row_cdf[state]
                    sym = (u[:, t, 0][:, None] >= cdf).sum(axis=1)
                    state = (state % self.low) * (q + 1) + sym
                G[:, t] = self.gaps_from_symbols(sym, u[:, t, 1])
                Sx[:, t] = state
            gaps_chunks.append(G)
            state_chunks.append(Sx)
            total = total + np.minimum(G, MAX_GAP // (2 * _CHUNK)).sum(axis=1)
            done_steps += chunk
            if n_steps is not None and done_steps >= n_steps:
                break
            if horizon is not None and done_steps >= q and np.all(total >= horizon):
                break
        gaps = np.concatenate(gaps_chunks, axis=1)
        states = np.concatenate(state_chunks, axis=1)[:, q - 1 :]
        if n_steps is not None:
            gaps = gaps[:, :n_steps]
            states = states[:, : max(n_steps - q + 1, 0)]
        return gaps, states


def _engine(spec, beta, spectral, ss):
    ss = build_state_space(spec) if ss is None else ss
    if spectral is None:
        spectral = annealed_spectrum(spec, beta, ss)
    kern = normalized_kernel(spec, ss, beta, spectral).weights
    return _PathEngine(spec, ss, kern), ss


def sample_paths(
    spec: ModelSpec, spectral: SpectralData | None, beta: float, N: int, seed: int,
    n_paths: int = 1, ss: StateSpace | None = None,
) -> list[RenewalPath]:
    """Paths stopped at the first renewal ``>= N``; path ``i`` uses stream ``(seed, i)``."""
    if N < 1:
        raise ModelError("horizon must be >= 1")
    eng, ss = _engine(spec, beta, spectral, ss)
    gens = rngmod.streams(seed, n_paths)
    gaps, states = eng.run(gens, horizon=N)
    out = []
    for i in range(n_paths):
        pts = np.concatenate([[0], np.cumsum(gaps[i])])
        stop = max(int(np.searchsorted(pts, N, side="left")), spec.q)
        g = gaps[i, :stop].copy()
        out.append(RenewalPath(g, pts[: stop + 1].copy(), int(N), states[i, : stop - spec.q + 1].copy(), float(beta)))
    return out


def sample_path(spec, spectral, beta, N, seed, ss=None) -> RenewalPath:
    return sample_paths(spec, spectral, beta, N, seed, 1, ss)[0]


def sample_steps(
    spec: ModelSpec, spectral: SpectralData | None, beta: float, n_steps: int, seed: int,
    n_paths: int = 1, ss: StateSpace | None = None,
):
    """Fixed number of gaps per path: ``(gaps (P, n_steps), states (P, n_steps-q+1))``."""
    if n_steps < spec.q:
        raise ModelError("need at least q steps")
    eng, ss = _engine(spec, beta, spectral, ss)
    return eng.run(rngmod.streams(seed, n_paths), n_steps=n_steps)


def contact_fraction(path: RenewalPath) -> float:
    """``|tau ∩ {1..N}| / N``."""
    if path.horizon < 1:
        raise ModelError("horizon must be >= 1")
    pts = path.points
    return float(np.count_nonzero((pts >= 1) & (pts <= path.horizon)) / path.horizon)


def stationary_mean_gap(spec: ModelSpec, spectral: SpectralData, ss: StateSpace) -> float:
    """``m_beta = sum_y pi(y) m(y_q)`` with ``m(t) = t`` and ``m(*)`` the conditional mean."""
    q = spec.q
    m = np.append(np.arange(1, q + 1, dtype=float), spec.star_mean_gap())
    return float(spectral.pi @ m[ss.last_symbol - 1])


def transition_counts(states: np.ndarray, ss: StateSpace) -> np.ndarray:
    """Counts of ``x -> successor slot e`` over consecutive recorded states (rows of paths)."""
    states = np.atleast_2d(states)
    src = states[:, :-1].ravel()
    slot = (states[:, 1:] % (ss.q + 1)).ravel()
    counts = np.zeros((ss.size, ss.q + 1), dtype=np.int64)
    np.add.at(counts, (src, slot), 1)
    return counts


@dataclass(frozen=True, eq=False)
class LaplaceMatrix:
    lam: float
    weights: np.ndarray  # (S, q+1) per successor slot
    space: StateSpace = field(repr=False)
    phi: np.ndarray = field(repr=False)  # phi_t for t = 1..q and *
    initial: np.ndarray = field(repr=False)  # initial law weighted by the first q gaps

    def dense(self) -> np.ndarray:
        S = self.space.size
        out = np.zeros((S, S))
        rows = np.repeat(np.arange(S), self.space.q + 1)
        out[rows, self.space.successors.ravel()] = self.weights.ravel()
        return out

    def transform(self, n: int) -> float:
        """``E exp(-lam tau_n)`` for ``n >= q``: initial weights times ``Phi^(n-q)`` times 1."""
        q = self.space.q
        if n < q:
            raise ModelError("transform needs n >= q")
        v = np.ones(self.space.size)
        for _ in range(n - q):
            v = (self.weights * v[self.space.successors]).sum(axis=1)
        return float(self.initial @ v)


def laplace_matrix(
    spec: ModelSpec, spectral: SpectralData | None, beta: float, lam: float,
    ss: StateSpace | None = None,
) -> LaplaceMatrix:
    """``Phi(x, y) = phi_{y_q}(lam) Q~(x, y)`` with ``phi_*`` the conditional star transform."""
    if lam < 0:
        raise ModelError("lambda must be >= 0")
    ss = build_state_space(spec) if ss is None else ss
    if spectral is None:
        spectral = annealed_spectrum(spec, beta, ss)
    kern = normalized_kernel(spec, ss, beta, spectral).weights
    q = spec.q
    phi = np.append(np.exp(-lam * np.arange(1, q + 1)), spec.star_laplace(lam) / spec.k_star)
    weights = kern * phi[None, :]
    k_sym = np.append(spec.k_table[:q], spec.k_star)
    digits = ss.states - 1
    initial = np.prod(k_sym[digits] * phi[digits], axis=1)
    return LaplaceMatrix(float(lam), weights, ss, phi, initial)


@dataclass(frozen=True)
class SubRenewal:
    state: int
    points: np.ndarray
    gaps: np.ndarray
    flagged: bool


def sub_renewal_extract(path: RenewalPath, x: int, q: int) -> SubRenewal:
    """Renewals ``tau_n``, ``n >= q``, at which the lumped last-``q``-gap state is ``x``."""
    hits = np.nonzero(path.states == x)[0]
    pts = path.points[hits + q]
    return SubRenewal(int(x), pts, np.diff(pts), flagged=pts.size < 2)


def write_path(path: RenewalPath, q: int, dest) -> None:
    """Line-delimited ``k T_k state`` (state is -1 before step ``q``)."""
    with open(dest, "w", encoding="utf-8") as fh:
        for k, gap in enumerate(path.gaps, start=1):
            st = int(path.states[k - q]) if k >= q else -1
            fh.write(f"{k} {int(gap)} {st}\n")


def write_stats(rows, dest) -> None:
    """CSV ``stat, estimate, stderr, n_paths``."""
    with open(Path(dest), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stat", "estimate", "stderr", "n_paths"])
        for name, est, se, n in rows:
            w.writerow([name, f"{est:.17g}", f"{se:.17g}", n])


def mean_with_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
