"""Transfer operators on the lumped state space and their Perron-Frobenius data.

Three operator families share the shift structure ``x ~> y`` of ``E^q``:

* annealed ``Q*(x, y) = exp(beta^2 G(y)) K(y_q)``
* fractional ``Q^(x, y)`` used for the fractional-moment certificate
* normalized ``Q~(x, y) = Q*(x, y) r(y) / (lambda r(x))``, a Markov kernel

An operator stores one weight per (state, successor slot); slot ``e`` of
state ``x`` is the successor whose newest gap symbol is ``e + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .model import ModelError, ModelSpec, StateSpace, build_state_space, renewal_mass

POWER_TOL = 1e-13
POWER_MAX_ITER = 100_000
GAMMA_GUARD = 1e-4
SAFETY_MARGIN = 1e-6


class ConvergenceError(RuntimeError):
    """Power iteration did not converge."""


class ReducibilityError(RuntimeError):
    """An iterate lost strict positivity; the operator is not irreducible."""


@dataclass(frozen=True, eq=False)
class TransferOperator:
    kind: str
    beta: float
    gamma: float | None
    weights: np.ndarray
    space: StateSpace

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return (self.weights * v[self.space.successors]).sum(axis=1)

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        sp = self.space
        slot = sp.last_symbol - 1
        pred = sp.predecessors
        return (v[pred] * self.weights[pred, slot[:, None]]).sum(axis=1)

    def to_dense(self) -> np.ndarray:
        S = self.space.size
        dense = np.zeros((S, S))
        rows = np.repeat(np.arange(S), self.space.q + 1)
        dense[rows, self.space.successors.ravel()] = self.weights.ravel()
        return dense

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)


@dataclass(frozen=True, eq=False)
class SpectralData:
    eigenvalue: float
    right: np.ndarray
    left: np.ndarray
    pi: np.ndarray
    residual: float
    iterations: int


@dataclass(frozen=True)
class Certificate:
    beta: float
    gamma: float
    value: float
    verdict: str
    margin: float


def _column_operator(kind, beta, gamma, col, ss):
    weights = col[ss.successors]
    return TransferOperator(kind, float(beta), gamma, weights, ss)


def build_annealed_operator(spec: ModelSpec, ss: StateSpace, beta: float) -> TransferOperator:
    if beta < 0:
        raise ModelError("beta must be >= 0")
    k_sym = np.append(spec.k_table[: spec.q], spec.k_star)
    col = np.exp(beta**2 * ss.g_values) * k_sym[ss.last_symbol - 1]
    return _column_operator("annealed", beta, None, col, ss)


def check_gamma(spec: ModelSpec, gamma: float) -> None:
    low = 1.0 / (1.0 + spec.alpha)
    if not (low + GAMMA_GUARD <= gamma <= 1.0):
        raise ModelError(
            f"gamma={gamma} outside admissible range [{low + GAMMA_GUARD:.6g}, 1]"
        )


def build_fractional_operator(
    spec: ModelSpec, ss: StateSpace, beta: float, gamma: float, lam: float | None
) -> TransferOperator:
    """Operator whose PF eigenvalue ``Lambda(beta, gamma)`` drives the certificate.

    ``lam`` is the annealed eigenvalue ``lambda(beta)``.
    """
    if lam is None:
        raise ModelError("lambda(beta) is required; run perron_frobenius on Q* first")
    check_gamma(spec, gamma)
    if gamma == 1.0:
        k_gamma = np.append(spec.k_table[: spec.q], spec.k_star)
    else:
        k_gamma = np.append(spec.k_table[: spec.q] ** gamma, spec.tail_power_sum(gamma))
    expo = 0.5 * beta**2 * gamma * (gamma - 1.0) + gamma**2 * beta**2 * ss.g_values
    col = np.exp(expo) * k_gamma[ss.last_symbol - 1] / lam**gamma
    return _column_operator("fractional", beta, float(gamma), col, ss)


def _power(apply, size, tol, max_iter, side):
    # Iterates the lazy operator Q + lam_hat I, which sends an eigenvalue near
    # -lambda (near-periodic gap cycles at large beta) to about 0.  The stopping
    # rule uses the Collatz-Wielandt ratios of Q itself.
    v = np.ones(size)
    spread = math.inf
    for it in range(1, max_iter + 1):
        w = apply(v)
        if not np.all(w > 0):
            raise ReducibilityError(f"{side} iterate lost positivity at step {it}")
        ratio = w / v
        lo, hi = ratio.min(), ratio.max()
        spread = (hi - lo) / hi
        if spread <= tol:
            return 0.5 * (lo + hi), v, it
        v = w + 0.5 * (lo + hi) * v
        v /= v.max()
    raise ConvergenceError(
        f"{side} power iteration: relative spread {spread:.3e} after {max_iter} steps"
    )


def perron_frobenius(
    op: TransferOperator, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER
) -> SpectralData:
    """Dominant eigenvalue with positive eigenvectors (``max r = 1``, ``l . r = 1``).

    Iterates until the Collatz-Wielandt bounds ``min (Qv)/v <= lambda <=
    max (Qv)/v`` agree to ``tol`` relative.
    """
    S = op.space.size
    lam_r, r, it_r = _power(op.matvec, S, tol, max_iter, "right")
    lam_l, l, it_l = _power(op.rmatvec, S, tol, max_iter, "left")
    lam = 0.5 * (lam_r + lam_l)
    l = l / (l @ r)
    res_r = np.abs(op.matvec(r) - lam * r).max() / (lam * np.abs(r).max())
    res_l = np.abs(op.rmatvec(l) - lam * l).max() / (lam * np.abs(l).max())
    pi = l * r
    return SpectralData(
        eigenvalue=float(lam),
        right=r,
        left=l,
        pi=pi / pi.sum(),
        residual=float(max(res_r, res_l)),
        iterations=max(it_r, it_l),
    )


def dense_perron(op: TransferOperator) -> float:
    """Dominant eigenvalue by dense eigendecomposition (test oracle)."""
    if op.space.size > 4096:
        raise ModelError("dense oracle limited to 4096 states")
    vals = np.linalg.eigvals(op.to_dense())
    return float(vals[np.argmax(vals.real)].real)


def annealed_spectrum(spec: ModelSpec, beta: float, ss: StateSpace | None = None) -> SpectralData:
    ss = build_state_space(spec) if ss is None else ss
    return perron_frobenius(build_annealed_operator(spec, ss, beta))


def normalized_kernel(
    spec: ModelSpec, ss: StateSpace, beta: float, spectral: SpectralData | None = None
) -> TransferOperator:
    op = build_annealed_operator(spec, ss, beta)
    sd = perron_frobenius(op) if spectral is None else spectral
    r = sd.right
    weights = op.weights * r[ss.successors] / (sd.eigenvalue * r[:, None])
    return TransferOperator("normalized", float(beta), None, weights, ss)


def fractional_eigenvalue(
    spec: ModelSpec, ss: StateSpace, beta: float, gamma: float, lam: float | None = None
) -> float:
    if lam is None:
        lam = annealed_spectrum(spec, beta, ss).eigenvalue
    return perron_frobenius(build_fractional_operator(spec, ss, beta, gamma, lam)).eigenvalue


@dataclass(frozen=True)
class CurvePoint:
    beta: float
    lam: float
    h_c_a: float


def annealed_critical_curve(spec: ModelSpec, beta_grid, ss: StateSpace | None = None):
    """``h_c^a(beta) = -beta^2/2 - log lambda(beta)`` on a grid."""
    ss = build_state_space(spec) if ss is None else ss
    out = []
    for b in beta_grid:
        if b < 0:
            raise ModelError("beta grid values must be >= 0")
        lam = annealed_spectrum(spec, b, ss).eigenvalue
        out.append(CurvePoint(float(b), lam, -0.5 * b * b - math.log(lam)))
    return out


def small_beta_coefficient(spec: ModelSpec) -> float:
    """``1 + 2 sum_n rho_n P(n in tau)``, the small-beta slope of ``-2 h_c^a / beta^2``."""
    u = renewal_mass(spec, spec.q).u
    return 1.0 + 2.0 * sum(r * u[n] for n, r in enumerate(spec.rho, start=1))


def relevance_grid(
    spec: ModelSpec, beta_grid, gamma_grid, margin: float = SAFETY_MARGIN,
    ss: StateSpace | None = None,
) -> list[Certificate]:
    ss = build_state_space(spec) if ss is None else ss
    certs = []
    for b in beta_grid:
        lam = annealed_spectrum(spec, b, ss).eigenvalue
        for g in gamma_grid:
            if not g < 1.0:
                raise ModelError("relevance grid needs gamma < 1")
            val = fractional_eigenvalue(spec, ss, b, g, lam)
            verdict = "relevant" if val < 1.0 - margin else "inconclusive"
            certs.append(Certificate(float(b), float(g), val, verdict, 1.0 - val))
    return certs


def summarize_relevance(certs) -> dict[float, str]:
    """Per-beta verdict: relevant iff any gamma certifies."""
    out: dict[float, str] = {}
    for c in certs:
        hit = c.verdict == "relevant" or out.get(c.beta) == "relevant"
        out[c.beta] = "relevant" if hit else "inconclusive"
    return out


@dataclass(frozen=True)
class DerivativeReport:
    """Left derivative of ``Lambda(beta, .)`` at ``gamma = 1`` and its pieces."""

    beta: float
    direct: float
    entropy_form: float
    log_lambda: float
    mean_g: float
    kernel_entropy: float
    star_entropy: float
    p_star: float

    @property
    def relative_entropy(self) -> float:
        """Specific relative entropy of the tilted chain w.r.t. ``beta = 0``."""
        return self.beta**2 * self.mean_g - self.log_lambda


def relevance_derivative(
    spec: ModelSpec, beta: float, ss: StateSpace | None = None,
    spectral: SpectralData | None = None,
) -> DerivativeReport:
    ss = build_state_space(spec) if ss is None else ss
    op = build_annealed_operator(spec, ss, beta)
    sd = perron_frobenius(op) if spectral is None else spectral
    lam = sd.eigenvalue
    log_lam = math.log(lam)
    q = spec.q
    k_sym = np.append(spec.k_table[:q], spec.k_star)
    sym = ss.last_symbol - 1
    coef = 0.5 * beta**2 - log_lam + 2.0 * beta**2 * ss.g_values + np.log(k_sym[sym])
    is_star = sym == q
    coef = coef + np.where(is_star, -spec.star_entropy, 0.0)
    d_weights = coef[ss.successors] * op.weights / lam
    d_op = TransferOperator("fractional-derivative", beta, 1.0, d_weights, ss)
    direct = float(sd.left @ d_op.matvec(sd.right))

    pi = sd.pi
    mean_g = float(pi @ ss.g_values)
    p_star = float(pi[is_star].sum())
    kern = normalized_kernel(spec, ss, beta, sd).weights
    kernel_entropy = float(-(pi[:, None] * kern * np.log(kern)).sum())
    entropy_form = (
        0.5 * beta**2 + beta**2 * mean_g - kernel_entropy - spec.star_entropy * p_star
    )
    return DerivativeReport(
        beta=float(beta), direct=direct, entropy_form=float(entropy_form),
        log_lambda=log_lam, mean_g=mean_g, kernel_entropy=kernel_entropy,
        star_entropy=spec.star_entropy, p_star=p_star,
    )


def find_beta0(spec: ModelSpec, bracket=(0.0, 10.0), xtol: float = 1e-10) -> float:
    """Root of ``beta -> d Lambda / d gamma`` at ``gamma = 1-``."""
    ss = build_state_space(spec)

    def f(b):
        return relevance_derivative(spec, b, ss).direct

    lo, hi = bracket
    f_lo, f_hi = f(lo), f(hi)
    if f_lo * f_hi > 0:
        raise ModelError(
            f"no sign change of the derivative on [{lo}, {hi}] ({f_lo:.4g}, {f_hi:.4g})"
        )
    return float(brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps))
