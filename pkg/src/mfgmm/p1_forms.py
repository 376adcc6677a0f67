"""Closed-form stationary equations for one-dimensional data (P = 1).

For a Markov matrix ``A`` and a truth ``(pi~, mu~, Lambda~)`` with class sizes
``N~``, component ``k`` of the population potential sees the weights
``w(k, k') = N~_k' alpha(k, k') pi~_k'``. Its precision part is

    beta * Lambda^2 / (2 sigma) + a_k Lambda - b_k log Lambda,
    a_k = (beta/2) sum_k' w(k, k') c(k, k'),   b_k = (beta/2) sum_k' w(k, k'),
    c(k, k') = 1 / Lambda~_k' + (mu_k - mu~_k')^2,

whose minimiser is the positive root of ``beta Lambda / sigma + a - b / Lambda = 0``.
The mean solves ``Lambda sum_k' w (mu - mu~_k') + 2 a_prior mu = 0``; since the
precision root depends on ``mu`` the pair is solved by fixed-point iteration.

These forms are the fast path for ``landscape.m_of`` when P = 1 and serve as
independent oracles for the numerical minimiser.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, localcontext

import numpy as np
from scipy.optimize import bisect

from .errors import ConvergenceError, DegenerateError
from .gmm_core import ModelPoint, PriorConfig, TrueMixture


def _weights(A, truth: TrueMixture, weighting="conditional"):
    A = np.asarray(A, dtype=float)
    w = A * truth.class_sizes[None, :].astype(float)
    if weighting == "class_weighted":
        w = w * truth.weights[None, :]
    return w


@dataclass(frozen=True)
class P1Coefficients:
    a: np.ndarray          # (K,)
    b: np.ndarray          # (K,)
    c: np.ndarray          # (K,) a / b
    tau: np.ndarray        # (K, K) row-normalised weights
    r: np.ndarray          # (K,) N~_k' / N
    c_pair: np.ndarray     # (K, K) 1/Lambda~_k' + (mu_k - mu~_k')^2
    theta: np.ndarray      # (K, K)
    degenerate: np.ndarray  # (K,) rows with b_k = 0

    def to_dict(self):
        return {name: getattr(self, name).tolist() for name in
                ("a", "b", "c", "tau", "r", "c_pair", "theta", "degenerate")}


def coefficients(A, truth: TrueMixture, beta, mu, weighting="conditional"):
    """Coefficients of the per-component precision problem at means ``mu`` (shape (K,))."""
    _require_p1(truth)
    w = _weights(A, truth, weighting)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    mu_t = truth.means[:, 0]
    c_pair = 1.0 / truth.precisions[None, :, 0, 0] + (mu[:, None] - mu_t[None, :]) ** 2
    b = 0.5 * beta * w.sum(axis=1)
    a = 0.5 * beta * np.sum(w * c_pair, axis=1)
    degenerate = b <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(degenerate, np.nan, a / b)
        tau = np.where(degenerate[:, None], np.nan, w / w.sum(axis=1, keepdims=True))
    r = truth.class_sizes / truth.class_sizes.sum()
    num = np.asarray(A, dtype=float) * (r * truth.weights)[None, :]
    if weighting != "class_weighted":
        num = np.asarray(A, dtype=float) * r[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.where(degenerate[:, None], np.nan, num / num.sum(axis=1, keepdims=True))
    return P1Coefficients(a, b, c, tau, r, c_pair, theta, degenerate)


def _require_p1(truth):
    if truth.P != 1:
        raise DegenerateError("closed forms require P = 1")


def lambda_hat(a, b, sigma, beta=1.0):
    """Positive root of ``beta L / sigma + a - b / L = 0`` (``b / a`` when ``sigma`` is infinite)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise DegenerateError("precision root undefined for b_k = 0")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), b.shape)
    disc = np.sqrt(a * a + 4.0 * beta * b / np.where(np.isinf(sigma), np.inf, sigma))
    return 2.0 * b / (disc + a)


def lambda_asymptotic(a, b):
    """Large-sample limit ``1 / c_k = b_k / a_k`` of :func:`lambda_hat`."""
    return np.asarray(b, dtype=float) / np.asarray(a, dtype=float)


def mu_leading(A, truth: TrueMixture, weighting="conditional"):
    """Weighted mean of the true means with weights ``r_k' pi~_k' alpha(k, k')``."""
    _require_p1(truth)
    w = _weights(A, truth, weighting)
    den = w.sum(axis=1)
    if np.any(den <= 0):
        raise DegenerateError("zero row weight in mean formula")
    return (w @ truth.means[:, 0]) / den


def _mean_equation(m, k, w, mu_t, lam_t, a_prior, sigma, beta):
    c_pair = 1.0 / lam_t + (m - mu_t) ** 2
    lam = lambda_hat(0.5 * beta * np.sum(w[k] * c_pair), 0.5 * beta * w[k].sum(), sigma, beta)
    return lam * np.sum(w[k] * (m - mu_t)) + 2 * a_prior * m


def mu_bisection(A, truth: TrueMixture, priors: PriorConfig, beta=1.0, weighting="conditional", xtol=1e-14):
    """Exact stationary means by bisection on the one-dimensional derivative."""
    _require_p1(truth)
    w = _weights(A, truth, weighting)
    mu_t, lam_t = truth.means[:, 0], truth.precisions[:, 0, 0]
    sig = priors.sigma(truth.K)
    lo = min(mu_t.min(), 0.0) - 1.0
    hi = max(mu_t.max(), 0.0) + 1.0
    out = np.empty(truth.K)
    for k in range(truth.K):
        if w[k].sum() <= 0:
            raise DegenerateError(f"row {k} has zero weight")
        out[k] = bisect(_mean_equation, lo, hi, args=(k, w, mu_t, lam_t, priors.a, sig[k], beta),
                        xtol=xtol, maxiter=500)
    return out


@dataclass(frozen=True)
class P1Solution:
    means: np.ndarray
    precisions: np.ndarray
    weights: np.ndarray
    precisions_asymptotic: np.ndarray
    iterations: int

    def point(self):
        return ModelPoint.trusted(self.weights, self.means[:, None], self.precisions[:, None, None])


def solve_fixed_point(A, truth: TrueMixture, priors: PriorConfig, beta=1.0, weighting="conditional",
                      tol=1e-12, max_iter=10_000, sigma=None):
    """Minimiser of the P = 1 population potential by iterating ``mu -> coefficients -> mu``.

    Starts at the leading-term weighted mean. Rows with zero weight raise
    :class:`DegenerateError`; callers pin those components themselves and may
    pass a subset of rows of ``A`` together with the matching ``sigma``.
    """
    _require_p1(truth)
    w = _weights(A, truth, weighting)
    if np.any(w.sum(axis=1) <= 0):
        raise DegenerateError("zero row weight")
    sig = priors.sigma(w.shape[0]) if sigma is None else np.asarray(sigma, dtype=float)
    mu_t = truth.means[:, 0]
    mu = mu_leading(A, truth, weighting)
    for it in range(1, max_iter + 1):
        co = coefficients(A, truth, beta, mu, weighting)
        lam = lambda_hat(co.a, co.b, sig, beta)
        new = lam * (w @ mu_t) / (lam * w.sum(axis=1) + 2 * priors.a)
        step = np.max(np.abs(new - mu))
        mu = new
        if step <= tol * max(1.0, np.max(np.abs(mu))):
            break
    else:
        raise ConvergenceError("mean fixed point did not converge", best=mu)
    co = coefficients(A, truth, beta, mu, weighting)
    lam = lambda_hat(co.a, co.b, sig, beta)
    counts = w.sum(axis=1)
    pi = np.maximum(counts + priors.dirichlet_alpha - 1.0, 0.0)
    return P1Solution(mu, lam, pi / pi.sum(), lambda_asymptotic(co.a, co.b), it)


def per_class_value(A, truth: TrueMixture, mu, weighting="conditional"):
    """Leading-order minimised per-class contribution ``(1/2) W_k (1 + log c_k)``.

    Evaluated as ``(N/2) sum r w + (N/2) sum r w log(sum c r w) - (N/2) sum r w log(sum r w)``
    with ``r_k' = N~_k' / N`` and ``w = pi~_k' alpha(k, k')``.
    """
    _require_p1(truth)
    N = float(truth.class_sizes.sum())
    co = coefficients(A, truth, 1.0, mu, weighting)
    rw = _weights(A, truth, weighting) / N
    s = rw.sum(axis=1)
    sc = np.sum(co.c_pair * rw, axis=1)
    if np.any(s <= 0) or np.any(sc <= 0):
        raise DegenerateError("log of nonpositive argument")
    return 0.5 * N * s + 0.5 * N * s * np.log(sc) - 0.5 * N * s * np.log(s)


def per_class_value_exact(A, truth: TrueMixture, mu, priors: PriorConfig, beta=1.0, weighting="conditional"):
    """Per-class value at the exact precision root, mean prior included, weights excluded.

    Equals ``b/2 + a Lambda/2 - b log Lambda + a_prior mu^2`` in units of ``lambda0 * Phi``.
    """
    co = coefficients(A, truth, 1.0, mu, weighting)
    lam = lambda_hat(co.a, co.b, priors.sigma(truth.K), 1.0)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    return 0.5 * co.b + 0.5 * co.a * lam - co.b * np.log(lam) + priors.a * mu ** 2


def weights_terms(A, truth: TrueMixture, pi, priors: PriorConfig, weighting="conditional"):
    """``-sum_k (W_k + alpha - 1) log pi_k``: the weights part of the population potential."""
    W = _weights(A, truth, weighting).sum(axis=1)
    coef = W + priors.dirichlet_alpha - 1.0
    with np.errstate(divide="ignore"):
        return float(-np.sum(np.where(coef == 0, 0.0, coef * np.log(pi))))


def _uv(alpha_row, r, c_row):
    return float(np.dot(r, alpha_row)), float(np.dot(c_row * r, alpha_row))


def row_potential(alpha_row, r, c_row):
    """``u log v - u log u`` with ``u = sum r alpha`` and ``v = sum c r alpha`` (c held fixed)."""
    u, v = _uv(alpha_row, r, c_row)
    return u * np.log(v) - u * np.log(u)


def hessian_row(alpha_row, r, c_row, x):
    """Closed-form quadratic form of :func:`row_potential`'s Hessian along ``x``: a negated square."""
    u, v = _uv(alpha_row, r, c_row)
    if u <= 0 or v <= 0:
        raise DegenerateError("Hessian undefined on a zero row")
    x = np.asarray(x, dtype=float)
    return -(np.dot(r, x) / np.sqrt(u) - np.sqrt(u) * np.dot(c_row * r, x) / v) ** 2


def hessian_row_expanded(alpha_row, r, c_row, x):
    """Same form written as three separate terms before completing the square."""
    u, v = _uv(alpha_row, r, c_row)
    du = np.dot(r, x)
    dv = np.dot(c_row * r, x)
    return -(du * du / u + u * dv * dv / (v * v) - 2 * du * dv / v)


def hessian_row_fd(alpha_row, r, c_row, x, h=1e-6, digits=50):
    """Five-point central second difference of :func:`row_potential` along ``x``.

    Evaluated in ``digits``-digit decimal arithmetic so that neither rounding
    nor truncation limits the comparison with the closed form.
    """
    with localcontext() as ctx:
        ctx.prec = digits
        a = [Decimal(float(v)) for v in np.asarray(alpha_row, dtype=float)]
        rr = [Decimal(float(v)) for v in np.asarray(r, dtype=float)]
        cr = [Decimal(float(c)) * q for c, q in zip(np.asarray(c_row, dtype=float), rr)]
        xs = [Decimal(float(v)) for v in np.asarray(x, dtype=float)]
        hd = Decimal(h)

        def f(t):
            pt = [ai + t * xi for ai, xi in zip(a, xs)]
            u = sum(q * p for q, p in zip(rr, pt))
            v = sum(q * p for q, p in zip(cr, pt))
            return u * v.ln() - u * u.ln()

        val = (-f(2 * hd) + 16 * f(hd) - 30 * f(Decimal(0)) + 16 * f(-hd) - f(-2 * hd)) / (12 * hd * hd)
        return float(val)


@dataclass
class VertexVerdict:
    status: str                 # "pass", "fail", "degenerate"
    at_vertex: bool
    recovered: bool
    vertex_distance: float
    permutation: list
    max_mean_error: float
    max_precision_rel_error: float
    argmin: list
    message: str

    def to_dict(self):
        return dict(self.__dict__)


def vertex_recovery_check(truth: TrueMixture, priors: PriorConfig, class_sizes=None, beta=1.0, lambda0=None,
                          stride=1, mu_tol=0.2, lam_rtol=0.2, vertex_cells=2, weighting="conditional", sweep=None):
    """Check both directions of: F-minimiser near a vertex <=> its parameters match the truth."""
    from . import landscape

    _require_p1(truth)
    if class_sizes is not None:
        truth = truth.with_class_sizes(class_sizes)
    if sweep is None:
        lam0 = lambda0 if lambda0 is not None else max(1, int(0.1 * truth.N))
        sweep = landscape.sweep(landscape.LatticeSpec(truth.class_sizes, stride), truth, priors,
                                beta, lam0, weighting=weighting)
    best = sweep.best
    dist, perm = landscape.vertex_distance(best.Ahat, truth.class_sizes)
    at_vertex = dist <= vertex_cells
    xi = best.point
    mean_err = np.abs(xi.means[perm, 0] - truth.means[:, 0])
    lam_err = np.abs(xi.precisions[perm, 0, 0] - truth.precisions[:, 0, 0]) / truth.precisions[:, 0, 0]
    recovered = bool(np.all(mean_err <= mu_tol) and np.all(lam_err <= lam_rtol))
    degenerate = (np.allclose(truth.means, truth.means[0]) and np.allclose(truth.precisions, truth.precisions[0]))
    if truth.K == 1:
        status, msg = "pass", "single component: the only cell is a vertex"
    elif degenerate:
        status = "degenerate"
        msg = ("degenerate truth: components coincide, so the iff is vacuous; "
               + ("minimiser at a vertex" if at_vertex else f"minimiser is {dist:g} moves from the nearest vertex"))
    else:
        status = "pass" if at_vertex == recovered else "fail"
        msg = (f"at_vertex={at_vertex} recovered={recovered}: "
               f"vertex=>recovered {'holds' if (not at_vertex or recovered) else 'violated'}, "
               f"recovered=>vertex {'holds' if (not recovered or at_vertex) else 'violated'}")
    return VertexVerdict(status, bool(at_vertex), recovered, float(dist), [int(p) for p in perm],
                         float(mean_err.max()), float(lam_err.max()), best.Ahat.tolist(), msg)
