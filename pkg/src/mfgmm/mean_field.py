"""Coordinate-ascent mean-field solver, Laplace machinery and the marginal partition function.

The mean-field factorisation approximates the tempered posterior over
``(xi, labeling)`` by ``mu1(xi) * mu2(i)``. The coordinate updates are

    v_i = -lambda * E_{mu1}[Phi(xi, i)] - log Z2,       mu2(i) = u_i = exp(v_i),
    mu1(xi) ∝ exp(-lambda * sum_i u_i Phi(xi, i))       (w.r.t. the volume measure),

with ``lambda = beta * lambda0``. Because ``lambda0 * Phi(xi, i)`` is linear in
the per-class sufficient statistics of labeling ``i``, ``sum_i u_i Phi(xi, i)``
is the potential of the ``u``-averaged statistics, and ``E_{mu1}[Phi(xi, i)]``
only needs a handful of expected "features" of ``xi`` (``Lambda_k``,
``Lambda_k mu_k``, ``mu_k^T Lambda_k mu_k - log|Lambda_k|``, ``log pi_k`` and
the prior). ``mu1`` also factorises over components and the weights, so all
integrals are per block.

Two backends compute the expected features and ``log Z1``:

* ``"laplace"``: Gaussian surrogate in an unconstrained chart (log-Cholesky for
  precisions, additive log-ratio for weights) around the mode ``m`` with a
  consistent second-order expansion (covariance term plus the third-derivative
  and volume-element mean shift).
* ``"quadrature"`` (P = 1 only): exact up to quadrature error; the mean is
  integrated analytically as a truncated Gaussian, ``log Lambda`` by
  Gauss-Legendre, and the weights block is an exact Dirichlet.

The volume measure is Lebesgue on means, the affine-invariant volume
``|Lambda|^{-(P+1)/2} dLambda`` on precisions and Lebesgue on
``(pi_1, ..., pi_{K-1})``; integration is restricted to the cut-off.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import digamma, gammaln, log_ndtr, logsumexp

from .errors import BudgetError, ConfigError, NumericalError
from .gmm_core import (
    Dataset,
    ModelPoint,
    PriorConfig,
    SufficientStats,
    energy_gradient,
    in_cutoff,
    point_to_coordinates,
    prior_energy,
)
from .numerics import (
    block_from_theta,
    block_log_jacobian,
    block_log_jacobian_grad,
    block_to_theta,
    fd_hessian,
    fd_hessian_from_grad,
    fd_jacobian,
    n_block,
    newton_minimize,
    simplex_from_eta,
    simplex_to_eta,
)

ENUMERATION_BUDGET = 2 ** 20


# ---------------------------------------------------------------------------
# Generic Laplace approximation
# ---------------------------------------------------------------------------


@dataclass
class LaplaceResult:
    log_value: float
    mode: np.ndarray
    log_det_hessian: float
    hessian: np.ndarray


def laplace_log_integral(potential, lam, x0, log_h=None, grad=None, hess=None, max_iter=200, tol=1e-12):
    """Laplace approximation of ``log ∫ h(x) exp(-lam * potential(x)) dx`` on ``R^d``.

    Returns ``-lam * potential(m) + (d/2) log(2 pi / lam) - (1/2) log|H| + log h(m)``
    where ``m`` minimises ``potential`` (damped Newton) and ``H`` is its Hessian.
    Raises :class:`NumericalError` if ``H`` is not positive definite at ``m``.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f = (lambda x: float(potential(x)))
    res = newton_minimize(f, x0, grad=grad, hess=hess, tol=tol, max_iter=max_iter)
    H = np.atleast_2d(res.hess)
    sign, logdet = np.linalg.slogdet(H)
    if sign <= 0 or np.linalg.eigvalsh(H).min() <= 0:
        raise NumericalError("indefinite Hessian at Laplace mode")
    d = x0.size
    val = -lam * res.value + 0.5 * d * np.log(2 * np.pi / lam) - 0.5 * logdet
    if log_h is not None:
        val += float(log_h(res.x))
    return LaplaceResult(float(val), res.x, float(logdet), H)


# ---------------------------------------------------------------------------
# Per-block potentials in chart coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockStats:
    """Sufficient statistics of one component: count, sum, second moment."""

    n: float
    s1: np.ndarray
    s2: np.ndarray


def _block_outside(mu, lam, R):
    if np.linalg.norm(mu) >= R:
        return True
    w = np.linalg.eigvalsh(lam)
    return w.min() <= 0 or np.linalg.norm(np.log(w)) >= R


def block_energy(theta, bs: BlockStats, a, sigma, R):
    """Component part of ``lambda0 * Phi`` in the log-Cholesky chart; ``inf`` outside the cut-off."""
    P = bs.s1.shape[0]
    mu, lam, L = block_from_theta(theta, P)
    if _block_outside(mu, lam, R):
        return np.inf
    logdet_half = float(np.sum(theta[P:][_diag_idx(P)]))
    e = 0.5 * np.sum(lam * bs.s2) - mu @ lam @ bs.s1 + 0.5 * bs.n * mu @ lam @ mu
    e += -bs.n * logdet_half + a * mu @ mu
    if np.isfinite(sigma):
        e += np.sum(lam * lam) / (2 * sigma)
    return float(e)


def block_energy_grad(theta, bs: BlockStats, a, sigma, R=None):
    P = bs.s1.shape[0]
    mu, lam, L = block_from_theta(theta, P)
    g_mu = lam @ (bs.n * mu - bs.s1) + 2 * a * mu
    G = 0.5 * (bs.s2 - np.outer(mu, bs.s1) - np.outer(bs.s1, mu) + bs.n * np.outer(mu, mu))
    if np.isfinite(sigma):
        G = G + lam / sigma
    gL = 2 * G @ L
    d = np.arange(P)
    gL[d, d] = gL[d, d] * L[d, d] - bs.n
    return np.concatenate([g_mu, gL[np.tril_indices(P)]])


def _diag_idx(P):
    r, c = np.tril_indices(P)
    return np.nonzero(r == c)[0]


def block_features(theta, P, a, sigma):
    """``[Lambda/2 (P*P), -Lambda mu (P), mu^T Lambda mu / 2 - log|Lambda| / 2, prior]``."""
    mu, lam, _ = block_from_theta(theta, P)
    logdet = 2 * float(np.sum(theta[P:][_diag_idx(P)]))
    prior = a * mu @ mu + (np.sum(lam * lam) / (2 * sigma) if np.isfinite(sigma) else 0.0)
    return np.concatenate([0.5 * lam.ravel(), -lam @ mu, [0.5 * mu @ lam @ mu - 0.5 * logdet, prior]])


def _block_initial_theta(bs: BlockStats, R):
    P = bs.s1.shape[0]
    n = max(bs.n, 1e-12)
    mu = bs.s1 / n
    cov = bs.s2 / n - np.outer(mu, mu)
    cov = 0.5 * (cov + cov.T) + 1e-9 * np.eye(P)
    w, V = np.linalg.eigh(cov)
    bound = 0.8 * R / np.sqrt(P)
    loglam = np.clip(-np.log(np.maximum(w, 1e-300)), -bound, bound)
    lam = (V * np.exp(loglam)) @ V.T
    if np.linalg.norm(mu) >= 0.8 * R:
        mu = mu * 0.8 * R / np.linalg.norm(mu)
    return block_to_theta(mu, lam)


def minimize_block(bs: BlockStats, a, sigma, R, theta0=None, tol=1e-12):
    """Minimiser of one component's potential by damped Newton in the chart."""
    if theta0 is None or not np.isfinite(block_energy(theta0, bs, a, sigma, R)):
        theta0 = _block_initial_theta(bs, R)
    return newton_minimize(lambda t: block_energy(t, bs, a, sigma, R), theta0,
                           grad=lambda t: block_energy_grad(t, bs, a, sigma),
                           tol=tol, max_iter=300)


def weights_mode(counts, alpha):
    """Closed-form minimiser of ``-sum_k (n_k + alpha - 1) log pi_k`` on the simplex."""
    c = np.maximum(np.asarray(counts, dtype=float) + alpha - 1.0, 0.0)
    if c.sum() <= 0:
        raise NumericalError("weights block has no positive mass")
    return c / c.sum()


def split_stats(stats: SufficientStats):
    return [BlockStats(float(stats.counts[k]), stats.sums[k], stats.scatter[k])
            for k in range(stats.counts.shape[0])]


def minimize_potential(stats: SufficientStats, priors: PriorConfig, start: ModelPoint | None = None):
    """``argmin_xi lambda0 * Phi(xi; stats)``: blockwise Newton plus closed-form weights.

    Returns the minimiser and the per-block chart coordinates.
    """
    K = stats.counts.shape[0]
    sig = priors.sigma(K)
    thetas, mus, lams = [], [], []
    for k, bs in enumerate(split_stats(stats)):
        t0 = None
        if start is not None:
            t0 = block_to_theta(start.means[k], start.precisions[k])
        res = minimize_block(bs, priors.a, sig[k], priors.R, t0)
        mu, lam, _ = block_from_theta(res.x, bs.s1.shape[0])
        thetas.append(res.x)
        mus.append(mu)
        lams.append(0.5 * (lam + lam.T))
    pi = weights_mode(stats.counts, priors.dirichlet_alpha)
    return ModelPoint(pi, np.array(mus), np.array(lams)), thetas


# ---------------------------------------------------------------------------
# Expected features and linear energies
# ---------------------------------------------------------------------------


@dataclass
class Features:
    """Feature values (or expectations) defining ``lambda0 * Phi(., i)`` as a linear map of statistics."""

    f2: np.ndarray      # (K, P, P)
    f1: np.ndarray      # (K, P)
    f0: np.ndarray      # (K,)
    fpi: np.ndarray     # (K,) -log pi_k
    prior: float
    inside: bool = True

    @classmethod
    def at_point(cls, xi: ModelPoint, priors: PriorConfig):
        lam, mu = xi.precisions, xi.means
        logdet = np.linalg.slogdet(lam)[1]
        with np.errstate(divide="ignore"):
            fpi = -np.log(xi.weights)
        return cls(0.5 * lam, -np.einsum("kpq,kq->kp", lam, mu),
                   0.5 * np.einsum("kp,kpq,kq->k", mu, lam, mu) - 0.5 * logdet,
                   fpi, prior_energy(xi, priors), in_cutoff(xi, priors))

    def energies(self, stats: SufficientStats):
        """``lambda0 * Phi`` for a batch of statistics (leading axis)."""
        n = stats.counts
        e = (np.einsum("kpq,...kpq->...", self.f2, stats.scatter)
             + np.einsum("kp,...kp->...", self.f1, stats.sums)
             + n @ self.f0)
        with np.errstate(invalid="ignore"):
            e = e + np.sum(np.where(n == 0, 0.0, n * self.fpi), axis=-1)
        e = e + self.prior
        if not self.inside:
            e = np.full_like(e, np.inf)
        return e


def batch_gradient_coordinates(stats: SufficientStats, xi: ModelPoint, priors: PriorConfig):
    """Coordinate gradients of ``lambda0 * Phi(xi, i)`` for a batch of statistics, shape (M, d)."""
    lam, mu = xi.precisions, xi.means
    n = stats.counts
    K, P = mu.shape
    sig = priors.sigma(K)
    d_mu = np.einsum("kpq,mkq->mkp", lam, n[..., None] * mu - stats.sums) + 2 * priors.a * mu
    outer = (stats.scatter - np.einsum("kp,mkq->mkpq", mu, stats.sums)
             - np.einsum("mkp,kq->mkpq", stats.sums, mu)
             + n[..., None, None] * np.einsum("kp,kq->kpq", mu, mu))
    d_lam = 0.5 * outer - 0.5 * n[..., None, None] * np.linalg.inv(lam)
    finite = np.isfinite(sig)
    d_lam[:, finite] += lam[finite] / sig[finite, None, None]
    iu = np.triu_indices(P)
    scale = np.where(iu[0] == iu[1], 1.0, 2.0)
    g_lam = (d_lam[..., iu[0], iu[1]] * scale).reshape(n.shape[0], -1)
    coef = n + priors.dirichlet_alpha - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        g_pi = np.where(coef == 0, 0.0, -coef / xi.weights)
    g_pi = g_pi[:, :-1] - g_pi[:, -1:]
    return np.concatenate([d_mu.reshape(n.shape[0], -1), g_lam, g_pi], axis=1)


@dataclass
class Moments:
    """Expected features under ``mu1`` and ``log Z1 = log ∫ exp(-lambda sum_i u_i Phi) dω``."""

    features: Features
    log_z1: float
    block_hessians: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def _laplace_expectation(V_grad, theta, log_h_grad, feature_fn, h3=1e-3):
    """Second-order expectation of ``feature_fn`` under ``exp(-V) h`` around ``theta``.

    ``theta`` must be the minimiser of ``V`` (not of ``V - log h``). Returns the
    expectation vector, ``log|H|`` and ``H``.
    """
    d = theta.size
    H = fd_hessian_from_grad(V_grad, theta)
    S = np.linalg.inv(H)
    a3 = np.empty(d)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h3 * max(1.0, abs(theta[j]))
        Hp = fd_hessian_from_grad(V_grad, theta + e)
        Hm = fd_hessian_from_grad(V_grad, theta - e)
        a3[j] = np.sum(S * (Hp - Hm)) / (2 * e[j])
    delta = S @ (log_h_grad(theta) - 0.5 * a3)
    f0 = np.asarray(feature_fn(theta))
    J = fd_jacobian(feature_fn, theta)
    Hf = fd_hessian(feature_fn, theta)
    Ef = f0 + J @ delta + 0.5 * np.einsum("fab,ab->f", Hf, S)
    sign, logdet = np.linalg.slogdet(H)
    if sign <= 0:
        raise NumericalError("indefinite Hessian in Laplace surrogate")
    return Ef, logdet, H


def _pi_block_laplace(counts, alpha, beta):
    K = counts.shape[0]
    c = counts + alpha - 1.0
    if K == 1:
        return np.zeros(1), 0.0, 0.0, np.zeros((0, 0))
    pi0 = weights_mode(counts, alpha)
    eta0 = simplex_to_eta(pi0)

    def V(eta):
        return -beta * float(c @ np.log(simplex_from_eta(eta)))

    def V_grad(eta):
        p = simplex_from_eta(eta)
        return -beta * (c[:-1] - p[:-1] * c.sum())

    def log_h_grad(eta):
        p = simplex_from_eta(eta)
        return 1.0 - K * p[:-1]

    def feats(eta):
        lp = np.log(simplex_from_eta(eta))
        return np.concatenate([-lp, [-(alpha - 1.0) * lp.sum()]])

    Ef, logdet, H = _laplace_expectation(V_grad, eta0, log_h_grad, feats)
    log_h = float(np.sum(np.log(pi0)))
    log_z = -V(eta0) + 0.5 * (K - 1) * np.log(2 * np.pi) - 0.5 * logdet + log_h
    return Ef[:K], float(Ef[K]), float(log_z), H


def _pi_block_exact(counts, alpha, beta):
    K = counts.shape[0]
    if K == 1:
        return np.zeros(1), 0.0, 0.0
    c = beta * (counts + alpha - 1.0) + 1.0
    if np.any(c <= 0):
        raise NumericalError("weights density is not integrable")
    elog = digamma(c) - digamma(c.sum())
    log_z = float(np.sum(gammaln(c)) - gammaln(c.sum()))
    return -elog, float(-(alpha - 1.0) * elog.sum()), log_z


def laplace_moments(stats_bar: SufficientStats, mode: ModelPoint, beta, priors: PriorConfig):
    """Expected features and ``log Z1`` from the Laplace surrogate at ``mode``."""
    K, P = mode.K, mode.P
    sig = priors.sigma(K)
    f2, f1, f0, prior, log_z, hess = [], [], [], 0.0, 0.0, []
    for k, bs in enumerate(split_stats(stats_bar)):
        theta = block_to_theta(mode.means[k], mode.precisions[k])

        def V_grad(t, bs=bs, k=k):
            return beta * block_energy_grad(t, bs, priors.a, sig[k])

        def feats(t, k=k):
            return block_features(t, P, priors.a, sig[k])

        Ef, logdet, H = _laplace_expectation(V_grad, theta, lambda t: block_log_jacobian_grad(t, P), feats)
        f2.append(Ef[:P * P].reshape(P, P))
        f1.append(Ef[P * P:P * P + P])
        f0.append(Ef[P * P + P])
        prior += Ef[P * P + P + 1]
        d = theta.size
        log_z += (-beta * block_energy(theta, bs, priors.a, sig[k], np.inf)
                  + 0.5 * d * np.log(2 * np.pi) - 0.5 * logdet + block_log_jacobian(theta, P))
        hess.append(H)
    fpi, pi_prior, pi_logz, Hpi = _pi_block_laplace(stats_bar.counts, priors.dirichlet_alpha, beta)
    hess.append(Hpi)
    feats = Features(np.array(f2), np.array(f1), np.array(f0), fpi, prior + pi_prior)
    return Moments(feats, float(log_z + pi_logz), hess)


def _log_diff_ndtr(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` for ``lo < hi``, stable in both tails."""
    upper = lo > 0
    a = np.where(upper, -hi, lo)
    b = np.where(upper, -lo, hi)
    lb, la = log_ndtr(b), log_ndtr(a)
    return lb + np.log1p(-np.exp(la - lb))


def _gauss_legendre(lo, hi, n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (hi - lo) * x + 0.5 * (hi + lo), 0.5 * (hi - lo) * w


def _block_quadrature(bs: BlockStats, a, sigma, R, beta, nodes=256, coarse=4001, drop=60.0):
    """Exact expectations for a P = 1 block: analytic in the mean, Gauss-Legendre in log-precision."""
    n, s1, s2 = bs.n, float(bs.s1[0]), float(bs.s2[0, 0])
    inv_sigma = 0.0 if not np.isfinite(sigma) else 1.0 / sigma

    def pieces(s):
        es = np.exp(s)
        p = beta * (n * es + 2 * a)
        c = beta * es * s1 / p
        rp = np.sqrt(p)
        lo, hi = (-R - c) * rp, (R - c) * rp
        logzt = _log_diff_ndtr(lo, hi)
        g = (-beta * (0.5 * es * s2 - 0.5 * n * s + 0.5 * es * es * inv_sigma)
             + 0.5 * p * c * c + 0.5 * np.log(2 * np.pi / p) + logzt)
        lphi_lo = -0.5 * lo * lo - 0.5 * np.log(2 * np.pi) - logzt
        lphi_hi = -0.5 * hi * hi - 0.5 * np.log(2 * np.pi) - logzt
        ra, rb = np.exp(lphi_lo), np.exp(lphi_hi)
        m1 = c + (ra - rb) / rp
        var = (1.0 + lo * ra - hi * rb - (ra - rb) ** 2) / p
        return g, m1, var + m1 * m1, es

    grid = np.linspace(-R, R, coarse)[1:-1]
    g_grid = pieces(grid)[0]
    keep = np.nonzero(g_grid > g_grid.max() - drop)[0]
    step = grid[1] - grid[0]
    lo = max(-R, grid[keep[0]] - step)
    hi = min(R, grid[keep[-1]] + step)
    s, w = _gauss_legendre(lo, hi, nodes)
    g, m1, m2, es = pieces(s)
    lw = g + np.log(w)
    log_z = float(logsumexp(lw))
    p = np.exp(lw - log_z)
    E = lambda v: float(p @ v)  # noqa: E731
    feats = np.array([0.5 * E(es), -E(es * m1), 0.5 * E(es * m2) - 0.5 * E(s),
                      a * E(m2) + 0.5 * inv_sigma * E(es * es)])
    return feats, log_z


def quadrature_moments(stats_bar: SufficientStats, mode: ModelPoint, beta, priors: PriorConfig):
    """Exact expected features and ``log Z1`` for P = 1."""
    K, P = mode.K, mode.P
    if P != 1:
        raise ConfigError("quadrature backend is available for P = 1 only")
    sig = priors.sigma(K)
    f2, f1, f0, prior, log_z = [], [], [], 0.0, 0.0
    for k, bs in enumerate(split_stats(stats_bar)):
        fe, lz = _block_quadrature(bs, priors.a, sig[k], priors.R, beta)
        f2.append([[fe[0]]])
        f1.append([fe[1]])
        f0.append(fe[2])
        prior += fe[3]
        log_z += lz
    fpi, pi_prior, pi_logz = _pi_block_exact(stats_bar.counts, priors.dirichlet_alpha, beta)
    feats = Features(np.array(f2), np.array(f1), np.array(f0), fpi, prior + pi_prior)
    return Moments(feats, float(log_z + pi_logz))


BACKENDS = {"laplace": laplace_moments, "quadrature": quadrature_moments}


# ---------------------------------------------------------------------------
# Enumeration of admissible labelings
# ---------------------------------------------------------------------------


@dataclass
class LabelingSet:
    """All labelings with every class holding at least ``lambda0`` points."""

    labels: np.ndarray          # (M, N) int8
    stats: SufficientStats      # batched over M
    K: int
    lambda0: int

    def __len__(self):
        return self.labels.shape[0]


def enumerate_labelings(ds: Dataset, K, lambda0, budget=ENUMERATION_BUDGET, chunk=2 ** 15, threads=1):
    """Enumerate the restricted labeling set in chunks (optionally threaded)."""
    N = ds.N
    total = K ** N
    if total > budget:
        raise BudgetError(f"exact enumeration needs K^N = {total} labelings, budget is {budget}; "
                          "use the landscape module's effective free energy instead")
    powers = K ** np.arange(N, dtype=np.int64)
    xx = np.einsum("np,nq->npq", ds.points, ds.points)
    eye = np.eye(K)

    def work(start):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        lab = ((idx[:, None] // powers) % K).astype(np.int8)
        onehot = eye[lab]
        counts = onehot.sum(axis=1)
        keep = counts.min(axis=1) >= lambda0
        onehot, lab = onehot[keep], lab[keep]
        return (lab, counts[keep], np.einsum("cnk,np->ckp", onehot, ds.points),
                np.einsum("cnk,npq->ckpq", onehot, xx))

    starts = range(0, total, chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    lab = np.concatenate([p[0] for p in parts])
    if lab.shape[0] == 0:
        raise ConfigError(f"no labeling has every class of size >= {lambda0}")
    stats = SufficientStats(np.concatenate([p[1] for p in parts]),
                            np.concatenate([p[2] for p in parts]),
                            np.concatenate([p[3] for p in parts]))
    return LabelingSet(lab, stats, K, lambda0)


# ---------------------------------------------------------------------------
# CAVI
# ---------------------------------------------------------------------------


@dataclass
class CaviState:
    iteration: int
    v: np.ndarray
    mode: ModelPoint
    moments: Moments
    kl: float
    residual: float
    trace: dict = field(default_factory=lambda: {"dv": [], "dm": [], "residual": [], "kl": []})
    converged: bool = False

    @property
    def u(self):
        return np.exp(self.v)


@dataclass(frozen=True)
class CaviSettings:
    beta: float
    lambda0: int
    backend: str = "laplace"
    tol: float = 1e-8
    max_iter: int = 500
    init_noise: float = 0.05

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.lambda0 < 1:
            raise ConfigError("lambda0 must be at least 1 for the mean-field solver")


def _entropy_term(v):
    u = np.exp(v)
    return float(np.sum(np.where(u > 0, u * v, 0.0)))


def _complete_state(labelings, v, priors, cfg, start=None):
    stats_bar = labelings.stats.weighted(np.exp(v))
    mode, _ = minimize_potential(stats_bar, priors, start)
    moments = BACKENDS[cfg.backend](stats_bar, mode, cfg.beta, priors)
    kl = _entropy_term(v) - moments.log_z1
    e = moments.features.energies(labelings.stats)
    w = np.exp(-cfg.beta * e - logsumexp(-cfg.beta * e))
    g = energy_gradient(labelings.stats.weighted(w), mode, priors) * (1.0 / cfg.lambda0)
    return mode, moments, kl, g.norm()


def cavi_init(ds: Dataset, labelings: LabelingSet, priors: PriorConfig, cfg: CaviSettings, rng):
    """Initial state from k-means labels observed through symmetric label noise."""
    K = labelings.K
    if K == 1:
        v = np.zeros(len(labelings))
    else:
        _, km = kmeans2(ds.points, K, minit="++", seed=rng)
        agree = (labelings.labels == km[None, :]).sum(axis=1)
        eps = cfg.init_noise
        v = agree * np.log1p(-eps) + (ds.N - agree) * np.log(eps / (K - 1))
        v = v - logsumexp(v)
    mode, moments, kl, res = _complete_state(labelings, v, priors, cfg)
    return CaviState(0, v, mode, moments, kl, res)


def cavi_step(state: CaviState, labelings: LabelingSet, priors: PriorConfig, cfg: CaviSettings):
    """One round of coordinate updates: discrete factor, then continuous factor."""
    e = state.moments.features.energies(labelings.stats)
    v = -cfg.beta * e
    v = v - logsumexp(v)
    mode, moments, kl, res = _complete_state(labelings, v, priors, cfg, state.mode)
    dv = float(np.max(np.abs(v - state.v)))
    dm = float(np.max(np.abs(point_to_coordinates(mode) - point_to_coordinates(state.mode))))
    trace = {k: list(val) for k, val in state.trace.items()}
    trace["dv"].append(dv)
    trace["dm"].append(dm)
    trace["residual"].append(res)
    trace["kl"].append(kl)
    done = max(dv, dm) < cfg.tol
    return CaviState(state.iteration + 1, v, mode, moments, kl, res, trace, done)


def run_cavi(ds: Dataset, labelings: LabelingSet, priors: PriorConfig, cfg: CaviSettings, rng=None, state=None):
    """Iterate :func:`cavi_step` until ``max(dv, dm) < tol`` or ``max_iter`` steps."""
    if state is None:
        rng = np.random.default_rng(0) if rng is None else rng
        state = cavi_init(ds, labelings, priors, cfg, rng)
        state.trace["residual"].append(state.residual)
        state.trace["kl"].append(state.kl)
    while not state.converged and state.iteration < cfg.max_iter:
        state = cavi_step(state, labelings, priors, cfg)
    return state


def sheet_energies(xi: ModelPoint, labelings: LabelingSet, priors: PriorConfig):
    """``lambda0 * Phi(xi, i)`` for every labeling (``inf`` outside the cut-off)."""
    return Features.at_point(xi, priors).energies(labelings.stats)


def r_corrections(state: CaviState, labelings: LabelingSet, priors: PriorConfig, beta):
    """``R_i = -lambda (E_{mu1}[Phi(., i)] - Phi(m, i))`` for every labeling."""
    expected = state.moments.features.energies(labelings.stats)
    return -beta * (expected - sheet_energies(state.mode, labelings, priors))


def r_correction(i, state: CaviState, labelings: LabelingSet, priors: PriorConfig, beta):
    """Correction for the single labeling with index ``i``."""
    sub = labelings.stats[i:i + 1]
    expected = state.moments.features.energies(sub)
    return float(-beta * (expected - Features.at_point(state.mode, priors).energies(sub))[0])


def marginal_partition(xi: ModelPoint, labelings: LabelingSet, priors: PriorConfig, beta, R=None):
    """``log Z(xi) = logsumexp_i(-lambda Phi(xi, i) + R_i)`` over the enumerated labelings."""
    e = sheet_energies(xi, labelings, priors)
    R = np.zeros(len(labelings)) if R is None else np.asarray(R)
    return float(logsumexp(-beta * e + R))


def critical_point_residual(m: ModelPoint, labelings: LabelingSet, priors: PriorConfig, beta, lambda0, R=None):
    """Norm of ``sum_i softmax(-lambda Phi(m, i) + R_i) grad Phi(m, i)``."""
    e = sheet_energies(m, labelings, priors)
    R = np.zeros(len(labelings)) if R is None else np.asarray(R)
    s = -beta * e + R
    w = np.exp(s - logsumexp(s))
    g = energy_gradient(labelings.stats.weighted(w), m, priors) * (1.0 / lambda0)
    return g.norm()


def mean_sheet_gradient_norm(m: ModelPoint, labelings: LabelingSet, priors: PriorConfig, lambda0):
    """Average of ``|grad Phi(m, i)|`` over the enumerated labelings."""
    g = batch_gradient_coordinates(labelings.stats, m, priors) / lambda0
    return float(np.mean(np.linalg.norm(g, axis=1)))


def aggregate_by_confusion(v, labelings: LabelingSet, true_labels):
    """Log-mass of the discrete factor per confusion matrix (assigned x true class)."""
    K = labelings.K
    true_labels = np.asarray(true_labels)
    cells = np.zeros((len(labelings), K, K), dtype=np.int64)
    for kp in range(K):
        cols = labelings.labels[:, true_labels == kp]
        for k in range(K):
            cells[:, k, kp] = (cols == k).sum(axis=1)
    flat = cells.reshape(len(labelings), -1)
    keys, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.ravel()
    out = {}
    for j, key in enumerate(keys):
        out[tuple(int(x) for x in key)] = float(logsumexp(v[inv == j]))
    return out


def state_to_dict(state: CaviState, labelings: LabelingSet, true_labels=None, top=20):
    order = np.argsort(-state.v, kind="stable")[:top]
    d = {
        "iteration": state.iteration,
        "converged": bool(state.converged),
        "mode": state.mode.to_dict(),
        "kl_proxy": state.kl,
        "critical_residual": state.residual,
        "trace": state.trace,
        "n_labelings": len(labelings),
        "top_labelings": [{"labels": labelings.labels[i].tolist(), "v": float(state.v[i]),
                           "u": float(np.exp(state.v[i]))} for i in order],
    }
    if true_labels is not None:
        agg = aggregate_by_confusion(state.v, labelings, true_labels)
        d["v_aggregated"] = [{"cell": list(k), "log_mass": val} for k, val in sorted(agg.items())]
    return d
