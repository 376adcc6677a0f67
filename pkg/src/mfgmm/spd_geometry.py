"""Affine-invariant geometry on SPD matrices and a geodesic convexity scan.

The Rao-Fisher distance between SPD matrices is

    d(X, Y) = || log eig(X^{-1/2} Y X^{-1/2}) ||_2

and the geodesic from X to Y is ``X^{1/2} (X^{-1/2} Y X^{-1/2})^t X^{1/2}``.
On the product space ``(R^P x S^P_{++})^K`` a unit-speed geodesic moves each
mean along a straight line and each precision along its SPD geodesic, with
speeds ``alpha_k = T1_k / T`` and ``beta_k = T2_k / T`` where ``T1_k``,
``T2_k`` are the segment lengths and ``T^2 = sum_k T1_k^2 + T2_k^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CutoffError
from .gmm_core import (
    EIG_FLOOR,
    Assignment,
    Dataset,
    ModelPoint,
    PriorConfig,
    SufficientStats,
    energy,
    in_cutoff,
)


@dataclass(frozen=True)
class SpdPoint:
    """A symmetric positive-definite matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigError(f"SPD matrix must be square, got shape {m.shape}")
        if np.max(np.abs(m - m.T)) > 1e-12 * max(1.0, np.max(np.abs(m))):
            raise ConfigError("SPD matrix is not symmetric")
        m = 0.5 * (m + m.T)
        if np.linalg.eigvalsh(m).min() <= EIG_FLOOR:
            raise ConfigError("matrix is not positive definite")
        object.__setattr__(self, "matrix", m)


def _as_spd(X):
    return X.matrix if isinstance(X, SpdPoint) else SpdPoint(X).matrix


def _eig_fn(X, fn):
    w, V = np.linalg.eigh(X)
    if w.min() <= EIG_FLOOR:
        raise ConfigError("eigenvalue below floor; matrix rejected")
    return (V * fn(w)) @ V.T


def sqrtm(X):
    return _eig_fn(X, np.sqrt)


def invsqrtm(X):
    return _eig_fn(X, lambda w: 1.0 / np.sqrt(w))


def powm(X, t):
    return _eig_fn(X, lambda w: w ** t)


def rao_fisher_distance(X, Y):
    """Affine-invariant distance between two SPD matrices."""
    X, Y = _as_spd(X), _as_spd(Y)
    Xi = invsqrtm(X)
    w = np.linalg.eigvalsh(Xi @ Y @ Xi)
    if w.min() <= EIG_FLOOR:
        raise ConfigError("eigenvalue below floor; matrix rejected")
    return float(np.linalg.norm(np.log(w)))


def spd_geodesic(X, Y, t):
    """Point at fraction ``t`` of the geodesic from ``X`` to ``Y``."""
    X, Y = _as_spd(X), _as_spd(Y)
    Xs, Xi = sqrtm(X), invsqrtm(X)
    G = Xs @ powm(Xi @ Y @ Xi, t) @ Xs
    return 0.5 * (G + G.T)


@dataclass(frozen=True)
class ProductGeodesic:
    """Unit-speed geodesic on the means/precisions part of the parameter space.

    Component ``k`` follows ``mu_k(t) = start_mu_k + alpha_k t b_k`` and
    ``Lambda_k(t) = S_k Q_k diag(exp(beta_k t r_k)) Q_k^T S_k`` with ``S_k`` the
    square root of the starting precision and ``Q_k`` the conjugating frame.
    Weights stay fixed.
    """

    start: ModelPoint
    b: np.ndarray        # (K, P) unit mean directions
    alpha: np.ndarray    # (K,) mean speeds
    root: np.ndarray     # (K, P, P) square roots of starting precisions
    frame: np.ndarray    # (K, P, P) eigenvectors of S^{-1} Y S^{-1}
    r: np.ndarray        # (K, P) unit log-eigenvalue directions
    beta: np.ndarray     # (K,) precision speeds
    length: float

    def means_at(self, t):
        return self.start.means + (self.alpha * t)[:, None] * self.b

    def precisions_at(self, t):
        e = np.exp((self.beta * t)[:, None] * self.r)
        inner = np.einsum("kpq,kq,krq->kpr", self.frame, e, self.frame)
        lam = np.einsum("kpq,kqr,krs->kps", self.root, inner, self.root)
        return 0.5 * (lam + np.swapaxes(lam, 1, 2))

    def point(self, t):
        return ModelPoint.trusted(self.start.weights, self.means_at(t), self.precisions_at(t))


def sample_product_geodesic(rng, xi_start: ModelPoint, xi_end: ModelPoint, priors: PriorConfig | None = None):
    """Unit-speed product geodesic from ``xi_start`` to ``xi_end``.

    ``rng`` only supplies arbitrary unit directions for components that do not
    move (their speed is zero, so the choice does not affect the path).
    """
    if priors is not None and not (in_cutoff(xi_start, priors) and in_cutoff(xi_end, priors)):
        raise CutoffError("geodesic endpoints outside the cut-off")
    K, P = xi_start.K, xi_start.P
    dmu = xi_end.means - xi_start.means
    t1 = np.linalg.norm(dmu, axis=1)
    b = np.empty((K, P))
    root = np.empty((K, P, P))
    frame = np.empty((K, P, P))
    r = np.empty((K, P))
    t2 = np.empty(K)
    for k in range(K):
        if t1[k] > 0:
            b[k] = dmu[k] / t1[k]
        else:
            v = rng.standard_normal(P)
            b[k] = v / np.linalg.norm(v)
        S = sqrtm(xi_start.precisions[k])
        Si = invsqrtm(xi_start.precisions[k])
        M = Si @ xi_end.precisions[k] @ Si
        w, V = np.linalg.eigh(0.5 * (M + M.T))
        logw = np.zeros(P) if np.array_equal(xi_start.precisions[k], xi_end.precisions[k]) else np.log(w)
        t2[k] = np.linalg.norm(logw)
        root[k], frame[k] = S, V
        if t2[k] > 0:
            r[k] = logw / t2[k]
        else:
            v = rng.standard_normal(P)
            r[k] = v / np.linalg.norm(v)
    T = float(np.sqrt(np.sum(t1 ** 2 + t2 ** 2)))
    if T == 0:
        alpha, beta = np.zeros(K), np.zeros(K)
    else:
        alpha, beta = t1 / T, t2 / T
    return ProductGeodesic(xi_start, b, alpha, root, frame, r, beta, T)


def random_cutoff_point(rng, weights, P, R, shrink=0.95):
    """Random point with ``|mu_k| < shrink R`` and ``d_RF(Lambda_k, I) < shrink R``.

    Means are uniform in the ball; precisions are ``exp(S)`` for a symmetric
    ``S`` with uniformly random direction and Frobenius norm uniform on
    ``[0, shrink R)``.
    """
    weights = np.asarray(weights, dtype=float)
    K = weights.shape[0]
    mus, lams = [], []
    for _ in range(K):
        d = rng.standard_normal(P)
        d /= np.linalg.norm(d)
        mus.append(d * shrink * R * rng.random() ** (1.0 / P))
        S = rng.standard_normal((P, P))
        S = 0.5 * (S + S.T)
        S *= shrink * R * rng.random() / np.linalg.norm(S)
        w, V = np.linalg.eigh(S)
        lams.append((V * np.exp(w)) @ V.T)
    return ModelPoint(weights, np.array(mus), np.array(lams))


def tube_point(rng, center: ModelPoint, scale, R, shrink=0.95):
    """Random point near ``center``: means within ``scale`` class-std units and
    precisions within Rao-Fisher radius ``scale`` (clipped to the cut-off)."""
    mus, lams = [], []
    for mu0, lam0 in zip(center.means, center.precisions):
        P = mu0.shape[0]
        d = rng.standard_normal(P)
        d /= np.linalg.norm(d)
        cov_root = invsqrtm(lam0)
        mu = mu0 + scale * rng.random() ** (1.0 / P) * cov_root @ d
        if np.linalg.norm(mu) >= shrink * R:
            mu = mu * shrink * R / np.linalg.norm(mu)
        S = rng.standard_normal((P, P))
        S = 0.5 * (S + S.T)
        S *= scale * rng.random() / np.linalg.norm(S)
        root = sqrtm(lam0)
        lam = root @ _expm_sym(S) @ root
        lams.append(0.5 * (lam + lam.T))
        mus.append(mu)
    return ModelPoint(center.weights, np.array(mus), np.array(lams))


def _expm_sym(S):
    w, V = np.linalg.eigh(S)
    return (V * np.exp(w)) @ V.T


@dataclass
class ConvexityReport:
    """Second differences of ``lambda0 * Phi`` sampled along product geodesics."""

    records: np.ndarray      # (n, 3): geodesic_id, t, second_diff
    minimum: float
    c_hat: float
    passed: bool
    clipped: list
    min_class_size: int

    def to_summary(self):
        return {"min": float(self.minimum), "C_hat": float(self.c_hat), "pass": bool(self.passed),
                "clipped_geodesics": [int(g) for g in self.clipped],
                "min_class_size": int(self.min_class_size)}


def geodesic_values(stats: SufficientStats, geo: ProductGeodesic, priors: PriorConfig, steps):
    """``lambda0 * Phi`` on the grid ``t_j = j T / steps``; ``inf`` where the cut-off is left."""
    ts = np.linspace(0.0, geo.length, steps + 1)
    vals = np.array([energy(stats, geo.point(t), priors) for t in ts])
    return ts, vals


def second_differences(ts, vals):
    h = ts[1] - ts[0]
    return (vals[2:] - 2 * vals[1:-1] + vals[:-2]) / h ** 2


def convexity_scan(ds: Dataset, z: Assignment, priors: PriorConfig, geodesics=200, steps=64,
                   rng=None, lambda0=None, sampler="cutoff", tube_scale=1.0, weights=None):
    """Sample product geodesics on the sheet of ``z`` and record second differences.

    ``sampler="cutoff"`` draws endpoints uniformly over the cut-off region;
    ``sampler="tube"`` draws them around the sheet minimizer (class means and
    precisions of ``z``) within ``tube_scale`` class standard deviations.
    """
    if steps < 64:
        raise ConfigError("convexity scan needs steps >= 64")
    if lambda0 is not None and not z.admissible(lambda0):
        raise ConfigError(f"assignment has a class with fewer than lambda0={lambda0} points")
    rng = np.random.default_rng(0) if rng is None else rng
    K, P = z.K, ds.P
    stats = SufficientStats.from_labels(ds, z)
    w = z.counts / z.counts.sum() if weights is None else np.asarray(weights)
    if sampler == "tube":
        center = sheet_center(stats, w)

        def draw():
            return tube_point(rng, center, tube_scale, priors.R)
    elif sampler == "cutoff":
        def draw():
            return random_cutoff_point(rng, w, P, priors.R)
    else:
        raise ConfigError(f"unknown sampler {sampler!r}")

    rows, clipped = [], []
    for g in range(geodesics):
        geo = sample_product_geodesic(rng, draw(), draw(), priors)
        ts, vals = geodesic_values(stats, geo, priors, steps)
        finite = np.isfinite(vals)
        if not finite.all():
            clipped.append(g)
            stop = int(np.argmin(finite))
            ts, vals = ts[:stop], vals[:stop]
        if ts.size < 3:
            continue
        d2 = second_differences(ts, vals)
        rows.append(np.column_stack([np.full(d2.size, g), ts[1:-1], d2]))
    records = np.vstack(rows) if rows else np.zeros((0, 3))
    minimum = float(records[:, 2].min()) if records.size else np.nan
    nmin = int(z.counts.min())
    c_hat = minimum / nmin if nmin > 0 else np.nan
    return ConvexityReport(records, minimum, c_hat, bool(minimum > 0), clipped, nmin)


def sheet_center(stats: SufficientStats, weights):
    """Class means and inverse class covariances of a labeling."""
    n = stats.counts
    mean = stats.sums / n[:, None]
    cov = stats.scatter / n[:, None, None] - np.einsum("kp,kq->kpq", mean, mean)
    return ModelPoint(weights, mean, np.linalg.inv(cov))


def analytic_second_derivative_1d(ds: Dataset, geo: ProductGeodesic, t, priors: PriorConfig):
    """Closed-form ``d^2/dt^2`` of ``lambda0 * Phi`` along a K=1, P=1 geodesic.

    With ``u = mu(t) - xbar``, ``W = sum (x_n - xbar)^2`` and ``Lambda(t)``:

        Lambda [N a^2 + 2 N u a c + (N u^2 + W) c^2 / 2] + 2 A a^2 + 2 c^2 Lambda^2 / sigma

    where ``a = alpha b`` and ``c = beta r`` are the signed speeds and ``A`` is
    the mean-prior coefficient.
    """
    if geo.start.K != 1 or geo.start.P != 1:
        raise ConfigError("analytic oracle is for K=1, P=1")
    x = ds.points[:, 0]
    N = x.size
    xbar = x.mean()
    W = float(np.sum((x - xbar) ** 2))
    a = float(geo.alpha[0] * geo.b[0, 0])
    c = float(geo.beta[0] * geo.r[0, 0])
    mu = float(geo.means_at(t)[0, 0])
    lam = float(geo.precisions_at(t)[0, 0, 0])
    u = mu - xbar
    sigma = float(priors.sigma(1)[0])
    val = lam * (N * a * a + 2 * N * u * a * c + 0.5 * (N * u * u + W) * c * c) + 2 * priors.a * a * a
    if np.isfinite(sigma):
        val += 2 * c * c * lam * lam / sigma
    return val
