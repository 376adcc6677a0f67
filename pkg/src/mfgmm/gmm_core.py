"""Domain types, priors, synthetic data and the cut-off log-posterior.

Conventions
-----------
Labels are 0-based integers in ``{0, ..., K-1}``. The potential is

    Phi(xi, z) = -(1 / lambda0) * log P(z, mu, pi, Lambda | x),

so that ``exp(-lambda * Phi)`` with ``lambda = beta * lambda0`` is the
beta-tempered posterior. Outside the parameter cut-off (``|mu_k| >= R`` or
``d_RF(Lambda_k, I) >= R``) the log-posterior is ``-inf`` and ``Phi`` is
``+inf``.

Everything downstream is written in terms of per-class sufficient statistics
``(N_k, sum_n z_nk x_n, sum_n z_nk x_n x_n^T)``. The negative log-posterior is
linear in these statistics, which lets soft (weighted) statistics stand in for
mixtures of labelings and for population averages.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CutoffError

EIG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Small linear-algebra helpers
# ---------------------------------------------------------------------------


def check_spd(matrix, name="matrix"):
    """Return ``matrix`` as a symmetric float array, rejecting non-SPD input."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise ConfigError(f"{name} is not symmetric")
    m = 0.5 * (m + m.T)
    eig = np.linalg.eigvalsh(m)
    if not np.all(np.isfinite(eig)) or eig.min() <= EIG_FLOOR:
        raise ConfigError(f"{name} is not positive definite (min eigenvalue {eig.min():.3e})")
    return m


def spd_log_eigs(matrix):
    """Log-eigenvalues of an SPD matrix, ``None`` if it is not SPD."""
    eig = np.linalg.eigvalsh(matrix)
    if eig.min() <= EIG_FLOOR:
        return None
    return np.log(eig)


def distance_to_identity(matrix):
    """Rao-Fisher distance ``d_RF(matrix, I)``; ``inf`` for non-SPD input."""
    le = spd_log_eigs(matrix)
    return np.inf if le is None else float(np.linalg.norm(le))


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureConfig:
    """Size and temperature of a mixture problem."""

    K: int
    P: int
    N: int
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.P < 1:
            raise ConfigError(f"need K >= 1 and P >= 1, got K={self.K}, P={self.P}")
        if self.N < self.K:
            raise ConfigError(f"need N >= K, got N={self.N}, K={self.K}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self):
        return {"K": self.K, "P": self.P, "N": self.N, "beta": self.beta, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d):
        return cls(K=int(d["K"]), P=int(d["P"]), N=int(d["N"]),
                   beta=float(d.get("beta", 1.0)), seed=int(d.get("seed", 0)))


def _check_simplex(w, name):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"{name} must be a probability vector, got {w}")
    return w


@dataclass(frozen=True)
class ModelPoint:
    """A parameter point ``xi = (pi, mu, Lambda)``.

    ``weights`` has shape (K,), ``means`` (K, P), ``precisions`` (K, P, P).
    """

    weights: np.ndarray
    means: np.ndarray
    precisions: np.ndarray

    def __post_init__(self):
        w = _check_simplex(self.weights, "weights")
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        lam = np.asarray(self.precisions, dtype=float)
        if lam.ndim == 1:
            lam = lam[:, None, None]
        K = w.shape[0]
        if mu.shape[0] != K or lam.shape[:2] != (K, mu.shape[1]) or lam.shape[1] != lam.shape[2]:
            raise ConfigError(f"inconsistent shapes {w.shape}, {mu.shape}, {lam.shape}")
        lam = np.stack([check_spd(L, f"precision[{k}]") for k, L in enumerate(lam)])
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "precisions", lam)

    @classmethod
    def trusted(cls, weights, means, precisions):
        """Construct without validation; for hot loops over known-valid arrays."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "weights", weights)
        object.__setattr__(obj, "means", means)
        object.__setattr__(obj, "precisions", precisions)
        return obj

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def P(self):
        return self.means.shape[1]

    def permuted(self, perm):
        """Reorder components: component ``j`` of the result is ``perm[j]`` here."""
        perm = np.asarray(perm)
        return ModelPoint(self.weights[perm], self.means[perm], self.precisions[perm])

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "precisions": self.precisions.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["precisions"]))


@dataclass(frozen=True)
class TrueMixture:
    """Ground-truth mixture with realised labels and class sizes."""

    weights: np.ndarray
    means: np.ndarray
    precisions: np.ndarray
    true_labels: np.ndarray
    class_sizes: np.ndarray

    def __post_init__(self):
        point = ModelPoint(self.weights, self.means, self.precisions)
        labels = np.asarray(self.true_labels, dtype=np.int64)
        sizes = np.asarray(self.class_sizes, dtype=np.int64)
        if sizes.shape != (point.K,) or np.any(sizes < 0):
            raise ConfigError("classSizes must be K nonnegative integers")
        if labels.size and not np.array_equal(np.bincount(labels, minlength=point.K), sizes):
            raise ConfigError("classSizes disagree with trueLabels")
        object.__setattr__(self, "weights", point.weights)
        object.__setattr__(self, "means", point.means)
        object.__setattr__(self, "precisions", point.precisions)
        object.__setattr__(self, "true_labels", labels)
        object.__setattr__(self, "class_sizes", sizes)

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def P(self):
        return self.means.shape[1]

    @property
    def N(self):
        return int(self.class_sizes.sum())

    def as_point(self):
        return ModelPoint(self.weights, self.means, self.precisions)

    def with_class_sizes(self, sizes):
        """Copy with new class sizes and no realised labels (population use)."""
        return TrueMixture(self.weights, self.means, self.precisions,
                           np.zeros(0, dtype=np.int64), np.asarray(sizes))

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "precisions": self.precisions.tolist(),
                "trueLabels": self.true_labels.tolist(),
                "classSizes": self.class_sizes.tolist()}

    @classmethod
    def from_dict(cls, d):
        labels = np.asarray(d.get("trueLabels", []), dtype=np.int64)
        if "classSizes" in d:
            sizes = np.asarray(d["classSizes"])
        else:
            sizes = np.bincount(labels, minlength=len(d["weights"]))
        return cls(np.array(d["weights"]), np.array(d["means"]),
                   np.array(d["precisions"]), labels, sizes)


@dataclass(frozen=True)
class PriorConfig:
    """Cut-off radius and prior hyperparameters.

    ``log p(mu_k) = -a |mu_k|^2``, ``log p(Lambda_k) = -tr(Lambda_k^2) / (2 sigma_k)``
    and a symmetric Dirichlet(``dirichlet_alpha``) on the weights. ``sigma_k``
    may be ``inf`` for a flat precision prior inside the cut-off.
    """

    R: float = 3.0
    a: float = 0.0
    sigma_k: float | tuple = np.inf
    dirichlet_alpha: float = 1.0

    def __post_init__(self):
        if not self.R > 0:
            raise ConfigError(f"R must be positive, got {self.R}")
        if not self.a >= 0:
            raise ConfigError(f"a must be nonnegative, got {self.a}")
        if np.any(~(np.asarray(self.sigma_k, dtype=float) > 0)):
            raise ConfigError(f"sigma_k must be positive, got {self.sigma_k}")
        if not self.dirichlet_alpha > 0:
            raise ConfigError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        if np.ndim(self.sigma_k):
            object.__setattr__(self, "sigma_k", tuple(float(s) for s in self.sigma_k))

    def sigma(self, K):
        s = np.broadcast_to(np.asarray(self.sigma_k, dtype=float), (K,))
        return s.copy()

    def to_dict(self):
        sig = self.sigma_k
        enc = (lambda s: "inf" if np.isinf(s) else float(s))
        sig = [enc(s) for s in sig] if np.ndim(sig) else enc(sig)
        return {"R": float(self.R), "a": float(self.a), "sigma_k": sig,
                "dirichlet_alpha": float(self.dirichlet_alpha)}

    @classmethod
    def from_dict(cls, d):
        sig = d.get("sigma_k", "inf")
        sig = tuple(float(s) for s in sig) if isinstance(sig, list) else float(sig)
        return cls(R=float(d.get("R", 3.0)), a=float(d.get("a", 0.0)), sigma_k=sig,
                   dirichlet_alpha=float(d.get("dirichlet_alpha", 1.0)))


@dataclass(frozen=True)
class Assignment:
    """A labeling of ``N`` points into ``K`` classes."""

    labels: np.ndarray
    K: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= self.K)):
            raise ConfigError(f"labels must lie in 0..{self.K - 1}")
        object.__setattr__(self, "labels", labels)

    @property
    def counts(self):
        return np.bincount(self.labels, minlength=self.K)

    @property
    def lambda_of(self):
        return int(self.counts.min())

    def indicators(self):
        return np.eye(self.K, dtype=float)[self.labels]

    def admissible(self, lambda0):
        """Membership in the restricted labeling set (every class has >= lambda0 points)."""
        return self.lambda_of >= lambda0


@dataclass(frozen=True)
class Dataset:
    """Observed points, shape (N, P)."""

    points: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.points, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "points", x)

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def P(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class SufficientStats:
    """Per-class statistics; may carry a leading batch axis.

    ``counts`` (..., K), ``sums`` (..., K, P), ``scatter`` (..., K, P, P) holding
    ``sum z_nk``, ``sum z_nk x_n`` and ``sum z_nk x_n x_n^T``. Fractional values
    are allowed (soft assignments, population averages).
    """

    counts: np.ndarray
    sums: np.ndarray
    scatter: np.ndarray = field(repr=False)

    @classmethod
    def from_labels(cls, ds: Dataset, z, K=None):
        if isinstance(z, Assignment):
            K, labels = z.K, z.labels
        else:
            labels = np.asarray(z)
        return cls.from_weights(ds, np.eye(K)[labels])

    @classmethod
    def from_weights(cls, ds: Dataset, resp):
        """Statistics of soft responsibilities ``resp`` with shape (..., N, K)."""
        x = ds.points
        resp = np.asarray(resp, dtype=float)
        counts = resp.sum(axis=-2)
        sums = np.einsum("...nk,np->...kp", resp, x)
        scatter = np.einsum("...nk,np,nq->...kpq", resp, x, x)
        return cls(counts, sums, scatter)

    def weighted(self, u):
        """Contract a batch axis with weights ``u``."""
        return SufficientStats(np.tensordot(u, self.counts, 1), np.tensordot(u, self.sums, 1),
                               np.tensordot(u, self.scatter, 1))

    def __getitem__(self, idx):
        return SufficientStats(self.counts[idx], self.sums[idx], self.scatter[idx])

    def permuted(self, perm):
        perm = np.asarray(perm)
        return SufficientStats(self.counts[..., perm], self.sums[..., perm, :],
                               self.scatter[..., perm, :, :])


# ---------------------------------------------------------------------------
# Data generation and persistence
# ---------------------------------------------------------------------------


def generate_dataset(cfg: MixtureConfig, weights, means, precisions):
    """Sample labels from the weights, then points from the class Gaussians."""
    truth_point = ModelPoint(weights, np.reshape(means, (cfg.K, cfg.P)),
                             np.reshape(precisions, (cfg.K, cfg.P, cfg.P)))
    if cfg.K > cfg.N:
        raise ConfigError(f"K={cfg.K} exceeds N={cfg.N}")
    rng = np.random.default_rng(cfg.seed)
    labels = rng.choice(cfg.K, size=cfg.N, p=truth_point.weights)
    noise = rng.standard_normal((cfg.N, cfg.P))
    chol_cov = np.stack([np.linalg.cholesky(np.linalg.inv(L)) for L in truth_point.precisions])
    x = truth_point.means[labels] + np.einsum("npq,nq->np", chol_cov[labels], noise)
    truth = TrueMixture(truth_point.weights, truth_point.means, truth_point.precisions,
                        labels, np.bincount(labels, minlength=cfg.K))
    return Dataset(x), truth


def write_dataset_csv(path, ds: Dataset):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n"] + [f"x{p + 1}" for p in range(ds.P)])
        for n, row in enumerate(ds.points):
            w.writerow([n + 1] + [repr(float(v)) for v in row])


def read_dataset_csv(path):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "n" or not all(h == f"x{i + 1}" for i, h in enumerate(rows[0][1:])):
        raise ConfigError(f"{path}: bad header {rows[0] if rows else '(empty)'}")
    P = len(rows[0]) - 1
    pts = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            if len(row) != P + 1:
                raise ValueError("wrong field count")
            pts.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ConfigError(f"{path}: malformed row {lineno}: {row} ({exc})") from None
    return Dataset(np.array(pts, dtype=float).reshape(-1, P))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# Potential
# ---------------------------------------------------------------------------


def in_cutoff(xi: ModelPoint, priors: PriorConfig, strict=True):
    """Whether every component satisfies ``|mu_k| < R`` and ``d_RF(Lambda_k, I) < R``."""
    R = priors.R
    for mu, lam in zip(xi.means, xi.precisions):
        if np.linalg.norm(mu) >= R or distance_to_identity(lam) >= R:
            return False
    return True


def _xlogy(n, p):
    """``n * log(p)`` with ``0 * log(0) = 0``."""
    with np.errstate(divide="ignore"):
        return np.where(n == 0, 0.0, n * np.log(np.where(n == 0, 1.0, p)))


def prior_energy(xi: ModelPoint, priors: PriorConfig):
    """``-log p(mu) - log p(Lambda) - log p(pi)`` up to constants."""
    sig = priors.sigma(xi.K)
    e = priors.a * float(np.sum(xi.means ** 2))
    e += float(np.sum(np.einsum("kpq,kqp->k", xi.precisions, xi.precisions) / (2 * sig)))
    e -= float(np.sum(_xlogy(np.full(xi.K, priors.dirichlet_alpha - 1.0), xi.weights)))
    return e


def energy(stats: SufficientStats, xi: ModelPoint, priors: PriorConfig, cutoff=True):
    """Negative log-posterior ``lambda0 * Phi`` from (unbatched) sufficient statistics."""
    if cutoff and not in_cutoff(xi, priors):
        return np.inf
    lam, mu = xi.precisions, xi.means
    n = stats.counts
    quad = 0.5 * np.einsum("kpq,kqp->k", lam, stats.scatter)
    quad -= np.einsum("kp,kpq,kq->k", mu, lam, stats.sums)
    quad += 0.5 * n * np.einsum("kp,kpq,kq->k", mu, lam, mu)
    logdet = np.linalg.slogdet(lam)[1]
    e = np.sum(quad) - 0.5 * np.sum(n * logdet) - np.sum(_xlogy(n, xi.weights))
    return float(e) + prior_energy(xi, priors)


@dataclass(frozen=True)
class Tangent:
    """Gradient of a function on the parameter manifold.

    ``d_precisions`` holds the symmetric matrix ``G`` with ``df = tr(G dLambda)``;
    ``d_weights`` is projected onto the simplex tangent (sums to zero).
    """

    d_weights: np.ndarray
    d_means: np.ndarray
    d_precisions: np.ndarray

    def coordinates(self):
        """Gradient in the coordinates of :func:`point_to_coordinates`."""
        K, P = self.d_means.shape
        iu = np.triu_indices(P)
        scale = np.where(iu[0] == iu[1], 1.0, 2.0)
        g_lam = self.d_precisions[:, iu[0], iu[1]] * scale
        g_pi = self.d_weights[:-1] - self.d_weights[-1]
        return np.concatenate([self.d_means.ravel(), g_lam.ravel(), g_pi])

    def norm(self):
        return float(np.linalg.norm(self.coordinates()))

    def __add__(self, other):
        return Tangent(self.d_weights + other.d_weights, self.d_means + other.d_means,
                       self.d_precisions + other.d_precisions)

    def __mul__(self, c):
        return Tangent(c * self.d_weights, c * self.d_means, c * self.d_precisions)

    __rmul__ = __mul__


def point_to_coordinates(xi: ModelPoint):
    """Flat coordinates ``(mu entries, upper-triangular Lambda entries, pi_1..pi_{K-1})``."""
    iu = np.triu_indices(xi.P)
    return np.concatenate([xi.means.ravel(), xi.precisions[:, iu[0], iu[1]].ravel(),
                           xi.weights[:-1]])


def coordinates_to_point(vec, K, P):
    """Inverse of :func:`point_to_coordinates` (raises ConfigError when invalid)."""
    vec = np.asarray(vec, dtype=float)
    nt = P * (P + 1) // 2
    mu = vec[: K * P].reshape(K, P)
    tri = vec[K * P: K * P + K * nt].reshape(K, nt)
    lam = np.zeros((K, P, P))
    iu = np.triu_indices(P)
    lam[:, iu[0], iu[1]] = tri
    lam[:, iu[1], iu[0]] = tri
    w = np.append(vec[K * P + K * nt:], 1.0 - vec[K * P + K * nt:].sum())
    return ModelPoint(w, mu, lam)


def energy_gradient(stats: SufficientStats, xi: ModelPoint, priors: PriorConfig):
    """Analytic gradient of :func:`energy` (no cut-off check)."""
    lam, mu, n = xi.precisions, xi.means, stats.counts
    sig = priors.sigma(xi.K)
    resid = n[:, None] * mu - stats.sums
    d_mu = np.einsum("kpq,kq->kp", lam, resid) + 2 * priors.a * mu
    outer = (stats.scatter - np.einsum("kp,kq->kpq", mu, stats.sums)
             - np.einsum("kp,kq->kpq", stats.sums, mu) + n[:, None, None] * np.einsum("kp,kq->kpq", mu, mu))
    d_lam = 0.5 * outer - 0.5 * n[:, None, None] * np.linalg.inv(lam)
    finite = np.isfinite(sig)
    d_lam[finite] += lam[finite] / sig[finite, None, None]
    d_lam = 0.5 * (d_lam + np.swapaxes(d_lam, -1, -2))
    coef = n + priors.dirichlet_alpha - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        g_pi = np.where(coef == 0, 0.0, -coef / xi.weights)
    g_pi = g_pi - g_pi.mean()
    return Tangent(g_pi, d_mu, d_lam)


def _stats_for(ds, z, K):
    if isinstance(z, SufficientStats):
        return z
    if not isinstance(z, Assignment):
        z = Assignment(np.asarray(z), K)
    if z.labels.shape[0] != ds.N:
        raise ConfigError("assignment length differs from dataset size")
    return SufficientStats.from_labels(ds, z)


def log_posterior(ds: Dataset, xi: ModelPoint, z, priors: PriorConfig):
    """``log P(z, mu, pi, Lambda | x)`` with additive constant 0; ``-inf`` outside the cut-off."""
    return -energy(_stats_for(ds, z, xi.K), xi, priors)


def phi(ds: Dataset, xi: ModelPoint, z, priors: PriorConfig, lambda0):
    """Potential ``Phi = -(1/lambda0) log P``; ``+inf`` outside the cut-off."""
    if not lambda0 > 0:
        raise ConfigError(f"lambda0 must be positive, got {lambda0}")
    return energy(_stats_for(ds, z, xi.K), xi, priors) / lambda0


def phi_gradient(ds: Dataset, xi: ModelPoint, z, priors: PriorConfig, lambda0):
    """Analytic gradient of :func:`phi` at a point strictly inside the cut-off."""
    if not in_cutoff(xi, priors):
        raise CutoffError("gradient undefined at cut-off boundary")
    stats = _stats_for(ds, z, xi.K)
    if np.any((stats.counts + priors.dirichlet_alpha - 1 != 0) & (xi.weights <= 0)):
        raise CutoffError("gradient undefined at cut-off boundary")
    return energy_gradient(stats, xi, priors) * (1.0 / lambda0)


def lambda0_of(N, l0=0.1):
    """Admissibility threshold ``floor(l0 * N)``."""
    return int(np.floor(l0 * N + 1e-12))
