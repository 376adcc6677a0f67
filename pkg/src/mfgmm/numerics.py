"""Numerical utilities: finite differences, damped Newton, unconstrained charts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NumericalError


def fd_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a vector function, shape (m, d)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def fd_hessian_from_grad(grad, x, h=1e-5):
    """Symmetrised central-difference Jacobian of an analytic gradient."""
    H = fd_jacobian(grad, x, h)
    return 0.5 * (H + H.T)


def fd_hessian(f, x, h=1e-4):
    """Second differences of a (possibly vector-valued) function; shape (..., d, d)."""
    x = np.asarray(x, dtype=float)
    d = x.size
    f0 = np.asarray(f(x), dtype=float)
    H = np.empty(f0.shape + (d, d))
    steps = h * np.maximum(1.0, np.abs(x))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = steps[i]
        H[..., i, i] = (np.asarray(f(x + ei)) - 2 * f0 + np.asarray(f(x - ei))) / steps[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = steps[j]
            v = (np.asarray(f(x + ei + ej)) - np.asarray(f(x + ei - ej))
                 - np.asarray(f(x - ei + ej)) + np.asarray(f(x - ei - ej))) / (4 * steps[i] * steps[j])
            H[..., i, j] = v
            H[..., j, i] = v
    return H


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    hess: np.ndarray
    iterations: int


def newton_minimize(fun, x0, grad=None, hess=None, tol=1e-10, max_iter=200):
    """Damped Newton with Armijo backtracking.

    ``grad`` defaults to central differences of ``fun`` and ``hess`` to central
    differences of ``grad``. Non-positive-definite Hessians are shifted for the
    step; convergence is ``max |grad| <= tol * max(1, |fun|)``. Points where
    ``fun`` is not finite are rejected by the line search.
    """
    if grad is None:
        def grad(x):
            return fd_gradient(fun, x)
    if hess is None:
        def hess(x):
            return fd_hessian_from_grad(grad, x)
    x = np.asarray(x0, dtype=float).copy()
    f = fun(x)
    if not np.isfinite(f):
        raise NumericalError("Newton start point has non-finite value")
    for it in range(max_iter):
        g = grad(x)
        if np.max(np.abs(g)) <= tol * max(1.0, abs(f)):
            return NewtonResult(x, f, g, hess(x), it)
        H = hess(x)
        shift = 0.0
        while True:
            try:
                c = np.linalg.cholesky(H + shift * np.eye(x.size))
                break
            except np.linalg.LinAlgError:
                shift = max(2 * shift, 1e-8 * max(1.0, np.max(np.abs(H))))
        step = -np.linalg.solve(c.T, np.linalg.solve(c, g))
        slope = float(g @ step)
        t = 1.0
        while True:
            xn = x + t * step
            fn = fun(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                break
            # near the optimum the decrease is below rounding; accept on gradient progress
            if (np.isfinite(fn) and fn <= f + 1e-12 * (1.0 + abs(f))
                    and np.max(np.abs(grad(xn))) < 0.5 * np.max(np.abs(g))):
                break
            t *= 0.5
            if t < 1e-12:
                g_inf = np.max(np.abs(g))
                if g_inf <= 1e3 * tol * max(1.0, abs(f)):
                    return NewtonResult(x, f, g, H, it)
                raise ConvergenceError(f"line search failed (|g|={g_inf:.3e})", best=x)
        x, f = xn, fn
    g = grad(x)
    if np.max(np.abs(g)) <= 1e3 * tol * max(1.0, abs(f)):
        return NewtonResult(x, f, g, hess(x), max_iter)
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", best=x)


# ---------------------------------------------------------------------------
# Charts: log-Cholesky for SPD blocks, additive log-ratio for the simplex
# ---------------------------------------------------------------------------


def n_block(P):
    """Chart dimension of one (mean, precision) block."""
    return P + P * (P + 1) // 2


def block_from_theta(theta, P):
    """``theta = (mu, tril(l))`` -> ``(mu, Lambda, L)`` with ``L_ii = exp(l_ii)``."""
    mu = theta[:P]
    L = np.zeros((P, P))
    L[np.tril_indices(P)] = theta[P:]
    d = np.arange(P)
    L[d, d] = np.exp(L[d, d])
    return mu, L @ L.T, L


def block_to_theta(mu, lam):
    P = mu.shape[0]
    L = np.linalg.cholesky(lam)
    d = np.arange(P)
    L[d, d] = np.log(L[d, d])
    return np.concatenate([mu, L[np.tril_indices(P)]])


def block_log_jacobian(theta, P):
    """Log-density of the affine-invariant volume ``|Lambda|^{-(P+1)/2} dLambda`` in the chart."""
    ld = theta[P:][_diag_positions(P)]
    return P * np.log(2.0) - float(np.arange(P) @ ld)


def block_log_jacobian_grad(theta, P):
    g = np.zeros_like(theta)
    g[P + _diag_positions(P)] = -np.arange(P, dtype=float)
    return g


def _diag_positions(P):
    r, c = np.tril_indices(P)
    return np.nonzero(r == c)[0]


def simplex_from_eta(eta):
    z = np.append(eta, 0.0)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def simplex_to_eta(pi):
    return np.log(pi[:-1]) - np.log(pi[-1])


def simplex_log_jacobian(eta):
    """Log-Jacobian of ``eta -> (pi_1, ..., pi_{K-1})``: ``sum_k log pi_k``."""
    return float(np.sum(np.log(simplex_from_eta(eta))))
