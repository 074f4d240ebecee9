"""Numerical building blocks: distributions, seeded streams, linear solves,
logistic regression by Newton-Raphson and finite-difference Jacobians."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import integrate, linalg, special

from .errors import NonFinite, RankDeficient, Separation, SingularMatrix

MAX_CONDITION = 1e12
SEPARATION_BOUND = 30.0


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------

def normal_cdf(x):
    """Standard normal distribution function."""
    return special.ndtr(x)


def normal_pdf(x):
    return np.exp(-0.5 * np.square(x)) / np.sqrt(2.0 * np.pi)


def normal_quantile(p):
    """Inverse of :func:`normal_cdf`.

    The initial value from ``ndtri`` is polished with two Newton steps on the
    distribution function so that ``normal_cdf(normal_quantile(p))`` matches
    ``p`` to within 1e-10.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p_arr)) or np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError(f"normal_quantile requires 0 < p < 1, got {p!r}")
    x = special.ndtri(p_arr)
    for _ in range(2):
        dens = normal_pdf(x)
        step = np.where(dens > 0, (special.ndtr(x) - p_arr) / np.where(dens > 0, dens, 1.0), 0.0)
        x = x - step
    return x if np.ndim(p) else float(x)


def chisq_survival(x, df):
    """Upper tail probability of a chi-squared variable with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError("df must be a positive integer")
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    out = special.gammaincc(0.5 * df, 0.5 * x)
    return out if np.ndim(out) else float(out)


def bivariate_normal_cdf(a, b, rho):
    """P(U <= a, V <= b) for standard normals with correlation ``rho``.

    Computed by adaptive quadrature of phi(u) * Phi((b - rho u) / sqrt(1 - rho^2)).
    """
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie strictly inside (-1, 1)")
    if rho == 0.0:
        return float(normal_cdf(a) * normal_cdf(b))
    scale = np.sqrt(1.0 - rho * rho)

    def integrand(u):
        return normal_pdf(u) * special.ndtr((b - rho * u) / scale)

    lower = min(-40.0, a - 1.0)
    val, _ = integrate.quad(integrand, lower, a, epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(val)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

class RngStream:
    """Independent random stream keyed by ``(master_seed, stream_index)``.

    Uses the counter-based Philox bit generator; the key is derived through
    ``SeedSequence`` with the stream index as spawn key, so replication ``i``
    draws the same numbers no matter which worker runs it.
    """

    def __init__(self, master_seed: int, stream_index: int = 0):
        if master_seed < 0 or master_seed >= 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if stream_index < 0:
            raise ValueError("stream_index must be non-negative")
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def uniform(self, size=None):
        return self.generator.random(size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def bernoulli(self, p):
        p = np.asarray(p, dtype=float)
        return (self.generator.random(p.shape) < p).astype(float)

    def categorical(self, probs, size):
        """Draw integer levels 0..len(probs)-1 with the given probabilities."""
        probs = np.asarray(probs, dtype=float)
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        return np.searchsorted(cum, self.generator.random(size), side="right")

    def bivariate_normal(self, rho, size):
        """(size, 2) draws with unit variances and correlation ``rho``."""
        chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
        return self.generator.standard_normal((size, 2)) @ chol.T

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def is_symmetric(a, rtol=1e-10):
    a = np.asarray(a)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    return bool(np.max(np.abs(a - a.T), initial=0.0) <= rtol * scale)


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def _lu(a):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        return linalg.lu_factor(a, check_finite=False)


def condition_estimate(a):
    """1-norm condition number estimate from an LU factorisation."""
    a = np.asarray(a, dtype=float)
    lu, piv = _lu(a)
    return _condition_from_lu(a, lu)


def _condition_from_lu(a, lu):
    if np.any(np.diag(lu) == 0.0):
        return np.inf
    anorm = np.linalg.norm(a, 1)
    rcond, info = linalg.lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or rcond <= 0.0:
        return np.inf
    return 1.0 / rcond


def solve_linear(a, b):
    """Solve ``a x = b`` through a pivoted LU decomposition.

    ``b`` may be a vector or a matrix of right-hand sides.

    Raises
    ------
    SingularMatrix
        If ``a`` is singular or its condition estimate exceeds 1e12.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SingularMatrix("matrix has non-finite entries", condition=np.inf)
    lu, piv = _lu(a)
    cond = _condition_from_lu(a, lu)
    if not cond < MAX_CONDITION:
        raise SingularMatrix(f"matrix is singular or ill-conditioned (condition estimate {cond:.3g})",
                             condition=cond)
    return linalg.lu_solve((lu, piv), b, check_finite=False)


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------

def expit(x):
    return special.expit(x)


def logistic_mle(design, response, max_iter=100, tol=1e-8):
    """Maximum likelihood logistic regression by Newton-Raphson.

    Parameters
    ----------
    design : ndarray (n, k)
        Regressor matrix, including the constant column.
    response : ndarray (n,)
        Binary outcome.

    Returns
    -------
    beta : ndarray (k,)
    cov : ndarray (k, k)
        Inverse of the observed information ``sum p(1-p) R R'``.

    Raises
    ------
    RankDeficient
        If ``design`` does not have full column rank.
    Separation
        If a coefficient leaves the interval [-30, 30].
    """
    r = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if r.ndim != 2 or y.shape != (r.shape[0],):
        raise ValueError("design must be (n, k) and response (n,)")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("logistic_mle requires a binary response")
    if np.linalg.matrix_rank(r) < r.shape[1]:
        raise RankDeficient("logistic design matrix is rank deficient")

    def loglik(b):
        eta = r @ b
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    beta = np.zeros(r.shape[1])
    ybar = y.mean()
    if 0.0 < ybar < 1.0:
        beta[0] = np.log(ybar / (1.0 - ybar))
    ll = loglik(beta)
    for _ in range(max_iter):
        p = expit(r @ beta)
        score = r.T @ (y - p)
        if np.max(np.abs(score)) <= tol:
            break
        info = (r * (p * (1.0 - p))[:, None]).T @ r
        try:
            step = solve_linear(info, score)
        except SingularMatrix as exc:
            raise Separation("information matrix became singular; the data are separated") from exc
        for _ in range(30):
            cand = beta + step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2.0
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise Separation(f"logistic coefficient diverged (|beta| > {SEPARATION_BOUND:g})")
    else:
        p = expit(r @ beta)
        if np.max(np.abs(r.T @ (y - p))) > np.sqrt(tol):
            raise Separation("logistic regression did not converge")
    p = expit(r @ beta)
    info = (r * (p * (1.0 - p))[:, None]).T @ r
    cov = solve_linear(info, np.eye(r.shape[1]))
    return beta, symmetrize(cov)


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------

def finite_diff_jacobian(f, theta, h=None):
    """Central-difference Jacobian of a vector-valued function.

    The step for coordinate ``j`` is ``1e-6 * max(1, |theta_j|)`` unless ``h``
    is given.
    """
    theta = np.asarray(theta, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(theta), dtype=float))
    if not np.all(np.isfinite(f0)):
        raise NonFinite("function is not finite at theta")
    jac = np.empty((f0.size, theta.size))
    for j in range(theta.size):
        step = h if h is not None else 1e-6 * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += step
        dn[j] -= step
        fu = np.atleast_1d(np.asarray(f(up), dtype=float))
        fd = np.atleast_1d(np.asarray(f(dn), dtype=float))
        if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(fd))):
            raise NonFinite(f"function is not finite near theta along coordinate {j}")
        jac[:, j] = (fu - fd) / (2.0 * step)
    return jac
