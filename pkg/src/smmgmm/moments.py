"""Moment systems for the additive, multiplicative and double-logistic SMMs.

Each model maps a parameter vector and a :class:`MomentData` block to the
(n, m) matrix of per-observation moments g_i(theta) and the (n, m, p) array of
their derivatives. ``mean_jacobian`` returns n^-1 sum_i dg_i/dtheta' without
materialising the per-row array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, InstrumentSpec, encode_indicators, saturated_regressors
from .errors import ExpOverflow
from .numerics import expit

EXP_LIMIT = 700.0

MODEL_NAMES = (
    "additive",
    "mult_mmom0",
    "mult_mmom1",
    "mult_mmomc",
    "logistic_joint",
    "logistic_plugin",
    "additive_expanded",
    "mult_expanded",
    "logistic_expanded",
)


@dataclass(frozen=True, eq=False)
class MomentData:
    """Arrays consumed by the moment functions.

    ``s`` is the instrument matrix with a leading constant, ``r`` the
    saturated association regressors and ``beta`` a frozen association fit
    (plug-in logistic model only).
    """

    y: np.ndarray
    x: np.ndarray
    s: np.ndarray
    r: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def zc(self) -> np.ndarray:
        """Non-constant instrument columns."""
        return self.s[:, 1:]

    @classmethod
    def from_dataset(cls, ds: Dataset, spec: Optional[InstrumentSpec] = None, beta=None):
        s = encode_indicators(ds, spec)
        ref = spec.reference_level if spec is not None else 0
        r = saturated_regressors(ds.x, ds.z, ds.n_levels, ref)
        return cls(ds.y, ds.x, s, r, None if beta is None else np.asarray(beta, float))

    def with_beta(self, beta) -> "MomentData":
        return MomentData(self.y, self.x, self.s, self.r, np.asarray(beta, float))

    def row(self, i) -> "MomentData":
        sl = slice(i, i + 1)
        return MomentData(self.y[sl], self.x[sl], self.s[sl],
                          None if self.r is None else self.r[sl], self.beta)


def _exp_neg(x, psi, offset=0.0):
    """exp(-(offset + x psi)) with the overflow guard."""
    arg = offset + x * psi
    if np.max(np.abs(arg), initial=0.0) > EXP_LIMIT:
        raise ExpOverflow(
            "|X*psi| exceeds 700; centre or rescale a continuous exposure before fitting")
    return np.exp(-arg)


def _stack_jac(blocks, n, p):
    """Per-row Jacobian from (instrument (n, mb), dv (n, p)) blocks."""
    return np.concatenate([inst[:, :, None] * dv[:, None, :] for inst, dv in blocks], axis=1)


@dataclass(frozen=True)
class MomentModel:
    """A named moment system with a fixed parameter layout."""

    name: str
    param_names: tuple
    moment_names: tuple

    @property
    def param_dim(self) -> int:
        return len(self.param_names)

    @property
    def moment_dim(self) -> int:
        return len(self.moment_names)

    @property
    def over_id_df(self) -> int:
        return self.moment_dim - self.param_dim

    def index(self, param: str) -> int:
        return self.param_names.index(param)

    def moments(self, theta, d: MomentData) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, theta, d: MomentData) -> np.ndarray:
        raise NotImplementedError

    def mean_jacobian(self, theta, d: MomentData) -> np.ndarray:
        return self.jacobian(theta, d).mean(axis=0)

    def mean_moments(self, theta, d: MomentData) -> np.ndarray:
        return self.moments(theta, d).mean(axis=0)

    def initial_weight(self, d: MomentData) -> np.ndarray:
        return d.s.T @ d.s / d.n

    # row-level access used by derivative checks
    def g(self, row: MomentData, theta) -> np.ndarray:
        return self.moments(np.asarray(theta, float), row)[0]

    def jac(self, row: MomentData, theta) -> np.ndarray:
        return self.jacobian(np.asarray(theta, float), row)[0]


def _s_names(d: MomentData, prefix=""):
    return tuple(f"{prefix}s{j}" for j in range(d.s.shape[1]))


# ---------------------------------------------------------------------------
# residual-times-instrument models: g_i = v_i(theta) S_i
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualModel(MomentModel):
    """g_i = v(theta; Y_i, X_i) S_i with a scalar generalised residual."""

    def residual(self, theta, d):
        """Return (v, dv) with v of shape (n,) and dv of shape (n, p)."""
        raise NotImplementedError

    def moments(self, theta, d):
        v, _ = self.residual(theta, d)
        return v[:, None] * d.s

    def jacobian(self, theta, d):
        _, dv = self.residual(theta, d)
        return _stack_jac([(d.s, dv)], d.n, self.param_dim)

    def mean_jacobian(self, theta, d):
        _, dv = self.residual(theta, d)
        return d.s.T @ dv / d.n

    def mean_moments(self, theta, d):
        v, _ = self.residual(theta, d)
        return d.s.T @ v / d.n


@dataclass(frozen=True)
class Additive(ResidualModel):
    """(Y - psi0 X - alpha0) S."""

    def residual(self, theta, d):
        psi, alpha = theta
        v = d.y - psi * d.x - alpha
        dv = np.column_stack([-d.x, -np.ones(d.n)])
        return v, dv


@dataclass(frozen=True)
class MultMmom0(ResidualModel):
    """(Y exp(-X psi0) - alpha0) S."""

    def residual(self, theta, d):
        psi, alpha = theta
        h = d.y * _exp_neg(d.x, psi)
        return h - alpha, np.column_stack([-d.x * h, -np.ones(d.n)])


@dataclass(frozen=True)
class MultMmom1(ResidualModel):
    """{Y - exp(alpha0* + X psi0)} exp(-X psi0) S."""

    def residual(self, theta, d):
        psi, astar = theta
        if abs(astar) > EXP_LIMIT:
            raise ExpOverflow("log E(Y0) parameter is out of range")
        h = d.y * _exp_neg(d.x, psi)
        ea = np.exp(astar)
        return h - ea, np.column_stack([-d.x * h, np.full(d.n, -ea)])


@dataclass(frozen=True)
class MultMmomc(ResidualModel):
    """{Y - exp(alpha0* + X psi0)} / exp(alpha0* + X psi0) S."""

    def residual(self, theta, d):
        psi, astar = theta
        h = d.y * _exp_neg(d.x, psi, astar)
        return h - 1.0, np.column_stack([-d.x * h, -h])


@dataclass(frozen=True)
class LogisticPlugin(ResidualModel):
    """{expit(R'beta_hat - psi0 X) - alpha0} S with beta frozen."""

    def residual(self, theta, d):
        if d.beta is None:
            raise ValueError("logistic_plugin needs the association coefficients in MomentData.beta")
        psi, alpha = theta
        q = expit(d.r @ d.beta - psi * d.x)
        dq = q * (1.0 - q)
        return q - alpha, np.column_stack([-dq * d.x, -np.ones(d.n)])

    def beta_jacobian(self, theta, d):
        """Per-row derivative of the causal residual with respect to beta, (n, k)."""
        psi, _ = theta
        q = expit(d.r @ d.beta - psi * d.x)
        return (q * (1.0 - q))[:, None] * d.r


# ---------------------------------------------------------------------------
# joint association + causal logistic moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticJoint(MomentModel):
    """[Y - expit(R'beta)] R stacked on [expit(R'beta - psi0 X) - alpha0] S.

    theta = (beta_0..beta_{k-1}, psi0, alpha0).
    """

    n_beta: int = 0

    def _parts(self, theta, d):
        k = self.n_beta
        beta, psi, alpha = theta[:k], theta[k], theta[k + 1]
        eta = d.r @ beta
        p = expit(eta)
        q = expit(eta - psi * d.x)
        return beta, psi, alpha, p, q

    def moments(self, theta, d):
        _, _, alpha, p, q = self._parts(theta, d)
        return np.hstack([(d.y - p)[:, None] * d.r, (q - alpha)[:, None] * d.s])

    def mean_moments(self, theta, d):
        _, _, alpha, p, q = self._parts(theta, d)
        return np.concatenate([d.r.T @ (d.y - p), d.s.T @ (q - alpha)]) / d.n

    def _dv(self, theta, d):
        _, _, _, p, q = self._parts(theta, d)
        dp = p * (1.0 - p)
        dq = q * (1.0 - q)
        da = np.hstack([-dp[:, None] * d.r, np.zeros((d.n, 2))])
        dc = np.hstack([dq[:, None] * d.r, (-dq * d.x)[:, None], -np.ones((d.n, 1))])
        return da, dc

    def jacobian(self, theta, d):
        da, dc = self._dv(theta, d)
        return _stack_jac([(d.r, da), (d.s, dc)], d.n, self.param_dim)

    def mean_jacobian(self, theta, d):
        da, dc = self._dv(theta, d)
        return np.vstack([d.r.T @ da, d.s.T @ dc]) / d.n

    def initial_weight(self, d):
        k, m = d.r.shape[1], d.s.shape[1]
        w = np.zeros((k + m, k + m))
        w[:k, :k] = d.r.T @ d.r / d.n
        w[k:, k:] = d.s.T @ d.s / d.n
        return w


# ---------------------------------------------------------------------------
# expanded moments with estimated instrument means
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Expanded(MomentModel):
    """(Z_j - mu_j) stacked on (Z_j - mu_j) h*(X, Y; psi0).

    The logistic variant also carries the association moments and beta, so
    theta = (beta..., mu_1..mu_J, psi0); otherwise theta = (mu..., psi0).
    """

    base: str = "mult"
    n_beta: int = 0

    def _split(self, theta):
        k = self.n_beta
        j = self.param_dim - k - 1
        return theta[:k], theta[k:k + j], theta[k + j]

    def _h(self, theta, d):
        """h*, dh*/dpsi and (logistic) dh*/dbeta."""
        beta, _, psi = self._split(theta)
        if self.base == "additive":
            return d.y - psi * d.x, -d.x, None
        if self.base == "mult":
            h = d.y * _exp_neg(d.x, psi)
            return h, -d.x * h, None
        q = expit(d.r @ beta - psi * d.x)
        dq = q * (1.0 - q)
        return q, -dq * d.x, dq[:, None] * d.r

    def moments(self, theta, d):
        beta, mu, _ = self._split(theta)
        zc = d.zc - mu[None, :]
        h, _, _ = self._h(theta, d)
        parts = [zc, zc * h[:, None]]
        if self.n_beta:
            parts.insert(0, (d.y - expit(d.r @ beta))[:, None] * d.r)
        return np.hstack(parts)

    def jacobian(self, theta, d):
        beta, mu, _ = self._split(theta)
        n, k, j = d.n, self.n_beta, mu.size
        zc = d.zc - mu[None, :]
        h, dh_psi, dh_beta = self._h(theta, d)
        jac = np.zeros((n, self.moment_dim, self.param_dim))
        off = 0
        if k:
            p = expit(d.r @ beta)
            dp = p * (1.0 - p)
            jac[:, :k, :k] = -dp[:, None, None] * d.r[:, :, None] * d.r[:, None, :]
            off = k
        idx = np.arange(j)
        jac[:, off + idx, k + idx] = -1.0
        jac[:, off + j + idx, k + idx] = -h[:, None]
        jac[:, off + j:off + 2 * j, k + j] = zc * dh_psi[:, None]
        if k:
            jac[:, off + j:off + 2 * j, :k] = zc[:, :, None] * dh_beta[:, None, :]
        return jac

    def mean_jacobian(self, theta, d):
        beta, mu, _ = self._split(theta)
        n, k, j = d.n, self.n_beta, mu.size
        zc = d.zc - mu[None, :]
        h, dh_psi, dh_beta = self._h(theta, d)
        out = np.zeros((self.moment_dim, self.param_dim))
        off = 0
        if k:
            p = expit(d.r @ beta)
            out[:k, :k] = -(d.r * (p * (1.0 - p))[:, None]).T @ d.r / n
            off = k
        idx = np.arange(j)
        out[off + idx, k + idx] = -1.0
        out[off + j + idx, k + idx] = -h.mean()
        out[off + j:off + 2 * j, k + j] = zc.T @ dh_psi / n
        if k:
            out[off + j:off + 2 * j, :k] = zc.T @ dh_beta / n
        return out

    def initial_weight(self, d):
        m = self.moment_dim
        w = np.eye(m)
        k = self.n_beta
        if k:
            w[:k, :k] = d.r.T @ d.r / d.n
        return w


# ---------------------------------------------------------------------------
# factory
# ---------------------------------------------------------------------------

def build_model(name: str, d: MomentData) -> MomentModel:
    """Moment model ``name`` laid out for the instrument/regressor dimensions of ``d``."""
    snames = _s_names(d)
    if name == "additive":
        return Additive(name, ("psi0", "alpha0"), snames)
    if name == "mult_mmom0":
        return MultMmom0(name, ("psi0", "alpha0"), snames)
    if name == "mult_mmom1":
        return MultMmom1(name, ("psi0", "alpha0_star"), snames)
    if name == "mult_mmomc":
        return MultMmomc(name, ("psi0", "alpha0_star"), snames)
    if name == "logistic_plugin":
        return LogisticPlugin(name, ("psi0", "alpha0"), snames)
    nb = 0 if d.r is None else d.r.shape[1]
    bnames = tuple(f"beta{j}" for j in range(nb))
    rnames = tuple(f"r{j}" for j in range(nb))
    if name == "logistic_joint":
        if d.r is None:
            raise ValueError("logistic_joint needs association regressors")
        return LogisticJoint(name, bnames + ("psi0", "alpha0"), rnames + snames, n_beta=nb)
    if name in ("additive_expanded", "mult_expanded", "logistic_expanded"):
        nz = d.s.shape[1] - 1
        mu = tuple(f"mu{j + 1}" for j in range(nz))
        mom = tuple(f"zc{j + 1}" for j in range(nz)) + tuple(f"zc{j + 1}_h" for j in range(nz))
        base = name.split("_")[0]
        if base == "logistic":
            return Expanded(name, bnames + mu + ("psi0",), rnames + mom, base=base, n_beta=nb)
        return Expanded(name, mu + ("psi0",), mom, base=base)
    raise ValueError(f"unknown moment model {name!r}; expected one of {MODEL_NAMES}")


# ---------------------------------------------------------------------------
# functional forms: single rows (scalars y, x and a vector S) or whole samples
# ---------------------------------------------------------------------------

def _times(v, s):
    v = np.asarray(v, dtype=float)
    s = np.asarray(s, dtype=float)
    return v[..., None] * s


def additive_moments(y, x, theta, s):
    """(Y - psi0 X - alpha0) S."""
    psi, alpha = theta
    return _times(np.asarray(y, float) - psi * np.asarray(x, float) - alpha, s)


def mult_moments_mmom0(y, x, theta, s):
    """(Y exp(-X psi0) - alpha0) S."""
    psi, alpha = theta
    return _times(np.asarray(y, float) * _exp_neg(np.asarray(x, float), psi) - alpha, s)


def mult_moments_mmom1(y, x, theta, s):
    """{Y - exp(alpha0* + X psi0)} exp(-X psi0) S."""
    psi, astar = theta
    if abs(astar) > EXP_LIMIT:
        raise ExpOverflow("log E(Y0) parameter is out of range")
    return _times(np.asarray(y, float) * _exp_neg(np.asarray(x, float), psi) - np.exp(astar), s)


def mult_moments_mmomc(y, x, theta, s):
    """{Y - exp(alpha0* + X psi0)} exp(-alpha0* - X psi0) S."""
    psi, astar = theta
    return _times(np.asarray(y, float) * _exp_neg(np.asarray(x, float), psi, astar) - 1.0, s)


def logistic_joint_moments(y, x, theta, r, s):
    """[Y - expit(R'beta)] R stacked on [expit(R'beta - psi0 X) - alpha0] S."""
    r = np.asarray(r, float)
    k = r.shape[-1]
    theta = np.asarray(theta, float)
    beta, psi, alpha = theta[:k], theta[k], theta[k + 1]
    eta = r @ beta
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    return np.concatenate([_times(y - expit(eta), r), _times(expit(eta - psi * x) - alpha, s)],
                          axis=-1)


def expanded_moments(base, y, x, theta, zc, r=None):
    """(Z_j - mu_j) stacked on (Z_j - mu_j) h*(X, Y; psi0).

    ``zc`` holds the non-constant instrument columns. For ``base="logistic"``
    theta starts with the association coefficients and ``r`` is required.
    """
    theta = np.asarray(theta, float)
    zc = np.asarray(zc, float)
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    j = zc.shape[-1]
    k = 0 if base != "logistic" else np.asarray(r).shape[-1]
    beta, mu, psi = theta[:k], theta[k:k + j], theta[k + j]
    centred = zc - mu
    if base == "additive":
        h = y - psi * x
    elif base == "mult":
        h = y * _exp_neg(x, psi)
    elif base == "logistic":
        eta = np.asarray(r, float) @ beta
        h = expit(eta - psi * x)
    else:
        raise ValueError("base must be 'additive', 'mult' or 'logistic'")
    parts = [centred, centred * np.asarray(h)[..., None]]
    if k:
        parts.insert(0, _times(y - expit(eta), r))
    return np.concatenate(parts, axis=-1)
