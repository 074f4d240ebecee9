"""GMM estimation of the structural mean models.

One-step fits use the instrument cross-product weight n^-1 sum S_i S_i'
(block-diagonal over the association and causal moments for the joint
logistic system); two-step fits re-weight with n^-1 sum g_i g_i' evaluated at
the one-step solution. Reported covariances are the asymptotic formulas
divided by n.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from .data import Dataset, InstrumentSpec
from .errors import (DegenerateInstrument, ExpOverflow, NotConverged, NotOverIdentified,
                     SaturationFailure, SingularMatrix, SingularWeight)
from .moments import LogisticPlugin, MomentData, MomentModel, build_model
from .numerics import chisq_survival, expit, logistic_mle, solve_linear, symmetrize

Z975 = 1.959963984540054

STEP_TOL = 1e-10
GRAD_TOL = 1e-8
MAX_ITER = 200
MAX_HALVINGS = 30
NELDER_MEAD_ITER = 50

INCORRECT_SE_NOTE = "conservative/incorrect SEs: association coefficients treated as known"


@dataclass
class GmmFit:
    """Result of a GMM fit.

    ``weight`` is the matrix W_n used in the final minimisation; for two-step
    fits this is the outer-product matrix from the one-step solution, which is
    also the weight entering the J statistic.
    """

    model: str
    param_names: tuple
    theta: np.ndarray
    covariance: np.ndarray
    n: int
    steps: int
    converged: bool
    iterations: int
    objective: float
    weight: np.ndarray
    moment_dim: int
    J: Optional[float] = None
    J_df: int = 0
    J_pvalue: Optional[float] = None
    se_note: Optional[str] = None
    first_step: Optional["GmmFit"] = field(default=None, repr=False)
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def conf_intervals_95(self) -> np.ndarray:
        se = self.standard_errors
        return np.column_stack([self.theta - Z975 * se, self.theta + Z975 * se])

    def __getitem__(self, name: str) -> float:
        return float(self.theta[self.param_names.index(name)])

    def se(self, name: str) -> float:
        return float(self.standard_errors[self.param_names.index(name)])

    @property
    def psi0(self) -> float:
        return self["psi0"]


# ---------------------------------------------------------------------------
# objective and optimiser
# ---------------------------------------------------------------------------

def gmm_objective(model: MomentModel, d: MomentData, theta, weight) -> float:
    """gbar' W^-1 gbar with gbar the sample mean of the moments."""
    gbar = model.mean_moments(np.asarray(theta, float), d)
    return float(gbar @ solve_linear(weight, gbar))


def _safe_objective(model, d, theta, weight):
    try:
        val = gmm_objective(model, d, theta, weight)
    except (ExpOverflow, FloatingPointError):
        return np.inf
    return val if np.isfinite(val) else np.inf


def _check_weight(weight, what="weight matrix"):
    """Raise SingularWeight naming the first dependent moment."""
    w = np.asarray(weight, float)
    diag = np.diag(w)
    scale = max(float(np.max(np.abs(diag))), 1e-300)
    tiny = np.flatnonzero(diag <= 1e-14 * scale)
    if tiny.size:
        raise SingularWeight(f"{what} is singular: moment {int(tiny[0])} has zero variance",
                             index=int(tiny[0]), condition=np.inf)
    try:
        solve_linear(w, np.ones(w.shape[0]))
    except SingularMatrix as exc:
        _, r, piv = linalg.qr(w, pivoting=True)
        rd = np.abs(np.diag(r))
        bad = np.flatnonzero(rd <= 1e-12 * rd[0])
        idx = int(piv[bad[0]]) if bad.size else int(piv[-1])
        raise SingularWeight(f"{what} is singular (condition estimate {exc.condition:.3g}); "
                             f"moment {idx} is linearly dependent on the others",
                             index=idx, condition=exc.condition) from None


def _gauss_newton(model, d, theta0, weight, max_iter=MAX_ITER):
    """Minimise the GMM objective by Gauss-Newton with step halving.

    Returns (theta, converged, iterations, objective).
    """
    theta = np.asarray(theta0, float).copy()
    obj = _safe_objective(model, d, theta, weight)
    if not np.isfinite(obj):
        raise ExpOverflow("GMM objective is not finite at the starting values")
    nm_used = 0
    for it in range(1, max_iter + 1):
        gbar = model.mean_moments(theta, d)
        jac = model.mean_jacobian(theta, d)
        sol = solve_linear(weight, np.column_stack([gbar, jac]))
        wg, wj = sol[:, 0], sol[:, 1:]
        grad = 2.0 * jac.T @ wg
        try:
            step = -solve_linear(symmetrize(jac.T @ wj), jac.T @ wg)
        except SingularMatrix as exc:
            if it == 1:
                raise DegenerateInstrument(
                    "moment Jacobian is rank deficient: the parameters are not identified "
                    "by these instruments") from exc
            # the iterates drifted to where the moments no longer depend on a
            # parameter (e.g. exp(-psi) -> 0): no interior minimiser
            return theta, False, it, obj
        if np.max(np.abs(step)) <= STEP_TOL and np.max(np.abs(grad)) <= GRAD_TOL:
            return theta, True, it, obj
        t = 1.0
        scale = max(1.0, float(np.max(np.abs(theta))))
        improved = False
        for _ in range(MAX_HALVINGS):
            cand = theta + t * step
            cobj = _safe_objective(model, d, cand, weight)
            if cobj < obj:
                improved = True
                break
            t *= 0.5
            if t * np.max(np.abs(step)) <= 1e-15 * scale:
                break  # no representable improvement left along this direction
        if not improved:
            if np.max(np.abs(step)) <= 1e-6 * scale:
                # the decrease is below the rounding floor of the objective:
                # take the (locally exact) Gauss-Newton step if it does no harm
                cand = theta + step
                cobj = _safe_objective(model, d, cand, weight)
                if cobj <= obj + 64 * np.finfo(float).eps * abs(obj):
                    return cand, True, it, cobj
            if np.max(np.abs(grad)) <= GRAD_TOL:
                return theta, True, it, obj
            if nm_used >= 3:
                return theta, False, it, obj
            nm_used += 1
            res = optimize.minimize(lambda th: _safe_objective(model, d, th, weight), theta,
                                    method="Nelder-Mead",
                                    options={"maxiter": NELDER_MEAD_ITER, "xatol": 1e-12,
                                             "fatol": 1e-16})
            if res.fun < obj:
                theta, obj = np.asarray(res.x, float), float(res.fun)
            continue
        theta, obj = cand, cobj
        if np.max(np.abs(t * step)) <= STEP_TOL and np.max(np.abs(grad)) <= GRAD_TOL:
            return theta, True, it, obj
    return theta, False, max_iter, obj


# ---------------------------------------------------------------------------
# covariance pieces
# ---------------------------------------------------------------------------

def outer_product(model, d, theta) -> np.ndarray:
    """n^-1 sum g_i g_i'."""
    g = model.moments(theta, d)
    return symmetrize(g.T @ g / d.n)


def sandwich_covariance(jac, weight, omega, n) -> np.ndarray:
    """(C'W^-1C)^-1 C'W^-1 Omega W^-1 C (C'W^-1C)^-1 / n."""
    wj = solve_linear(weight, jac)
    bread = solve_linear(symmetrize(jac.T @ wj), np.eye(jac.shape[1]))
    meat = wj.T @ omega @ wj
    return symmetrize(bread @ meat @ bread) / n


def efficient_covariance(jac, omega, n) -> np.ndarray:
    """(C' Omega^-1 C)^-1 / n."""
    oj = solve_linear(omega, jac)
    return symmetrize(solve_linear(symmetrize(jac.T @ oj), np.eye(jac.shape[1]))) / n


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------

def _tsls(d: MomentData):
    """Closed-form 2SLS of Y on (X, 1) with instruments S; returns (psi, alpha)."""
    coef, *_ = np.linalg.lstsq(d.s, d.x, rcond=None)
    xhat = d.s @ coef
    design = np.column_stack([xhat, np.ones(d.n)])
    if np.linalg.matrix_rank(design) < 2 or np.ptp(xhat) <= 1e-12 * max(1.0, np.max(np.abs(xhat))):
        raise DegenerateInstrument("instruments do not predict the exposure "
                                   "(first-stage fitted values are constant)")
    est, *_ = np.linalg.lstsq(design, d.y, rcond=None)
    return float(est[0]), float(est[1])


def _association_fit(d: MomentData):
    return logistic_mle(d.r, d.y)


def default_start(model: MomentModel, d: MomentData) -> np.ndarray:
    name = model.name
    mu = d.zc.mean(axis=0)
    ybar = float(d.y.mean())
    if name == "additive":
        return np.array(_tsls(d))
    if name == "additive_expanded":
        return np.concatenate([mu, [_tsls(d)[0]]])
    if name == "mult_mmom0":
        return np.array([0.0, ybar])
    if name in ("mult_mmom1", "mult_mmomc"):
        return np.array([0.0, np.log(ybar)])
    if name == "mult_expanded":
        return np.concatenate([mu, [0.0]])
    if name == "logistic_plugin":
        return np.array([0.0, float(expit(d.r @ d.beta).mean())])
    beta, _ = _association_fit(d)
    if name == "logistic_joint":
        return np.concatenate([beta, [0.0, float(expit(d.r @ beta).mean())]])
    if name == "logistic_expanded":
        return np.concatenate([beta, mu, [0.0]])
    raise ValueError(f"no default start for {name!r}")


# ---------------------------------------------------------------------------
# input checks
# ---------------------------------------------------------------------------

def _level_groups(d: MomentData):
    """Integer label per row identifying the distinct instrument rows."""
    rows = np.ascontiguousarray(d.s)
    keys = rows.view(np.dtype((np.void, rows.dtype.itemsize * rows.shape[1]))).reshape(-1)
    _, labels = np.unique(keys, return_inverse=True)
    return labels.reshape(-1)


def check_instrument(d: MomentData) -> None:
    """E(X | Z) must vary across instrument levels."""
    labels = _level_groups(d)
    if labels.max(initial=0) < 1:
        raise DegenerateInstrument("the instrument takes a single value")
    means = np.bincount(labels, weights=d.x) / np.bincount(labels)
    if np.ptp(means) <= 1e-12 * max(1.0, float(np.max(np.abs(means)))):
        raise DegenerateInstrument("E(X|Z) is constant across instrument levels")


def check_saturation(d: MomentData) -> None:
    """Every (X, Z) cell must be populated for the saturated association model."""
    labels = _level_groups(d)
    binary_x = bool(np.all((d.x == 0.0) | (d.x == 1.0)))
    if binary_x:
        cells = []
        for lab in range(labels.max() + 1):
            for xv in (0.0, 1.0):
                if not np.any((labels == lab) & (d.x == xv)):
                    cells.append((f"instrument row {d.s[labels == lab][0].tolist()}", int(xv)))
        if cells:
            raise SaturationFailure(f"empty (X, Z) cells in the saturated association model: {cells}",
                                    cells=cells)
    if np.linalg.matrix_rank(d.r) < d.r.shape[1]:
        raise SaturationFailure("association regressors are rank deficient")


def _require_binary_outcome(d: MomentData):
    if not np.all((d.y == 0.0) | (d.y == 1.0)):
        raise ValueError("logistic structural mean models require a binary outcome")


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _as_moment_data(data, spec=None) -> MomentData:
    if isinstance(data, MomentData):
        return data
    if isinstance(data, Dataset):
        return MomentData.from_dataset(data, spec)
    raise TypeError("expected a Dataset or MomentData")


def _resolve(model, d):
    if isinstance(model, str):
        model = build_model(model, d)
    if model.over_id_df < 0:
        raise DegenerateInstrument(f"model {model.name} has more parameters than moments")
    return model


def _precheck(model, d):
    if model.name.startswith("logistic"):
        _require_binary_outcome(d)
        check_saturation(d)
    check_instrument(d)


def _finish(fit: GmmFit, strict: bool) -> GmmFit:
    if strict and not fit.converged:
        raise NotConverged(f"{fit.model}: no convergence after {fit.iterations} iterations", fit=fit)
    return fit


def fit_one_step(model, data, theta0=None, spec: Optional[InstrumentSpec] = None,
                 weight=None, strict: bool = False) -> GmmFit:
    """One-step GMM with the instrument cross-product weight matrix.

    Covariance is the sandwich formula with C and Omega evaluated at the
    solution.
    """
    d = _as_moment_data(data, spec)
    model = _resolve(model, d)
    _precheck(model, d)
    w = model.initial_weight(d) if weight is None else np.asarray(weight, float)
    _check_weight(w, "one-step weight matrix")
    theta0 = default_start(model, d) if theta0 is None else np.asarray(theta0, float)
    theta, conv, its, obj = _gauss_newton(model, d, theta0, w)
    jac = model.mean_jacobian(theta, d)
    omega = outer_product(model, d, theta)
    cov = sandwich_covariance(jac, w, omega, d.n)
    fit = GmmFit(model.name, model.param_names, theta, cov, d.n, 1, conv, its, obj, w,
                 model.moment_dim, J_df=model.over_id_df)
    return _finish(fit, strict)


def fit_two_step(model, data, theta0=None, spec: Optional[InstrumentSpec] = None,
                 strict: bool = False) -> GmmFit:
    """Two-step efficient GMM with Hansen's J statistic for over-identified models."""
    d = _as_moment_data(data, spec)
    model = _resolve(model, d)
    first = fit_one_step(model, d, theta0)
    w2 = outer_product(model, d, first.theta)
    _check_weight(w2, "two-step weight matrix")
    theta, conv, its, obj = _gauss_newton(model, d, first.theta, w2)
    jac = model.mean_jacobian(theta, d)
    cov = efficient_covariance(jac, w2, d.n)
    fit = GmmFit(model.name, model.param_names, theta, cov, d.n, 2, conv and first.converged,
                 first.iterations + its, obj, w2, model.moment_dim, J_df=model.over_id_df,
                 first_step=first)
    if model.over_id_df > 0:
        fit.J = d.n * obj
        fit.J_pvalue = chisq_survival(fit.J, model.over_id_df)
    return _finish(fit, strict)


def fit(model, data, steps: int = 2, **kwargs) -> GmmFit:
    if steps == 1:
        return fit_one_step(model, data, **kwargs)
    if steps == 2:
        return fit_two_step(model, data, **kwargs)
    raise ValueError("steps must be 1 or 2")


def hansen_j(fit: GmmFit, model, data, spec=None):
    """Recompute J = n gbar(theta_2)' W_n(theta_1)^-1 gbar(theta_2).

    Returns (J, df, p-value).
    """
    d = _as_moment_data(data, spec)
    model = _resolve(model, d)
    if model.over_id_df < 1:
        raise NotOverIdentified(f"{model.name} is just identified; the J test is not defined")
    if fit.steps != 2:
        raise ValueError("the J test requires a two-step fit")
    j = d.n * gmm_objective(model, d, fit.theta, fit.weight)
    return j, model.over_id_df, chisq_survival(j, model.over_id_df)


def fit_2sls_additive(data, spec=None) -> GmmFit:
    """Closed-form two-stage least squares for the additive SMM.

    Identical to one-step additive GMM; the covariance is the same sandwich.
    """
    d = _as_moment_data(data, spec)
    check_instrument(d)
    model = build_model("additive", d)
    psi, alpha = _tsls(d)
    theta = np.array([psi, alpha])
    w = model.initial_weight(d)
    _check_weight(w, "instrument cross-product matrix")
    jac = model.mean_jacobian(theta, d)
    cov = sandwich_covariance(jac, w, outer_product(model, d, theta), d.n)
    obj = gmm_objective(model, d, theta, w)
    return GmmFit("additive", model.param_names, theta, cov, d.n, 1, True, 0, obj, w,
                  model.moment_dim, J_df=model.over_id_df, extras={"estimator": "2sls"})


# ---------------------------------------------------------------------------
# two-stage GMM for the double-logistic SMM
# ---------------------------------------------------------------------------

def omega_star(model: LogisticPlugin, d: MomentData, theta, beta_cov) -> np.ndarray:
    """Moment covariance corrected for first-stage estimation of beta.

    n Omega* = sum g g' + Gb V Gb' + Gb V (sum Q R g') + (sum Q g R') V Gb'
    with Gb = sum dg_i/dbeta', V the association-model covariance and
    Q = Y - p_hat.
    """
    g = model.moments(theta, d)
    db = model.beta_jacobian(theta, d)
    gb = d.s.T @ db
    q = d.y - expit(d.r @ d.beta)
    cross = (d.r * q[:, None]).T @ g
    total = (g.T @ g + gb @ beta_cov @ gb.T + gb @ beta_cov @ cross
             + cross.T @ beta_cov @ gb.T)
    return symmetrize(total / d.n)


def fit_2sgmm_logistic(data, steps: int = 2, spec=None, strict: bool = False) -> GmmFit:
    """Two-stage GMM: logistic association model by maximum likelihood, then
    GMM on the causal moments with beta held at its estimate.

    The covariance uses the corrected Omega*; the two-step weight is Omega*
    at the one-step solution, which also validates the J test. The naive
    covariance that ignores first-stage error is kept in ``extras``.
    """
    d = _as_moment_data(data, spec)
    _require_binary_outcome(d)
    check_saturation(d)
    check_instrument(d)
    beta, vbeta = logistic_mle(d.r, d.y)
    db = d.with_beta(beta)
    model = build_model("logistic_plugin", db)
    w1 = model.initial_weight(db)
    _check_weight(w1, "one-step weight matrix")
    theta, conv, its, obj = _gauss_newton(model, db, default_start(model, db), w1)
    jac = model.mean_jacobian(theta, db)
    om = omega_star(model, db, theta, vbeta)
    naive = sandwich_covariance(jac, w1, outer_product(model, db, theta), d.n)
    cov1 = sandwich_covariance(jac, w1, om, d.n)
    first = GmmFit("logistic_2sgmm", model.param_names, theta, cov1, d.n, 1, conv, its, obj, w1,
                   model.moment_dim, J_df=model.over_id_df,
                   extras={"beta": beta, "beta_cov": vbeta, "naive_covariance": naive,
                           "naive_note": INCORRECT_SE_NOTE})
    if steps == 1:
        return _finish(first, strict)
    _check_weight(om, "Omega* weight matrix")
    theta2, conv2, its2, obj2 = _gauss_newton(model, db, theta, om)
    jac2 = model.mean_jacobian(theta2, db)
    cov2 = efficient_covariance(jac2, om, d.n)
    naive2 = efficient_covariance(jac2, outer_product(model, db, theta2), d.n)
    fit2 = GmmFit("logistic_2sgmm", model.param_names, theta2, cov2, d.n, 2, conv and conv2,
                  its + its2, obj2, om, model.moment_dim, J_df=model.over_id_df, first_step=first,
                  extras={"beta": beta, "beta_cov": vbeta, "naive_covariance": naive2,
                          "naive_note": INCORRECT_SE_NOTE})
    if model.over_id_df > 0:
        fit2.J = d.n * obj2
        fit2.J_pvalue = chisq_survival(fit2.J, model.over_id_df)
    return _finish(fit2, strict)


def fit_logistic_plugin(data, steps: int = 2, spec=None, strict: bool = False) -> GmmFit:
    """Plug-in logistic SMM ignoring first-stage error; flagged accordingly."""
    d = _as_moment_data(data, spec)
    _require_binary_outcome(d)
    check_saturation(d)
    beta, _ = logistic_mle(d.r, d.y)
    res = fit(build_model("logistic_plugin", d.with_beta(beta)), d.with_beta(beta), steps=steps,
              strict=strict)
    res.se_note = INCORRECT_SE_NOTE
    res.extras["beta"] = beta
    return res


# ---------------------------------------------------------------------------
# structural parameters and instrument combination
# ---------------------------------------------------------------------------

def structural_params(fit: GmmFit) -> tuple:
    """(psi0, alpha0) on the natural scale for any fitted model."""
    psi = fit["psi0"]
    if "alpha0" in fit.param_names:
        return psi, fit["alpha0"]
    if "alpha0_star" in fit.param_names:
        return psi, float(np.exp(fit["alpha0_star"]))
    return psi, None


@dataclass
class EfficientCombination:
    """How GMM combines the instruments.

    ``b_matrix`` stacks b_i' per row; ``projection`` is the least-squares
    projection of B on S (one-step combination); ``two_step_projection``
    re-weights the level means of B by the inverse level means of nu^2, which
    estimates the optimal instrument. ``labels`` maps each row to its entry
    of ``per_level_variance``.
    """

    b_matrix: np.ndarray
    projection: np.ndarray
    coefficients: np.ndarray
    per_level_variance: np.ndarray
    two_step_projection: np.ndarray
    residual: np.ndarray
    labels: np.ndarray


def efficient_combination(kind: str, data, fit: GmmFit, spec=None) -> EfficientCombination:
    """Instrument combination implied by one- and two-step GMM.

    ``kind`` is ``"mult"`` (b_i = (1, Y X exp(-X psi0))) or ``"logistic"``
    (b_i = (1, q (1 - q) X) with q = expit(R'beta - psi0 X)).
    """
    d = _as_moment_data(data, spec)
    psi, alpha = structural_params(fit)
    if kind == "mult":
        h = d.y * np.exp(-d.x * psi)
        b2 = h * d.x
        nu = h - alpha
    elif kind == "logistic":
        beta = fit.extras.get("beta")
        if beta is None:
            k = d.r.shape[1]
            beta = fit.theta[:k]
        q = expit(d.r @ beta - psi * d.x)
        b2 = q * (1.0 - q) * d.x
        nu = q - alpha
    else:
        raise ValueError("kind must be 'mult' or 'logistic'")
    b = np.column_stack([np.ones(d.n), b2])
    coef, *_ = np.linalg.lstsq(d.s, b, rcond=None)
    proj = d.s @ coef
    labels = _level_groups(d)
    counts = np.bincount(labels)
    nu2 = np.bincount(labels, weights=nu ** 2) / counts
    bmeans = np.column_stack([np.bincount(labels, weights=b[:, j]) / counts for j in range(2)])
    two = bmeans[labels] / nu2[labels][:, None]
    return EfficientCombination(b, proj, coef, nu2, two, nu, labels)


# ---------------------------------------------------------------------------
# named estimators (command line names)
# ---------------------------------------------------------------------------

ESTIMATOR_MODELS = {
    "additive": "additive",
    "mult": "mult_mmom0",
    "mult-log": "mult_mmom1",
    "mult-ratio": "mult_mmomc",
    "logistic": "logistic_joint",
    "logistic-2sgmm": "logistic_2sgmm",
}

_EXPANDED = {"additive": "additive_expanded", "mult": "mult_expanded", "mult-log": "mult_expanded",
             "mult-ratio": "mult_expanded", "logistic": "logistic_expanded"}


def model_for(name: str, expanded: bool = False) -> str:
    """Internal moment-model name for a command line estimator name."""
    if name not in ESTIMATOR_MODELS:
        raise ValueError(f"unknown estimator {name!r}; expected one of {sorted(ESTIMATOR_MODELS)}")
    if expanded:
        if name not in _EXPANDED:
            raise ValueError(f"estimator {name!r} has no expanded-moment form")
        return _EXPANDED[name]
    return ESTIMATOR_MODELS[name]


def fit_named(name: str, ds: Dataset, steps: int = 2, expanded: bool = False,
              encode: str = "indicators", strict: bool = False) -> GmmFit:
    """Fit estimator ``name`` (``additive``, ``mult``, ``mult-log``,
    ``mult-ratio``, ``logistic``, ``logistic-2sgmm``) to a dataset."""
    from .data import ORTHOGONAL_INDICATORS, RAW_MULTIVALUED
    mode = {"indicators": ORTHOGONAL_INDICATORS, "raw": RAW_MULTIVALUED}.get(encode)
    if mode is None:
        raise ValueError("encode must be 'indicators' or 'raw'")
    d = MomentData.from_dataset(ds, InstrumentSpec.for_dataset(ds, mode))
    internal = model_for(name, expanded)
    if internal == "logistic_2sgmm":
        return fit_2sgmm_logistic(d, steps=steps, strict=strict)
    return fit(internal, d, steps=steps, strict=strict)
