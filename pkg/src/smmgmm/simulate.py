"""Data-generating designs and the Monte Carlo replication runner.

Designs
-------
``M1``
    Binary X and Y with an exponential-mean outcome model satisfying the
    multiplicative SMM; three instrument levels.
``M2``
    As M1 with an expit outcome model satisfying the logistic SMM.
``probit_late``
    Threshold-crossing model X = I(c_Z - V > 0), Y = I(b0 + b1 X - U > 0)
    with corr(U, V) = rho and P(X=1|Z=l) = 0.1 + 0.1 l.
``generic``
    User-chosen level count for any of the three SMMs, with a binary exposure
    or (logistic only) a normal exposure.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import optimize

from .data import Dataset
from .errors import InvalidDesign, SmmError
from .late import increment_weights
from .numerics import RngStream, bivariate_normal_cdf, expit, normal_cdf, normal_quantile

KINDS = ("M1", "M2", "probit_late", "generic")
PERTURBATIONS = ("phi_on_Z1", "tau_on_Z1", "tau_on_Z2")
DECOMPOSITION_ESTIMATORS = ("lrr", "ilrr", "late")
UNRELIABLE_SHARE = 0.01


@dataclass(frozen=True)
class SimDesign:
    """A fully parameterised data-generating process.

    ``beta`` holds (beta0..beta5) of the M1/M2 outcome model
    beta0 + (beta1 + psi0) X + beta2 Z1 + beta3 Z2 + beta4 X Z1 + beta5 X Z2.
    The perturbations add to the Z1 coefficient (``phi_on_Z1``,
    ``tau_on_Z1``) or the Z2 coefficient (``tau_on_Z2``).
    """

    kind: str
    n: int = 10000
    psi0: float = 0.6
    beta: tuple = ()
    p10: float = 0.0
    x_slope: float = 0.15
    z_probs: tuple = ()
    phi_on_Z1: float = 0.0
    tau_on_Z1: float = 0.0
    tau_on_Z2: float = 0.0
    # probit_late
    b0: float = 0.0
    b1: float = 0.5
    rho: float = 0.8
    x_probs: tuple = ()
    # generic
    smm: str = "mult"
    exposure: str = "binary"
    alpha0: float = 0.2
    confounding: float = 0.1
    x_means: tuple = ()
    x_sd: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidDesign(f"unknown design kind {self.kind!r}")
        if self.n < 1:
            raise InvalidDesign("n must be positive")
        probs = np.asarray(self.z_probs, float)
        if probs.size < 2 or np.any(probs <= 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidDesign("z_probs must hold at least two positive probabilities summing to 1")
        if self.kind in ("M1", "M2") and (probs.size != 3 or len(self.beta) != 6):
            raise InvalidDesign("M1/M2 designs need three instrument levels and six coefficients")
        if self.kind == "probit_late" and len(self.x_probs) != probs.size:
            raise InvalidDesign("x_probs must give P(X=1|Z=l) for every level")
        if self.kind == "generic":
            if self.smm not in ("additive", "mult", "logistic"):
                raise InvalidDesign("smm must be additive, mult or logistic")
            if self.exposure not in ("binary", "continuous"):
                raise InvalidDesign("exposure must be binary or continuous")
            if self.exposure == "continuous" and self.smm != "logistic":
                raise InvalidDesign("continuous exposures are supported for the logistic SMM only")
            if len(self.x_means if self.exposure == "continuous" else self.x_probs) != probs.size:
                raise InvalidDesign("one exposure parameter per instrument level is required")

    @property
    def n_levels(self) -> int:
        return len(self.z_probs)

    @property
    def perturbed(self) -> bool:
        return any(getattr(self, p) != 0.0 for p in PERTURBATIONS)

    def coefficients(self) -> np.ndarray:
        """M1/M2 outcome coefficients with perturbations applied."""
        b = np.array(self.beta, float)
        b[2] += self.phi_on_Z1 + self.tau_on_Z1
        b[3] += self.tau_on_Z2
        return b

    def exposure_probs(self) -> np.ndarray:
        """P(X=1 | Z=l) for binary exposures."""
        if self.kind in ("M1", "M2"):
            return self.p10 + self.x_slope * np.arange(self.n_levels)
        return np.asarray(self.x_probs, float)

    def with_overrides(self, **kw) -> "SimDesign":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------

def m1(**overrides) -> SimDesign:
    base = dict(kind="M1", psi0=0.6, beta=(-1.6976, 0.15, -0.3186, 0.2511, 0.6, -0.6),
                p10=0.2321, z_probs=(0.5, 0.3, 0.2))
    base.update(overrides)
    return SimDesign(**base)


def m2(**overrides) -> SimDesign:
    base = dict(kind="M2", psi0=0.6, beta=(-1.518, 0.15, 0.3183, -0.5202, -0.6, 0.6),
                p10=0.4404, z_probs=(0.5, 0.3, 0.2))
    base.update(overrides)
    return SimDesign(**base)


def probit_late(**overrides) -> SimDesign:
    base = dict(kind="probit_late", n=40000, z_probs=(0.25,) * 4,
                x_probs=(0.1, 0.2, 0.3, 0.4), b0=float(normal_quantile(0.4)), b1=0.5, rho=0.8)
    base.update(overrides)
    return SimDesign(**base)


def generic(smm="mult", n_levels=4, exposure="binary", **overrides) -> SimDesign:
    """Design satisfying CMI and NEM for the chosen SMM with ``n_levels`` levels.

    For a binary exposure, E(Y0 | X=1, Z) = alpha0 + confounding and
    E(Y | X=0, Z) is set so that E(Y0 | Z) = alpha0 at every level. For a
    continuous exposure, X | Z ~ N(m_Z, x_sd^2) and
    logit E(Y0 | X, Z) = c_Z + confounding X with c_Z solved for
    E(Y0 | Z) = alpha0.
    """
    base = dict(kind="generic", smm=smm, exposure=exposure, psi0=0.5,
                z_probs=tuple([1.0 / n_levels] * n_levels))
    if exposure == "binary":
        base["x_probs"] = tuple(float(v) for v in np.linspace(0.2, 0.6, n_levels))
    else:
        base["x_means"] = tuple(float(v) for v in np.linspace(-0.5, 0.5, n_levels))
        base["confounding"] = 0.3
    base.update(overrides)
    return SimDesign(**base)


DESIGNS = {"m1": m1, "m2": m2, "probit-late": probit_late, "probit_late": probit_late}


def design_by_name(name: str, **overrides) -> SimDesign:
    key = name.lower()
    if key not in DESIGNS:
        raise InvalidDesign(f"unknown design {name!r}; expected m1, m2 or probit-late")
    return DESIGNS[key](**overrides)


# ---------------------------------------------------------------------------
# population quantities
# ---------------------------------------------------------------------------

def _link(design):
    return np.exp if design.kind == "M1" else expit


def _gh_nodes():
    return np.polynomial.hermite_e.hermegauss(80)


@lru_cache(maxsize=64)
def _continuous_intercepts(alpha0, gamma, means, sd):
    nodes, wts = _gh_nodes()
    wts = wts / wts.sum()
    out = []
    for m in means:
        xs = m + sd * nodes

        def gap(c):
            return float(np.sum(wts * expit(c + gamma * xs))) - alpha0

        out.append(optimize.brentq(gap, -50.0, 50.0, xtol=1e-14))
    return tuple(out)


def _generic_binary_cells(design):
    """(E(Y|X=0,Z), E(Y|X=1,Z)) per level for a binary-exposure generic design."""
    p = design.exposure_probs()
    b = design.alpha0 + design.confounding
    a = (design.alpha0 - p * b) / (1.0 - p)
    if design.smm == "additive":
        treated = b + design.psi0
    elif design.smm == "mult":
        treated = b * math.exp(design.psi0)
    else:
        treated = expit(math.log(b / (1.0 - b)) + design.psi0)
    return a, np.full(p.size, treated)


@dataclass
class DesignCheck:
    ey0_by_level: np.ndarray
    ey: float
    alpha0: float
    cmi_holds: bool


def verify_design(design: SimDesign, tol: float = 1e-3, strict: bool = False) -> DesignCheck:
    """Population E(Y0 | Z=l) and E(Y) implied by the design.

    With ``strict=True`` an unperturbed design whose E(Y0|Z) differs across
    levels by more than ``tol`` raises InvalidDesign.
    """
    pi = np.asarray(design.z_probs, float)
    if design.kind in ("M1", "M2"):
        b = design.coefficients()
        link = _link(design)
        z = np.arange(3)
        z1, z2 = (z == 1).astype(float), (z == 2).astype(float)
        p = design.exposure_probs()
        base = b[0] + b[2] * z1 + b[3] * z2
        treated = base + b[1] + design.psi0 + b[4] * z1 + b[5] * z2
        ey0_treated = link(treated - design.psi0)
        ey0 = p * ey0_treated + (1 - p) * link(base)
        ey = float(np.sum(pi * (p * link(treated) + (1 - p) * link(base))))
    elif design.kind == "probit_late":
        cth = normal_quantile(np.asarray(design.x_probs))
        ey = float(np.sum(pi * np.array(
            [normal_cdf(design.b0) + bivariate_normal_cdf(design.b0 + design.b1, c, design.rho)
             - bivariate_normal_cdf(design.b0, c, design.rho) for c in np.atleast_1d(cth)])))
        ey0 = np.full(pi.size, float(normal_cdf(design.b0)))
    elif design.exposure == "binary":
        a, t = _generic_binary_cells(design)
        p = design.exposure_probs()
        ey0 = p * (design.alpha0 + design.confounding) + (1 - p) * a
        ey = float(np.sum(pi * (p * t + (1 - p) * a)))
    else:
        ey0 = np.full(pi.size, design.alpha0)
        nodes, wts = _gh_nodes()
        wts = wts / wts.sum()
        cs = _continuous_intercepts(design.alpha0, design.confounding, tuple(design.x_means),
                                    design.x_sd)
        slope = design.confounding + design.psi0
        level_means = [np.sum(wts * expit(cs[l] + slope * (design.x_means[l] + design.x_sd * nodes)))
                       for l in range(pi.size)]
        ey = float(np.sum(pi * np.array(level_means)))
    alpha0 = float(np.sum(pi * ey0))
    holds = bool(np.ptp(ey0) <= tol)
    if strict and not design.perturbed and not holds:
        raise InvalidDesign(f"design coefficients violate conditional mean independence: "
                            f"E(Y0|Z) = {np.round(ey0, 5).tolist()}")
    return DesignCheck(np.asarray(ey0), ey, alpha0, holds)


def true_params(design: SimDesign) -> dict:
    """psi0 and the implied alpha0 = E(Y0) (and its log)."""
    check = verify_design(design)
    return {"psi0": design.psi0, "alpha0": check.alpha0, "alpha0_star": math.log(check.alpha0)}


@dataclass
class PopulationLrr:
    lrr: np.ndarray
    tau: np.ndarray
    weighted_average: float
    eyx: np.ndarray
    eyxm1: np.ndarray


def probit_population_quantities(design: SimDesign) -> PopulationLrr:
    """Population local risk ratios, tau weights and their weighted average
    for the probit design, from bivariate normal orthant probabilities."""
    if design.kind != "probit_late":
        raise InvalidDesign("population LRRs are defined for the probit design only")
    cth = np.atleast_1d(normal_quantile(np.asarray(design.x_probs, float)))
    pi = np.asarray(design.z_probs, float)
    eyx = np.array([bivariate_normal_cdf(design.b0 + design.b1, c, design.rho) for c in cth])
    eyxm1 = -np.array([normal_cdf(design.b0) - bivariate_normal_cdf(design.b0, c, design.rho)
                       for c in cth])
    lrr = np.diff(eyx) / np.diff(eyxm1)
    tau = increment_weights(eyxm1, eyx, pi)
    return PopulationLrr(lrr, tau, float(np.sum(tau * lrr)), eyx, eyxm1)


# ---------------------------------------------------------------------------
# drawing
# ---------------------------------------------------------------------------

def _check_means(mean, what):
    if np.any(mean <= 0.0) or np.any(mean >= 1.0):
        raise InvalidDesign(f"{what} lies outside (0, 1); adjust the design coefficients")


def draw(design: SimDesign, rng: RngStream, n: Optional[int] = None) -> Dataset:
    """One sample of size ``n`` (default ``design.n``)."""
    n = design.n if n is None else int(n)
    z = rng.categorical(design.z_probs, n)
    if design.kind in ("M1", "M2"):
        px = design.exposure_probs()
        _check_means(px, "P(X=1|Z)")
        x = rng.bernoulli(px[z])
        b = design.coefficients()
        z1, z2 = (z == 1).astype(float), (z == 2).astype(float)
        cells = np.array([[b[0] + b[2] * (l == 1) + b[3] * (l == 2) + xv * (
            b[1] + design.psi0 + b[4] * (l == 1) + b[5] * (l == 2)) for xv in (0, 1)]
            for l in range(3)])
        _check_means(_link(design)(cells), "E(Y|X,Z)")
        eta = (b[0] + (b[1] + design.psi0) * x + b[2] * z1 + b[3] * z2
               + b[4] * x * z1 + b[5] * x * z2)
        y = rng.bernoulli(_link(design)(eta))
    elif design.kind == "probit_late":
        cth = np.atleast_1d(normal_quantile(np.asarray(design.x_probs, float)))
        uv = rng.bivariate_normal(design.rho, n)
        x = (cth[z] - uv[:, 1] > 0).astype(float)
        y = (design.b0 + design.b1 * x - uv[:, 0] > 0).astype(float)
    elif design.exposure == "binary":
        px = design.exposure_probs()
        _check_means(px, "P(X=1|Z)")
        a, t = _generic_binary_cells(design)
        _check_means(np.concatenate([a, t]), "E(Y|X,Z)")
        x = rng.bernoulli(px[z])
        y = rng.bernoulli(np.where(x == 1.0, t[z], a[z]))
    else:
        means = np.asarray(design.x_means, float)
        x = means[z] + design.x_sd * rng.standard_normal(n)
        cs = np.asarray(_continuous_intercepts(design.alpha0, design.confounding,
                                               tuple(design.x_means), design.x_sd))
        y = rng.bernoulli(expit(cs[z] + (design.confounding + design.psi0) * x))
    return Dataset(y, x, z, tuple(range(design.n_levels)))


# ---------------------------------------------------------------------------
# replications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator used inside each replication.

    ``name`` is a command line estimator name or a decomposition form
    (``lrr``, ``ilrr``, ``late``).
    """

    name: str = "mult-ratio"
    steps: int = 2
    expanded: bool = False
    encode: str = "indicators"

    @property
    def is_decomposition(self) -> bool:
        return self.name in DECOMPOSITION_ESTIMATORS

    @property
    def label(self) -> str:
        if self.is_decomposition:
            return f"{self.name} decomposition"
        extra = ", expanded" if self.expanded else ""
        extra += ", raw instrument" if self.encode == "raw" else ""
        return f"{self.name} ({self.steps}-step{extra})"


@dataclass
class RepResult:
    index: int
    ok: bool
    estimates: Optional[np.ndarray] = None
    ses: Optional[np.ndarray] = None
    J: Optional[float] = None
    J_pvalue: Optional[float] = None
    param_names: tuple = ()
    failure: Optional[str] = None


def _decomposition_names(form, k):
    lab = {"lrr": "lrr", "ilrr": "ilrr", "late": "wald"}[form]
    w = {"lrr": "tau", "ilrr": "mu", "late": "mu"}[form]
    est = tuple(f"{lab}_{j + 1}_{j}" for j in range(k - 1))
    return est + tuple(f"{w}_{j + 1}" for j in range(k - 1)) + ("weighted_average",)


def run_one(design: SimDesign, estimator: EstimatorSpec, master_seed: int, index: int,
            n: Optional[int] = None) -> RepResult:
    """Draw replication ``index`` and apply the estimator."""
    from .estimator import fit_named
    from .late import decompose

    rng = RngStream(master_seed, index)
    ds = draw(design, rng, n)
    try:
        if estimator.is_decomposition:
            dec = decompose(ds, estimator.name)
            est = np.concatenate([dec.adjacent_estimates, dec.weights, [dec.weighted_average]])
            return RepResult(index, True, est, None, None, None,
                             _decomposition_names(estimator.name, design.n_levels))
        res = fit_named(estimator.name, ds, steps=estimator.steps, expanded=estimator.expanded,
                        encode=estimator.encode)
    except SmmError as exc:
        return RepResult(index, False, failure=type(exc).__name__)
    if not res.converged:
        return RepResult(index, False, failure="NotConverged")
    return RepResult(index, True, res.theta.copy(), res.standard_errors.copy(), res.J,
                     res.J_pvalue, tuple(res.param_names))


def _run_chunk(args):
    design, estimator, seed, indices, n = args
    return [run_one(design, estimator, seed, i, n) for i in indices]


@dataclass
class McSummary:
    design: str
    estimator: str
    reps: int
    n: int
    seed: int
    param_names: tuple
    mean: np.ndarray
    sd: Optional[np.ndarray]
    mean_se: Optional[np.ndarray]
    J_mean: Optional[float]
    J_var: Optional[float]
    J_rejection_5: Optional[float]
    n_failed: int
    failures: dict
    unreliable: bool
    estimates: np.ndarray = field(repr=False, default=None)

    def __getitem__(self, name):
        return float(self.mean[self.param_names.index(name)])

    def to_dict(self) -> dict:
        def vec(a):
            return None if a is None else {k: float(v) for k, v in zip(self.param_names, a)}

        return {
            "design": self.design,
            "estimator": self.estimator,
            "reps": self.reps,
            "n": self.n,
            "seed": self.seed,
            "mean": vec(self.mean),
            "sd": vec(self.sd),
            "mean_se": vec(self.mean_se),
            "J_mean": self.J_mean,
            "J_var": self.J_var,
            "J_rejection_5": self.J_rejection_5,
            "n_failed": self.n_failed,
            "failures": dict(sorted(self.failures.items())),
            "unreliable": self.unreliable,
        }


def summarize(results, design: SimDesign, estimator: EstimatorSpec, reps, n, seed) -> McSummary:
    """Aggregate replication results (in index order)."""
    results = sorted(results, key=lambda r: r.index)
    ok = [r for r in results if r.ok]
    failures = {}
    for r in results:
        if not r.ok:
            failures[r.failure] = failures.get(r.failure, 0) + 1
    n_failed = len(results) - len(ok)
    if not ok:
        raise SmmError(f"all {len(results)} replications failed: {failures}")
    est = np.vstack([r.estimates for r in ok])
    names = ok[0].param_names
    mean = est.mean(axis=0)
    sd = est.std(axis=0, ddof=1) if len(ok) > 1 else None
    ses = [r.ses for r in ok if r.ses is not None]
    mean_se = np.vstack(ses).mean(axis=0) if ses else None
    js = np.array([r.J for r in ok if r.J is not None])
    ps = np.array([r.J_pvalue for r in ok if r.J_pvalue is not None])
    return McSummary(
        design=design.kind, estimator=estimator.label, reps=reps, n=n, seed=seed,
        param_names=names, mean=mean, sd=sd, mean_se=mean_se,
        J_mean=float(js.mean()) if js.size else None,
        J_var=float(js.var(ddof=1)) if js.size > 1 else None,
        J_rejection_5=float(np.mean(ps < 0.05)) if ps.size else None,
        n_failed=n_failed, failures=failures,
        unreliable=n_failed > UNRELIABLE_SHARE * len(results), estimates=est)


def run_replications(design: SimDesign, estimator: EstimatorSpec, reps: int,
                     n: Optional[int] = None, master_seed: int = 0, workers: int = 1) -> McSummary:
    """Run ``reps`` independent replications.

    Replication i always uses ``RngStream(master_seed, i)``, so the summary is
    identical for any ``workers``.
    """
    if reps < 1:
        raise InvalidDesign("reps must be at least 1")
    n = design.n if n is None else int(n)
    if n < 1:
        raise InvalidDesign("n must be positive")
    if workers <= 1:
        results = [run_one(design, estimator, master_seed, i, n) for i in range(reps)]
    else:
        chunks = [list(range(reps))[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_run_chunk, [(design, estimator, master_seed, c, n)
                                          for c in chunks if c])
            results = [r for part in parts for r in part]
    return summarize(results, design, estimator, reps, n, master_seed)


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# key = value configuration files
# ---------------------------------------------------------------------------

_RUN_KEYS = {"reps": int, "seed": int, "estimator": str, "steps": int, "workers": int,
             "expanded": lambda v: v.lower() in ("1", "true", "yes"), "encode": str}


def _coerce(name, text):
    kinds = {f.name: f.type for f in fields(SimDesign)}
    t = kinds[name]
    if t in ("tuple", tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    if t in ("int", int):
        return int(text)
    if t in ("float", float):
        return float(text)
    return text


def parse_config(text: str):
    """Parse ``key = value`` lines into (SimDesign, run options).

    Recognised keys: ``kind`` (m1, m2, probit-late, generic), ``n``, any
    SimDesign field (tuples as comma lists), ``beta0``..``beta5`` overrides,
    ``perturbation.<name>`` and the run options reps, seed, estimator, steps,
    workers, expanded, encode. ``#`` starts a comment.
    """
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidDesign(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        pairs[key] = val
    kind = pairs.pop("kind", "m1")
    run = {}
    overrides = {}
    betas = {}
    names = {f.name for f in fields(SimDesign)}
    for key, val in pairs.items():
        try:
            if key in _RUN_KEYS:
                run[key] = _RUN_KEYS[key](val)
            elif key.startswith("perturbation."):
                p = key.split(".", 1)[1]
                if p not in PERTURBATIONS:
                    raise InvalidDesign(f"unknown perturbation {p!r}")
                overrides[p] = float(val)
            elif key.startswith("beta") and key[4:].isdigit():
                betas[int(key[4:])] = float(val)
            elif key in names and key != "kind":
                overrides[key] = _coerce(key, val)
            else:
                raise InvalidDesign(f"unknown config key {key!r}")
        except ValueError as exc:
            raise InvalidDesign(f"config key {key!r}: {exc}") from None
    if kind.lower() == "generic":
        design = generic(**overrides)
    else:
        design = design_by_name(kind, **overrides)
    if betas:
        b = list(design.beta)
        for j, v in betas.items():
            if not 0 <= j < len(b):
                raise InvalidDesign(f"beta{j} is not a coefficient of this design")
            b[j] = v
        design = replace(design, beta=tuple(b))
    return design, run


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def design_to_config(design: SimDesign, **run) -> str:
    """Serialise a design (and run options) as ``key = value`` lines."""
    lines = [f"kind = {'probit-late' if design.kind == 'probit_late' else design.kind.lower()}"]
    for f in fields(SimDesign):
        if f.name == "kind":
            continue
        v = getattr(design, f.name)
        if isinstance(v, tuple):
            if not v:
                continue
            v = ", ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        key = f"perturbation.{f.name}" if f.name in PERTURBATIONS else f.name
        lines.append(f"{key} = {v}")
    for k, v in run.items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def summary_json(summary: McSummary, extra: Optional[dict] = None) -> str:
    payload = {"schema": 1, "kind": "simulation"}
    payload.update(summary.to_dict())
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2)
