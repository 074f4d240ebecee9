"""Local average treatment effect and local risk ratio decompositions.

All three forms are instances of one identity. For a linear IV estimator of
an "outcome" O on a "treatment" A instrumented by the level means of B,

    Cov(O, B) / Cov(A, B) = sum_k w_k (dO_k / dA_k),
    w_k = dA_k sum_{l>=k} (B_l - B_bar) pi_l / sum_l A_l (B_l - B_bar) pi_l,

where d denotes the increment between adjacent levels ordered by E(X|Z).
The LATE form uses O=Y, A=B=X; the inverse risk ratio form uses O=Y(X-1),
A=B=YX; the risk ratio form uses O=YX, A=Y(X-1), B=YX.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import DataError, DegenerateIncrement

TIE_TOL = 1e-12


@dataclass
class LevelStats:
    """Empirical level shares and conditional means, sorted by E(X|Z)."""

    levels: tuple
    pi: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    eyx: np.ndarray
    eyxm1: np.ndarray


@dataclass
class LateDecomposition:
    form: str
    levels: tuple
    adjacent_estimates: np.ndarray
    weights: np.ndarray
    weighted_average: float
    level_probs: np.ndarray
    monotonicity_ok: bool
    weights_valid: bool
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "levels": list(self.levels),
            "adjacent_estimates": self.adjacent_estimates.tolist(),
            "weights": self.weights.tolist(),
            "weighted_average": self.weighted_average,
            "level_probs": self.level_probs.tolist(),
            "monotonicity_ok": self.monotonicity_ok,
            "weights_valid": self.weights_valid,
            "flags": dict(self.flags),
        }


def level_stats(ds: Dataset) -> LevelStats:
    """Level statistics with levels re-sorted so that E(X|Z=k) increases.

    Raises
    ------
    DegenerateIncrement
        If two levels have E(X|Z) within 1e-12 of each other.
    """
    counts = np.bincount(ds.z, minlength=ds.n_levels).astype(float)
    present = np.flatnonzero(counts > 0)
    if present.size < 2:
        raise DegenerateIncrement("at least two populated instrument levels are required", index=0)
    counts = counts[present]

    def cmean(v):
        return np.bincount(ds.z, weights=v, minlength=ds.n_levels)[present] / counts

    ex = cmean(ds.x)
    order = np.argsort(ex, kind="stable")
    gaps = np.diff(ex[order])
    tie = np.flatnonzero(gaps < TIE_TOL)
    if tie.size:
        raise DegenerateIncrement(
            f"E(X|Z) ties between adjacent levels (increment {int(tie[0]) + 1})", index=int(tie[0]) + 1)
    ey = cmean(ds.y)
    eyx = cmean(ds.y * ds.x)
    eyxm1 = cmean(ds.y * (ds.x - 1.0))
    pi = counts / counts.sum()
    return LevelStats(tuple(ds.levels[present[i]] for i in order), pi[order], ex[order], ey[order],
                      eyx[order], eyxm1[order])


def increment_weights(a, b, pi):
    """w_k = dA_k sum_{l>=k} (B_l - B_bar) pi_l / sum_l A_l (B_l - B_bar) pi_l."""
    bbar = float(np.sum(b * pi))
    centred = (b - bbar) * pi
    tail = np.cumsum(centred[::-1])[::-1][1:]
    denom = float(np.sum(a * centred))
    return np.diff(a) * tail / denom


def _ratios(num, den, what):
    dn = np.diff(num)
    dd = np.diff(den)
    bad = np.flatnonzero(np.abs(dd) < TIE_TOL)
    if bad.size:
        raise DegenerateIncrement(f"zero increment in {what} between levels {int(bad[0])} and "
                                  f"{int(bad[0]) + 1}", index=int(bad[0]) + 1)
    return dn / dd


def adjacent_wald(ds: Dataset) -> np.ndarray:
    """Wald ratios beta_{k,k-1} between adjacent levels ordered by E(X|Z)."""
    st = level_stats(ds)
    return _ratios(st.ey, st.ex, "E(X|Z)")


def mu_weights(ds: Dataset) -> np.ndarray:
    """Weights expressing 2SLS as an average of adjacent Wald ratios."""
    st = level_stats(ds)
    return increment_weights(st.ex, st.ex, st.pi)


def lambda_weights(ds: Dataset) -> np.ndarray:
    """Weights on Wald ratios against the lowest level, beta_{k,0}."""
    st = level_stats(ds)
    ebar = float(np.sum(st.ex * st.pi))
    denom = float(np.sum(st.ex * (st.ex - ebar) * st.pi))
    return ((st.ex[1:] - st.ex[0]) * (st.ex[1:] - ebar) * st.pi[1:]) / denom


def wald_vs_reference(ds: Dataset) -> np.ndarray:
    """beta_{k,0} for k = 1..K-1 in E(X|Z) order."""
    st = level_stats(ds)
    return (st.ey[1:] - st.ey[0]) / (st.ex[1:] - st.ex[0])


def late_decomposition(ds: Dataset) -> LateDecomposition:
    st = level_stats(ds)
    est = _ratios(st.ey, st.ex, "E(X|Z)")
    w = increment_weights(st.ex, st.ex, st.pi)
    ebar = float(np.sum(st.ex * st.pi))
    lam = lambda_weights(ds)
    flags = {
        "mu_in_unit_interval": bool(np.all((w >= 0) & (w <= 1))),
        "lambda_weights": lam.tolist(),
        "lambda_in_unit_interval": bool(np.all((lam >= 0) & (lam <= 1))),
        "lambda_condition_EX1_gt_EX": bool(st.ex[1] > ebar),
    }
    return LateDecomposition("late", st.levels, est, w, float(np.sum(w * est)), st.pi,
                             bool(np.all(np.diff(st.ex) > 0)), flags["mu_in_unit_interval"], flags)


def _require_binary(ds: Dataset):
    if not (ds.is_binary("x") and ds.is_binary("y")):
        raise DataError("risk ratio decompositions require binary exposure and outcome")


def ilrr_decomposition(ds: Dataset) -> LateDecomposition:
    """Inverse local risk ratios with mu weights on the YX scale."""
    _require_binary(ds)
    st = level_stats(ds)
    est = _ratios(st.eyxm1, st.eyx, "E(YX|Z)")
    w = increment_weights(st.eyx, st.eyx, st.pi)
    inc_yx = bool(np.all(np.diff(st.eyx) > 0))
    flags = {"EYX_increasing": inc_yx,
             "weights_in_unit_interval": bool(np.all((w >= 0) & (w <= 1)))}
    return LateDecomposition("ilrr", st.levels, est, w, float(np.sum(w * est)), st.pi,
                             bool(np.all(np.diff(st.ex) > 0)) and inc_yx,
                             flags["weights_in_unit_interval"], flags)


def lrr_decomposition(ds: Dataset) -> LateDecomposition:
    """Local risk ratios with tau weights; the weighted average is what
    one-step multiplicative GMM estimates for exp(psi0)."""
    _require_binary(ds)
    st = level_stats(ds)
    est = _ratios(st.eyx, st.eyxm1, "E{Y(X-1)|Z}")
    w = increment_weights(st.eyxm1, st.eyx, st.pi)
    inc_yx = bool(np.all(np.diff(st.eyx) > 0))
    inc_yxm1 = bool(np.all(np.diff(st.eyxm1) > 0))
    flags = {"EYX_increasing": inc_yx, "EYXm1_increasing": inc_yxm1,
             "weights_in_unit_interval": bool(np.all((w >= 0) & (w <= 1)))}
    return LateDecomposition("lrr", st.levels, est, w, float(np.sum(w * est)), st.pi,
                             bool(np.all(np.diff(st.ex) > 0)) and inc_yx and inc_yxm1,
                             flags["weights_in_unit_interval"], flags)


def decompose(ds: Dataset, form: str = "late") -> LateDecomposition:
    forms = {"late": late_decomposition, "lrr": lrr_decomposition, "ilrr": ilrr_decomposition}
    if form not in forms:
        raise ValueError(f"unknown decomposition form {form!r}")
    return forms[form](ds)
