"""Command line driver: ``smmgmm fit``, ``smmgmm simulate``, ``smmgmm decompose``.

Exit codes: 0 success, 2 data or usage error, 3 degenerate instrument,
4 non-convergence or other numerical failure, 5 singular weight matrix.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from typing import Optional

import numpy as np

from . import __version__
from .data import collapse_equivalent_levels, ingest_csv, write_csv
from .errors import DataError, InvalidDesign, NotConverged, SmmError
from .estimator import ESTIMATOR_MODELS, GmmFit, fit_named
from .late import decompose
from .simulate import (PERTURBATIONS, EstimatorSpec, design_by_name, draw, load_config,
                       probit_population_quantities, run_replications, verify_design)
from .numerics import RngStream

SCHEMA = 1
MODELS = tuple(ESTIMATOR_MODELS)


class _Parser(argparse.ArgumentParser):
    """Argument parser whose errors are a single stderr line with exit code 2."""

    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def fit_report(res: GmmFit, name: str, args=None, ds=None, merge=None) -> dict:
    """JSON-ready description of a fit."""
    se = res.standard_errors
    ci = res.conf_intervals_95
    params = [{"name": p, "estimate": _num(t), "se": _num(s), "ci95": [_num(lo), _num(hi)]}
              for p, t, s, (lo, hi) in zip(res.param_names, res.theta, se, ci)]
    exp_rows = []
    if name != "additive":
        for p, t, (lo, hi) in zip(res.param_names, res.theta, ci):
            if p in ("psi0", "alpha0_star"):
                label = "exp(psi0)" if p == "psi0" else "alpha0 = exp(alpha0_star)"
                exp_rows.append({"name": label, "estimate": _num(math.exp(t)),
                                 "ci95": [_num(math.exp(lo)), _num(math.exp(hi))]})
    report = {
        "schema": SCHEMA,
        "kind": "fit",
        "model": name,
        "moment_model": res.model,
        "steps": res.steps,
        "parameters": params,
        "exponentiated": exp_rows,
        "J": {"statistic": _num(res.J), "df": res.J_df if res.J is not None else None,
              "pvalue": _num(res.J_pvalue)},
        "convergence": {"converged": bool(res.converged), "iterations": int(res.iterations),
                        "objective": _num(res.objective)},
        "se_note": res.se_note,
    }
    if "naive_covariance" in res.extras:
        naive = np.sqrt(np.clip(np.diag(res.extras["naive_covariance"]), 0, None))
        report["naive_se"] = {"note": res.extras.get("naive_note"),
                              "se": {p: _num(v) for p, v in zip(res.param_names, naive)}}
    if ds is not None:
        report["input"] = {
            "file": ds.source,
            "columns": {"outcome": args.outcome, "exposure": args.exposure,
                        "instrument": args.instrument},
            "n": ds.n,
            "dropped_rows": ds.dropped,
            "levels": list(ds.levels),
            "encode": args.encode,
            "expanded": bool(args.expanded),
        }
        if merge is not None:
            report["input"]["level_merge"] = {str(k): v for k, v in merge.mapping.items()}
    return report


def _derived_alpha(res: GmmFit, ds, name):
    """Descriptive E(Y0) estimate: sample mean of the exposure-free transform."""
    psi = res.psi0
    if name == "additive":
        return float(np.mean(ds.y - psi * ds.x))
    if name.startswith("mult"):
        return float(np.mean(ds.y * np.exp(-psi * ds.x)))
    return None


def _print_fit(rep: dict, out=None):
    out = sys.stdout if out is None else out
    print(f"model: {rep['model']} ({rep['moment_model']}, {rep['steps']}-step)", file=out)
    if "input" in rep:
        inp = rep["input"]
        print(f"data: {inp['file']}  n={inp['n']}  dropped={inp['dropped_rows']}  "
              f"levels={inp['levels']}", file=out)
    print(f"{'parameter':<26}{'estimate':>12}{'se':>12}{'95% CI':>28}", file=out)
    for p in rep["parameters"]:
        lo, hi = p["ci95"]
        print(f"{p['name']:<26}{p['estimate']:>12.6f}{p['se']:>12.6f}"
              f"   [{lo:>10.6f}, {hi:>10.6f}]", file=out)
    for p in rep["exponentiated"]:
        lo, hi = p["ci95"]
        print(f"{p['name']:<26}{p['estimate']:>12.6f}{'':>12}   [{lo:>10.6f}, {hi:>10.6f}]",
              file=out)
    if "derived_alpha0" in rep:
        print(f"{'alpha0 (derived mean of h*)':<26}{rep['derived_alpha0']:>12.6f}", file=out)
    j = rep["J"]
    if j["statistic"] is None:
        print("Hansen J: not available (just identified or one-step fit)", file=out)
    else:
        print(f"Hansen J: {j['statistic']:.4f}  df={j['df']}  p={j['pvalue']:.4f}", file=out)
    conv = rep["convergence"]
    print(f"converged: {conv['converged']}  iterations: {conv['iterations']}", file=out)
    if rep.get("se_note"):
        print(f"note: {rep['se_note']}", file=out)
    if "naive_se" in rep:
        naive = "  ".join(f"{k}={v:.6f}" for k, v in rep["naive_se"]["se"].items())
        print(f"note: uncorrected standard errors ({rep['naive_se']['note']}): {naive}", file=out)


def _emit_json(payload: dict, path: Optional[str]):
    text = json.dumps(payload, indent=2)
    if path == "-":
        sys.stdout.write(text + "\n")
    elif path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load(args):
    ds = ingest_csv(args.data, args.outcome, args.exposure, args.instrument)
    merge = None
    if getattr(args, "collapse_tol", None) is not None:
        xbar = np.bincount(ds.z, weights=ds.x, minlength=ds.n_levels) / np.maximum(
            ds.level_counts, 1)
        ds, merge = collapse_equivalent_levels(ds, xbar[ds.z], tol=args.collapse_tol)
    return ds, merge


def cmd_fit(args) -> int:
    ds, merge = _load(args)
    if args.model.startswith("logistic") and not ds.is_binary("y"):
        raise DataError(f"--model {args.model} requires a binary outcome; "
                        f"column {args.outcome!r} has other values")
    res = fit_named(args.model, ds, steps=args.steps, expanded=args.expanded, encode=args.encode)
    rep = fit_report(res, args.model, args, ds, merge)
    if args.expanded:
        alpha = _derived_alpha(res, ds, args.model)
        if alpha is not None:
            rep["derived_alpha0"] = alpha
    if args.json != "-":
        _print_fit(rep)
    _emit_json(rep, args.json)
    if not res.converged:
        raise NotConverged(f"{args.model}: optimiser did not converge in {res.iterations} iterations")
    return 0


def _parse_kv(items, what):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidDesign(f"{what} expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise InvalidDesign(f"{what} value for {k!r} is not numeric: {v!r}") from None
    return out


def cmd_simulate(args) -> int:
    run = {}
    if args.config:
        design, run = load_config(args.config)
    else:
        design = design_by_name(args.design)
    overrides = _parse_kv(args.perturb, "--perturb")
    for k in overrides:
        if k not in PERTURBATIONS:
            raise InvalidDesign(f"unknown perturbation {k!r}; expected one of {PERTURBATIONS}")
    sets = _parse_kv(args.set, "--set")
    if sets:
        beta = list(design.beta)
        for k, v in sets.items():
            if k.startswith("beta") and k[4:].isdigit() and int(k[4:]) < len(beta):
                beta[int(k[4:])] = v
            elif k in ("psi0", "p10", "x_slope", "b0", "b1", "rho", "alpha0", "confounding"):
                overrides[k] = v
            else:
                raise InvalidDesign(f"--set: unknown design parameter {k!r}")
        if beta:
            overrides["beta"] = tuple(beta)
    n = args.n if args.n is not None else run.get("n")
    if n is not None:
        overrides["n"] = int(n)
    if overrides:
        design = design.with_overrides(**overrides)

    if args.population:
        return _population(design, args)
    if args.write_data:
        ds = draw(design, RngStream(args.seed if args.seed is not None else run.get("seed", 0), 0))
        write_csv(ds, args.write_data)
        print(f"wrote {ds.n} rows to {args.write_data}")
        return 0

    reps = args.reps if args.reps is not None else run.get("reps", 100)
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    if reps < 1:
        raise InvalidDesign("--reps must be at least 1")
    if seed < 0:
        raise InvalidDesign("--seed must be non-negative")
    est = EstimatorSpec(args.estimator or run.get("estimator", "mult-ratio"),
                        args.steps or run.get("steps", 2),
                        args.expanded or run.get("expanded", False),
                        run.get("encode", "indicators"))
    if not est.is_decomposition:
        from .estimator import model_for
        model_for(est.name, est.expanded)
    workers = args.workers or run.get("workers", 1)
    summary = run_replications(design, est, reps, master_seed=seed, workers=workers)
    payload = {"schema": SCHEMA, "kind": "simulation"}
    payload.update(summary.to_dict())
    if design.perturbed:
        payload["perturbation"] = {p: getattr(design, p) for p in PERTURBATIONS
                                   if getattr(design, p) != 0.0}
    if args.json != "-":
        _print_summary(payload)
    _emit_json(payload, args.json)
    return 0


def _population(design, args) -> int:
    if design.kind == "probit_late":
        pop = probit_population_quantities(design)
        k = len(pop.lrr)
        payload = {"schema": SCHEMA, "kind": "population", "design": design.kind,
                   "lrr": {f"lrr_{j + 1}_{j}": float(v) for j, v in enumerate(pop.lrr)},
                   "tau": {f"tau_{j + 1}": float(v) for j, v in enumerate(pop.tau)},
                   "weighted_average": pop.weighted_average}
        if args.json != "-":
            print("population local risk ratios: "
                  + "  ".join(f"LRR{j + 1},{j}={pop.lrr[j]:.4f}" for j in range(k)))
            print("tau weights: " + "  ".join(f"{v:.4f}" for v in pop.tau))
            print(f"weighted average: {pop.weighted_average:.4f}")
    else:
        chk = verify_design(design)
        payload = {"schema": SCHEMA, "kind": "population", "design": design.kind,
                   "EY0_by_level": chk.ey0_by_level.tolist(), "EY": chk.ey,
                   "alpha0": chk.alpha0, "cmi_holds": chk.cmi_holds}
        if args.json != "-":
            print("E(Y0|Z=l): " + "  ".join(f"{v:.5f}" for v in chk.ey0_by_level))
            print(f"E(Y) = {chk.ey:.5f}   alpha0 = {chk.alpha0:.5f}   CMI holds: {chk.cmi_holds}")
    _emit_json(payload, args.json)
    return 0


def _print_summary(p: dict):
    print(f"design: {p['design']}  estimator: {p['estimator']}  n={p['n']}  reps={p['reps']}  "
          f"seed={p['seed']}")
    print(f"{'parameter':<18}{'mean':>12}{'sd':>12}{'mean se':>12}")
    for k, m in p["mean"].items():
        sd = p["sd"][k] if p["sd"] else float("nan")
        se = p["mean_se"][k] if p["mean_se"] else float("nan")
        print(f"{k:<18}{m:>12.4f}{sd:>12.4f}{se:>12.4f}")
    if p["J_mean"] is not None:
        jv = p["J_var"] if p["J_var"] is not None else float("nan")
        print(f"Hansen J mean {p['J_mean']:.4f} (variance {jv:.4f}); "
              f"rejection at 5%: {p['J_rejection_5']:.4f}")
    if p["n_failed"]:
        print(f"failed replications: {p['n_failed']} {p['failures']}"
              + ("  [UNRELIABLE: more than 1% failed]" if p["unreliable"] else ""))


def cmd_decompose(args) -> int:
    ds, merge = _load(args)
    dec = decompose(ds, args.form)
    payload = {"schema": SCHEMA, "kind": "decomposition"}
    payload.update(dec.to_dict())
    payload["input"] = {"file": ds.source, "n": ds.n, "dropped_rows": ds.dropped}
    if merge is not None:
        payload["input"]["level_merge"] = {str(k): v for k, v in merge.mapping.items()}
    if args.json != "-":
        lab = {"late": "Wald", "lrr": "LRR", "ilrr": "ILRR"}[args.form]
        wlab = {"late": "mu", "lrr": "tau", "ilrr": "mu"}[args.form]
        lv = dec.levels
        print(f"form: {args.form}  levels (ordered by E(X|Z)): {list(lv)}")
        print(f"{'increment':<16}{lab:>12}{wlab:>12}")
        for j, (e, w) in enumerate(zip(dec.adjacent_estimates, dec.weights)):
            print(f"{f'{lv[j + 1]} vs {lv[j]}':<16}{e:>12.4f}{w:>12.4f}")
        print(f"weighted average: {dec.weighted_average:.4f}")
        print(f"monotonicity ok: {dec.monotonicity_ok}  weights in [0,1]: {dec.weights_valid}")
    _emit_json(payload, args.json)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--outcome", required=True)
    p.add_argument("--exposure", required=True)
    p.add_argument("--instrument", required=True)
    p.add_argument("--collapse-tol", type=float, default=None,
                   help="merge instrument levels whose E(X|Z) agree within this relative tolerance")
    p.add_argument("--json", metavar="PATH", help="write the JSON report to PATH ('-' for stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smmgmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pf = sub.add_parser("fit", help="estimate a structural mean model from a CSV file")
    _data_args(pf)
    pf.add_argument("--model", required=True, choices=MODELS)
    pf.add_argument("--steps", type=int, choices=(1, 2), default=2)
    pf.add_argument("--expanded", action="store_true",
                    help="stack moments with estimated instrument means")
    pf.add_argument("--encode", choices=("indicators", "raw"), default="indicators")
    pf.set_defaults(func=cmd_fit)

    ps = sub.add_parser("simulate", help="Monte Carlo replications of a simulation design")
    ps.add_argument("--design", choices=("m1", "m2", "probit-late"), default="m1")
    ps.add_argument("--config", help="key = value design file")
    ps.add_argument("--n", type=int)
    ps.add_argument("--reps", type=int)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--estimator", choices=MODELS + ("lrr", "ilrr", "late"))
    ps.add_argument("--steps", type=int, choices=(1, 2))
    ps.add_argument("--expanded", action="store_true")
    ps.add_argument("--perturb", action="append", metavar="K=V",
                    help=f"invalid-instrument perturbation, K in {', '.join(PERTURBATIONS)}")
    ps.add_argument("--set", action="append", metavar="K=V",
                    help="override a design coefficient (beta0..beta5, psi0, p10, rho, ...)")
    ps.add_argument("--population", action="store_true",
                    help="print population quantities instead of simulating")
    ps.add_argument("--workers", type=int, default=None)
    ps.add_argument("--write-data", metavar="PATH",
                    help="write one simulated dataset (stream 0) as CSV and exit")
    ps.add_argument("--json", metavar="PATH")
    ps.set_defaults(func=cmd_simulate)

    pd = sub.add_parser("decompose", help="LATE / local risk ratio decompositions")
    _data_args(pd)
    pd.add_argument("--form", choices=("late", "lrr", "ilrr"), default="late")
    pd.set_defaults(func=cmd_decompose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SmmError as exc:
        code = exc.exit_code
        msg = str(exc)
    except (ValueError, OSError) as exc:
        code = 2
        msg = str(exc)
    sys.stderr.write(f"smmgmm: error: {' '.join(msg.split())}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
