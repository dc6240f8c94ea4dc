"""Command-line front end.

Subcommands: ``fit``, ``strata``, ``diagnostics``, ``bootstrap`` and
``simulate``.  Every model command reads a CSV file, fits the requested
family and prints a text report, or a JSON document with ``--format
json``.  ``--config`` reads a flat JSON object whose keys are the long
option names (with underscores); flags given on the command line win.

Exit codes: 0 success, 1 error, 2 usage error or missing file, 3 the fit
did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import diagnostics as dg
from .bootstrap import BOOT_TYPES, BootControl, default_cores
from .families import available_families, get_family
from .fitting import FitControl
from .model_frame import read_csv
from .popsize import ModelFit, fit_model, stratify_popsize

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3
PARAMS = ("lambda", "alpha", "omega", "pi")


class UsageError(Exception):
    pass


# -- argument parsing ---------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--data", help="CSV file with one row per observed unit")
    g.add_argument("--family", help=f"family name, one of: {', '.join(available_families())}")
    g.add_argument("--lambda", dest="lambda_formula", metavar="FORMULA", help='e.g. "capture ~ gender + age"')
    g.add_argument("--omega", dest="omega_formula", metavar="FORMULA", help='e.g. "~ gender"')
    g.add_argument("--pi", dest="pi_formula", metavar="FORMULA")
    g.add_argument("--alpha-formula", dest="alpha_formula", metavar="FORMULA", help="formula for the NB dispersion")
    for param in PARAMS:
        g.add_argument(f"--{param}-link", dest=f"{param}_link", metavar="LINK")
    g.add_argument("--weights", metavar="COLUMN", help="column with prior weights")
    g.add_argument("--method", choices=("IRLS", "fallback"))
    g.add_argument("--max-iter", type=int)
    g.add_argument("--tol", type=float)
    g.add_argument("--cov", dest="cov_type", choices=("expected", "observed"))
    g.add_argument("--var", dest="var_method", choices=("analytic", "bootstrap", "skip"))
    g.add_argument("--alpha", dest="alpha", metavar="A[,A...]", help="significance level; strata accept one per stratum")
    b = p.add_argument_group("bootstrap")
    b.add_argument("--boot-type", choices=BOOT_TYPES)
    b.add_argument("--B", dest="B", type=int)
    b.add_argument("--cores", type=int, help="worker processes (default: SSCR_CORES or 1)")
    b.add_argument("--seed", type=int)


def _add_output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with default option values")
    p.add_argument("--format", choices=("text", "json"))
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sscr", description="Single-source capture-recapture population size estimation.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and estimate the population size")
    _add_model_args(p)
    _add_output_args(p)

    p = sub.add_parser("strata", help="population size by strata")
    _add_model_args(p)
    p.add_argument("--strata", help='formula such as "~ gender + age" or comma-separated variable names')
    p.add_argument("--cov-file", type=Path, help="whitespace-separated coefficient covariance to use instead")
    _add_output_args(p)

    p = sub.add_parser("diagnostics", help="goodness of fit, influence and rootogram data")
    _add_model_args(p)
    p.add_argument("--df", type=int, help="degrees of freedom of the goodness-of-fit tests")
    p.add_argument("--drop5", choices=("group", "drop", "none"))
    p.add_argument("--dfbeta-method", choices=("onestep", "exact"))
    _add_output_args(p)

    p = sub.add_parser("bootstrap", help="fit with bootstrap variance and report the replicates")
    _add_model_args(p)
    p.add_argument("--replicates", type=Path, help="CSV file for the replicate estimates")
    _add_output_args(p)

    p = sub.add_parser("simulate", help="draw counts from a family")
    p.add_argument("--family")
    p.add_argument("--n", type=int, help="number of draws")
    p.add_argument("--eta", help="linear predictor values, one per parameter, comma-separated")
    for param in PARAMS:
        p.add_argument(f"--{param}-link", dest=f"{param}_link", metavar="LINK")
    p.add_argument("--untruncated", action="store_true", default=None, help="keep zeros (and ones for zot families)")
    p.add_argument("--seed", type=int)
    _add_output_args(p)
    return parser


DEFAULTS = {
    "format": "text", "method": "IRLS", "tol": 1e-8, "cov_type": "expected", "var_method": "analytic",
    "alpha": "0.05", "boot_type": "parametric", "B": 500, "df": 1, "drop5": "group",
    "dfbeta_method": "onestep", "n": 10, "eta": "0", "untruncated": False,
}


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, fill unset options from ``--config``, then from defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    config = {}
    if getattr(args, "config", None) is not None:
        if not args.config.is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        config = json.loads(args.config.read_text())
        if not isinstance(config, dict):
            raise UsageError("the config file must hold a JSON object")
    known = set(vars(args))
    unknown = sorted(set(config) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for key in known:
        if getattr(args, key) is None:
            if key in config:
                setattr(args, key, config[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    if getattr(args, "cores", "absent") is None:
        args.cores = default_cores()
    return args


# -- model construction -------------------------------------------------------


def _alphas(text) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        return [float(a) for a in text]
    try:
        return [float(a) for a in str(text).split(",")]
    except ValueError:
        raise UsageError(f"--alpha must be a number or comma-separated numbers, got {text!r}") from None


def _family(args):
    if not args.family:
        raise UsageError("--family is required")
    links = {f"{p}_link": getattr(args, f"{p}_link") for p in PARAMS if getattr(args, f"{p}_link", None)}
    return get_family(args.family, **links)


def _formulas(args, family) -> dict[str, str]:
    out = {}
    for param in family.eta_names:
        text = getattr(args, f"{param}_formula", None)
        if text:
            out[param] = text
    extra = [p for p in PARAMS if getattr(args, f"{p}_formula", None) and p not in family.eta_names]
    if extra:
        raise UsageError(f"{family.name} has no parameter(s) {extra}; its parameters are {list(family.eta_names)}")
    if family.eta_names[0] not in out:
        raise UsageError(f"--{family.eta_names[0]} with a response, e.g. 'capture ~ 1', is required")
    return out


def _load(path) -> object:
    if not path:
        raise UsageError("--data is required")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    return read_csv(path)


def _progress(args):
    if args.quiet:
        return None

    def report(done, total):
        if done == total or done % max(1, total // 20) == 0:
            print(f"\rbootstrap {done}/{total}", end="\n" if done == total else "", file=sys.stderr, flush=True)

    return report


def fit_from_args(args, var_method: str | None = None) -> ModelFit:
    family = _family(args)
    data = _load(args.data)
    formulas = _formulas(args, family)
    weights = None
    if args.weights:
        if args.weights not in data:
            raise UsageError(f"weights column {args.weights!r} not in the data")
        weights = np.asarray(data[args.weights], dtype=float)
    control = FitControl(max_iter=args.max_iter, tolerance=float(args.tol), method=args.method, silent=True)
    alpha = _alphas(args.alpha)[0]
    boot = BootControl(
        boot_type=args.boot_type, B=int(args.B), alpha=alpha, cores=int(args.cores), seed=args.seed,
    )
    return fit_model(
        data, family, formulas, weights=weights, control=control, var_method=var_method or args.var_method,
        alpha=alpha, boot_control=boot, cov_type=args.cov_type, progress=_progress(args),
    )


# -- reports ------------------------------------------------------------------


def stars(p: float) -> str:
    for cut, mark in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return mark
    return ""


def coefficient_table(model: ModelFit) -> list[dict]:
    se = np.sqrt(np.diag(model.cov))
    rows = []
    beta = model.frame.split(model.coef)
    ses = model.frame.split(se)
    for param, names, b, s in zip(model.frame.param_names, model.frame.names, beta, ses):
        for nm, est, err in zip(names, b, s):
            z = est / err
            p = float(2.0 * stats.norm.sf(abs(z)))
            rows.append({"parameter": param, "name": nm, "estimate": float(est), "se": float(err), "z": float(z), "p": p})
    return rows


def fit_report(model: ModelFit, call: str) -> dict:
    res = model.fit
    crit = dg.information_criteria(model)
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "call": call,
        "family": model.family.name,
        "links": {n: lk.name for n, lk in zip(model.family.eta_names, model.family.links)},
        "formulas": {k: str(v) for k, v in model.frame.formulas.items()},
        "n_observed": float(np.sum(res.prior_weights)),
        "pearson_residuals": dg.summarize(dg.pearson_residuals(model)),
        "coefficients": coefficient_table(model),
        "aic": float(crit["aic"]),
        "bic": float(crit["bic"]),
        "residual_deviance": float(crit["residual_deviance"]),
        "log_lik": float(res.log_lik),
        "df_residual": int(res.df_residual),
        "iterations": int(res.iterations),
        "converged": bool(res.converged),
        "method": res.method,
        "popsize": model.popsize.to_dict(),
    }


def _f(x) -> str:
    return "NA" if x is None else f"{x:.4f}"


def _p(p: float) -> str:
    return f"{p:.4g}" if p >= 1e-4 else f"{p:.2e}"


def format_fit(rep: dict) -> str:
    lines = ["Call:", rep["call"], "", "Pearson Residuals:"]
    pr = rep["pearson_residuals"]
    keys = ["q0", "q25", "q50", "mean", "q75", "q100"]
    heads = ["Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max."]
    lines.append("  ".join(f"{h:>10}" for h in heads))
    lines.append("  ".join(f"{_f(pr[k]):>10}" for k in keys))
    lines += ["", "Coefficients:"]
    param = None
    for row in rep["coefficients"]:
        if row["parameter"] != param:
            param = row["parameter"]
            lines.append("-----------------------")
            lines.append(f"For linear predictors associated with: {param}")
            lines.append(f"{'':24}{'Estimate':>10}{'Std. Error':>12}{'z value':>10}{'P(>|z|)':>11}")
        lines.append(
            f"{row['name']:24}{_f(row['estimate']):>10}{_f(row['se']):>12}{_f(row['z']):>10}"
            f"{_p(row['p']):>11} {stars(row['p'])}"
        )
    lines += [
        "---",
        "Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1",
        "",
        f"AIC: {_f(rep['aic'])}",
        f"BIC: {_f(rep['bic'])}",
        f"Residual deviance: {_f(rep['residual_deviance'])}",
        "",
        f"Log-likelihood: {_f(rep['log_lik'])} on {rep['df_residual']} Degrees of freedom",
        f"Number of iterations: {rep['iterations']}" + ("" if rep["converged"] else " (not converged)"),
        "-----------------------",
        "Population size estimation results:",
    ]
    lines.extend(_format_popsize(rep["popsize"]))
    return "\n".join(lines)


def _format_popsize(ps: dict) -> list[str]:
    conf = 100 * (1 - ps["alpha"])
    lines = [
        f"Point estimate {_f(ps['point'])}",
        f"Observed proportion: {_f(ps['proportion'])} (N obs = {ps['observed']:g})",
    ]
    boot = ps.get("bootstrap")
    if boot:
        lines.append(f"Bootstrap sample skewness: {_f(boot['skewness'])}")
        lines.append(f"Bootstrap Std. Error {_f(ps['se'])}")
        lines.append(f"Replicates: {boot['successful']} of {boot['B']} "
                     f"({boot['failures']} failed, {boot['not_converged']} at the iteration limit)")
    elif ps["se"] is not None:
        lines.append(f"Std. Error {_f(ps['se'])}")
    if ps["ci"]:
        lines.append(f"{conf:g}% CI for the population size:")
        lines.append(f"{'':12}{'lowerBound':>14}{'upperBound':>14}")
        for kind, (lo, hi) in ps["ci"].items():
            lines.append(f"{kind:12}{_f(lo):>14}{_f(hi):>14}")
        lines.append(f"{conf:g}% CI for the share of observed population:")
        lines.append(f"{'':12}{'lowerBound':>14}{'upperBound':>14}")
        for kind, (lo, hi) in ps["proportion_ci"].items():
            lines.append(f"{kind:12}{_f(lo):>14}{_f(hi):>14}")
    return lines


def strata_report(model: ModelFit, args, call: str) -> dict:
    strata = None
    if args.strata:
        strata = args.strata if "~" in args.strata else [s.strip() for s in args.strata.split(",")]
    alphas = _alphas(args.alpha)
    cov = None
    if args.cov_file is not None:
        if not args.cov_file.is_file():
            raise FileNotFoundError(f"covariance file not found: {args.cov_file}")
        cov = np.atleast_2d(np.loadtxt(args.cov_file))
        q = model.coef.size
        if cov.shape != (q, q):
            raise UsageError(f"covariance file holds a {cov.shape} matrix, the model has {q} coefficients")
    table = stratify_popsize(model, strata, alphas if len(alphas) > 1 else alphas[0], cov)
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "strata",
        "call": call,
        "family": model.family.name,
        "strata": [row.to_dict() for row in table],
    }


def format_strata(rep: dict) -> str:
    rows = rep["strata"]
    width = max(len("name"), *(len(r["name"]) for r in rows))
    head = ["observed", "estimated", "normalLower", "normalUpper", "logNormalLower", "logNormalUpper", "confLevel"]
    lines = [f"{'name':<{width}}" + "".join(f"{h:>16}" for h in head)]
    for r in rows:
        vals = [r["observed"], r["estimated"], r["normalLowerBound"], r["normalUpperBound"],
                r["logNormalLowerBound"], r["logNormalUpperBound"], r["confLevel"]]
        lines.append(f"{r['name']:<{width}}" + "".join(f"{_f(v):>16}" for v in vals))
    return "\n".join(lines)


def diagnostics_report(model: ModelFit, args, call: str) -> dict:
    table = dg.marginal_freq(model)
    gof = dg.gof_tests(table, df=int(args.df), drop5=args.drop5)
    dfb = dg.dfbeta(model, cores=int(args.cores), method=args.dfbeta_method)
    dfp = dg.dfpopsize(model, dfb)
    names = model.coef_names
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "diagnostics",
        "call": call,
        "family": model.family.name,
        "marginal_frequencies": table.to_dict(),
        "gof": gof.to_dict(),
        "information_criteria": {k: float(v) for k, v in dg.information_criteria(model).items()},
        "dfbeta_x100": {nm: dg.summarize(100.0 * dfb[:, j]) for j, nm in enumerate(names)},
        "dfpopsize": dg.summarize(dfp),
        "rootogram": dg.rootogram_data(table),
    }


def format_diagnostics(rep: dict) -> str:
    g = rep["gof"]
    lines = [
        "Goodness of fit of the marginal frequencies:",
        f"{'':18}{'statistic':>12}{'df':>4}{'P(>X^2)':>12}",
        f"{'Chi-squared test':18}{_f(g['chi_sq']):>12}{g['df']:>4}{_p(g['p_chi_sq']):>12}",
        f"{'G-test':18}{_f(g['G']):>12}{g['df']:>4}{_p(g['p_G']):>12}",
        f"Cells used: {' '.join(g['cells'])}",
        "",
        "dfbeta quantiles (x 100):",
    ]
    keys = ["q0", "q25", "q50", "q75", "q100"]
    width = max(len(n) for n in rep["dfbeta_x100"])
    lines.append(f"{'':{width}}" + "".join(f"{k:>12}" for k in ("0%", "25%", "50%", "75%", "100%")))
    for nm, s in rep["dfbeta_x100"].items():
        lines.append(f"{nm:{width}}" + "".join(f"{_f(s[k]):>12}" for k in keys))
    d = rep["dfpopsize"]
    lines += [
        "",
        "dfpopsize summary:",
        "".join(f"{h:>12}" for h in ("Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max.")),
        "".join(f"{_f(d[k]):>12}" for k in ("q0", "q25", "q50", "mean", "q75", "q100")),
        "",
        "Marginal frequencies:",
        f"{'count':>8}{'observed':>12}{'expected':>12}",
    ]
    mf = rep["marginal_frequencies"]
    for k, o, e in zip(mf["counts"], mf["observed"], mf["expected"]):
        lines.append(f"{k:>8}{_f(o):>12}{_f(e):>12}")
    return "\n".join(lines)


def simulate_rows(args) -> np.ndarray:
    family = _family(args)
    try:
        eta = np.array([float(v) for v in str(args.eta).split(",")])
    except ValueError:
        raise UsageError(f"--eta must be comma-separated numbers, got {args.eta!r}") from None
    if eta.size != family.p:
        raise UsageError(f"{family.name} needs {family.p} linear predictor value(s), got {eta.size}")
    if int(args.n) < 1:
        raise UsageError("--n must be positive")
    etas = np.broadcast_to(eta, (int(args.n), family.p))
    return family.simulate(etas, seed=args.seed, truncated=not args.untruncated)


# -- entry point --------------------------------------------------------------


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        print(text)
    else:
        out.write_text(text + "\n")


def _json(rep: dict) -> str:
    return json.dumps(rep, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))


def run(args, call: str) -> int:
    cmd = args.command
    if cmd == "simulate":
        y = simulate_rows(args)
        if args.format == "json":
            _emit(_json({"schema_version": SCHEMA_VERSION, "command": "simulate", "call": call, "y": y.tolist()}), args.out)
        else:
            _emit("y\n" + "\n".join(str(int(v)) for v in y), args.out)
        return EXIT_OK

    if cmd == "bootstrap":
        model = fit_from_args(args, var_method="bootstrap")
    elif cmd == "fit":
        model = fit_from_args(args)
    else:
        model = fit_from_args(args, var_method="skip")
    if cmd in ("fit", "bootstrap"):
        rep = fit_report(model, call)
        rep["command"] = cmd
        text = format_fit(rep)
        if cmd == "bootstrap" and args.replicates is not None:
            reps = model.popsize.boot_replicates
            args.replicates.write_text("replicate,estimate\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(reps)))
    elif cmd == "strata":
        rep = strata_report(model, args, call)
        text = format_strata(rep)
    else:
        rep = diagnostics_report(model, args, call)
        text = format_diagnostics(rep)
    rep["converged"] = bool(model.fit.converged)
    _emit(_json(rep) if args.format == "json" else text, args.out)
    if not model.fit.converged:
        print(f"error: the fit did not converge ({model.fit.message})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    call = "sscr " + " ".join(shlex.quote(a) for a in argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args, call)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every failure becomes a message and exit code 1
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
