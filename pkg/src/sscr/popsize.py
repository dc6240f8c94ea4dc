"""Population size inference from a fitted zero-truncated model.

The point estimate is the Horvitz-Thompson sum of inverse inclusion
probabilities.  Its analytic variance adds the delta-method term for the
coefficient uncertainty to ``sum w (1 - P) / P^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .families import CountFamily, get_family
from .fitting import FitControl, FitResult, coefficient_covariance, fit
from .model_frame import Dataset, DesignBlocks, Formula, build_model_frame, parse_formula

log = logging.getLogger(__name__)

__all__ = [
    "PopSizeEstimate",
    "ModelFit",
    "StratumEstimate",
    "normal_ci",
    "lognormal_ci",
    "popsize_from_fit",
    "estimate_popsize",
    "fit_model",
    "stratify_popsize",
    "resolve_strata",
]


def _z(alpha: float) -> float:
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def normal_ci(point: float, variance: float, alpha: float = 0.05) -> tuple[float, float]:
    half = _z(alpha) * np.sqrt(max(variance, 0.0))
    return point - half, point + half


def lognormal_ci(point: float, variance: float, observed: float, alpha: float = 0.05) -> tuple[float, float]:
    """Interval ``(N_obs + (N - N_obs) / xi, N_obs + (N - N_obs) xi)``.

    ``xi = exp(z * sqrt(log(1 + Var / (N - N_obs)^2)))``; the lower
    bound never falls below the observed count.
    """
    excess = point - observed
    if excess <= 0:
        return float(observed), float(observed)
    xi = np.exp(_z(alpha) * np.sqrt(np.log1p(max(variance, 0.0) / excess**2)))
    return observed + excess / xi, observed + excess * xi


@dataclass
class PopSizeEstimate:
    """Point estimate, variance and intervals for the population size.

    With bootstrap variance, ``ci_percentile`` holds the percentile
    interval and ``boot_replicates`` the replicate estimates.
    """

    point: float
    variance: float | None
    ci_normal: tuple[float, float] | None
    ci_lognormal: tuple[float, float] | None
    alpha: float
    observed: float
    boot_replicates: np.ndarray | None = None
    ci_percentile: tuple[float, float] | None = None
    boot: object = field(default=None, repr=False)

    @property
    def se(self) -> float | None:
        return None if self.variance is None else float(np.sqrt(self.variance))

    @property
    def proportion(self) -> float:
        """Observed share of the population in percent."""
        return 100.0 * self.observed / self.point

    def proportion_ci(self, kind: str = "lognormal") -> tuple[float, float] | None:
        """Interval for :attr:`proportion`; bounds come from the swapped size bounds."""
        ci = {"normal": self.ci_normal, "lognormal": self.ci_lognormal, "percentile": self.ci_percentile}[kind]
        if ci is None:
            return None
        return 100.0 * self.observed / ci[1], 100.0 * self.observed / ci[0]

    def to_dict(self) -> dict:
        out = {
            "point": self.point,
            "variance": self.variance,
            "se": self.se,
            "alpha": self.alpha,
            "observed": self.observed,
            "proportion": self.proportion,
            "ci": {},
            "proportion_ci": {},
        }
        for kind in ("normal", "lognormal", "percentile"):
            ci = getattr(self, f"ci_{kind}")
            if ci is not None:
                out["ci"][kind] = [float(v) for v in ci]
                out["proportion_ci"][kind] = [float(v) for v in self.proportion_ci(kind)]
        if self.boot is not None:
            out["bootstrap"] = self.boot.to_dict()
        return out


def _n_observed(result: FitResult) -> float:
    return float(np.sum(result.prior_weights))


def popsize_from_fit(result: FitResult, alpha: float = 0.05, cov=None, rows=None) -> PopSizeEstimate:
    """Analytic population size inference, optionally restricted to ``rows``.

    ``cov`` replaces the coefficient covariance in the delta-method term.
    """
    fam = result.family
    eta, w, y = result.eta, result.prior_weights, result.y
    X = result.design
    if rows is not None:
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        eta, w, y = eta[rows], w[rows], y[rows]
        X = _row_design(X, rows, fam.p)
    cov = result.beta_cov if cov is None else np.asarray(cov, dtype=float)
    if cov is None:
        raise np.linalg.LinAlgError("coefficient covariance is unavailable for this fit")
    point = fam.point_estimate(eta, w, y)
    var = fam.popsize_variance(eta, cov, X, w, y)
    observed = float(np.sum(w))
    return PopSizeEstimate(
        point=point, variance=var, ci_normal=normal_ci(point, var, alpha),
        ci_lognormal=lognormal_ci(point, var, observed, alpha), alpha=alpha, observed=observed,
    )


def _row_design(X, rows, p):
    if isinstance(X, DesignBlocks):
        return X.take(rows)
    X = np.asarray(X, dtype=float)
    n = X.shape[0] // p
    idx = (np.arange(p)[:, None] * n + rows[None, :]).ravel()
    return X[idx]


@dataclass
class ModelFit:
    """A fitted model together with its data and population size inference."""

    frame: DesignBlocks
    family: CountFamily
    fit: FitResult
    popsize: PopSizeEstimate
    control: FitControl = field(default_factory=FitControl)
    cov_type: str = "expected"

    @property
    def coef(self) -> np.ndarray:
        return self.fit.beta

    @property
    def coef_names(self) -> list[str]:
        return self.frame.coef_names

    @property
    def log_lik(self) -> float:
        return self.fit.log_lik

    @property
    def cov(self) -> np.ndarray:
        if self.cov_type == "expected":
            return self.fit.beta_cov
        return coefficient_covariance(self.fit, self.cov_type)

    def strata(self, strata=None, alpha=None, cov=None):
        return stratify_popsize(self, strata, self.popsize.alpha if alpha is None else alpha, cov)


def estimate_popsize(
    frame: DesignBlocks,
    family: CountFamily | str,
    control: FitControl | None = None,
    var_method: str = "analytic",
    alpha: float = 0.05,
    boot_control=None,
    cov_type: str = "expected",
    start=None,
    progress: Callable[[int, int], None] | None = None,
) -> ModelFit:
    """Fit a model and estimate the population size.

    Parameters
    ----------
    frame : DesignBlocks
        Response, design blocks, offsets and weights.
    family : CountFamily or str
    control : FitControl, optional
    var_method : {"analytic", "bootstrap", "skip"}
    alpha : float
        One minus the confidence level.
    boot_control : BootControl, optional
        Settings for ``var_method="bootstrap"``.
    cov_type : {"expected", "observed"}
        Coefficient covariance used in the delta-method term.

    Returns
    -------
    ModelFit
    """
    if var_method not in ("analytic", "bootstrap", "skip"):
        raise ValueError("var_method must be 'analytic', 'bootstrap' or 'skip'")
    family = get_family(family)
    control = control or FitControl()
    result = fit(frame, family, control, start)
    cov = result.beta_cov if cov_type == "expected" else coefficient_covariance(result, cov_type)
    observed = _n_observed(result)
    if var_method == "analytic":
        est = popsize_from_fit(result, alpha, cov)
    else:
        point = family.point_estimate(result.eta, result.prior_weights, result.y)
        est = PopSizeEstimate(point, None, None, None, alpha, observed)
    model = ModelFit(frame, family, result, est, control, cov_type)
    if var_method == "bootstrap":
        from .bootstrap import BootControl, run_bootstrap

        bc = boot_control or BootControl(alpha=alpha)
        if bc.alpha != alpha:
            bc = replace(bc, alpha=alpha)
        boot = run_bootstrap(model, bc, progress=progress)
        var = boot.variance
        model.popsize = replace(
            est, variance=var, ci_normal=normal_ci(est.point, var, alpha),
            ci_lognormal=lognormal_ci(est.point, var, observed, alpha),
            ci_percentile=boot.ci, boot_replicates=boot.replicates, boot=boot,
        )
    return model


def fit_model(
    data: Dataset,
    family: CountFamily | str,
    formulas: Mapping[str, str | Formula] | str,
    weights=None,
    offsets=None,
    **kwargs,
) -> ModelFit:
    """Build the model frame from ``data`` and call :func:`estimate_popsize`.

    A single formula string is taken as the first parameter's formula;
    the other parameters then get intercept-only designs.  Remaining
    keyword arguments go to :func:`estimate_popsize`.
    """
    family = get_family(family)
    if isinstance(formulas, (str, Formula)):
        formulas = {family.eta_names[0]: formulas}
    frame = build_model_frame(data, formulas, family.eta_names, weights, offsets)
    return estimate_popsize(frame, family, **kwargs)


# -- strata -------------------------------------------------------------------


@dataclass
class StratumEstimate:
    name: str
    observed: float
    estimate: PopSizeEstimate

    @property
    def conf_level(self) -> float:
        return 1.0 - self.estimate.alpha

    def to_dict(self) -> dict:
        e = self.estimate
        return {
            "name": self.name,
            "observed": self.observed,
            "estimated": e.point,
            "normalLowerBound": float(e.ci_normal[0]),
            "normalUpperBound": float(e.ci_normal[1]),
            "logNormalLowerBound": float(e.ci_lognormal[0]),
            "logNormalUpperBound": float(e.ci_lognormal[1]),
            "confLevel": self.conf_level,
        }


def _level_strata(data, variables: Sequence[str]) -> dict[str, np.ndarray]:
    out = {}
    for var in variables:
        if var not in data:
            raise KeyError(f"strata variable {var!r} is not in the data")
        if data.kinds[var] != "categorical":
            continue
        col = data[var]
        for level in data.levels(var):
            out[f"{var}=={level}"] = col == level
    return out


def _formula_strata(data, formula: Formula) -> dict[str, np.ndarray]:
    out = {}
    for term in formula.terms:
        missing = [v for v in term if v not in data]
        if missing:
            raise KeyError(f"strata variable(s) {missing} not in the data")
        cats = [v for v in term if data.kinds[v] == "categorical"]
        if len(cats) != len(term):
            raise ValueError(f"strata term {':'.join(term)} uses a numeric variable")
        if len(term) == 1:
            out.update(_level_strata(data, term))
            continue
        grids = np.array(np.meshgrid(*[data.levels(v) for v in term], indexing="ij"), dtype=object)
        for combo in grids.reshape(len(term), -1).T:
            mask = np.logical_and.reduce([data[v] == lv for v, lv in zip(term, combo)])
            out[" & ".join(f"{v}=={lv}" for v, lv in zip(term, combo))] = mask
    return out


def _default_variables(frame: DesignBlocks) -> list[str]:
    seen: list[str] = []
    for param in frame.param_names:
        f = frame.formulas.get(param)
        if f is None:
            continue
        for term in f.terms:
            for v in term:
                if v not in seen:
                    seen.append(v)
    return seen


def resolve_strata(frame: DesignBlocks, strata=None) -> dict[str, np.ndarray]:
    """Turn a strata specification into named boolean row masks.

    ``strata`` may be ``None`` (every level of every categorical
    variable in the model formulas), a formula string or
    :class:`Formula`, a list of variable names, a mapping from names to
    masks or to callables taking the dataset, or a single mask.
    """
    n = frame.n
    data = frame.data
    if strata is None or isinstance(strata, (str, Formula)) or (
        isinstance(strata, (list, tuple)) and all(isinstance(s, str) for s in strata)
    ):
        if data is None:
            raise ValueError("covariate-based strata need the model frame's data")
        if strata is None:
            out = _level_strata(data, _default_variables(frame))
        elif isinstance(strata, (list, tuple)):
            out = _level_strata(data, strata)
        else:
            f = strata if isinstance(strata, Formula) else parse_formula(strata if "~" in strata else f"~ {strata}")
            out = _formula_strata(data, f)
    elif isinstance(strata, Mapping):
        out = {}
        for name, sel in strata.items():
            out[str(name)] = np.asarray(sel(data) if callable(sel) else sel, dtype=bool)
    else:
        out = {"custom": np.asarray(strata, dtype=bool)}
    for name, mask in out.items():
        if mask.shape != (n,):
            raise ValueError(f"stratum {name!r} selects from {mask.shape} rows, model has {n}")
        if not mask.any():
            raise ValueError(f"stratum {name!r} selects no observed rows")
    if not out:
        raise ValueError("no strata: the model has no categorical covariates")
    return out


def stratify_popsize(model: ModelFit, strata=None, alpha=0.05, cov=None) -> list[StratumEstimate]:
    """Population size per stratum.

    Each stratum's estimate sums the Horvitz-Thompson contributions of its
    rows; its variance uses the shared coefficient covariance (or
    ``cov``) restricted to the stratum's gradient.
    """
    masks = resolve_strata(model.frame, strata)
    alphas = np.atleast_1d(np.asarray(alpha, dtype=float))
    if alphas.size == 1:
        alphas = np.full(len(masks), alphas[0])
    elif alphas.size != len(masks):
        raise ValueError(f"got {alphas.size} alpha values for {len(masks)} strata")
    cov = model.cov if cov is None else cov
    out = []
    for (name, mask), a in zip(masks.items(), alphas):
        est = popsize_from_fit(model.fit, float(a), cov, rows=mask)
        out.append(StratumEstimate(name, est.observed, est))
    return out
