"""Goodness of fit, residuals and leave-one-out influence."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .fitting import FitControl, FitResult, _design, _regularise, fit_irls
from .popsize import _row_design

log = logging.getLogger(__name__)

__all__ = [
    "MarginalFreqTable",
    "GofResult",
    "marginal_freq",
    "gof_tests",
    "information_criteria",
    "pearson_residuals",
    "deviance_residuals",
    "dfbeta",
    "dfpopsize",
    "rootogram_data",
    "summarize",
]


def _result(model) -> FitResult:
    return model if isinstance(model, FitResult) else model.fit


@dataclass
class MarginalFreqTable:
    """Observed and fitted marginal frequencies of each count.

    ``tail_expected`` is the fitted mass above ``counts[-1]``; there are
    no observations in that range by construction.
    """

    counts: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    tail_expected: float

    @property
    def n_observed(self) -> float:
        return float(self.observed.sum())

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "observed": self.observed.tolist(),
            "expected": self.expected.tolist(),
            "tail_expected": self.tail_expected,
        }


def marginal_freq(model) -> MarginalFreqTable:
    """``O_k`` and ``E_k = sum_j w_j P[Y_j = k | x_j, Y_j >= m]`` for ``k`` up to ``max(y)``."""
    res = _result(model)
    fam, y, w = res.family, res.y, res.prior_weights
    counts = np.arange(fam.min_count, int(y.max()) + 1)
    table = fam.pmf_table(counts, res.eta, "truncated")
    expected = w @ table
    observed = np.array([w[y == k].sum() for k in counts])
    tail = float(w.sum() - expected.sum())
    return MarginalFreqTable(counts, observed, expected, max(tail, 0.0))


@dataclass
class GofResult:
    chi_sq: float
    g: float
    df: int
    p_chi_sq: float
    p_g: float
    cells: list[str]
    observed: np.ndarray
    expected: np.ndarray

    def to_dict(self) -> dict:
        return {
            "chi_sq": self.chi_sq,
            "G": self.g,
            "df": self.df,
            "p_chi_sq": self.p_chi_sq,
            "p_G": self.p_g,
            "cells": self.cells,
        }


def _cells(table: MarginalFreqTable, drop5: str):
    names = [str(k) for k in table.counts]
    O = table.observed.astype(float)
    E = table.expected.astype(float)
    if drop5 == "none":
        return names, O, E
    small = E < 5
    if drop5 == "drop":
        return [nm for nm, s in zip(names, small) if not s], O[~small], E[~small]
    if drop5 != "group":
        raise ValueError("drop5 must be 'group', 'drop' or 'none'")
    if not small.any():
        return names, O, E
    # pool all small cells into one, labelled by its members, e.g. "4+5+6"
    keep = ~small
    pooled_name = "+".join(nm for nm, s in zip(names, small) if s)
    names = [nm for nm, k in zip(names, keep) if k] + [pooled_name]
    return names, np.r_[O[keep], O[small].sum()], np.r_[E[keep], E[small].sum()]


def gof_tests(table: MarginalFreqTable, df: int = 1, drop5: str = "group") -> GofResult:
    """Pearson chi-square and likelihood-ratio G statistics over count cells.

    ``drop5`` handles cells with fitted frequency below 5: ``"group"``
    pools them into a single cell, ``"drop"`` removes them, ``"none"``
    keeps them.  No continuity correction is applied.
    """
    if df < 1:
        raise ValueError("df must be at least 1")
    names, O, E = _cells(table, drop5)
    if np.any(E <= 0):
        raise ValueError("a cell has zero expected frequency after grouping")
    chi = float(np.sum((O - E) ** 2 / E))
    with np.errstate(divide="ignore", invalid="ignore"):
        g = float(2.0 * np.sum(np.where(O > 0, O * np.log(O / E), 0.0)))
    return GofResult(
        chi_sq=chi, g=g, df=df, p_chi_sq=float(stats.chi2.sf(chi, df)), p_g=float(stats.chi2.sf(g, df)),
        cells=names, observed=O, expected=E,
    )


def deviance_residuals(model) -> np.ndarray:
    res = _result(model)
    return res.family.deviance_residuals(res.y, res.eta, res.prior_weights)


def information_criteria(model) -> dict:
    """AIC ``2q - 2l``, BIC ``q log(N_obs) - 2l`` and the residual deviance."""
    res = _result(model)
    q = res.n_coef
    n_obs = float(np.sum(res.prior_weights))
    ll = res.log_lik
    dev = float(np.sum(deviance_residuals(res) ** 2))
    return {
        "aic": 2.0 * q - 2.0 * ll,
        "bic": float(q * np.log(n_obs) - 2.0 * ll),
        "residual_deviance": dev,
        "df_residual": res.df_residual,
        "log_lik": ll,
    }


def pearson_residuals(model) -> np.ndarray:
    """``(y - E[Y | Y >= m]) / sqrt(Var[Y | Y >= m])``."""
    res = _result(model)
    mu, var = res.family.mean_variance(res.eta, "truncated")
    return (res.y - mu) / np.sqrt(var)


# -- leave-one-out ------------------------------------------------------------

_LOO: dict = {}


def _init_loo(res: FitResult, control: FitControl):
    _LOO.update(res=res, control=control)


def _refit_without(k: int) -> np.ndarray:
    res: FitResult = _LOO["res"]
    fam = res.family
    keep = np.ones(res.y.size, dtype=bool)
    keep[k] = False
    rows = np.flatnonzero(keep)
    X = _row_design(res.design, rows, fam.p)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = fit_irls(res.y[rows], X, fam, res.offsets[rows], res.prior_weights[rows], res.beta, _LOO["control"])
        return res.beta - out.beta
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.debug("refit without row %d failed: %s", k, exc)
        return np.full(res.beta.size, np.nan)


def _refit_chunk(ks):
    return [_refit_without(k) for k in ks]


def _unique_rows(res: FitResult) -> tuple[np.ndarray, np.ndarray]:
    """Representative row per distinct (y, design, offset, weight) and the inverse map."""
    fam = res.family
    n = res.y.size
    X = res.design
    if hasattr(X, "blocks"):
        parts = list(X.blocks)
    else:
        X = np.asarray(X, dtype=float)
        parts = [X[j * n:(j + 1) * n] for j in range(fam.p)]
    key = np.column_stack([res.y, res.prior_weights, res.offsets, *parts])
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return first, inverse.ravel()


def dfbeta(model, cores: int = 1, method: str = "onestep", control: FitControl | None = None) -> np.ndarray:
    """``beta_hat - beta_hat(-k)`` for every row ``k``.

    ``method="onestep"`` takes ``beta_hat(-k)`` to be a single IRLS step
    from ``beta_hat`` on the data without row ``k``; this is cheap and is
    the default.  ``method="exact"`` refits to convergence instead,
    warm-started at ``beta_hat``.  Identical rows share one computation.
    """
    res = _result(model)
    if method == "onestep":
        return _dfbeta_onestep(res)
    if method != "exact":
        raise ValueError("method must be 'onestep' or 'exact'")
    control = control or FitControl(tolerance=1e-14, silent=True)
    first, inverse = _unique_rows(res)
    if cores == 1:
        saved = dict(_LOO)
        _init_loo(res, control)
        try:
            rows = [_refit_without(int(k)) for k in first]
        finally:
            _LOO.clear()
            _LOO.update(saved)
    else:
        chunks = [c.tolist() for c in np.array_split(first, min(first.size, cores * 4)) if c.size]
        with ProcessPoolExecutor(cores, initializer=_init_loo, initargs=(res, control)) as pool:
            rows = [r for chunk in pool.map(_refit_chunk, chunks) for r in chunk]
    out = np.asarray(rows)[inverse]
    bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
    if bad.size:
        warnings.warn(f"refits failed for row(s) {bad[:20].tolist()}", RuntimeWarning, stacklevel=2)
    return out


def _dfbeta_onestep(res: FitResult, batch: int = 4096) -> np.ndarray:
    fam = res.family
    design = _design(res.design, fam.p)
    y, eta, w = res.y, res.eta, res.prior_weights
    W = _regularise(fam.information(y, eta, None))
    score = fam.gradient(y, eta, None)
    Z = eta - res.offsets + np.linalg.solve(W, score[:, :, None])[:, :, 0]
    Ww = W * w[:, None, None]
    WZ = np.einsum("nij,nj->ni", Ww, Z)
    A = design.xtwx(Ww)
    b = design.xt_dot(WZ)
    first, inverse = _unique_rows(res)
    out = np.empty((first.size, res.beta.size))
    for lo in range(0, first.size, batch):
        ks = first[lo:lo + batch]
        Xk = design.rows(ks)
        # drop row k from the normal equations of the step taken at beta_hat
        Ak = np.einsum("kaq,kab,kbr->kqr", Xk, Ww[ks], Xk)
        bk = np.einsum("kaq,ka->kq", Xk, WZ[ks])
        beta_k = np.linalg.solve(A[None] - Ak, (b[None] - bk)[:, :, None])[:, :, 0]
        out[lo:lo + batch] = res.beta[None] - beta_k
    return out[inverse]


def dfpopsize(model, dfbeta_matrix=None, cores: int = 1) -> np.ndarray:
    """``N_hat - N_hat(-k)``, where ``N_hat(-k)`` uses ``beta_hat(-k)`` and drops unit ``k``."""
    res = _result(model)
    if dfbeta_matrix is None:
        dfbeta_matrix = dfbeta(res, cores)
    fam = res.family
    design = _design(res.design, fam.p)
    w, y = res.prior_weights, res.y
    point = fam.point_estimate(res.eta, w, y)
    first, inverse = _unique_rows(res)
    vals = np.empty(first.size)
    for i, k in enumerate(first):
        beta_k = res.beta - dfbeta_matrix[k]
        if not np.all(np.isfinite(beta_k)):
            vals[i] = np.nan
            continue
        contr = fam.point_estimate(design.eta(beta_k, res.offsets), w, y, contribution=True)
        vals[i] = point - (contr.sum() - contr[k])
    return vals[inverse]


def rootogram_data(table: MarginalFreqTable) -> dict:
    """Hanging rootogram coordinates: bars hang from ``sqrt(E)`` down by ``sqrt(O)``."""
    sqrt_o = np.sqrt(table.observed)
    sqrt_e = np.sqrt(table.expected)
    return {
        "counts": table.counts.tolist(),
        "sqrt_observed": sqrt_o.tolist(),
        "sqrt_expected": sqrt_e.tolist(),
        "bar_top": sqrt_e.tolist(),
        "bar_bottom": (sqrt_e - sqrt_o).tolist(),
    }


def summarize(values, probs=(0.0, 0.25, 0.5, 0.75, 1.0)) -> dict:
    """Quantiles (R type 7) and mean of a vector."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    q = np.quantile(v, probs)
    out = {f"q{int(round(100 * p))}": float(x) for p, x in zip(probs, q)}
    out["mean"] = float(v.mean())
    return out
