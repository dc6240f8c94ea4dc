"""Family contract for single-source capture-recapture count models.

A family describes the distribution of the count ``Y*`` of a unit
(including the unobservable zeros) as a function of one linear predictor
per distribution parameter.  Subclasses only have to provide the
untruncated log-pmf and its gradient with respect to the distribution
parameters; everything the fitter and the estimators need is derived
here:

* the truncated log-likelihood ``log P[Y*=y | Y* >= m]`` and its score
  with respect to the linear predictors,
* the expected information per observation, by summation over the
  support,
* truncated / untruncated pmf, moments and random draws,
* Horvitz-Thompson contributions ``1 / P[Y* >= m]`` and their analytic
  variance.

``m`` is :attr:`CountFamily.min_count`, the smallest observable count.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from ..links import Link, get_link

log = logging.getLogger(__name__)

_TAIL_EPS = 1e-12
_MAX_SUPPORT = 1 << 15


def log1mexp(x):
    """``log(1 - exp(x))`` for ``x <= 0`` without cancellation."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -0.6931471805599453, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class CountFamily:
    """Base class for count families.

    Subclasses set :attr:`name`, :attr:`eta_names`, :attr:`links` and
    implement :meth:`_logpmf` and :meth:`_score`.  Both receive an
    ``(n, K)`` integer array of counts and a list with one ``(n, 1)``
    parameter column per distribution parameter.
    """

    name: str = "family"
    eta_names: tuple[str, ...] = ("lambda",)
    min_count: int = 1
    # sampling term of the analytic variance: sum w (1-P)/P^2 ("squared")
    # or sum w (1-P)/P ("linear")
    sampling_variance: str = "squared"

    def __init__(self, links: Sequence[str | Link] | None = None):
        if links is None:
            links = ["log"] * len(self.eta_names)
        self.links = tuple(get_link(lk) for lk in links)
        if len(self.links) != len(self.eta_names):
            raise ValueError(f"{self.name}: need {len(self.eta_names)} links, got {len(self.links)}")

    def __repr__(self) -> str:
        links = ", ".join(f"{n}={lk.name}" for n, lk in zip(self.eta_names, self.links))
        return f"{type(self).__name__}({self.name!r}, {links})"

    @property
    def p(self) -> int:
        return len(self.eta_names)

    # -- to implement -----------------------------------------------------

    def _logpmf(self, y: np.ndarray, theta: list[np.ndarray]) -> np.ndarray:
        """Untruncated ``log P[Y*=y]``, shape ``(n, K)``."""
        raise NotImplementedError

    def _score(self, y: np.ndarray, theta: list[np.ndarray]) -> np.ndarray:
        """Gradient of :meth:`_logpmf` w.r.t. parameters, shape ``(n, K, p)``."""
        raise NotImplementedError

    def _logpmf_score(self, y, theta):
        return self._logpmf(y, theta), self._score(y, theta)

    # -- parameters -------------------------------------------------------

    def theta(self, eta) -> list[np.ndarray]:
        """Distribution parameters as a list of ``(n, 1)`` columns."""
        eta = self._as_eta(eta)
        with np.errstate(over="ignore", under="ignore"):
            return [lk.inverse(eta[:, j])[:, None] for j, lk in enumerate(self.links)]

    def params(self, eta) -> np.ndarray:
        """Distribution parameters as an ``(n, p)`` array."""
        return np.column_stack([t[:, 0] for t in self.theta(eta)])

    def _jacobian(self, eta) -> np.ndarray:
        eta = self._as_eta(eta)
        with np.errstate(over="ignore", under="ignore"):
            return np.column_stack([lk.dinverse(eta[:, j]) for j, lk in enumerate(self.links)])

    def _as_eta(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        if eta.ndim == 0:
            eta = eta.reshape(1, 1)
        elif eta.ndim == 1:
            # a single row for multi-parameter families, a column otherwise
            eta = eta[:, None] if self.p == 1 else eta[None, :]
        if eta.shape[1] != self.p:
            raise ValueError(f"{self.name}: eta must have {self.p} columns, got shape {eta.shape}")
        return eta

    # -- truncation -------------------------------------------------------

    def _log_observable(self, theta):
        """``log P[Y* >= m]`` and its parameter gradient, shapes (n,) and (n, p)."""
        n = theta[0].shape[0]
        ys = np.broadcast_to(np.arange(self.min_count), (n, self.min_count))
        lp, sc = self._logpmf_score(ys, theta)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            lge = log1mexp(np.minimum(logsumexp(lp, axis=1), 0.0))
            ratio = np.exp(lp - lge[:, None])
            ratio = np.where(np.isfinite(ratio), ratio, 0.0)
            dge = -np.einsum("nk,nkp->np", ratio, np.nan_to_num(sc, posinf=0.0, neginf=0.0))
        return lge, dge

    def _trunc_logpmf_score(self, y2, theta):
        lge, dge = self._log_observable(theta)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            lp, sc = self._logpmf_score(y2, theta)
            lp = lp - lge[:, None]
            sc = sc - dge[:, None, :]
        lp = np.where(y2 >= self.min_count, lp, -np.inf)
        return lp, sc

    def _support(self, theta, truncated: bool = True, y_extra: int = 0) -> np.ndarray:
        """Count grid covering all but ``1e-12`` of every row's mass."""
        n = theta[0].shape[0]
        lo = self.min_count if truncated else 0
        K = max(32, int(y_extra) + 1)
        if truncated:
            lge, _ = self._log_observable(theta)
        else:
            lge = np.zeros(n)
        while True:
            grid = np.arange(lo, K + 1)
            lp = self._logpmf(np.broadcast_to(grid, (n, grid.size)), theta)
            with np.errstate(invalid="ignore"):
                covered = logsumexp(lp, axis=1) - lge
            if np.all(covered >= np.log1p(-_TAIL_EPS)) or K >= _MAX_SUPPORT:
                if K >= _MAX_SUPPORT and not np.all(covered >= np.log1p(-_TAIL_EPS)):
                    log.warning("%s: support truncated at %d with tail mass %.2e", self.name, K, -np.expm1(covered.min()))
                return grid
            K *= 2

    # -- likelihood -------------------------------------------------------

    def check_support(self, y) -> None:
        y = np.asarray(y)
        bad = np.flatnonzero((y < self.min_count) | (y != np.round(y)))
        if bad.size:
            raise ValueError(
                f"{self.name}: counts must be integers >= {self.min_count}; "
                f"{bad.size} row(s) violate this (first at row {bad[0]}, y={y[bad[0]]})"
            )

    def loglik_terms(self, y, eta) -> np.ndarray:
        """Per-observation truncated log-likelihood."""
        y = np.asarray(y, dtype=float)
        theta = self.theta(eta)
        lge, _ = self._log_observable(theta)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            lp = self._logpmf(y[:, None], theta)[:, 0] - lge
        lp = np.where(y >= self.min_count, lp, -np.inf)
        return np.where(np.isnan(lp), -np.inf, lp)

    def log_likelihood(self, y, eta, weights=None) -> float:
        """Weighted truncated log-likelihood; ``-inf`` outside the parameter space."""
        terms = self.loglik_terms(y, eta)
        w = np.ones_like(terms) if weights is None else np.broadcast_to(weights, terms.shape)
        with np.errstate(invalid="ignore"):
            val = float(np.sum(np.where(w == 0, 0.0, w * terms)))
        return val if np.isfinite(val) else -np.inf

    def gradient(self, y, eta, weights=None) -> np.ndarray:
        """``d loglik / d eta`` per row, shape ``(n, p)``."""
        y = np.asarray(y, dtype=float)
        theta = self.theta(eta)
        _, sc = self._trunc_logpmf_score(y[:, None], theta)
        g = sc[:, 0, :] * self._jacobian(eta)
        if weights is not None:
            g = g * np.asarray(weights, dtype=float).reshape(-1, 1)
        bad = np.flatnonzero(~np.all(np.isfinite(g), axis=1))
        if bad.size:
            raise FloatingPointError(f"{self.name}: non-finite gradient at row(s) {bad[:10].tolist()}")
        return g

    def information(self, y, eta, weights=None) -> np.ndarray:
        """Expected information ``E[-d2 loglik / d eta d eta^T]`` per row, ``(n, p, p)``.

        Computed as the expectation of the squared score over the
        truncated support.
        """
        theta = self.theta(eta)
        y_extra = 0 if y is None else int(np.max(y, initial=0))
        grid = self._support(theta, truncated=True, y_extra=y_extra)
        n = theta[0].shape[0]
        lp, sc = self._trunc_logpmf_score(np.broadcast_to(grid, (n, grid.size)), theta)
        pt = np.exp(lp)
        sc = np.where(pt[:, :, None] > 0, sc, 0.0)
        info = np.einsum("nk,nki,nkj->nij", pt, sc, sc)
        J = self._jacobian(eta)
        info = info * J[:, :, None] * J[:, None, :]
        if weights is not None:
            info = info * np.asarray(weights, dtype=float).reshape(-1, 1, 1)
        return info

    # -- distribution -----------------------------------------------------

    def pmf(self, y, eta, type: str = "truncated") -> np.ndarray:
        """``P[Y*=y | Y* >= m]`` (``type="truncated"``) or ``P[Y*=y]``; zero off the support.

        ``y`` is a scalar or one count per row of ``eta``.
        """
        theta = self.theta(eta)
        n = theta[0].shape[0]
        y2 = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1, 1), (n, 1))
        return self._pmf_table(y2, theta, type)[:, 0]

    def pmf_table(self, grid, eta, type: str = "truncated") -> np.ndarray:
        """pmf of every row of ``eta`` at every count in ``grid``, shape ``(n, K)``."""
        theta = self.theta(eta)
        grid = np.asarray(grid, dtype=float).ravel()
        return self._pmf_table(np.broadcast_to(grid, (theta[0].shape[0], grid.size)), theta, type)

    def _pmf_table(self, y2, theta, type):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if type == "truncated":
                lp, _ = self._trunc_logpmf_score(y2, theta)
            elif type in ("untruncated", "nontrunc"):
                lp = np.where(y2 >= 0, self._logpmf(y2, theta), -np.inf)
            else:
                raise ValueError("type must be 'truncated' or 'untruncated'")
            out = np.exp(np.where(y2 == np.round(y2), lp, -np.inf))
        return np.nan_to_num(out, nan=0.0)

    def mean_variance(self, eta, type: str = "truncated") -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of ``Y* | Y* >= m`` or of ``Y*``."""
        theta = self.theta(eta)
        truncated = type == "truncated"
        grid = self._support(theta, truncated=truncated)
        p = self._pmf_table(np.broadcast_to(grid, (theta[0].shape[0], grid.size)), theta, type)
        m1 = p @ grid
        m2 = p @ (grid.astype(float) ** 2)
        return m1, m2 - m1**2

    def simulate(self, eta, seed=None, truncated: bool = False) -> np.ndarray:
        """Draw one count per row of ``eta`` by inversion of the cdf."""
        rng = _rng(seed)
        theta = self.theta(eta)
        n = theta[0].shape[0]
        grid = self._support(theta, truncated=truncated)
        p = self._pmf_table(np.broadcast_to(grid, (n, grid.size)), theta, "truncated" if truncated else "untruncated")
        cdf = np.cumsum(p, axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(n)
        idx = (cdf < u[:, None]).sum(axis=1)
        return grid[np.minimum(idx, grid.size - 1)].astype(float)

    # -- population size --------------------------------------------------

    def inclusion_prob(self, eta, y=None) -> tuple[np.ndarray, np.ndarray]:
        """``P[Y* >= m]`` per row and its gradient w.r.t. ``eta`` (n x p)."""
        theta = self.theta(eta)
        lge, dge = self._log_observable(theta)
        prob = np.exp(lge)
        return prob, prob[:, None] * dge * self._jacobian(eta)

    def contributions(self, eta, y=None) -> np.ndarray:
        prob, _ = self.inclusion_prob(eta, y)
        with np.errstate(divide="ignore"):
            return 1.0 / prob

    def point_estimate(self, eta, weights=None, y=None, contribution: bool = False):
        """Horvitz-Thompson estimate ``sum_k w_k / P[Y_k* >= m]``.

        With ``contribution=True`` the per-unit terms are returned.
        """
        prob, _ = self.inclusion_prob(eta, y)
        zero = np.flatnonzero(prob <= 0)
        if zero.size:
            raise ZeroDivisionError(f"{self.name}: zero inclusion probability for unit(s) {zero[:10].tolist()}")
        w = np.ones_like(prob) if weights is None else np.broadcast_to(np.asarray(weights, float), prob.shape)
        contr = w / prob
        return contr if contribution else float(contr.sum())

    def popsize_gradient(self, eta, weights=None, y=None) -> np.ndarray:
        """``d N / d eta`` per row (n x p)."""
        prob, dprob = self.inclusion_prob(eta, y)
        w = np.ones_like(prob) if weights is None else np.broadcast_to(np.asarray(weights, float), prob.shape)
        return -(w / prob**2)[:, None] * dprob

    def popsize_variance(self, eta, beta_cov, X, weights=None, y=None) -> float:
        """Analytic variance: delta-method term plus a sampling term.

        The sampling term is ``sum w (1-P)/P^2``, or ``sum w (1-P)/P``
        when :attr:`sampling_variance` is ``"linear"``.

        ``X`` is either the stacked vlm matrix or a
        :class:`~sscr.model_frame.DesignBlocks`.
        """
        beta_cov = np.asarray(beta_cov, dtype=float)
        grad_beta = _beta_gradient(self.popsize_gradient(eta, weights, y), X)
        delta = float(grad_beta @ beta_cov @ grad_beta)
        prob, _ = self.inclusion_prob(eta, y)
        w = np.ones_like(prob) if weights is None else np.broadcast_to(np.asarray(weights, float), prob.shape)
        power = 2.0 if self.sampling_variance == "squared" else 1.0
        return delta + float(np.sum(w * (1.0 - prob) / prob**power))

    # -- fitting helpers --------------------------------------------------

    def start_eta(self, y) -> np.ndarray:
        """Starting linear predictors: the first link applied to ``y``, zero for the others.

        Counts outside the first parameter's domain are clipped into it.
        """
        y = np.asarray(y, dtype=float)
        lo, hi = self.links[0].domain
        if np.isfinite(hi):
            mu = np.clip(y, lo + 1e-3 * (hi - lo), hi - 1e-3 * (hi - lo))
        else:
            mu = np.maximum(y, lo + 1e-3)
        out = np.zeros((y.size, self.p))
        out[:, 0] = self.links[0](mu)
        return out

    def get_start(self, frame) -> np.ndarray:
        """Starting coefficients: Poisson GLM for the first block, zeros elsewhere."""
        X = frame.blocks[0]
        beta0 = poisson_glm(frame.y, X, frame.weights, frame.offsets[:, 0])
        rest = np.zeros(sum(frame.block_widths[1:]))
        return np.concatenate([beta0, rest])

    def saturated_loglik(self, y_values) -> dict[float, float]:
        """Per-observation maximum of the truncated log-pmf for each count."""
        out = {}
        for yv in np.unique(np.asarray(y_values, dtype=float)):
            out[float(yv)] = self._saturated_one(float(yv))
        return out

    def _saturated_one(self, yv: float) -> float:
        y = np.array([yv])

        def neg(e):
            return -self.loglik_terms(y, e[None, :])[0]

        def grad(e):
            return -self.gradient(y, e[None, :])[0]

        best = -np.inf
        for start in (-2.0, 0.0, 2.0):
            x0 = np.full(self.p, start)
            try:
                res = optimize.minimize(neg, x0, jac=grad, method="L-BFGS-B", bounds=[(-30, 30)] * self.p)
                val = -res.fun
            except (FloatingPointError, ValueError):
                continue
            if np.isfinite(val):
                best = max(best, val)
        return float(min(best, 0.0))

    def deviance_residuals(self, y, eta, weights=None) -> np.ndarray:
        """``sign(y - E[Y|Y>=m]) * sqrt(2 w (l_sat - l))``."""
        y = np.asarray(y, dtype=float)
        sat = self.saturated_loglik(y)
        lsat = np.array([sat[float(v)] for v in y])
        ll = self.loglik_terms(y, eta)
        mu, _ = self.mean_variance(eta)
        w = np.ones_like(y) if weights is None else np.broadcast_to(np.asarray(weights, float), y.shape)
        return np.sign(y - mu) * np.sqrt(np.maximum(2.0 * w * (lsat - ll), 0.0))


def _beta_gradient(g_eta: np.ndarray, X) -> np.ndarray:
    if hasattr(X, "xt_dot"):
        return X.xt_dot(g_eta)
    X = np.asarray(X, dtype=float)
    return X.T @ g_eta.T.ravel()


def poisson_glm(y, X, weights=None, offset=None, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Coefficients of a log-link Poisson GLM fitted by IRLS."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.shape[1] == 0:
        return np.zeros(0)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    o = np.zeros_like(y) if offset is None else np.asarray(offset, dtype=float)
    mu = y + 0.1
    eta = np.log(mu)
    beta = np.zeros(X.shape[1])
    dev_old = np.inf
    for _ in range(max_iter):
        z = eta - o + (y - mu) / mu
        ww = w * mu
        XtW = X.T * ww
        A = XtW @ X
        try:
            beta = np.linalg.solve(A, XtW @ z)
        except np.linalg.LinAlgError:
            rank = np.linalg.matrix_rank(A)
            raise np.linalg.LinAlgError(
                f"collinear design for start values: rank {rank} < {X.shape[1]} columns"
            ) from None
        eta = X @ beta + o
        mu = np.exp(eta)
        with np.errstate(divide="ignore", invalid="ignore"):
            dev = 2 * np.sum(w * (np.where(y > 0, y * np.log(y / mu), 0.0) - (y - mu)))
        if abs(dev - dev_old) / (abs(dev) + 0.1) < tol:
            break
        dev_old = dev
    return beta


# -- registry -------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., CountFamily]] = {}


def register_family(family: CountFamily | Callable[..., CountFamily], name: str | None = None):
    """Make a family available by name to :func:`get_family` and the CLI.

    ``family`` is either a factory accepting link keyword arguments or a
    family instance.  Returns the registered name.
    """
    if isinstance(family, CountFamily):
        instance = family
        factory = lambda **kw: instance if not kw else type(instance)(**kw)  # noqa: E731
        name = name or instance.name
        _validate(instance)
    else:
        factory = family
        if name is None:
            name = factory().name
        _validate(factory())
    if name in _REGISTRY:
        raise ValueError(f"a family named {name!r} is already registered")
    _REGISTRY[name] = factory
    return name


def unregister_family(name: str) -> None:
    _REGISTRY.pop(name, None)


def _validate(fam: CountFamily) -> None:
    cls = type(fam)
    overrides_pair = cls._logpmf is not CountFamily._logpmf and cls._score is not CountFamily._score
    if not overrides_pair and cls._logpmf_score is CountFamily._logpmf_score:
        raise TypeError(f"{fam.name}: custom families must implement _logpmf and _score")
    if len(fam.links) != len(fam.eta_names):
        raise ValueError(f"{fam.name}: one link per parameter required")


def get_family(name: str | CountFamily, **links) -> CountFamily:
    """Instantiate a registered family, e.g. ``get_family("oiztgeom", omega_link="cloglog")``."""
    if isinstance(name, CountFamily):
        return name
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; available: {', '.join(sorted(_REGISTRY))}") from None
    return factory(**links)


def available_families() -> list[str]:
    return sorted(_REGISTRY)
