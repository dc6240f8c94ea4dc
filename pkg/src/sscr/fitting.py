"""Coefficient estimation for multi-parameter count regressions.

The main routine is an IRLS scheme with per-row ``p x p`` weight blocks
(expected information) and step-halving that keeps the log-likelihood
monotone.  A quasi-Newton fallback maximises the same likelihood with the
analytic gradient mapped through the design.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .families import CountFamily
from .model_frame import DesignBlocks

log = logging.getLogger(__name__)

__all__ = [
    "ConvergenceWarning",
    "FitControl",
    "FitResult",
    "fit",
    "fit_irls",
    "fit_fallback",
    "coefficient_covariance",
]

_RANK_TOL = 1e-12
_EIG_FLOOR = 1e-12
_RIDGE = 1e-10


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitControl:
    """Numerical settings of the fitter.

    ``max_iter=None`` means 100 for IRLS and 1000 for the fallback.
    """

    max_iter: int | None = None
    tolerance: float = 1e-8
    silent: bool = False
    step_halving_max: int = 30
    method: str = "IRLS"
    optimizer: str = "BFGS"

    def __post_init__(self):
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.step_halving_max < 0:
            raise ValueError("step_halving_max must be nonnegative")
        if self.method not in ("IRLS", "fallback"):
            raise ValueError("method must be 'IRLS' or 'fallback'")

    @property
    def iterations(self) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return 100 if self.method == "IRLS" else 1000


class _VlmDesign:
    """Adapter giving a stacked ``(n p) x q`` matrix the block-design interface."""

    def __init__(self, X, p: int):
        X = np.asarray(X, dtype=float)
        if X.shape[0] % p:
            raise ValueError(f"vlm matrix has {X.shape[0]} rows, not a multiple of p={p}")
        self.X = X
        self.p = p
        self.n = X.shape[0] // p
        self.n_coef = X.shape[1]
        self._X3 = X.reshape(p, self.n, self.n_coef)

    def eta(self, beta, offsets):
        return (self.X @ beta).reshape(self.p, self.n).T + offsets

    def xt_dot(self, g):
        return self.X.T @ g.T.ravel()

    def xtwx(self, W):
        return np.einsum("anq,nab,bnr->qr", self._X3, W, self._X3, optimize=True)

    def rows(self, idx):
        """Per-row ``p x q`` design matrices, shape ``(len(idx), p, q)``."""
        return self._X3[:, idx, :].transpose(1, 0, 2)


class _BlockDesign:
    def __init__(self, frame: DesignBlocks):
        self.frame = frame
        self.p = frame.p
        self.n = frame.n
        self.n_coef = frame.n_coef

    def eta(self, beta, offsets):
        cols = [X @ b for X, b in zip(self.frame.blocks, self.frame.split(beta))]
        return np.column_stack(cols) + offsets

    def xt_dot(self, g):
        return self.frame.xt_dot(g)

    def xtwx(self, W):
        return self.frame.xtwx(W)

    def rows(self, idx):
        idx = np.asarray(idx)
        out = np.zeros((idx.size, self.p, self.n_coef))
        start = 0
        for j, block in enumerate(self.frame.blocks):
            width = block.shape[1]
            out[:, j, start:start + width] = block[idx]
            start += width
        return out


def _design(X, p: int):
    return _BlockDesign(X) if isinstance(X, DesignBlocks) else _VlmDesign(X, p)


@dataclass
class FitResult:
    """Outcome of a fit.

    ``weights_final`` holds the per-row expected information blocks at
    the last accepted iterate; ``beta_cov`` is the inverse of
    ``X^T W X`` there.  ``history`` is the sequence of accepted
    log-likelihood values.
    """

    beta: np.ndarray
    eta: np.ndarray
    log_lik: float
    iterations: int
    weights_final: np.ndarray
    converged: bool
    beta_cov: np.ndarray | None
    method: str = "IRLS"
    message: str = ""
    history: list[float] = field(default_factory=list)
    family: CountFamily | None = field(default=None, repr=False)
    y: np.ndarray | None = field(default=None, repr=False)
    design: object = field(default=None, repr=False)
    offsets: np.ndarray | None = field(default=None, repr=False)
    prior_weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_coef(self) -> int:
        return int(self.beta.size)

    @property
    def df_residual(self) -> int:
        """``n p - q``: rows of the stacked design minus coefficients."""
        return int(self.eta.size - self.beta.size)

    def score(self) -> np.ndarray:
        """Gradient of the log-likelihood with respect to the coefficients."""
        g = self.family.gradient(self.y, self.eta, self.prior_weights)
        return _design(self.design, self.family.p).xt_dot(g)


def _check_inputs(y, X, family, offsets, weights, start):
    y = np.asarray(y, dtype=float)
    family.check_support(y)
    design = _design(X, family.p)
    if design.p != family.p:
        raise ValueError(f"design has {design.p} blocks but {family.name} has {family.p} parameters")
    if design.n != y.size:
        raise ValueError(f"design has {design.n} rows but y has {y.size}")
    n, p = y.size, family.p
    offsets = np.zeros((n, p)) if offsets is None else np.broadcast_to(np.asarray(offsets, float).reshape(n, -1), (n, p))
    weights = np.ones(n) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    if np.any(weights < 0):
        raise ValueError("prior weights must be nonnegative")
    if start is None:
        return y, design, offsets, weights, None
    start = np.asarray(start, dtype=float).ravel()
    if start.size != design.n_coef:
        raise ValueError(f"start has {start.size} values, design has {design.n_coef} columns")
    return y, design, offsets, weights, start


def _regularise(W):
    """Add a small ridge to blocks whose smallest eigenvalue is (near) zero."""
    p = W.shape[1]
    if p == 1:
        tiny = W[:, 0, 0] < _EIG_FLOOR
    else:
        tiny = np.linalg.eigvalsh(W)[:, 0] < _EIG_FLOOR
    if np.any(tiny):
        W = W.copy()
        W[tiny] += _RIDGE * np.eye(p)
    return W


def _solve_normal(A, b):
    """Solve ``A x = b`` for symmetric PSD ``A``; error below relative rank tolerance."""
    if not np.all(np.isfinite(A)):
        raise np.linalg.LinAlgError("non-finite entries in X^T W X")
    vals, vecs = np.linalg.eigh(A)
    top = max(vals[-1], 0.0)
    keep = vals > _RANK_TOL * top
    rank = int(keep.sum())
    if rank < A.shape[0] or top == 0:
        raise np.linalg.LinAlgError(f"X^T W X is singular: numerical rank {rank} of {A.shape[0]} columns")
    return vecs @ ((vecs.T @ b) / vals)


def _cov_from(A):
    vals, vecs = np.linalg.eigh(A)
    top = max(vals[-1], 0.0)
    rank = int(np.sum(vals > _RANK_TOL * top))
    if rank < A.shape[0] or top == 0:
        raise np.linalg.LinAlgError(f"information matrix is singular: numerical rank {rank} of {A.shape[0]}")
    cov = (vecs / vals) @ vecs.T
    return (cov + cov.T) / 2.0


def _loglik(family, y, eta, weights):
    if not np.all(np.isfinite(eta)):
        return -np.inf
    with np.errstate(all="ignore"):
        return family.log_likelihood(y, eta, weights)


def _wls_step(family, design, y, eta, offsets, weights):
    """Coefficients of one weighted least-squares step from ``eta``."""
    W = _regularise(family.information(y, eta, None))
    score = family.gradient(y, eta, None)
    # working response: eta - offset + W^{-1} dl/deta, one small solve per row
    Z = eta - offsets + np.linalg.solve(W, score[:, :, None])[:, :, 0]
    Ww = W * weights[:, None, None]
    WZ = np.einsum("nij,nj->ni", Ww, Z)
    return _solve_normal(design.xtwx(Ww), design.xt_dot(WZ))


def fit_irls(y, X, family: CountFamily, offsets=None, weights=None, start=None, control: FitControl | None = None) -> FitResult:
    """Fit by iteratively reweighted least squares with step-halving.

    Parameters
    ----------
    y : array_like
        Observed counts.
    X : DesignBlocks or ndarray
        Block design or stacked ``(n p) x q`` vlm matrix.
    family : CountFamily
    offsets : array_like, optional
        ``n x p`` offsets added to the linear predictors.
    weights : array_like, optional
        Prior weights.
    start : array_like, optional
        Starting coefficients.  When omitted, the first iteration is a
        weighted least-squares step from the linear predictors
        ``family.start_eta(y)`` and counts as iteration 1.
    control : FitControl, optional

    Returns
    -------
    FitResult

    Notes
    -----
    Iteration stops once the log-likelihood changes by less than
    ``tolerance * (|loglik| + 0.1)`` and no coefficient moves by more
    than ``sqrt(tolerance)``.
    """
    control = control or FitControl()
    if isinstance(X, DesignBlocks):
        offsets = X.offsets if offsets is None else offsets
        weights = X.weights if weights is None else weights
    y, design, offsets, weights, beta = _check_inputs(y, X, family, offsets, weights, start)
    tol = control.tolerance
    if beta is None:
        # no coefficients yet: the first step is accepted unconditionally
        eta = family.start_eta(y)
        ll = -np.inf
    else:
        eta = design.eta(beta, offsets)
        ll = _loglik(family, y, eta, weights)
        if not np.isfinite(ll):
            raise ValueError(f"{family.name}: log-likelihood is not finite at the start values")
    history = [ll] if beta is not None else []
    converged = False
    message = "maximum number of iterations reached"
    it = 0
    for it in range(1, control.iterations + 1):
        beta_new = _wls_step(family, design, y, eta, offsets, weights)
        eta_new = design.eta(beta_new, offsets)
        ll_new = _loglik(family, y, eta_new, weights)
        if beta is None:
            if not np.isfinite(ll_new):
                if not isinstance(X, DesignBlocks):
                    raise ValueError(f"{family.name}: first step from the default start failed; supply start values")
                log.info("first step from the default start failed; restarting from the GLM start")
                beta_new = family.get_start(X)
                eta_new = design.eta(beta_new, offsets)
                ll_new = _loglik(family, y, eta_new, weights)
                if not np.isfinite(ll_new):
                    raise ValueError(f"{family.name}: log-likelihood is not finite at the start values")
            beta, eta, ll = beta_new, eta_new, ll_new
            history = [ll]
            if not control.silent:
                log.info("iteration %d: log-likelihood %.6f", it, ll)
            continue
        # tiny decreases are rounding noise, anything larger triggers halving
        slack = 1e-12 * (abs(ll) + 1.0)
        h = 0
        while not (ll_new >= ll - slack):
            h += 1
            if h > control.step_halving_max:
                break
            cand = beta + 2.0**-h * (beta_new - beta)
            eta_c = design.eta(cand, offsets)
            ll_c = _loglik(family, y, eta_c, weights)
            beta_new, eta_new, ll_new = cand, eta_c, ll_c
        if h > control.step_halving_max:
            message = "step-halving exhausted without improving the log-likelihood"
            warnings.warn(f"{family.name}: {message}; returning the best iterate", ConvergenceWarning, stacklevel=2)
            it -= 1
            break
        if h and not control.silent:
            log.info("iteration %d: step halved %d time(s)", it, h)
        d_ll = abs(ll_new - ll)
        d_beta = float(np.max(np.abs(beta_new - beta), initial=0.0))
        beta, eta, ll = beta_new, eta_new, ll_new
        history.append(ll)
        if not control.silent:
            log.info("iteration %d: log-likelihood %.6f, max |change in beta| %.3g", it, ll, d_beta)
        if d_ll < tol * (abs(ll) + 0.1) and d_beta < np.sqrt(tol):
            converged = True
            message = "converged"
            break
    else:
        warnings.warn(f"{family.name}: IRLS did not converge in {control.iterations} iterations", ConvergenceWarning, stacklevel=2)
    W = family.information(y, eta, weights)
    try:
        cov = _cov_from(design.xtwx(W))
    except np.linalg.LinAlgError as exc:
        if converged:
            raise
        (log.debug if control.silent else log.warning)("covariance unavailable: %s", exc)
        cov = None
    return FitResult(
        beta=beta, eta=eta, log_lik=float(ll), iterations=it, weights_final=W, converged=converged,
        beta_cov=cov, method="IRLS", message=message, history=history, family=family, y=y,
        design=X, offsets=offsets, prior_weights=weights,
    )


def fit_fallback(y, X, family: CountFamily, offsets=None, weights=None, start=None, control: FitControl | None = None) -> FitResult:
    """Maximise the log-likelihood with a quasi-Newton optimiser.

    Uses :func:`scipy.optimize.minimize` (``control.optimizer``, BFGS by
    default) with the analytic coefficient gradient.
    """
    control = control or FitControl(method="fallback")
    if isinstance(X, DesignBlocks):
        offsets = X.offsets if offsets is None else offsets
        weights = X.weights if weights is None else weights
    y, design, offsets, weights, beta0 = _check_inputs(y, X, family, offsets, weights, start)
    if beta0 is None:
        beta0 = _wls_step(family, design, y, family.start_eta(y), offsets, weights)
        if not np.isfinite(_loglik(family, y, design.eta(beta0, offsets), weights)) and isinstance(X, DesignBlocks):
            beta0 = family.get_start(X)
    max_iter = control.max_iter if control.max_iter is not None else 1000
    history: list[float] = []

    def objective(beta):
        eta = design.eta(beta, offsets)
        ll = _loglik(family, y, eta, weights)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(beta)
        try:
            g = design.xt_dot(family.gradient(y, eta, weights))
        except FloatingPointError:
            return np.inf, np.zeros_like(beta)
        history.append(ll)
        return -ll, -g

    f0, _ = objective(beta0)
    if not np.isfinite(f0):
        raise ValueError(f"{family.name}: log-likelihood is not finite at the start values")
    with np.errstate(all="ignore"):
        res = optimize.minimize(
            objective, beta0, jac=True, method=control.optimizer,
            options={"maxiter": max_iter, "gtol": max(control.tolerance, 1e-10) * 1e3},
        )
    beta = res.x
    eta = design.eta(beta, offsets)
    ll = _loglik(family, y, eta, weights)
    # a line-search stall at a stationary point is still convergence
    g_max = float(np.max(np.abs(res.jac), initial=0.0)) if hasattr(res, "jac") else np.inf
    converged = bool(res.success) or (res.status == 2 and g_max < 1e-4)
    if not converged:
        warnings.warn(f"{family.name}: optimiser stopped early: {res.message}", ConvergenceWarning, stacklevel=2)
    W = family.information(y, eta, weights)
    try:
        cov = _cov_from(design.xtwx(W))
    except np.linalg.LinAlgError as exc:
        (log.debug if control.silent else log.warning)("covariance unavailable: %s", exc)
        cov = None
    return FitResult(
        beta=beta, eta=eta, log_lik=float(ll), iterations=int(res.nit), weights_final=W, converged=converged,
        beta_cov=cov, method="fallback", message=str(res.message), history=history, family=family, y=y,
        design=X, offsets=offsets, prior_weights=weights,
    )


def fit(frame: DesignBlocks, family: CountFamily, control: FitControl | None = None, start=None) -> FitResult:
    """Fit ``family`` to a model frame with the method chosen in ``control``."""
    control = control or FitControl()
    fn = fit_irls if control.method == "IRLS" else fit_fallback
    return fn(frame.y, frame, family, frame.offsets, frame.weights, start, control)


def coefficient_covariance(result: FitResult, kind: str = "expected") -> np.ndarray:
    """Coefficient covariance from expected or observed information.

    The observed information is the negative Hessian of the
    log-likelihood, obtained by central differences of the analytic
    coefficient gradient.
    """
    design = _design(result.design, result.family.p)
    if kind == "expected":
        W = result.family.information(result.y, result.eta, result.prior_weights)
        return _cov_from(design.xtwx(W))
    if kind != "observed":
        raise ValueError("kind must be 'expected' or 'observed'")
    fam, y, w, o = result.family, result.y, result.prior_weights, result.offsets

    def grad(beta):
        return design.xt_dot(fam.gradient(y, design.eta(beta, o), w))

    q = result.beta.size
    H = np.empty((q, q))
    for j in range(q):
        step = 1e-5 * max(1.0, abs(result.beta[j]))
        e = np.zeros(q)
        e[j] = step
        H[:, j] = (grad(result.beta + e) - grad(result.beta - e)) / (2 * step)
    H = (H + H.T) / 2.0
    return _cov_from(-H)
