"""Built-in families: truncated Poisson, geometric and NB2 models with
one-inflation and hurdle variants, plus Chao's and Zelterman's estimators.

All probabilities are handled on the log scale.  Every family here is
defined through the distribution of ``Y*`` on ``{0, 1, 2, ...}``:

=============  ==========================================================
``zt``         ``P*(y) = P(y)``
``zot``        ``P*(y) = P(y)``, only counts >= 2 observable
``ztoi``       ``P*(0) = P0``, ``P*(1) = w(1-P0) + (1-w)P1``,
               ``P*(y) = (1-w)P(y)`` for ``y > 1``
``oizt``       ``P*(1) = w + (1-w)P1``, ``P*(y) = (1-w)P(y)`` otherwise
``ztHurdle``   ``P*(0) = P0/(1-P1)``, ``P*(1) = pi(1-P0-P1)/(1-P1)``,
               ``P*(y) = (1-pi)P(y)/(1-P1)`` for ``y > 1``
``Hurdlezt``   ``P*(1) = pi``, ``P*(y) = (1-pi)P(y)/(1-P1)`` otherwise
=============  ==========================================================

where ``P`` is the Poisson, geometric or NB2 pmf.
"""

from __future__ import annotations

import logging
from functools import partial

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from .base import CountFamily, log1mexp, register_family

log = logging.getLogger(__name__)

__all__ = ["TruncatedCountFamily", "ChaoFamily", "ZeltermanFamily"]


# -- untruncated base distributions -----------------------------------------
# Each returns log P(y) with shape (n, K) and d log P / d theta with shape
# (n, K, n_params); parameters arrive as (n, 1) columns.


def _poisson(y, lam):
    lp = xlogy(y, lam) - lam - gammaln(y + 1.0)
    sc = (y / lam - 1.0)[..., None]
    return lp, sc


def _geometric(y, lam):
    lp = xlogy(y, lam) - (y + 1.0) * np.log1p(lam)
    sc = (y / lam - (y + 1.0) / (1.0 + lam))[..., None]
    return lp, sc


def _negbin(y, lam, alpha):
    r = 1.0 / alpha
    al = alpha * lam
    l1p = np.log1p(al)
    lp = gammaln(y + r) - gammaln(r) - gammaln(y + 1.0) - r * l1p + xlogy(y, al) - y * l1p
    d_lam = y / lam - (1.0 + alpha * y) / (1.0 + al)
    d_r = digamma(y + r) - digamma(r) - l1p + alpha * (lam - y) / (1.0 + al)
    d_alpha = -d_r / alpha**2
    return lp, np.stack(np.broadcast_arrays(d_lam, d_alpha), axis=-1)


def _base_moments(base, lam, alpha=None):
    if base == "poisson":
        var = lam
    elif base == "geom":
        var = lam * (1.0 + lam)
    else:
        var = lam * (1.0 + alpha * lam)
    return lam, var + lam**2


_BASES = {
    "poisson": (_poisson, ("lambda",)),
    "geom": (_geometric, ("lambda",)),
    "negbin": (_negbin, ("lambda", "alpha")),
}


# -- log-scale helpers --------------------------------------------------------


def _logadd(la, sa, lb, sb):
    """``log(A + B)`` and its score from the logs and scores of A and B."""
    with np.errstate(invalid="ignore"):
        l = np.logaddexp(la, lb)
        wa = np.nan_to_num(np.exp(la - l))[..., None]
        wb = np.nan_to_num(np.exp(lb - l))[..., None]
    sa = np.where(wa > 0, sa, 0.0)
    sb = np.where(wb > 0, sb, 0.0)
    return l, wa * sa + wb * sb


def _log_complement(l, s):
    """``log(1 - A)`` and its score from ``log A`` and its score."""
    out = log1mexp(np.minimum(l, 0.0))
    with np.errstate(invalid="ignore", over="ignore"):
        ratio = np.exp(l - out)[..., None]
    return out, -ratio * s


def _pad(s, width):
    """Append zero columns for parameters a term does not depend on."""
    pad = np.zeros(s.shape[:-1] + (width,))
    return np.concatenate([s, pad], axis=-1)


def _extra(shape, value):
    """Score columns that only depend on the extra parameter."""
    return np.broadcast_to(value, shape)[..., None]


class TruncatedCountFamily(CountFamily):
    """A base count distribution combined with a truncation/inflation scheme."""

    KINDS = ("zt", "zot", "ztoi", "oizt", "ztHurdle", "Hurdlezt")

    def __init__(self, base: str, kind: str, links=None):
        if base not in _BASES:
            raise ValueError(f"unknown base distribution {base!r}")
        if kind not in self.KINDS:
            raise ValueError(f"unknown family kind {kind!r}")
        self.base = base
        self.kind = kind
        self.name = f"{kind}{base}"
        names = _BASES[base][1]
        if kind in ("ztoi", "oizt"):
            names = names + ("omega",)
        elif kind in ("ztHurdle", "Hurdlezt"):
            names = names + ("pi",)
        self.eta_names = names
        self.min_count = 2 if kind == "zot" else 1
        if kind == "oizt":
            self.sampling_variance = "linear"
        if links is None:
            links = ["logit" if n in ("omega", "pi") else "log" for n in names]
        super().__init__(links)

    def __reduce__(self):
        return (TruncatedCountFamily, (self.base, self.kind, [lk.name for lk in self.links]))

    @property
    def _nb(self) -> int:
        return len(_BASES[self.base][1])

    def _base(self, y, theta):
        fn = _BASES[self.base][0]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return fn(y, *theta[: self._nb])

    def _logpmf_score(self, y, theta):
        y = np.asarray(y, dtype=float)
        kind = self.kind
        lpy, spy = self._base(y, theta)
        if kind in ("zt", "zot"):
            return lpy, spy
        n = y.shape[0]
        lp0, sp0 = self._base(np.zeros((n, 1)), theta)
        lp1, sp1 = self._base(np.ones((n, 1)), theta)
        w = theta[-1]
        shape = y.shape
        with np.errstate(divide="ignore", invalid="ignore"):
            lw, l1w = np.log(w), np.log1p(-w)
            inv_w, inv_1w = 1.0 / w, -1.0 / (1.0 - w)
        # every branch yields (log P*, score) with the extra parameter last
        if kind == "ztoi":
            l_nz, s_nz = _log_complement(lp0, sp0)
            l1, s1 = _logadd(
                lw + l_nz, np.concatenate([s_nz, _extra(s_nz.shape[:-1], inv_w)], -1),
                l1w + lp1, np.concatenate([sp1, _extra(sp1.shape[:-1], inv_1w)], -1),
            )
            branches = [
                (y == 0, lp0, _pad(sp0, 1)),
                (y == 1, l1, s1),
                (y > 1, l1w + lpy, np.concatenate([spy, _extra(shape, inv_1w)], -1)),
            ]
        elif kind == "oizt":
            zeros = np.zeros_like(sp1)
            l1, s1 = _logadd(
                lw + np.zeros_like(lp1), np.concatenate([zeros, _extra(zeros.shape[:-1], inv_w)], -1),
                l1w + lp1, np.concatenate([sp1, _extra(sp1.shape[:-1], inv_1w)], -1),
            )
            branches = [
                (y == 1, l1, s1),
                (y != 1, l1w + lpy, np.concatenate([spy, _extra(shape, inv_1w)], -1)),
            ]
        else:
            l_n1, s_n1 = _log_complement(lp1, sp1)
            rest = (l1w + lpy - l_n1, np.concatenate([spy - s_n1, _extra(shape, inv_1w)], -1))
            if kind == "ztHurdle":
                l01, s01 = _logadd(lp0, sp0, lp1, sp1)
                l_n01, s_n01 = _log_complement(l01, s01)
                one = (lw + l_n01 - l_n1, np.concatenate([s_n01 - s_n1, _extra(s_n1.shape[:-1], inv_w)], -1))
                zero = (lp0 - l_n1, _pad(sp0 - s_n1, 1))
                branches = [(y == 0, *zero), (y == 1, *one), (y > 1, *rest)]
            else:
                one = (lw + np.zeros_like(lp1), np.concatenate([np.zeros_like(sp1), _extra(sp1.shape[:-1], inv_w)], -1))
                branches = [(y == 1, *one), (y != 1, *rest)]
        lp = np.full(shape, -np.inf)
        sc = np.zeros(shape + (self.p,))
        for mask, l, s in branches:
            l = np.broadcast_to(l, shape)
            s = np.broadcast_to(s, shape + (self.p,))
            lp = np.where(mask, l, lp)
            sc = np.where(mask[..., None], s, sc)
        return lp, sc

    def _logpmf(self, y, theta):
        return self._logpmf_score(y, theta)[0]

    def _score(self, y, theta):
        return self._logpmf_score(y, theta)[1]

    def mean_variance(self, eta, type: str = "truncated"):
        """Closed-form moments of ``Y*`` or ``Y* | Y* >= m``."""
        theta = [t[:, 0] for t in self.theta(eta)]
        lam = theta[0]
        alpha = theta[1] if self.base == "negbin" else None
        m1, m2 = _base_moments(self.base, lam, alpha)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
            lp0 = self._base(np.zeros((len(lam), 1)), [t[:, None] for t in theta])[0][:, 0]
            lp1 = self._base(np.ones((len(lam), 1)), [t[:, None] for t in theta])[0][:, 0]
        P0, P1 = np.exp(lp0), np.exp(lp1)
        kind = self.kind
        if kind in ("ztoi", "oizt", "ztHurdle", "Hurdlezt"):
            w = theta[-1]
        if kind in ("zt", "zot"):
            e1, e2 = m1, m2
        elif kind == "ztoi":
            e1 = w * (1 - P0) + (1 - w) * m1
            e2 = w * (1 - P0) + (1 - w) * m2
        elif kind == "oizt":
            e1 = w + (1 - w) * m1
            e2 = w + (1 - w) * m2
        elif kind == "ztHurdle":
            one = w * (1 - P0 - P1) / (1 - P1)
            e1 = one + (1 - w) * (m1 - P1) / (1 - P1)
            e2 = one + (1 - w) * (m2 - P1) / (1 - P1)
        else:
            e1 = w + (1 - w) * (m1 - P1) / (1 - P1)
            e2 = w + (1 - w) * (m2 - P1) / (1 - P1)
        if type != "truncated":
            return e1, e2 - e1**2
        prob, _ = self.inclusion_prob(eta)
        if self.min_count == 2:
            e1, e2 = e1 - P1, e2 - P1
        t1, t2 = e1 / prob, e2 / prob
        return t1, t2 - t1**2


def _make(base, kind, **links):
    fam = TruncatedCountFamily(base, kind)
    names = fam.eta_names
    chosen = []
    for nm, default in zip(names, fam.links):
        key = f"{nm}_link"
        chosen.append(links.pop(key, default.name))
    if links:
        raise TypeError(f"{fam.name}: unexpected link argument(s) {sorted(links)}")
    return TruncatedCountFamily(base, kind, chosen)


# -- Chao and Zelterman -------------------------------------------------------


class _SinglesDoublesFamily(CountFamily):
    """Logistic model on ``Z = 1{Y=2}`` using only units with ``Y`` in {1, 2}.

    ``lambda = exp(eta)`` (default log link) is half the Poisson rate, so
    that ``P[Z=1] = lambda / (1 + lambda)``.
    """

    eta_names = ("lambda",)
    min_count = 1

    def __init__(self, links=None):
        super().__init__(links or ["log"])

    def __reduce__(self):
        return (type(self), ([lk.name for lk in self.links],))

    def _logpmf_score(self, y, theta):
        # Poisson with rate 2 * lambda for the unobserved-count model
        lam = theta[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = xlogy(y, 2 * lam) - 2 * lam - gammaln(y + 1.0)
            sc = (y / lam - 2.0)[..., None]
        return lp, sc

    def _logpmf(self, y, theta):
        return self._logpmf_score(y, theta)[0]

    def _score(self, y, theta):
        return self._logpmf_score(y, theta)[1]

    def check_support(self, y) -> None:
        super().check_support(y)
        extra = int(np.sum(np.asarray(y) > 2))
        if extra:
            log.info("%s: %d unit(s) with counts above 2 are not used in fitting", self.name, extra)

    def loglik_terms(self, y, eta):
        y = np.asarray(y, dtype=float)
        lam = self.theta(eta)[0][:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            l1 = -np.log1p(lam)
            l2 = np.log(lam) + l1
        out = np.where(y == 1, l1, np.where(y == 2, l2, 0.0))
        out = np.where(y < 1, -np.inf, out)
        return np.where(np.isnan(out), -np.inf, out)

    def gradient(self, y, eta, weights=None):
        y = np.asarray(y, dtype=float)
        lam = self.theta(eta)[0][:, 0]
        # d/d eta through the link; for the log link this is y - 1 - p
        s = np.where(y == 1, -1.0 / (1.0 + lam), np.where(y == 2, 1.0 / (lam * (1.0 + lam)), 0.0))
        g = (s * self._jacobian(eta)[:, 0])[:, None]
        if weights is not None:
            g = g * np.asarray(weights, dtype=float).reshape(-1, 1)
        return g

    def information(self, y, eta, weights=None):
        lam = self.theta(eta)[0][:, 0]
        J = self._jacobian(eta)[:, 0]
        used = np.ones_like(lam, dtype=bool) if y is None else np.isin(np.asarray(y), (1, 2))
        info = np.where(used, J**2 / (lam * (1.0 + lam) ** 2), 0.0)[:, None, None]
        if weights is not None:
            info = info * np.asarray(weights, dtype=float).reshape(-1, 1, 1)
        return info

    def _pmf_table(self, y2, theta, type):
        if type != "truncated":
            return super()._pmf_table(y2, theta, type)
        lam = theta[0]
        p = lam / (1.0 + lam)
        return np.where(y2 == 1, 1.0 - p, np.where(y2 == 2, p, 0.0))

    def mean_variance(self, eta, type: str = "truncated"):
        lam = self.theta(eta)[0][:, 0]
        if type != "truncated":
            return 2 * lam, 2 * lam
        p = lam / (1.0 + lam)
        return 1.0 + p, p * (1.0 - p)

    def simulate(self, eta, seed=None, truncated: bool = False):
        if not truncated:
            return super().simulate(eta, seed, truncated=False)
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        lam = self.theta(eta)[0][:, 0]
        return 1.0 + (rng.random(lam.size) < lam / (1.0 + lam))

    def saturated_loglik(self, y_values):
        return {float(v): 0.0 for v in np.unique(np.asarray(y_values, dtype=float))}


class ChaoFamily(_SinglesDoublesFamily):
    """Generalised Chao lower-bound estimator.

    ``N = N_obs + sum_{y in {1,2}} 1 / (2 lambda + 2 lambda^2)``.
    """

    name = "chao"

    def inclusion_prob(self, eta, y=None):
        if y is None:
            raise ValueError("chao: counts are needed to compute unit contributions")
        lam = self.theta(eta)[0][:, 0]
        J = self._jacobian(eta)[:, 0]
        a = 2 * lam + 2 * lam**2
        used = np.isin(np.asarray(y), (1, 2))
        prob = np.where(used, a / (1.0 + a), 1.0)
        dprob = np.where(used, (2.0 + 4.0 * lam) / (1.0 + a) ** 2 * J, 0.0)
        return prob, dprob[:, None]


class ZeltermanFamily(_SinglesDoublesFamily):
    """Generalised Zelterman estimator ``N = sum 1 / (1 - exp(-2 lambda))``."""

    name = "zelterman"

    def inclusion_prob(self, eta, y=None):
        lam = self.theta(eta)[0][:, 0]
        J = self._jacobian(eta)[:, 0]
        prob = -np.expm1(-2.0 * lam)
        return prob, (2.0 * np.exp(-2.0 * lam) * J)[:, None]


def _singles(cls, lambda_link="log"):
    return cls([lambda_link])


def _register_builtins():
    for kind in TruncatedCountFamily.KINDS:
        for base in _BASES:
            register_family(partial(_make, base, kind), name=f"{kind}{base}")
    register_family(partial(_singles, ChaoFamily), name="chao")
    register_family(partial(_singles, ZeltermanFamily), name="zelterman")


_register_builtins()
