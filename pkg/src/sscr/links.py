"""Link functions mapping distribution parameters to linear predictors.

Each link carries the forward map ``g(mu) = eta``, its inverse and the
first two derivatives of the inverse with respect to ``eta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special, stats

__all__ = ["Link", "get_link", "LINKS"]


@dataclass(frozen=True)
class Link:
    name: str
    link: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    dinverse: Callable[[np.ndarray], np.ndarray]
    d2inverse: Callable[[np.ndarray], np.ndarray]
    # open interval the parameter lives in
    domain: tuple[float, float]

    def __call__(self, mu):
        return self.link(np.asarray(mu, dtype=float))

    def __repr__(self) -> str:
        return f"Link({self.name!r})"


def _exp(eta):
    return np.exp(np.asarray(eta, dtype=float))


def _logit_d(eta):
    mu = special.expit(eta)
    return mu * (1.0 - mu)


def _logit_d2(eta):
    mu = special.expit(eta)
    return mu * (1.0 - mu) * (1.0 - 2.0 * mu)


def _cloglog_inv(eta):
    return -np.expm1(-np.exp(eta))


def _cloglog_d(eta):
    e = np.exp(eta)
    return e * np.exp(-e)


def _cloglog_d2(eta):
    e = np.exp(eta)
    return e * np.exp(-e) * (1.0 - e)


def _probit_d2(eta):
    return -eta * stats.norm.pdf(eta)


LINKS: dict[str, Link] = {
    "log": Link("log", np.log, _exp, _exp, _exp, (0.0, np.inf)),
    "logit": Link("logit", special.logit, special.expit, _logit_d, _logit_d2, (0.0, 1.0)),
    "cloglog": Link(
        "cloglog",
        lambda mu: np.log(-np.log1p(-mu)),
        _cloglog_inv,
        _cloglog_d,
        _cloglog_d2,
        (0.0, 1.0),
    ),
    "probit": Link("probit", stats.norm.ppf, stats.norm.cdf, stats.norm.pdf, _probit_d2, (0.0, 1.0)),
    "neglog": Link(
        "neglog",
        lambda mu: -np.log(mu),
        lambda eta: np.exp(-np.asarray(eta, dtype=float)),
        lambda eta: -np.exp(-np.asarray(eta, dtype=float)),
        lambda eta: np.exp(-np.asarray(eta, dtype=float)),
        (0.0, np.inf),
    ),
}


def get_link(name: str | Link) -> Link:
    if isinstance(name, Link):
        return name
    try:
        return LINKS[name]
    except KeyError:
        raise ValueError(f"unknown link {name!r}; choose from {sorted(LINKS)}") from None
