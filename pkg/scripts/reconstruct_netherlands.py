"""Rebuild a unit-level table for the Dutch irregular-immigrant register.

The original unit records are not shipped with this repository.  This
script searches, with integer linear programming, for a table of
``(gender, age, nation, capture)`` counts that is consistent with a set of
published summaries of the original data:

* the capture frequency table and the gender, age and nation margins;
* stratum population estimates and coefficients of the zero-truncated
  Poisson fit (``capture ~ gender + age + nation``);
* coefficients and log-likelihood of the one-inflated zero-truncated
  geometric fit (``capture ~ nation``, ``omega ~ gender + age`` with a
  cloglog link);
* five-number summaries of dfbeta, Pearson residuals and dfpopsize for
  both fits, and the means of the last two.

Every likelihood-based quantity of both models depends on the data only
through these constraints, so any feasible table reproduces the fitted
coefficients, standard errors, log-likelihoods, population sizes and
goodness of fit.  The reason column is not used by any model; it is
filled in with the right margin (259 illegal stay) in a fixed pattern.

Run ``python3 scripts/reconstruct_netherlands.py`` to rewrite
``tests/data/netherlandsimmigrant.csv``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import warnings
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

from sscr.families import get_family
from sscr.fitting import _design, _regularise, fit_irls
from sscr.model_frame import DesignBlocks

GENDERS = ["female", "male"]
AGES = ["<40yrs", ">40yrs"]
NATIONS = ["American and Australia", "Asia", "North Africa", "Rest of Africa", "Surinam", "Turkey"]
CELLS = list(itertools.product(GENDERS, AGES, NATIONS))
COUNTS = np.arange(1, 7)
FREQ = np.array([1645, 183, 37, 13, 1, 1])
N_UNITS = int(FREQ.sum())

BETA_ZTP = np.array([-1.3410661, 0.3971793, -0.9746058, -1.0925990, 0.1899980, -0.9106361, -2.3363949, -1.6753917])
BETA_OI_LAMBDA = np.array([-1.2552, -0.8193, 0.2057, -0.6692, -1.5205, -1.1888])
BETA_OI_OMEGA = np.array([-1.4577, -0.8738, 1.1745])
LOGLIK_OI = -829.5625

# (observed, estimated) per stratum of the truncated Poisson fit
STRATA_ZTP = {
    ("gender", "female"): (398, 3811.0911), ("gender", "male"): (1482, 8879.2594),
    ("age", "<40yrs"): (1769, 10506.8971), ("age", ">40yrs"): (111, 2183.4535),
    ("nation", "American and Australia"): (173, 708.3688), ("nation", "Asia"): (284, 2742.3147),
    ("nation", "North Africa"): (1023, 3055.2033), ("nation", "Rest of Africa"): (243, 2058.1533),
    ("nation", "Surinam"): (64, 2386.4513), ("nation", "Turkey"): (93, 1739.8592),
}

# five-number summaries (min, q1, median, q3, max); dfbeta is scaled by 100
DFBETA_ZTP = np.array([
    [-0.9909, -0.1533, 0.0191, 0.0521, 8.6619], [-9.0535, -0.0777, -0.0283, 0.1017, 2.2135],
    [-2.0010, 0.0179, 0.0379, 0.0691, 16.0061], [-9.5559, -0.0529, 0.0066, 0.0120, 17.9914],
    [-9.6605, -0.0842, -0.0177, 0.0087, 3.1260], [-9.4497, -0.0244, 0.0030, 0.0083, 10.9787],
    [-9.3138, -0.0065, 0.0021, 0.0037, 99.3383], [-9.6198, -0.0220, 0.0079, 0.0143, 32.0980],
])
DFBETA_OI = np.array([
    [-1.4640, 0.0050, 0.0184, 0.0557, 9.0600], [-6.6331, -0.0346, 0.0157, 0.0347, 12.2406],
    [-7.2770, -0.0768, -0.0170, 0.0085, 1.9415], [-6.6568, -0.0230, 0.0081, 0.0262, 7.1710],
    [-6.2308, -0.0124, 0.0162, 0.0421, 62.2045], [-6.4795, -0.0273, 0.0204, 0.0462, 21.1338],
    [-6.8668, -0.0193, 0.0476, 0.0476, 9.3389], [-2.2733, -0.2227, 0.1313, 0.2482, 11.1234],
    [-30.2130, -0.2247, -0.1312, -0.0663, 2.0393],
])
PEARSON_ZTP = ([-0.486442, -0.486442, -0.298080, -0.209444, 13.910844], 0.002093)
PEARSON_OI = ([-0.41643, -0.41643, -0.30127, -0.18323, 13.88376], 0.00314)
DFPOP_ZTP = ([-4236.407, 2.660, 2.660, 17.281, 117.445], 5.445)
DFPOP_OI = ([-456.6443, -3.1121, -0.7243, 5.1535, 103.5949], 3.4333)

# order statistics behind type-7 quantiles of 1880 values
ORDER_STATS = [(0, 0), (469, 470), (939, 940), (1409, 1410), (1879, 1879)]


def _cell_design():
    rows = []
    for g, a, nat in CELLS:
        rows.append([1.0, g == "male", a == ">40yrs"] + [nat == other for other in NATIONS[1:]])
    X = np.array(rows, dtype=float)
    return X, X[:, [0, 3, 4, 5, 6, 7]], X[:, [0, 1, 2]]


X_ZTP, X_LAMBDA, X_OMEGA = _cell_design()


class Problem:
    """Linear constraints on nonnegative integer variables."""

    def __init__(self, n_var: int):
        self.n_var = n_var
        self.rows: list[np.ndarray] = []
        self.lo: list[float] = []
        self.hi: list[float] = []

    def add(self, row, lo, hi):
        self.rows.append(np.asarray(row, dtype=float))
        self.lo.append(lo)
        self.hi.append(hi)

    def solve(self, seed: int = 0) -> np.ndarray:
        cost = np.random.default_rng(seed).normal(size=self.n_var)
        res = milp(
            cost, constraints=[LinearConstraint(np.array(self.rows), self.lo, self.hi)],
            integrality=np.ones(self.n_var), bounds=Bounds(0, N_UNITS), options={"time_limit": 300},
        )
        if res.x is None:
            raise RuntimeError(f"no feasible table: {res.message}")
        return np.round(res.x).astype(int)


def cell_sizes() -> np.ndarray:
    """Units per covariate cell, pinned by the margins and stratum estimates."""
    lam = np.exp(X_ZTP @ BETA_ZTP)
    contr = 1.0 / -np.expm1(-lam)
    prob = Problem(len(CELLS))
    pos = {"gender": 0, "age": 1, "nation": 2}
    for (var, level), (obs, est) in STRATA_ZTP.items():
        mask = np.array([c[pos[var]] == level for c in CELLS], dtype=float)
        prob.add(mask, obs, obs)
        prob.add(mask * contr, est - 0.01, est + 0.01)
    return prob.solve()


def _oi_family():
    return get_family("oiztgeom", omega_link="cloglog")


def base_problem(sizes: np.ndarray) -> Problem:
    """Cell-by-count problem with margins, score equations and log-likelihood."""
    C, K = len(CELLS), COUNTS.size
    prob = Problem(C * K)
    for c in range(C):
        row = np.zeros((C, K))
        row[c] = 1
        prob.add(row.ravel(), sizes[c], sizes[c])
    for k in range(K):
        row = np.zeros((C, K))
        row[:, k] = 1
        prob.add(row.ravel(), FREQ[k], FREQ[k])
    # truncated Poisson score: X^T y equals X^T of the fitted truncated means
    lam = np.exp(X_ZTP @ BETA_ZTP)
    target = X_ZTP.T @ (sizes * lam / -np.expm1(-lam))
    for j in range(X_ZTP.shape[1]):
        prob.add((X_ZTP[:, [j]] * COUNTS[None, :]).ravel(), round(target[j]), round(target[j]))
    # one-inflated geometric: score near zero within coefficient rounding
    fam = _oi_family()
    eta = np.column_stack([X_LAMBDA @ BETA_OI_LAMBDA, X_OMEGA @ BETA_OI_OMEGA])
    ll = np.zeros((C, K))
    score = np.zeros((C, K, 9))
    for k, y in enumerate(COUNTS):
        yy = np.full(C, float(y))
        ll[:, k] = fam.loglik_terms(yy, eta)
        g = fam.gradient(yy, eta)
        score[:, k, :6] = g[:, [0]] * X_LAMBDA
        score[:, k, 6:] = g[:, [1]] * X_OMEGA
    rows = np.zeros((C, 2, 9))
    rows[:, 0, :6] = X_LAMBDA
    rows[:, 1, 6:] = X_OMEGA
    info = np.einsum("c,cai,cab,cbj->ij", sizes, rows, fam.information(None, eta), rows)
    slack = np.abs(info) @ np.full(9, 5e-5)
    for j in range(9):
        prob.add(score[:, :, j].ravel(), -slack[j], slack[j])
    prob.add(ll.ravel(), LOGLIK_OI - 1e-4, LOGLIK_OI + 1e-4)
    return prob


def expand(table: np.ndarray):
    cell, y = [], []
    for c in range(len(CELLS)):
        for k, count in enumerate(COUNTS):
            cell += [c] * int(table[c, k])
            y += [float(count)] * int(table[c, k])
    return np.array(cell), np.array(y)


def type_values(table: np.ndarray, family, blocks):
    """dfbeta (x100), Pearson residual and dfpopsize of every cell-by-count type."""
    cell, y = expand(table)
    frame = DesignBlocks.from_arrays(y, [b[cell] for b in blocks])
    res = fit_irls(y, frame, family)
    design = _design(frame, family.p)

    def working(yy, eta):
        W = _regularise(family.information(yy, eta, None))
        s = family.gradient(yy, eta, None)
        return W, eta + np.linalg.solve(W, s[:, :, None])[:, :, 0]

    W, Z = working(y, res.eta)
    A = design.xtwx(W)
    b = design.xt_dot(np.einsum("nij,nj->ni", W, Z))
    C, K = len(CELLS), COUNTS.size
    t_cell = np.repeat(np.arange(C), K)
    t_y = np.tile(COUNTS, C).astype(float)
    t_frame = DesignBlocks.from_arrays(t_y, [bl[t_cell] for bl in blocks])
    t_design = _design(t_frame, family.p)
    zero = np.zeros((t_y.size, family.p))
    t_eta = t_design.eta(res.beta, zero)
    Wt, Zt = working(t_y, t_eta)
    Xk = t_design.rows(np.arange(t_y.size))
    Ak = np.einsum("kaq,kab,kbr->kqr", Xk, Wt, Xk)
    bk = np.einsum("kaq,kab,kb->kq", Xk, Wt, Zt)
    beta_k = np.linalg.solve(A[None] - Ak, (b[None] - bk)[:, :, None])[:, :, 0]
    dfb = 100.0 * (res.beta[None] - beta_k)
    mu, var = family.mean_variance(t_eta, "truncated")
    pearson = (t_y - mu) / np.sqrt(var)
    sizes = table.sum(axis=1)
    c_frame = DesignBlocks.from_arrays(np.ones(C), blocks)
    c_design = _design(c_frame, family.p)
    ones = np.ones(C)

    def contributions(beta):
        return family.point_estimate(c_design.eta(beta, np.zeros((C, family.p))), ones, ones, contribution=True)

    total = sizes @ contributions(res.beta)
    dfpop = np.empty(t_y.size)
    for k in range(t_y.size):
        contr = contributions(beta_k[k])
        dfpop[k] = total - (sizes @ contr - contr[t_cell[k]])
    return dfb, pearson, dfpop


def add_summary(prob: Problem, values, five, half_width, mean=None, mean_half=None):
    """Order-statistic windows for a five-number summary, plus an optional mean."""
    for (k_lo, k_hi), target in zip(ORDER_STATS, five):
        below = (values < target - half_width).astype(float)
        above = (values > target + half_width).astype(float)
        prob.add(below, 0, k_lo)
        prob.add(above, 0, N_UNITS - 1 - k_hi)
    if mean is not None:
        prob.add(values, N_UNITS * (mean - mean_half), N_UNITS * (mean + mean_half))


def reconstruct(seed: int = 0) -> np.ndarray:
    sizes = cell_sizes()
    prob = base_problem(sizes)
    first = prob.solve(seed).reshape(len(CELLS), COUNTS.size)
    ztp = type_values(first, get_family("ztpoisson"), [X_ZTP])
    oi = type_values(first, _oi_family(), [X_LAMBDA, X_OMEGA])
    for j, five in enumerate(DFBETA_ZTP):
        add_summary(prob, ztp[0][:, j], five, 3e-4)
    for j, five in enumerate(DFBETA_OI):
        add_summary(prob, oi[0][:, j], five, 3e-4)
    add_summary(prob, ztp[1], PEARSON_ZTP[0], 2e-6, PEARSON_ZTP[1], 6e-7)
    add_summary(prob, oi[1], PEARSON_OI[0], 2e-5, PEARSON_OI[1], 6e-6)
    add_summary(prob, ztp[2], DFPOP_ZTP[0], 0.01, DFPOP_ZTP[1], 0.01)
    add_summary(prob, oi[2], DFPOP_OI[0], 0.002, DFPOP_OI[1], 2e-4)
    return prob.solve(seed).reshape(len(CELLS), COUNTS.size)


def write_csv(table: np.ndarray, path: Path) -> None:
    cell, y = expand(table)
    # reason is unused by the models; every seventh sorted row gets "Illegal stay" until 259 are set
    order = np.lexsort((y, cell))
    reason = np.full(N_UNITS, "Other reason", dtype=object)
    reason[order[::7][:259]] = "Illegal stay"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["capture", "gender", "age", "reason", "nation"])
        for i in order:
            g, a, nat = CELLS[cell[i]]
            out.writerow([int(y[i]), g, a, reason[i], nat])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests/data/netherlandsimmigrant.csv")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = reconstruct(args.seed)
    write_csv(table, args.out)
    print(f"wrote {table.sum()} units to {args.out}")
    print(table)


if __name__ == "__main__":
    main()
