"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line straight to the terminal,
then asserts.  Run ``python3 tests/test_acceptance.py`` for just these.
"""

import time

import numpy as np
import pytest
from scipy import stats

from sscr import BootControl, get_family, register_family, run_bootstrap, unregister_family
from sscr.bootstrap import default_cores
from sscr.diagnostics import dfbeta, dfpopsize, gof_tests, information_criteria, marginal_freq
from sscr.families.catalog import TruncatedCountFamily
from sscr.fitting import FitControl, fit_fallback, fit_irls
from sscr.model_frame import Dataset, DesignBlocks, build_model_frame, read_csv
from sscr.popsize import fit_model, stratify_popsize

from conftest import FARM
from test_families import ALL_FAMILIES, TwoPointFamily, _fd_gradient, random_counts, random_eta


class Checks:
    """Collects named comparisons and reports them as one line."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.failed: list[str] = []
        self.n = 0

    def close(self, name, value, target, tol):
        self.n += 1
        if not abs(value - target) <= tol:
            self.failed.append(f"{name}: {value:.6g} vs {target:.6g} (tol {tol:g})")

    def true(self, name, ok, detail=""):
        self.n += 1
        if not ok:
            self.failed.append(f"{name} {detail}".strip())

    def report(self, capsys):
        status = "PASS" if not self.failed else "FAIL"
        line = f"{status} criterion {self.number:>2}: {self.title} ({self.n - len(self.failed)}/{self.n} checks)"
        if self.failed:
            line += "; " + "; ".join(self.failed[:4])
        with capsys.disabled():
            print("\n" + line)
        assert not self.failed, line


ZTP_FORMULA = "capture ~ gender + age + nation"


def oi_family():
    return get_family("oiztgeom", omega_link="cloglog")


def fit_ztp(data):
    return fit_model(data, "ztpoisson", ZTP_FORMULA, control=FitControl(silent=True))


def fit_oi(data, **kwargs):
    return fit_model(
        data, oi_family(), {"lambda": "capture ~ nation", "omega": "~ gender + age"},
        control=FitControl(silent=True), **kwargs,
    )


# -- published values ---------------------------------------------------------

ZTP_COEF = {
    "(Intercept)": (-1.3411, 0.2149), "gendermale": (0.3972, 0.1630), "age>40yrs": (-0.9746, 0.4082),
    "nationAsia": (-1.0926, 0.3016), "nationNorth Africa": (0.1900, 0.1940),
    "nationRest of Africa": (-0.9106, 0.3008), "nationSurinam": (-2.3364, 1.0136), "nationTurkey": (-1.6754, 0.6028),
}
OI_COEF = [-1.2552, -0.8193, 0.2057, -0.6692, -1.5205, -1.1888, -1.4577, -0.8738, 1.1745]

DFBETA_ZTP = [
    [-0.9909, -0.1533, 0.0191, 0.0521, 8.6619], [-9.0535, -0.0777, -0.0283, 0.1017, 2.2135],
    [-2.0010, 0.0179, 0.0379, 0.0691, 16.0061], [-9.5559, -0.0529, 0.0066, 0.0120, 17.9914],
    [-9.6605, -0.0842, -0.0177, 0.0087, 3.1260], [-9.4497, -0.0244, 0.0030, 0.0083, 10.9787],
    [-9.3138, -0.0065, 0.0021, 0.0037, 99.3383], [-9.6198, -0.0220, 0.0079, 0.0143, 32.0980],
]
DFBETA_OI = [
    [-1.4640, 0.0050, 0.0184, 0.0557, 9.0600], [-6.6331, -0.0346, 0.0157, 0.0347, 12.2406],
    [-7.2770, -0.0768, -0.0170, 0.0085, 1.9415], [-6.6568, -0.0230, 0.0081, 0.0262, 7.1710],
    [-6.2308, -0.0124, 0.0162, 0.0421, 62.2045], [-6.4795, -0.0273, 0.0204, 0.0462, 21.1338],
    [-6.8668, -0.0193, 0.0476, 0.0476, 9.3389], [-2.2733, -0.2227, 0.1313, 0.2482, 11.1234],
    [-30.2130, -0.2247, -0.1312, -0.0663, 2.0393],
]

# name: (observed, estimate, log-normal lower, log-normal upper)
STRATA_ZTP = {
    "gender==female": (398, 3811.0911, 2189.0443, 6902.133),
    "gender==male": (1482, 8879.2594, 6090.7762, 13354.880),
    "age==<40yrs": (1769, 10506.8971, 7359.4155, 15426.455),
    "age==>40yrs": (111, 2183.4535, 872.0130, 5754.876),
    "nation==American and Australia": (173, 708.3688, 504.6086, 1037.331),
    "nation==Asia": (284, 2742.3147, 1755.2548, 4391.590),
    "nation==North Africa": (1023, 3055.2033, 2697.4900, 3489.333),
    "nation==Rest of Africa": (243, 2058.1533, 1318.7466, 3305.786),
    "nation==Surinam": (64, 2386.4513, 505.2457, 12287.983),
    "nation==Turkey": (93, 1739.8592, 638.0497, 5068.959),
}
STRATA_OI = {
    "nation==American and Australia": (173, 516.2432, 370.8463, 768.4919),
    "nation==Asia": (284, 1323.5377, 831.1601, 2258.9954),
    "nation==North Africa": (1023, 2975.8801, 2254.7071, 4119.3050),
    "nation==Rest of Africa": (243, 1033.9753, 667.6106, 1716.4484),
    "nation==Surinam": (64, 354.2236, 193.8891, 712.4739),
    "nation==Turkey": (93, 496.0934, 283.1444, 947.5309),
    "gender==female": (398, 1109.7768, 778.7197, 1728.7066),
    "gender==male": (1482, 5590.1764, 3838.4550, 8644.0776),
    "age==<40yrs": (1769, 6437.8154, 4462.3472, 9862.2147),
    "age==>40yrs": (111, 262.1379, 170.9490, 492.0347),
}

FARM_BETA_IRLS = [-2.7845, 0.6170, -0.0646, 0.5346, -3.1745, 0.1281, -1.0865]
FARM_LOGLIK_IRLS = -17278.7613
FARM_LOGLIK_OPTIM = -17280.1189
FARM_GLM_START = [-0.82583943, 0.33254499, -0.03277732, 0.32746933]


# -- criteria -----------------------------------------------------------------


def test_criterion_01_ztpoisson_coefficients(netherlands, capsys):
    c = Checks(1, "ztpoisson coefficients, SEs, log-likelihood, AIC, BIC, runtime")
    freq = netherlands.frequencies("capture")
    c.true("frequency table", [freq[k] for k in sorted(freq)] == [1645, 183, 37, 13, 1, 1])
    start = time.perf_counter()
    model = fit_ztp(netherlands)
    elapsed = time.perf_counter() - start
    se = np.sqrt(np.diag(model.cov))
    for name, est, s in zip(model.coef_names, model.coef, se):
        c.close(f"{name} estimate", est, ZTP_COEF[name][0], 5e-4)
        c.close(f"{name} SE", s, ZTP_COEF[name][1], 5e-4)
    ic = information_criteria(model)
    c.close("log-likelihood", model.log_lik, -848.4504, 1e-3)
    c.close("AIC", ic["aic"], 1712.901, 0.01)
    c.close("BIC", ic["bic"], 1757.213, 0.01)
    c.true("runtime < 5 s", elapsed < 5, f"{elapsed:.2f} s")
    c.report(capsys)


def test_criterion_02_population_size(ztp_model, capsys):
    c = Checks(2, "ztpoisson population size, variance, normal and log-normal intervals")
    est = ztp_model.popsize
    c.close("point", est.point, 12690.35, 0.05)
    c.close("variance / 7885790", est.variance / 7885790, 1.0, 1e-3)
    for got, want in zip(est.ci_normal, (7186.449, 18194.25)):
        c.close("normal bound", got, want, 0.5)
    for got, want in zip(est.ci_lognormal, (8431.277, 19718.31)):
        c.close("log-normal bound", got, want, 0.5)
    c.report(capsys)


def test_criterion_03_oiztgeom(oi_model, capsys):
    c = Checks(3, "oiztgeom (cloglog omega link) coefficients, log-likelihood, population size")
    for name, got, want in zip(oi_model.coef_names, oi_model.coef, OI_COEF):
        c.close(name, got, want, 5e-4)
    c.close("log-likelihood", oi_model.log_lik, -829.5625, 1e-3)
    c.close("point", oi_model.popsize.point, 6699.953, 0.05)
    c.report(capsys)


def test_criterion_04_likelihood_ratio(ztp_model, oi_model, capsys):
    c = Checks(4, "likelihood-ratio statistic between the two fits")
    lr = 2 * (oi_model.log_lik - ztp_model.log_lik)
    c.close("LR", lr, 37.776, 0.01)
    c.report(capsys)


def test_criterion_05_goodness_of_fit(ztp_model, oi_model, capsys):
    c = Checks(5, "chi-square and G statistics with grouped small cells, df = 1")
    g = gof_tests(marginal_freq(ztp_model), df=1, drop5="group")
    c.close("ztpoisson chi-square", g.chi_sq, 50.06, 0.05)
    c.close("ztpoisson G", g.g, 34.31, 0.05)
    g = gof_tests(marginal_freq(oi_model), df=1, drop5="group")
    c.close("oiztgeom chi-square", g.chi_sq, 1.88, 0.02)
    c.close("oiztgeom G", g.g, 2.32, 0.02)
    c.report(capsys)


def test_criterion_06_influence(ztp_model, oi_model, capsys):
    c = Checks(6, "dfbeta quantiles and dfpopsize extremes, runtime")
    start = time.perf_counter()
    cores = max(default_cores(), 1)
    results = {}
    for label, model in (("ztpoisson", ztp_model), ("oiztgeom", oi_model)):
        d = dfbeta(model, cores=cores)
        results[label] = (d, dfpopsize(model, d))
    elapsed = time.perf_counter() - start
    for label, table in (("ztpoisson", DFBETA_ZTP), ("oiztgeom", DFBETA_OI)):
        q = np.quantile(results[label][0], [0, 0.25, 0.5, 0.75, 1], axis=0).T * 100
        diff = np.abs(q - np.array(table)).max()
        c.true(f"{label} dfbeta table", diff <= 1e-3, f"max diff {diff:.2e}")
    dp_ztp, dp_oi = results["ztpoisson"][1], results["oiztgeom"][1]
    c.close("ztpoisson dfpopsize min", dp_ztp.min(), -4236.407, 0.5)
    c.close("ztpoisson dfpopsize max", dp_ztp.max(), 117.445, 0.1)
    c.close("oiztgeom dfpopsize min", dp_oi.min(), -456.644, 0.5)
    c.true("runtime < 2 min", elapsed < 120, f"{elapsed:.1f} s")
    c.report(capsys)


def _check_strata(c, label, rows, table):
    got = {r.name: r for r in rows}
    c.true(f"{label} strata names", set(got) == set(table))
    for name, (obs, est, lo, hi) in table.items():
        if name not in got:
            continue
        r = got[name]
        c.true(f"{label} {name} observed", r.observed == obs)
        c.close(f"{label} {name} estimate", r.estimate.point, est, 0.01)
        c.close(f"{label} {name} lower", r.estimate.ci_lognormal[0], lo, 0.1)
        c.close(f"{label} {name} upper", r.estimate.ci_lognormal[1], hi, 0.1)


def test_criterion_07_strata(ztp_model, oi_model, capsys):
    c = Checks(7, "default strata tables for both models")
    _check_strata(c, "ztpoisson", stratify_popsize(ztp_model), STRATA_ZTP)
    _check_strata(c, "oiztgeom", stratify_popsize(oi_model), STRATA_OI)
    c.report(capsys)


def test_criterion_08_farmsubmission_irls(capsys):
    c = Checks(8, "ztoigeom IRLS and fallback on farmsubmission")
    if not FARM.is_file():
        c.true("fixture", False, f"{FARM.name} is not available in this environment")
        c.report(capsys)
    data = read_csv(FARM)
    fam = get_family("ztoigeom")
    frame = build_model_frame(
        data, {"lambda": "TOTAL_SUB ~ 1 + log_size + log_distance + C_TYPE", "omega": "~ 1 + log_distance + C_TYPE"},
        fam.eta_names,
    )
    start = np.r_[FARM_GLM_START, 0.0, 0.0, 0.0]
    res = fit_irls(frame.y, frame, fam, start=start, control=FitControl(silent=True))
    c.close("IRLS log-likelihood", res.log_lik, FARM_LOGLIK_IRLS, 0.01)
    for j, (got, want) in enumerate(zip(res.beta, FARM_BETA_IRLS)):
        c.close(f"beta {j + 1}", got, want, 1e-3)
    c.close("iterations", res.iterations, 15, 3)
    alt = fit_fallback(frame.y, frame, fam, start=start, control=FitControl(method="fallback", max_iter=10000, silent=True))
    c.true("fallback log-likelihood", alt.log_lik >= -17280.12, f"{alt.log_lik:.4f}")
    c.report(capsys)


def test_criterion_09_semiparametric_bootstrap(oi_model, capsys):
    c = Checks(9, "semiparametric bootstrap on oiztgeom, B = 500")
    cores = default_cores()
    start = time.perf_counter()
    boot = run_bootstrap(oi_model, BootControl(boot_type="semiparametric", B=500, seed=123456, cores=cores))
    elapsed = time.perf_counter() - start
    point = oi_model.popsize.point
    c.true("SE in [1100, 2600]", 1100 <= boot.se <= 2600, f"{boot.se:.1f}")
    c.true("positive skewness", boot.skewness > 0, f"{boot.skewness:.3f}")
    lo, hi = boot.ci
    c.true("percentile interval contains the estimate", lo <= point <= hi, f"({lo:.1f}, {hi:.1f})")
    c.true("lower bound >= observed", lo >= oi_model.popsize.observed, f"{lo:.1f}")
    limit = 180 if cores >= 4 else 600
    c.true(f"runtime < {limit} s on {cores} core(s)", elapsed < limit, f"{elapsed:.0f} s")
    c.report(capsys)


def test_criterion_10_property_suites(ztp_model, capsys):
    c = Checks(10, "normalisation, derivatives, equivalences, additivity, recovery")
    rng = np.random.default_rng(10)

    for name in ALL_FAMILIES:
        fam = get_family(name)
        eta = random_eta(fam, rng, 30)
        total = fam.pmf_table(np.arange(0, 201), eta).sum(axis=1)
        c.true(f"{name} normalisation", np.allclose(total, 1.0, rtol=0, atol=1e-8))
        y = random_counts(fam, rng, 30)
        fd = _fd_gradient(fam, y, eta)
        c.true(f"{name} gradient", np.allclose(fam.gradient(y, eta), fd, rtol=1e-5, atol=1e-7))
        grid = np.arange(fam.min_count, 1501 if name not in ("chao", "zelterman") else 3)
        e = eta[:5]
        probs = fam.pmf_table(grid, e)
        S = _fd_gradient(fam, np.tile(grid, 5).astype(float), np.repeat(e, grid.size, axis=0))
        S = np.where(probs.ravel()[:, None] > 0, S, 0.0).reshape(5, grid.size, fam.p)
        outer = np.einsum("nk,nki,nkj->nij", probs, S, S)
        info = fam.information(np.full(5, grid[0]), e)
        c.true(f"{name} information", np.allclose(info, outer, rtol=1e-5, atol=1e-6 * np.abs(info).max()))

    for kind in TruncatedCountFamily.KINDS:
        geo, nb = get_family(f"{kind}geom"), get_family(f"{kind}negbin")
        eta = random_eta(geo, rng, 20)
        eta_nb = np.column_stack([eta[:, :1], np.zeros(20), eta[:, 1:]])
        grid = np.arange(0, 60)
        c.true(f"{kind} geometric = NB2(1)", np.allclose(
            geo.pmf_table(grid, eta), nb.pmf_table(grid, eta_nb), rtol=1e-10, atol=1e-300))

    n = 500
    eta = np.tile([np.log(1.5), np.log(0.3 / 0.7)], (n, 1))
    y = get_family("oiztgeom").simulate(eta, seed=5, truncated=True)
    ctl = FitControl(tolerance=1e-12, silent=True)
    lls = [fit_irls(y, DesignBlocks.from_arrays(y, [np.ones((n, 1))] * 2), get_family(nm), control=ctl).log_lik
           for nm in ("ztoigeom", "oiztgeom")]
    c.close("ztoi/oizt log-likelihood", lls[0], lls[1], 1e-6)

    labels = rng.integers(0, 5, ztp_model.frame.n)
    rows = stratify_popsize(ztp_model, {f"s{k}": labels == k for k in range(5)})
    c.true("strata additivity", np.isclose(sum(r.estimate.point for r in rows), ztp_model.popsize.point,
                                          rtol=1e-12, atol=0))

    n = 10_000
    beta = np.array([0.3, -0.5, 0.8])
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.binomial(1, 0.3, n)])
    y = get_family("ztpoisson").simulate(X @ beta, seed=rng, truncated=True)
    res = fit_irls(y, DesignBlocks.from_arrays(y, [X]), get_family("ztpoisson"), control=FitControl(silent=True))
    z = np.abs(res.beta - beta) / np.sqrt(np.diag(res.beta_cov))
    c.true("simulate-then-fit within 3 SE", np.all(z < 3), f"z = {np.round(z, 2)}")

    name = register_family(TwoPointFamily)
    try:
        fam = get_family(name)
        n = 20_000
        x = rng.binomial(1, 0.5, n)
        eta = np.column_stack([-0.5 + 1.2 * x, np.full(n, 0.4)])
        y = fam.simulate(eta, seed=rng, truncated=False)
        keep = y > 0
        data = Dataset.from_dict({"y": y[keep], "x": np.where(x[keep] == 1, "b", "a")})
        offsets = np.column_stack([np.zeros(keep.sum()), np.full(keep.sum(), 0.4)])
        model = fit_model(data, name, {"lambda": "y ~ x", "pi": "~ 0"}, offsets=offsets, var_method="skip",
                          control=FitControl(silent=True))
        fitted, true = fam.pmf(1, model.fit.eta), fam.pmf(1, eta[keep])
        for level in (0, 1):
            sel = x[keep] == level
            p = true[sel][0]
            se = np.sqrt(p * (1 - p) / sel.sum())
            c.true(f"custom family level {level}", abs(fitted[sel][0] - p) < 3 * se)
    finally:
        unregister_family(name)
    c.report(capsys)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
