import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from sscr import fit_model
from sscr.families import CountFamily, available_families, get_family, register_family, unregister_family
from sscr.families.catalog import TruncatedCountFamily
from sscr.fitting import FitControl, fit_irls
from sscr.links import LINKS
from sscr.model_frame import Dataset, DesignBlocks

HT_FAMILIES = [f"{k}{b}" for k in TruncatedCountFamily.KINDS for b in ("poisson", "geom", "negbin")]
ALL_FAMILIES = HT_FAMILIES + ["chao", "zelterman"]

# linear-predictor ranges per parameter used by the property tests
ETA_RANGE = {"lambda": (-3.0, 2.0), "alpha": (-3.0, 0.0), "omega": (-4.0, 4.0), "pi": (-4.0, 4.0)}


def random_eta(fam, rng, n):
    return np.column_stack([rng.uniform(*ETA_RANGE[nm], size=n) for nm in fam.eta_names])


def random_counts(fam, rng, n):
    if fam.name in ("chao", "zelterman"):
        return rng.integers(1, 3, n).astype(float)
    return rng.integers(fam.min_count, 9, n).astype(float)


def test_registry_lists_all_builtins():
    assert set(ALL_FAMILIES) <= set(available_families())


@pytest.mark.parametrize("name", sorted(LINKS))
def test_link_round_trip_and_derivatives(name):
    link = LINKS[name]
    lo, hi = link.domain
    mu = np.linspace(1e-6, 1 - 1e-6, 41) if np.isfinite(hi) else np.geomspace(1e-6, 1e6, 41)
    np.testing.assert_allclose(link.inverse(link(mu)), mu, rtol=1e-10, atol=1e-10)
    eta = np.linspace(-5, 5, 41)
    h = 1e-5
    fd1 = (link.inverse(eta + h) - link.inverse(eta - h)) / (2 * h)
    fd2 = (link.dinverse(eta + h) - link.dinverse(eta - h)) / (2 * h)
    # atol is the roundoff floor eps / h of the differences
    np.testing.assert_allclose(link.dinverse(eta), fd1, rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(link.d2inverse(eta), fd2, rtol=1e-6, atol=1e-10)


# -- closed forms (values from mpmath, frozen) --------------------------------


def test_ztpoisson_loglik_single_one():
    fam = get_family("ztpoisson")
    assert fam.log_likelihood([1.0], [[0.0]]) == pytest.approx(-0.541324854612918, abs=1e-12)


def test_ztpoisson_pmf_and_mean():
    fam = get_family("ztpoisson")
    assert fam.pmf(1, [[0.0]])[0] == pytest.approx(0.581976706869326, abs=1e-12)
    mean, var = fam.mean_variance([[0.0]])
    assert mean[0] == pytest.approx(1.581976706869326, abs=1e-12)
    mean_u, var_u = fam.mean_variance([[np.log(2.5)]], "untruncated")
    assert mean_u[0] == pytest.approx(2.5) and var_u[0] == pytest.approx(2.5)


@pytest.mark.parametrize("base", ["poisson", "geom", "negbin"])
def test_inflation_mass_zero_reduces_to_zt(base):
    zt = get_family(f"zt{base}")
    oi = get_family(f"oizt{base}")
    rng = np.random.default_rng(1)
    eta = random_eta(zt, rng, 30)
    y = random_counts(zt, rng, 30)
    eta_oi = np.column_stack([eta, np.full(30, -800.0)])
    np.testing.assert_allclose(oi.loglik_terms(y, eta_oi), zt.loglik_terms(y, eta), rtol=1e-12)


def test_pure_inflation_puts_all_mass_on_one():
    fam = get_family("oiztgeom")
    eta = np.array([[0.3, 40.0]])
    assert fam.pmf(1, eta)[0] == pytest.approx(1.0, abs=1e-12)
    assert fam.pmf(2, eta)[0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(fam.simulate(np.repeat(eta, 50, 0), seed=3, truncated=True), 1.0)


def test_hurdlezt_conditional_singleton_probability():
    # P*(1 | Y* > 0) from the unconditional hurdle pmf
    fam = get_family("Hurdleztpoisson")
    lam, pi = 1.7, 0.35
    eta = np.array([[np.log(lam), np.log(pi / (1 - pi))]])
    p0, p1 = np.exp(-lam), lam * np.exp(-lam)
    unconditional_zero = (1 - pi) * p0 / (1 - p1)
    assert fam.pmf(0, eta, "untruncated")[0] == pytest.approx(unconditional_zero, rel=1e-12)
    assert fam.pmf(1, eta)[0] == pytest.approx(pi / (1 - unconditional_zero), rel=1e-12)
    assert fam.pmf(1, eta, "untruncated")[0] == pytest.approx(pi, rel=1e-12)


def test_zot_excludes_ones():
    fam = get_family("zotpoisson")
    assert fam.pmf(1, [[0.5]])[0] == 0.0
    with pytest.raises(ValueError, match="counts must be integers >= 2"):
        fam.check_support([2.0, 1.0])


@pytest.mark.parametrize("name", ALL_FAMILIES)
def test_moments_match_pmf_summation(name):
    fam = get_family(name)
    eta = random_eta(fam, np.random.default_rng(5), 10)
    grid = np.arange(0, 501)
    for kind in ("truncated", "untruncated"):
        if fam.name in ("chao", "zelterman") and kind == "untruncated":
            continue
        table = fam.pmf_table(grid, eta, kind)
        mean = table @ grid
        var = table @ grid**2 - mean**2
        m, v = fam.mean_variance(eta, kind)
        np.testing.assert_allclose(m, mean, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(v, var, rtol=1e-6, atol=1e-9)


def test_chao_intercept_only(netherlands):
    model = fit_model(netherlands, "chao", "capture ~ 1", control=FitControl(silent=True))
    # N_obs + f1^2 / (2 f2)
    assert model.popsize.point == pytest.approx(9273.51092896175, rel=1e-9)


def test_zelterman_intercept_only(netherlands):
    model = fit_model(netherlands, "zelterman", "capture ~ 1", control=FitControl(silent=True))
    # N_obs / (1 - exp(-2 f2 / f1))
    assert model.popsize.point == pytest.approx(9424.55519385843, rel=1e-9)


def test_unit_probabilities_give_observed_count():
    fam = get_family("ztpoisson")
    eta = np.full((7, 1), 8.0)
    assert fam.point_estimate(eta) == pytest.approx(7.0, abs=1e-9)
    assert fam.popsize_variance(eta, np.zeros((1, 1)), np.ones((7, 1))) == pytest.approx(0.0, abs=1e-9)


def test_ztgeom_information_is_psd(rng):
    fam = get_family("ztgeom")
    eta = rng.normal(size=(40, 1))
    info = fam.information(rng.integers(1, 5, 40), eta)
    assert np.all(np.linalg.eigvalsh(info) >= 0)


def test_delta_term_matches_numerical_gradient(rng):
    fam = get_family("oiztpoisson")
    n = 25
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    frame = DesignBlocks.from_arrays(np.ones(n), [X, X[:, :1]])
    beta = np.array([0.2, 0.3, -0.5])
    A = rng.normal(size=(3, 3))
    cov = A @ A.T / 10

    def point(b):
        return fam.point_estimate(frame.eta(b))

    h = 1e-6
    grad = np.array([(point(beta + h * e) - point(beta - h * e)) / (2 * h) for e in np.eye(3)])
    eta = frame.eta(beta)
    prob, _ = fam.inclusion_prob(eta)
    sampling = np.sum((1 - prob) / prob)
    delta = fam.popsize_variance(eta, cov, frame) - sampling
    assert delta == pytest.approx(grad @ cov @ grad, rel=1e-4)


def test_simulate_mean_of_untruncated_counts():
    # the covariate and the counts must come from different streams
    x = np.random.default_rng(77).binomial(1, 0.2, 10_000)
    eta = (-1 + 0.5 * x)[:, None]
    y = get_family("ztpoisson").simulate(eta, seed=1, truncated=False)
    assert y.mean() == pytest.approx(0.42, abs=0.02)


def test_simulate_is_deterministic():
    fam = get_family("ztnegbin")
    eta = np.tile([0.5, -0.3], (100, 1))
    np.testing.assert_array_equal(fam.simulate(eta, seed=9), fam.simulate(eta, seed=9))


def test_ztgeom_draws_match_pmf():
    fam = get_family("ztgeom")
    n = 1_000_000
    eta = np.full((n, 1), 0.4)
    y = fam.simulate(eta, seed=11, truncated=True)
    ks = np.arange(1, 12)
    p = fam.pmf_table(ks, eta[:1])[0]
    counts = np.array([(y == k).sum() for k in ks])
    band = 3 * np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= band)


def test_get_start_rules():
    fam = get_family("oiztpoisson")
    frame = DesignBlocks.from_arrays(np.full(6, 3.0), [np.ones((6, 1)), np.ones((6, 1))])
    np.testing.assert_allclose(fam.get_start(frame), [np.log(3.0), 0.0], atol=1e-10)


def test_duplicate_registration_fails():
    with pytest.raises(ValueError, match="already registered"):
        register_family(get_family("ztpoisson"))


def test_unknown_family():
    with pytest.raises(ValueError, match="unknown family"):
        get_family("ztbinomial")


# -- properties ---------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


@pytest.mark.parametrize("name", ALL_FAMILIES)
@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_truncated_pmf_normalises(name, seed):
    fam = get_family(name)
    eta = random_eta(fam, np.random.default_rng(seed), 20)
    table = fam.pmf_table(np.arange(0, 201), eta)
    assert np.all(table >= 0) and np.all(table <= 1)
    np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-8)


def _fd_gradient(fam, y, eta, h=1e-5):
    out = np.empty_like(eta)
    for j in range(fam.p):
        e = np.zeros(fam.p)
        e[j] = h
        out[:, j] = (fam.loglik_terms(y, eta + e) - fam.loglik_terms(y, eta - e)) / (2 * h)
    return out


@pytest.mark.parametrize("name", ALL_FAMILIES)
@settings(max_examples=5, deadline=None)
@given(seed=seeds)
def test_gradient_matches_finite_differences(name, seed):
    fam = get_family(name)
    rng = np.random.default_rng(seed)
    eta = random_eta(fam, rng, 20)
    y = random_counts(fam, rng, 20)
    # atol covers the roundoff of the differences, eps |loglik| / h
    np.testing.assert_allclose(fam.gradient(y, eta), _fd_gradient(fam, y, eta), rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("name", ALL_FAMILIES)
@settings(max_examples=3, deadline=None)
@given(seed=seeds)
def test_information_matches_score_outer_product(name, seed):
    fam = get_family(name)
    rng = np.random.default_rng(seed)
    n = 20
    eta = random_eta(fam, rng, n)
    grid = np.arange(fam.min_count, 1501 if fam.name not in ("chao", "zelterman") else 3)
    probs = fam.pmf_table(grid, eta)
    # E[s s^T] with the score s taken from differences of the log-likelihood
    S = _fd_gradient(fam, np.tile(grid, n).astype(float), np.repeat(eta, grid.size, axis=0))
    S = np.where(probs.ravel()[:, None] > 0, S, 0.0).reshape(n, grid.size, fam.p)
    expected = np.einsum("nk,nki,nkj->nij", probs, S, S)
    info = fam.information(np.full(n, grid[0]), eta)
    scale = np.abs(info).max(axis=(1, 2), keepdims=True)
    np.testing.assert_allclose(info, expected, rtol=1e-5, atol=1e-6 * scale.max())


@pytest.mark.parametrize("kind", TruncatedCountFamily.KINDS)
@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_geometric_is_negbin_with_unit_dispersion(kind, seed):
    geo = get_family(f"{kind}geom")
    nb = get_family(f"{kind}negbin")
    eta = random_eta(geo, np.random.default_rng(seed), 20)
    eta_nb = np.column_stack([eta[:, :1], np.zeros(20), eta[:, 1:]])
    grid = np.arange(0, 60)
    for kind_ in ("truncated", "untruncated"):
        np.testing.assert_allclose(geo.pmf_table(grid, eta, kind_), nb.pmf_table(grid, eta_nb, kind_), rtol=1e-10, atol=1e-300)


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(
    seed=seeds,
    lam=st.floats(0.5, 4.0),
    omega=st.floats(0.15, 0.6),
    n=st.integers(200, 600),
)
def test_ztoi_and_oizt_reach_the_same_likelihood(seed, lam, omega, n):
    oi = get_family("oiztgeom")
    eta = np.tile([np.log(lam), np.log(omega / (1 - omega))], (n, 1))
    y = oi.simulate(eta, seed=seed, truncated=True)
    assume(len(np.unique(y)) >= 3)
    X = [np.ones((n, 1)), np.ones((n, 1))]
    ctl = FitControl(tolerance=1e-12, silent=True)
    fits = {}
    for name in ("ztoigeom", "oiztgeom"):
        fam = get_family(name)
        frame = DesignBlocks.from_arrays(y, X)
        fits[name] = (fam, fit_irls(y, frame, fam, control=ctl))
    assume(all(r.converged for _, r in fits.values()))
    (f1, r1), (f2, r2) = fits["ztoigeom"], fits["oiztgeom"]
    assert r1.log_lik == pytest.approx(r2.log_lik, abs=1e-6)
    n1 = f1.point_estimate(r1.eta)
    n2 = f2.point_estimate(r2.eta)
    assert abs(n1 - n2) > 1e-6 * n1


# -- a user-defined family ----------------------------------------------------


class TwoPointFamily(CountFamily):
    """``P(0) = 1 - l/2 - p/2``, ``P(1) = p/2``, ``P(2) = l/2`` with ``l, p`` in (0, 1)."""

    name = "twopoint"
    eta_names = ("lambda", "pi")

    def __init__(self, lambda_link="logit", pi_link="logit"):
        super().__init__([lambda_link, pi_link])

    def _logpmf(self, y, theta):
        lam, pi = theta
        with np.errstate(divide="ignore"):
            return np.select(
                [y == 0, y == 1, y == 2],
                [np.log1p(-(lam + pi) / 2) + 0 * y, np.log(pi / 2) + 0 * y, np.log(lam / 2) + 0 * y],
                -np.inf,
            )

    def _score(self, y, theta):
        lam, pi = theta
        p0 = 1 - (lam + pi) / 2
        zero = 0 * y
        with np.errstate(divide="ignore"):
            inv_lam, inv_pi = 1 / lam, 1 / pi
        d_lam = np.select([y == 0, y == 2], [-0.5 / p0 + zero, inv_lam + zero], 0.0)
        d_pi = np.select([y == 0, y == 1], [-0.5 / p0 + zero, inv_pi + zero], 0.0)
        return np.stack([d_lam, d_pi], axis=-1)


@pytest.fixture
def two_point():
    name = register_family(TwoPointFamily)
    yield name
    unregister_family(name)


def test_custom_family_is_usable_by_name(two_point):
    fam = get_family(two_point)
    eta = np.array([[0.3, -0.2], [1.0, 1.0]])
    np.testing.assert_allclose(fam.pmf_table([1, 2], eta).sum(axis=1), 1.0, atol=1e-14)
    with pytest.raises(ValueError, match="already registered"):
        register_family(TwoPointFamily)


def test_custom_family_recovers_generating_proportions(two_point):
    fam = get_family(two_point)
    rng = np.random.default_rng(2024)
    n = 20_000
    x = rng.binomial(1, 0.5, n)
    eta = np.column_stack([-0.5 + 1.2 * x, np.full(n, 0.4)])
    y = fam.simulate(eta, seed=rng, truncated=False)
    keep = y > 0
    data = Dataset.from_dict({"y": y[keep], "x": np.where(x[keep] == 1, "b", "a")})
    # only the ratio of the two masses is identified once zeros are unseen,
    # so the pi predictor is pinned by an offset and has no coefficients
    offsets = np.column_stack([np.zeros(keep.sum()), np.full(keep.sum(), 0.4)])
    model = fit_model(
        data, two_point, {"lambda": "y ~ x", "pi": "~ 0"}, offsets=offsets, var_method="skip",
        control=FitControl(silent=True),
    )
    assert model.fit.converged
    fitted_one = fam.pmf(1, model.fit.eta)
    true_one = fam.pmf(1, eta[keep])
    for level in (0, 1):
        rows = x[keep] == level
        p = true_one[rows][0]
        se = np.sqrt(p * (1 - p) / rows.sum())
        assert abs(fitted_one[rows][0] - p) < 3 * se
