import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from cfsim import scm
from cfsim.conditioning import (MULTINOMIAL, SYSTEMATIC, Condition, ConditionSet,
                                InfeasibleEvidence, RootFindConfig, ess, find_root, find_roots,
                                resample_indices, simulate_continuous_condition,
                                simulate_discrete_condition, simulate_multiple_conditions,
                                weight)
from cfsim.scm import ModelError, simulate

from conftest import assert_consistent

# X ~ N(0,1); Y = X + exp(u): Y - X is lognormal, strictly increasing in u
EXP_MODEL = """
variables:
  - {name: X, error: "normal(0, 1)", expr: "u", monotonic: additive}
  - {name: Y, error: "normal(0, 1)", expr: "X + exp(u)", monotonic: monotonic_general}
"""

# X ~ U(-2, 2); D = 1 with probability logistic(X)
DISCRETE_MODEL = """
variables:
  - {name: X, error: "uniform(-2, 2)", expr: "u", monotonic: additive}
  - {name: D, kind: discrete, error: "uniform(0, 1)", expr: "bernoulli(u; logistic(X))"}
  - {name: W, error: "normal(0, 1)", expr: "D + X + u", monotonic: additive}
"""


@pytest.fixture(scope="module")
def expm():
    return scm.build(EXP_MODEL)


@pytest.fixture(scope="module")
def discm():
    return scm.build(DISCRETE_MODEL)


def _posterior_mean_x_given_y(c):
    # p(x | Y=c) proportional to phi(x) * lognormal_pdf(c - x), x < c
    num = integrate.quad(lambda x: x * stats.norm.pdf(x) * stats.lognorm.pdf(c - x, 1.0), -12, c)[0]
    den = integrate.quad(lambda x: stats.norm.pdf(x) * stats.lognorm.pdf(c - x, 1.0), -12, c)[0]
    return num / den


# -- root finding -------------------------------------------------------------

def test_additive_root_is_exact(chain):
    row = {"Z": 0.3, "X": -1.2}
    assert find_root(chain, row, Condition("Y", 1.0)) == pytest.approx(1.0 - (0.3 - 1.2), abs=1e-15)


@settings(max_examples=80, deadline=None)
@given(a=st.floats(0.1, 3.0), b=st.floats(0.1, 3.0), k=st.floats(0.1, 2.0),
       x=st.floats(-3.0, 3.0), c=st.floats(-20.0, 20.0))
def test_bisection_meets_tolerance(a, b, k, x, c):
    text = f"""
variables:
  - {{name: X, error: "normal(0, 1)", expr: "u", monotonic: additive}}
  - {{name: Y, error: "normal(0, 1)", expr: "{a!r} * X + {b!r} * u + {k!r} * u ^ 3",
      monotonic: monotonic_general}}
"""
    m = scm.build(text)
    cfg = RootFindConfig()
    u = find_root(m, {"X": x}, Condition("Y", c), cfg)
    assert np.isfinite(u)
    got = a * x + b * u + k * u**3
    assert abs(got - c) <= cfg.tol(c)


def test_no_root_is_na_and_weight_zero(expm):
    # exp(u) > 0 so Y > X always
    u = find_root(expm, {"X": 3.0}, Condition("Y", 2.0))
    assert np.isnan(u)
    assert weight(expm, {"X": 3.0, "u_Y": u}, Condition("Y", 2.0)) == 0.0


def test_decreasing_expression_rejected():
    m = scm.build("""
variables:
  - {name: Y, error: "normal(0, 1)", expr: "-u ^ 3", monotonic: monotonic_general}
""")
    with pytest.raises(ModelError):
        find_root(m, {}, Condition("Y", 0.5))


def test_condition_on_non_monotone_variable_rejected():
    m = scm.build("""
variables:
  - {name: Y, error: "normal(0, 1)", expr: "u ^ 2"}
""")
    with pytest.raises(ModelError):
        simulate_continuous_condition(100, m, ("Y", 1.0))


# -- weights ------------------------------------------------------------------

def test_additive_weight_is_error_density(chain):
    row = {"Z": 0.2, "X": 0.5}
    u = find_root(chain, row, Condition("Y", 1.0))
    w = weight(chain, dict(row, u_Y=u), Condition("Y", 1.0))
    assert w == pytest.approx(stats.norm.pdf(1.0 - 0.7), rel=1e-12)


@pytest.mark.parametrize("x,c", [(0.0, 1.0), (-1.0, 0.5), (1.5, 4.0)])
def test_general_weight_is_conditional_density(expm, x, c):
    u = find_root(expm, {"X": x}, Condition("Y", c))
    w = weight(expm, {"X": x, "u_Y": u}, Condition("Y", c))
    assert w == pytest.approx(stats.lognorm.pdf(c - x, 1.0), rel=1e-6)


# -- resampling ---------------------------------------------------------------

@pytest.mark.parametrize("scheme", [MULTINOMIAL, SYSTEMATIC])
def test_resampling_is_unbiased(scheme):
    w = np.array([0.5, 0.0, 2.0, 1.0, 0.25, 3.0, 0.01])
    n, reps = 20, 10_000
    counts = np.zeros((reps, w.size))
    for r in range(reps):
        idx = resample_indices(w, n, scheme, seed=r)
        counts[r] = np.bincount(idx, minlength=w.size)
    expected = n * w / w.sum()
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / np.sqrt(reps)
    assert counts[:, 1].max() == 0
    assert np.all(np.abs(mean - expected) <= 3 * np.maximum(se, 1e-12) + 1e-12)


def test_systematic_counts_are_floor_or_ceil():
    w = np.array([0.3, 1.1, 0.7, 2.9])
    n = 17
    expected = n * w / w.sum()
    for seed in range(200):
        c = np.bincount(resample_indices(w, n, SYSTEMATIC, seed), minlength=w.size)
        assert np.all((c == np.floor(expected)) | (c == np.ceil(expected)))


def test_all_zero_weights_infeasible():
    with pytest.raises(InfeasibleEvidence):
        resample_indices(np.zeros(5), 5)
    with pytest.raises(ValueError):
        resample_indices(np.array([1.0, -1.0]), 5)
    with pytest.raises(ValueError):
        resample_indices(np.ones(3), 3, "stratified")


def test_ess():
    assert ess(np.ones(10)) == pytest.approx(10.0)
    assert ess(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0)
    assert ess(np.array([1e300, 1e300])) == pytest.approx(2.0)


# -- conditional simulation ---------------------------------------------------

def test_chain_background_given_y(chain):
    # (u_Z, u_X, u_Y) | Y = 1 has means (1/3, 1/6, 1/6) and variances (1/3, 5/6, 5/6)
    t = simulate_continuous_condition(100_000, chain, ("Y", 1.0), seed=4)
    assert_consistent(chain, t, {"Y": 1.0})
    for col, mu, var in (("u_Z", 1 / 3, 1 / 3), ("u_X", 1 / 6, 5 / 6), ("u_Y", 1 / 6, 5 / 6)):
        assert t[col].mean() == pytest.approx(mu, abs=0.015)
        assert t[col].var() == pytest.approx(var, abs=0.02)
    assert t.diagnostics["na_roots"] == 0
    assert 0 < t.diagnostics["ess"] <= 100_000


@pytest.mark.parametrize("scheme", [MULTINOMIAL, SYSTEMATIC])
def test_general_condition_matches_quadrature(expm, scheme):
    c = 2.0
    t = simulate_continuous_condition(100_000, expm, ("Y", c), seed=9, scheme=scheme)
    assert_consistent(expm, t, {"Y": c})
    assert t["X"].mean() == pytest.approx(_posterior_mean_x_given_y(c), abs=0.015)
    assert t.diagnostics["na_roots"] > 0


def test_weighted_mode(expm):
    c = 2.0
    t = simulate_continuous_condition(100_000, expm, ("Y", c), seed=9, weighted=True)
    assert t.weights is not None and t.n < 100_000
    assert np.sum(t.weights * t["X"]) == pytest.approx(_posterior_mean_x_given_y(c), abs=0.015)
    assert t.ess() < t.n
    assert_consistent(expm, t, {"Y": c})


def test_continuous_infeasible(expm):
    # Y - X > 0 but X is never below -50
    with pytest.raises(InfeasibleEvidence) as info:
        simulate_continuous_condition(500, expm, ("Y", -50.0), seed=1)
    assert info.value.diagnostics["na_roots"] == 500
    assert "na_roots=500" in str(info.value)


def test_discrete_condition(discm):
    t = simulate_discrete_condition(100_000, discm, ("D", 1.0), seed=2)
    assert np.all(t["D"] == 1.0)
    assert_consistent(discm, t)
    # E[X | D=1] = int x logistic(x) dx / int logistic(x) dx over (-2, 2)
    num = integrate.quad(lambda x: x * stats.logistic.cdf(x), -2, 2)[0]
    den = integrate.quad(lambda x: stats.logistic.cdf(x), -2, 2)[0]
    assert t["X"].mean() == pytest.approx(num / den, abs=0.015)


def test_discrete_infeasible_reports_marginal(discm):
    with pytest.raises(InfeasibleEvidence) as info:
        simulate_discrete_condition(1000, discm, ("D", 5.0), seed=2)
    marg = info.value.diagnostics["marginal"]
    assert set(marg) == {0.0, 1.0} and sum(marg.values()) == 1000


def test_multiple_conditions_match_gaussian_posterior(chain):
    # Given X = 0.5, Y = 1: u_Y = Y - X - Z, Z | X=0.5 ~ N(0.25, 0.5), u_Y = 0.5 - Z
    cs = ConditionSet.build(chain, {"Y": 1.0, "X": 0.5})
    assert cs.variables == ["X", "Y"]
    t = simulate_multiple_conditions(100_000, chain, cs, seed=3)
    assert_consistent(chain, t, {"X": 0.5, "Y": 1.0})
    # joint density of (X, Y) enters through u_Y's density: posterior of Z
    # is proportional to N(z; 0, 1) N(0.5 - z; 0, 1) N(0.5 - z; 0, 1)
    zs = np.linspace(-6, 6, 200_001)
    dens = stats.norm.pdf(zs) * stats.norm.pdf(0.5 - zs) ** 2
    mu = np.sum(zs * dens) / np.sum(dens)
    var = np.sum((zs - mu) ** 2 * dens) / np.sum(dens)
    assert t["Z"].mean() == pytest.approx(mu, abs=0.01)
    assert t["Z"].var() == pytest.approx(var, abs=0.01)
    assert len(t.diagnostics["stages"]) == 2


def test_mixed_discrete_and_continuous(discm):
    t = simulate_multiple_conditions(20_000, discm, {"D": 1.0, "W": 0.5}, seed=5)
    assert_consistent(discm, t, {"D": 1.0, "W": 0.5})


def test_multiple_conditions_infeasible_index(discm):
    with pytest.raises(InfeasibleEvidence) as info:
        simulate_multiple_conditions(500, discm, {"X": 0.0, "D": 7.0}, seed=5)
    assert info.value.diagnostics["condition_index"] == 1


def test_condition_set_validation(chain):
    with pytest.raises(ValueError):
        ConditionSet.build(chain, [("Y", 1.0), ("Y", 2.0)])
    with pytest.raises(ValueError):
        ConditionSet.build(chain, {"Y": float("inf")})
    with pytest.raises(ModelError):
        ConditionSet.build(chain, {"Q": 1.0})


def test_same_seed_same_rows(chain):
    a = simulate_continuous_condition(1000, chain, ("Y", 1.0), seed=11)
    b = simulate_continuous_condition(1000, chain, ("Y", 1.0), seed=11)
    for k in chain.columns:
        np.testing.assert_array_equal(a[k], b[k])


def test_zero_rows(chain):
    t = simulate_continuous_condition(0, chain, ("Y", 1.0))
    assert t.n == 0


def test_consistency_over_random_conditions(credit):
    rng = np.random.default_rng(0)
    base = simulate(credit, 200, seed=1)
    continuous = [v for v in credit.order if not credit.is_discrete(v)
                  and credit.spec(v).monotonicity != scm.NONE]
    for i in range(5):
        row = int(rng.integers(200))
        names = list(rng.choice(continuous, size=2, replace=False))
        conds = {v: float(base[v][row]) for v in names}
        t = simulate_multiple_conditions(2000, credit, conds, seed=i)
        assert_consistent(credit, t, conds)
