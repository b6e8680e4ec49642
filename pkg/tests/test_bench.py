import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cfsim import bench
from cfsim.bench import BenchCase, PRESETS, ks_statistic, normal_cdf, random_gaussian_scm


def test_ks_reference_values():
    u = lambda x: np.clip(x, 0, 1)  # noqa: E731
    n = 40
    grid = (np.arange(n) + 0.5) / n
    assert ks_statistic(grid, u) == pytest.approx(0.5 / n)
    assert ks_statistic([0.5], u) == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=200), st.floats(-1, 1), st.floats(0.2, 3))
def test_ks_matches_scipy(xs, mu, sd):
    ours = ks_statistic(xs, normal_cdf(mu, sd))
    ref = stats.kstest(xs, stats.norm(mu, sd).cdf).statistic
    assert ours == pytest.approx(ref, abs=1e-12)


def test_random_model_is_deterministic_and_lower_triangular():
    case = PRESETS["B"]
    a = random_gaussian_scm(case, (1, 2))
    b = random_gaussian_scm(case, (1, 2))
    np.testing.assert_array_equal(a.B1, b.B1)
    np.testing.assert_array_equal(a.B2, b.B2)
    assert np.all(np.triu(a.B1) == 0)
    assert a.B2.shape == (10, 20)
    nz = a.B1[a.B1 != 0]
    assert np.all((np.abs(nz) >= case.coef_min) & (np.abs(nz) <= case.coef_max))
    # every global column loads on exactly two variables
    assert np.all((a.B2[:, 10:] != 0).sum(axis=0) == 2)


def test_degree_zero_has_no_edges():
    g = random_gaussian_scm(BenchCase("Z", 6, 1, 0, 0), (3,))
    assert np.all(g.B1 == 0) and g.B2.shape == (6, 6)


def test_expected_degree():
    case = BenchCase("T", 30, 1, 4, 0)
    deg = [2 * np.count_nonzero(random_gaussian_scm(case, (s,)).B1) / 30 for s in range(200)]
    assert np.mean(deg) == pytest.approx(4.0, rel=0.05)


def test_case_validation():
    with pytest.raises(ValueError):
        BenchCase("X", 5, 6, 1, 0)
    with pytest.raises(ValueError):
        BenchCase("X", 5, 1, 5, 0)
    with pytest.raises(ValueError):
        BenchCase("X", 5, 1, 1, 0, coef_min=2, coef_max=1)


def test_round_is_reproducible():
    case = PRESETS["A"].with_(rounds=2)
    a = bench.run_round(case, 2000, 0)
    b = bench.run_round(case, 2000, 0)
    assert (a.unique_pct, a.zbar, a.sz, a.ks) == (b.unique_pct, b.zbar, b.sz, b.ks)
    assert not a.infeasible


def test_run_case_report_and_threads():
    case = PRESETS["B"].with_(rounds=4)
    one = bench.run_case(case, [500])
    four = bench.run_case(case, [500], threads=4)
    assert one.row("B", 500).zbar == four.row("B", 500).zbar
    text = one.to_csv()
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    assert lines[0].split(",") == list(bench.BenchReport.HEADER)
    assert "# coefficients: case B" in text
    assert "case" in one.to_table()


def test_all_conditioned_case_reports_dashes():
    case = BenchCase("F", 3, 3, 1, 0, rounds=2)
    rep = bench.run_case(case, [200])
    r = rep.row("F", 200)
    assert np.isnan(r.zbar) and np.isnan(r.ks)
    assert "---" in rep.to_table()


def test_load_cases():
    text = """
format_version: 1
defaults: {rounds: 3, n_grid: [100]}
cases:
  - A
  - {preset: E, seed: 9}
  - {name: small, n_vars: 4, n_conditions: 1, degree: 1, confounder_ratio: 0.5}
"""
    cases = bench.load_cases(text)
    assert [c.name for c in cases] == ["A", "E", "small"]
    assert all(c.rounds == 3 and c.n_grid == (100,) for c in cases)
    assert cases[1].seed == 9
    with pytest.raises(ValueError):
        bench.load_cases("cases:\n  - {preset: Q}\n")
    with pytest.raises(ValueError):
        bench.load_cases("cases:\n  - {preset: A, bogus: 1}\n")


@pytest.mark.parametrize("name", ["A", "B", "C", "D"])
def test_standardized_mean_is_unbiased(name):
    rep = bench.run_case(PRESETS[name].with_(rounds=100), [10_000])
    z = np.array([r.zbar for r in rep.row(name, 10_000).round_results if not np.isnan(r.zbar)])
    assert abs(z.mean()) <= 3 * z.std(ddof=1) / np.sqrt(z.size)
