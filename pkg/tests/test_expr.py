import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cfsim import expr
from cfsim.expr import (ExprDomainError, ExprSyntaxError, UnboundVariableError,
                        UnknownFunctionError, evaluate, free_vars, is_additive_in_error,
                        parse, to_source)


@pytest.mark.parametrize("text,value", [
    ("1 + 2 * 3", 7.0),
    ("(1 + 2) * 3", 9.0),
    ("-2 ^ 2", -4.0),
    ("2 ^ 3 ^ 2", 512.0),
    ("10 / 4 / 5", 0.5),
    ("1 < 2", 1.0),
    ("3 ≤ 2", 0.0),
    ("2 = 2", 1.0),
    ("if(1 > 0, 5, log(-1))", 5.0),
    ("min(3, 1, 2) + max(4, 7)", 8.0),
    ("logistic(0)", 0.5),
    ("floor(-1.5)", -2.0),
    ("1e-3 * 1000", 1.0),
])
def test_scalar_values(text, value):
    assert evaluate(text, {}) == pytest.approx(value)


def test_vectorized_with_scalar_broadcast():
    out = evaluate("a * x + b", {"a": 2.0, "x": np.array([0.0, 1.0, 2.0]), "b": 1.0})
    np.testing.assert_array_equal(out, [1.0, 3.0, 5.0])


def test_syntax_error_reports_byte_offset():
    with pytest.raises(ExprSyntaxError) as info:
        parse("1 + * 2")
    assert info.value.offset == 4
    # multi-byte characters shift byte offsets
    with pytest.raises(ExprSyntaxError) as info:
        parse("1 ≤ )")
    assert info.value.offset == 6


def test_unknown_function_and_unbound_name():
    with pytest.raises(UnknownFunctionError):
        parse("frobnicate(1)")
    with pytest.raises(UnboundVariableError):
        evaluate("x + 1", {})


def test_domain_errors_raise_or_blank():
    x = np.array([1.0, -1.0, 4.0])
    with pytest.raises(ExprDomainError):
        evaluate("log(x)", {"x": x})
    out = evaluate("sqrt(x)", {"x": x}, errors="nan")
    assert out[0] == 1.0 and np.isnan(out[1]) and out[2] == 2.0
    with pytest.raises(ExprDomainError):
        evaluate("1 / x", {"x": 0.0})


def test_nan_inputs_propagate_without_error():
    out = evaluate("log(x) + 1", {"x": np.array([np.nan, 1.0])})
    assert np.isnan(out[0]) and out[1] == 1.0


def test_if_only_evaluates_taken_branch():
    x = np.array([-1.0, 4.0])
    out = evaluate("if(x > 0, sqrt(x), 0)", {"x": x})
    np.testing.assert_array_equal(out, [0.0, 2.0])


def test_categorical_and_bernoulli():
    u = np.array([0.1, 0.74, 0.75, 0.89, 0.9, 0.999])
    out = evaluate("categorical(u; 0.75, 0.15, 0.10)", {"u": u})
    np.testing.assert_array_equal(out, [1, 1, 2, 2, 3, 3])
    b = evaluate("bernoulli(u; 0.3)", {"u": np.array([0.5, 0.7, 0.71])})
    np.testing.assert_array_equal(b, [0, 1, 1])
    with pytest.raises(ExprDomainError):
        evaluate("categorical(u; 0.5, 0.6)", {"u": 0.2})


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(0.01, 50.0))
def test_poisson_inv_matches_scipy(u, lam):
    got = evaluate("poisson_inv(u; lam)", {"u": u, "lam": lam})
    assert got == stats.poisson.ppf(u, lam)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(0.1, 20.0))
def test_qgamma_matches_scipy(p, a):
    got = evaluate("qgamma(p, a)", {"p": p, "a": a})
    assert got == pytest.approx(stats.gamma.ppf(p, a), rel=1e-9)


def test_qnorm_pnorm_inverse():
    p = np.linspace(0.01, 0.99, 21)
    np.testing.assert_allclose(evaluate("pnorm(qnorm(p))", {"p": p}), p, rtol=1e-12)
    assert evaluate("qnorm(0.975)", {}) == pytest.approx(stats.norm.ppf(0.975))


def test_ordlogit_category_probabilities():
    # P(category <= k) = logistic(cut_k - eta)
    eta, cuts = 0.3, (-1.0, 0.5, 2.0)
    u = np.linspace(0.0005, 0.9995, 2000)
    out = evaluate("ordlogit(u; eta, -1, 0.5, 2)", {"u": u, "eta": eta})
    for k, c in enumerate(cuts, start=1):
        frac = np.mean(out <= k)
        assert frac == pytest.approx(1 / (1 + math.exp(-(c - eta))), abs=1e-3)


def test_free_vars_and_additivity():
    e = parse("2 * X + exp(Z) + u")
    assert free_vars(e) == {"X", "Z", "u"}
    assert is_additive_in_error(e)
    assert is_additive_in_error(parse("u + X"))
    assert not is_additive_in_error(parse("X * u"))
    assert not is_additive_in_error(parse("X - u"))
    assert not is_additive_in_error(parse("u + u"))


_names = st.sampled_from(["a", "b", "c"])
_leaf = st.one_of(st.floats(0.0, 100.0, allow_nan=False).map(expr.Num), _names.map(expr.Var))


def _node(children):
    return st.one_of(
        children.map(expr.Neg),
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda t: expr.BinOp(*t)),
        st.tuples(st.sampled_from(["<", "<=", "==", "!=", ">=", ">"]), children, children)
        .map(lambda t: expr.Compare(*t)),
        st.tuples(children, children, children).map(lambda t: expr.If(*t)),
        st.lists(children, min_size=1, max_size=3).map(lambda a: expr.Call("max", tuple(a))),
    )


_trees = st.recursive(_leaf, _node, max_leaves=12)


@settings(max_examples=300, deadline=None)
@given(_trees)
def test_print_parse_round_trip(tree):
    text = to_source(tree)
    assert parse(text) == tree
    assert to_source(parse(text)) == text


def test_worked_examples():
    assert evaluate("x + z + u", {"x": -1.0, "z": 1 / 3, "u": 1 / 6}) == pytest.approx(-0.5)
    assert free_vars(parse("3.14")) == set()
    assert free_vars(parse("if(a<b, exp(c), a)")) == {"a", "b", "c"}
    assert not is_additive_in_error(parse("exp(u) + z"))
    assert is_additive_in_error(parse("5000 + max(0, a * b) + u"))
    assert parse("categorical(u; 0.75, 0.15, 0.10)") == expr.Call(
        "categorical", (expr.Var("u"), expr.Num(0.75), expr.Num(0.15), expr.Num(0.1)), True)


def test_poisson_inv_brute_force_cdf():
    # smallest k whose partial sum of Poisson(2) masses reaches the level
    level, lam = 0.999999, 2.0
    k, term, total = 0, math.exp(-lam), math.exp(-lam)
    while total < level:
        k += 1
        term *= lam / k
        total += term
    assert evaluate("poisson_inv(0.999999, 2.0)", {}) == k


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-9, 1 - 1e-9), min_size=2, max_size=50), st.floats(0.01, 0.99),
       st.floats(0.1, 10.0))
def test_discrete_builtins_nondecreasing_in_u(us, p, lam):
    u = np.sort(np.array(us))
    for text in ("categorical(u; 0.2, 0.5, 0.3)", "bernoulli(u; p)", "poisson_inv(u; lam)",
                 "ordlogit(u; p, -1, 0, 1.5)"):
        out = evaluate(text, {"u": u, "p": p, "lam": lam})
        assert np.all(np.diff(out) >= 0)
