import numpy as np
import pytest

from cfsim import scm
from cfsim.conditioning import ConditionSet

CHAIN = """
format_version: 1
variables:
  - {name: Z, kind: continuous, error: "normal(0, 1)", expr: "u", monotonic: additive}
  - {name: X, kind: continuous, error: "normal(0, 1)", expr: "Z + u", monotonic: additive}
  - {name: Y, kind: continuous, error: "normal(0, 1)", expr: "X + Z + u", monotonic: additive}
"""

# lines collected by the acceptance tests, printed after the run
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def chain():
    return scm.build(CHAIN)


@pytest.fixture(scope="session")
def credit():
    from importlib import resources
    path = resources.files("cfsim") / "data" / "credit.yaml"
    return scm.load_model(str(path))


def assert_consistent(m, table, conditions=None, tol=1e-9):
    """Every observed column equals its structural function of the row; evidence holds."""
    errs = scm.consistency_errors(m, table)
    assert errs == {}, f"rows inconsistent with the structural functions: {errs}"
    if conditions:
        for c in ConditionSet.build(m, conditions):
            vals = table[c.variable]
            if m.is_discrete(c.variable):
                assert np.all(vals == c.value)
            else:
                assert np.max(np.abs(vals - c.value)) <= tol * max(1.0, abs(c.value))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
