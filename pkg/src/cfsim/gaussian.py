"""Closed-form distributions for linear-Gaussian structural models.

A model ``V = b0 + B1 V + B2 U`` with ``U ~ N(0, I)`` and ``B1`` strictly
lower triangular (variables listed in topological order) has a jointly
Gaussian ``(V, U)``.  Conditioning on some coordinates of ``V`` and then
replacing intervened rows of the system gives the counterfactual law in
closed form.  These are used as ground truth for the particle sampler.
"""
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import linalg

from .dists import Dist
from .scm import (ADDITIVE, CONTINUOUS, GlobalBackgroundSpec, Scm, VariableSpec, error_column)
from . import expr as _expr

PIVOT_TOL = 1e-10


class SingularEvidence(ValueError):
    """Evidence variables are (numerically) deterministically linked."""


class GaussianDist:
    """Multivariate normal with labelled coordinates."""

    def __init__(self, mean, cov, labels: Sequence[str]):
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.asarray(cov, dtype=float)
        self.cov = 0.5 * (cov + cov.T)
        self.labels = tuple(labels)
        k = len(self.labels)
        if self.mean.shape != (k,) or self.cov.shape != (k, k):
            raise ValueError("mean/cov/labels dimensions disagree")
        self._index = {name: i for i, name in enumerate(self.labels)}

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"{name!r} is not a coordinate of this distribution") from None

    def sub(self, names: Sequence[str]) -> "GaussianDist":
        idx = [self.index(n) for n in names]
        return GaussianDist(self.mean[idx], self.cov[np.ix_(idx, idx)], names)

    def mean_of(self, name):
        return float(self.mean[self.index(name)])

    def var_of(self, name):
        return float(self.cov[self.index(name), self.index(name)])

    def sd_of(self, name):
        return float(np.sqrt(max(self.var_of(name), 0.0)))

    def corr(self, a, b):
        i, j = self.index(a), self.index(b)
        denom = np.sqrt(self.cov[i, i] * self.cov[j, j])
        return float(self.cov[i, j] / denom) if denom > 0 else float("nan")

    def min_eigenvalue(self):
        if not self.labels:
            return 0.0
        return float(np.linalg.eigvalsh(self.cov).min())

    def __repr__(self):
        return f"GaussianDist(labels={list(self.labels)})"


@dataclass
class GaussianScm:
    """``V = b0 + B1 V + B2 U`` over named variables and background columns.

    Args:
        b0: length-J intercepts.
        B1: J x J, strictly lower triangular; row j holds the parents of variable j.
        B2: J x H loadings on independent standard normals.
        names: variable names in topological order. Defaults to ``V1..VJ``.
        background: background column names. Defaults to ``U1..UH``.
    """

    b0: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    names: Optional[Sequence[str]] = None
    background: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.b0 = np.asarray(self.b0, dtype=float).reshape(-1)
        J = self.b0.size
        self.B1 = np.asarray(self.B1, dtype=float).reshape(J, J) if J else np.zeros((0, 0))
        self.B2 = np.atleast_2d(np.asarray(self.B2, dtype=float))
        if self.B1.shape != (J, J):
            raise ValueError(f"B1 must be {J}x{J}")
        if self.B2.shape[0] != J:
            raise ValueError(f"B2 must have {J} rows, got {self.B2.shape[0]}")
        if np.any(np.triu(self.B1) != 0):
            raise ValueError("B1 must be strictly lower triangular in the listed order")
        if self.names is None:
            self.names = [f"V{j + 1}" for j in range(J)]
        if self.background is None:
            self.background = [f"U{h + 1}" for h in range(self.B2.shape[1])]
        self.names = list(self.names)
        self.background = list(self.background)
        if len(self.names) != J or len(self.background) != self.B2.shape[1]:
            raise ValueError("name lists do not match matrix dimensions")
        if len(set(self.names) | set(self.background)) != J + len(self.background):
            raise ValueError("duplicate names")

    @property
    def J(self):
        return self.b0.size

    @property
    def H(self):
        return self.B2.shape[1]

    def index(self, name):
        return self.names.index(name)

    def _solve(self, rhs, B1=None):
        # (I - B1) is unit lower triangular
        A = np.eye(self.J) - (self.B1 if B1 is None else B1)
        return linalg.solve_triangular(A, rhs, lower=True, unit_diagonal=True)


def marginal(g: GaussianScm) -> GaussianDist:
    """Joint law of ``(V, U)``."""
    mu_v = g._solve(g.b0)
    s_vu = g._solve(g.B2)
    s_vv = s_vu @ s_vu.T
    J, H = g.J, g.H
    cov = np.zeros((J + H, J + H))
    cov[:J, :J] = s_vv
    cov[:J, J:] = s_vu
    cov[J:, :J] = s_vu.T
    cov[J:, J:] = np.eye(H)
    mean = np.concatenate([mu_v, np.zeros(H)])
    return GaussianDist(mean, cov, g.names + g.background)


def _condition_joint(joint: GaussianDist, fixed: Mapping[str, float]):
    keep = [l for l in joint.labels if l not in fixed]
    if not fixed:
        return joint.sub(keep)
    f_names = list(fixed)
    fi = [joint.index(n) for n in f_names]
    ki = [joint.index(n) for n in keep]
    s22 = joint.cov[np.ix_(fi, fi)]
    s12 = joint.cov[np.ix_(ki, fi)]
    try:
        L = linalg.cholesky(s22, lower=True)
    except linalg.LinAlgError:
        raise SingularEvidence("evidence covariance is not positive definite") from None
    if np.min(np.diag(L)) ** 2 < PIVOT_TOL:
        raise SingularEvidence("evidence variables are deterministically linked "
                               f"(smallest pivot below {PIVOT_TOL:g})")
    c = np.array([float(fixed[n]) for n in f_names])
    resid = c - joint.mean[fi]
    factor = (L, True)
    mean = joint.mean[ki] + s12 @ linalg.cho_solve(factor, resid)
    cov = joint.cov[np.ix_(ki, ki)] - s12 @ linalg.cho_solve(factor, s12.T)
    return GaussianDist(mean, cov, keep)


def condition(g: GaussianScm, fixed: Mapping[str, float]) -> GaussianDist:
    """Law of the unfixed variables and all background columns given ``V2 = c``."""
    for name in fixed:
        if name not in g.names:
            raise KeyError(f"unknown variable {name!r}")
    return _condition_joint(marginal(g), fixed)


def counterfactual(g: GaussianScm, fixed: Mapping[str, float],
                   iv: Mapping[str, float]) -> GaussianDist:
    """Law of every variable in the world ``do(iv)`` given factual evidence ``fixed``."""
    post = condition(g, fixed).sub(g.background)
    b0, B1, B2 = g.b0.copy(), g.B1.copy(), g.B2.copy()
    for name, x in iv.items():
        j = g.index(name)
        B1[j, :] = 0.0
        B2[j, :] = 0.0
        b0[j] = float(x)
    mean = g._solve(b0 + B2 @ post.mean, B1)
    load = g._solve(B2, B1)
    cov = load @ post.cov @ load.T
    return GaussianDist(mean, cov, g.names)


def _term(coef, name):
    if coef == 1.0:
        return name
    return f"{coef!r} * {name}"


def _linear_expr(b0, terms):
    out = repr(float(b0)) if b0 != 0.0 else ""
    for coef, name in terms:
        if coef == 0.0:
            continue
        if not out:
            out = _term(coef, name) if coef > 0 else "-" + _term(-coef, name)
        elif coef > 0:
            out += " + " + _term(coef, name)
        else:
            out += " - " + _term(-coef, name)
    return out


def dedicated_columns(g: GaussianScm):
    """Index of each variable's dedicated unit column (coefficient 1, zero elsewhere)."""
    ded = {}
    used = set()
    nonzero = g.B2 != 0
    for j, name in enumerate(g.names):
        for h in range(g.H):
            if h in used:
                continue
            if g.B2[j, h] == 1.0 and nonzero[:, h].sum() == 1:
                ded[name] = h
                used.add(h)
                break
        else:
            raise ValueError(f"variable {name!r} has no dedicated unit background column")
    return ded


def to_scm(g: GaussianScm) -> Scm:
    """Additive-noise model with the same law as :func:`marginal`.

    Dedicated columns become the variables' error terms (and are renamed to
    the error-column convention); other columns with nonzero loadings become
    global background variables.
    """
    ded = dedicated_columns(g)
    ded_cols = set(ded.values())
    shared = [h for h in range(g.H) if h not in ded_cols and np.any(g.B2[:, h] != 0)]
    globals_ = [GlobalBackgroundSpec(g.background[h], Dist("normal", 0.0, 1.0)) for h in shared]
    variables = []
    for j, name in enumerate(g.names):
        terms = [(float(g.B1[j, k]), g.names[k]) for k in range(j)]
        terms += [(float(g.B2[j, h]), g.background[h]) for h in shared]
        text = _linear_expr(float(g.b0[j]), terms)
        text = f"{text} + u" if text else "u"
        variables.append(VariableSpec(name, CONTINUOUS, Dist("normal", 0.0, 1.0),
                                      _expr.parse(text), ADDITIVE))
    return Scm(variables, globals_)


def background_map(g: GaussianScm):
    """Background column of ``g`` -> column name in the model from :func:`to_scm`."""
    ded = dedicated_columns(g)
    out = {g.background[h]: error_column(name) for name, h in ded.items()}
    for h in range(g.H):
        out.setdefault(g.background[h], g.background[h])
    return out


def relabel(d: GaussianDist, mapping: Mapping[str, str]) -> GaussianDist:
    return GaussianDist(d.mean, d.cov, [mapping.get(l, l) for l in d.labels])
