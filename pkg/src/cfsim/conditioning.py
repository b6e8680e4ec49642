"""Sampling background variables given evidence on observed variables.

Continuous evidence ``C = c`` is met by solving each particle's dedicated
error term for ``c`` and weighting the particle by the conditional density
of ``C`` given its other parents (error density over the derivative of the
structural function in the error).  Discrete evidence is met by keeping the
particles that already satisfy it.  Several conditions are processed in
topological order, each stage keeping the columns fixed by earlier stages.
"""
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from . import _kernels, rng
from .scm import (ADDITIVE, CONTINUOUS, DISCRETE, NONE, ModelError, ParticleTable, Scm,
                  eval_variable, simulate)

MULTINOMIAL = "multinomial"
SYSTEMATIC = "systematic"
SCHEMES = (MULTINOMIAL, SYSTEMATIC)


class InfeasibleEvidence(RuntimeError):
    """No particle is compatible with the evidence.

    ``diagnostics`` carries what was observed (NA root count, range of the
    conditioning variable, empirical marginal for discrete evidence, and the
    index of the failing condition when several are processed).
    """

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        extra = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({extra})"


@dataclass(frozen=True)
class Condition:
    variable: str
    value: float
    kind: str = CONTINUOUS


@dataclass(frozen=True)
class RootFindConfig:
    bracket: Tuple[float, float] = (1e-9, 1.0 - 1e-9)
    rel_tol: float = 1e-9
    max_iter: int = 200
    max_expand: int = 64

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        lo, hi = self.bracket
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("bracket quantiles must satisfy 0 < lo < hi < 1")

    def tol(self, c):
        return self.rel_tol * max(1.0, abs(c))


class ConditionSet(tuple):
    """Conditions sorted by the model's topological order."""

    @classmethod
    def build(cls, m: Scm, conditions) -> "ConditionSet":
        if isinstance(conditions, ConditionSet):
            items = list(conditions)
        elif isinstance(conditions, Mapping):
            items = [Condition(k, v) for k, v in conditions.items()]
        else:
            items = [c if isinstance(c, Condition) else Condition(*c) for c in conditions]
        seen = set()
        out = []
        for c in items:
            spec = m.spec(c.variable)
            if c.variable in seen:
                raise ValueError(f"more than one condition on {c.variable!r}")
            seen.add(c.variable)
            value = float(c.value)
            if not np.isfinite(value):
                raise ValueError(f"condition value for {c.variable!r} must be finite")
            out.append(Condition(c.variable, value, spec.kind))
        out.sort(key=lambda c: m.position(c.variable))
        return cls(out)

    @property
    def variables(self):
        return [c.variable for c in self]

    def as_dict(self):
        return {c.variable: c.value for c in self}


# ---------------------------------------------------------------------------
# root finding and weights
# ---------------------------------------------------------------------------

def _check_rootable(m, cond):
    spec = m.spec(cond.variable)
    if spec.kind != CONTINUOUS:
        raise ModelError(f"{cond.variable} is discrete; root finding applies to continuous evidence")
    if spec.monotonicity == NONE:
        raise ModelError(f"{cond.variable} is used as continuous evidence but is not declared "
                         "monotonic in its error term")
    return spec


def find_roots(m: Scm, table: ParticleTable, cond: Condition, cfg: Optional[RootFindConfig] = None):
    """Solve ``f_C(u, PaU) = c`` for the dedicated error, row by row.

    Returns an array of error values with NaN where no solution exists.
    """
    cfg = cfg or RootFindConfig()
    spec = _check_rootable(m, cond)
    c = float(cond.value)
    n = table.n
    cols = {p: table[p] for p in m.pa_u(cond.variable)}
    if spec.monotonicity == ADDITIVE:
        g = eval_variable(m, cond.variable, cols, errors="nan", error_values=0.0)
        return np.broadcast_to(c - np.asarray(g, dtype=float), (n,)).copy()
    return _bisect(m, cond.variable, cols, c, n, spec.error, cfg)


def _bisect(m, name, cols, c, n, err, cfg):
    tol = cfg.tol(c)
    roots = np.full(n, np.nan)
    pa_ok = np.ones(n, dtype=bool)
    for v in cols.values():
        pa_ok &= ~np.isnan(v)
    rows = np.flatnonzero(pa_ok)
    if rows.size == 0:
        return roots

    def f(u, idx):
        sub = {k: v[idx] for k, v in cols.items()}
        out = eval_variable(m, name, sub, errors="nan", error_values=u)
        return np.broadcast_to(np.asarray(out, dtype=float), (idx.size,)).astype(float)

    lo = np.full(rows.size, float(err.ppf(cfg.bracket[0])))
    hi = np.full(rows.size, float(err.ppf(cfg.bracket[1])))
    flo, fhi = f(lo, rows), f(hi, rows)
    decreasing = np.isfinite(flo) & np.isfinite(fhi) & (flo > fhi)
    if np.any(decreasing):
        raise ModelError(f"{name}: expression decreases in its error term (declared monotonic)")
    for _ in range(cfg.max_expand):
        need = np.flatnonzero(flo > c)
        if need.size == 0:
            break
        width = hi[need] - lo[need]
        lo[need] = lo[need] - width
        flo[need] = f(lo[need], rows[need])
    for _ in range(cfg.max_expand):
        need = np.flatnonzero(fhi < c)
        if need.size == 0:
            break
        width = hi[need] - lo[need]
        hi[need] = hi[need] + width
        fhi[need] = f(hi[need], rows[need])

    bracketed = (flo <= c) & (fhi >= c)
    hit_lo = bracketed & (np.abs(flo - c) <= tol)
    hit_hi = bracketed & ~hit_lo & (np.abs(fhi - c) <= tol)
    roots[rows[hit_lo]] = lo[hit_lo]
    roots[rows[hit_hi]] = hi[hit_hi]
    active = np.flatnonzero(bracketed & ~hit_lo & ~hit_hi)
    a_lo, a_hi = lo[active], hi[active]
    for _ in range(cfg.max_iter):
        if active.size == 0:
            break
        mid = 0.5 * (a_lo + a_hi)
        fm = f(mid, rows[active])
        done = np.abs(fm - c) <= tol
        roots[rows[active[done]]] = mid[done]
        stuck = ~done & ((mid <= a_lo) | (mid >= a_hi) | np.isnan(fm))
        go_up = fm < c
        a_lo = np.where(go_up, mid, a_lo)
        a_hi = np.where(go_up, a_hi, mid)
        keep = ~done & ~stuck
        active, a_lo, a_hi = active[keep], a_lo[keep], a_hi[keep]
    return roots


def find_root(m: Scm, row: Mapping[str, float], cond: Condition, cfg: Optional[RootFindConfig] = None):
    """Single-row form of :func:`find_roots`; returns a float or NaN (NA)."""
    table = ParticleTable({p: [row[p]] for p in m.pa_u(cond.variable)}, 1)
    return float(find_roots(m, table, cond, cfg)[0])


def _derivative(m, name, cols, u):
    h = np.maximum(1e-6, 1e-6 * np.abs(u))
    up = eval_variable(m, name, cols, errors="nan", error_values=u + h)
    down = eval_variable(m, name, cols, errors="nan", error_values=u - h)
    mid = eval_variable(m, name, cols, errors="nan", error_values=u)
    up, down, mid = (np.broadcast_to(np.asarray(x, float), u.shape) for x in (up, down, mid))
    d = (up - down) / (2.0 * h)
    fwd = (up - mid) / h
    bwd = (mid - down) / h
    d = np.where(np.isnan(d), fwd, d)
    return np.where(np.isnan(d), bwd, d)


def log_weights(m: Scm, table: ParticleTable, cond: Condition):
    """Log of the conditional density of ``C`` at ``c`` for each row.

    Rows with an unavailable error value get ``-inf``.
    """
    spec = _check_rootable(m, cond)
    u = np.asarray(table[spec.error_name], dtype=float)
    ok = ~np.isnan(u)
    lw = np.full(table.n, -np.inf)
    if not np.any(ok):
        return lw
    ldens = spec.error.logpdf(u[ok])
    if spec.monotonicity == ADDITIVE:
        lw[ok] = ldens
        return lw
    live = np.isfinite(ldens)
    idx = np.flatnonzero(ok)[live]
    if idx.size:
        cols = {p: table[p][idx] for p in m.pa_u(cond.variable)}
        g1 = _derivative(m, cond.variable, cols, u[idx])
        if np.any(~(g1 > 0)):
            raise ModelError(f"{cond.variable}: derivative in the error term is not positive "
                             "(violates strict monotonicity)")
        lw[idx] = ldens[live] - np.log(g1)
    return lw


def weights(m: Scm, table: ParticleTable, cond: Condition):
    """Conditional density of ``C`` at ``c`` for each row, given its solved error.

    Rows with an unavailable error value get weight 0.
    """
    return np.exp(log_weights(m, table, cond))


def weight(m: Scm, row: Mapping[str, float], cond: Condition):
    """Single-row form of :func:`weights`."""
    spec = m.spec(cond.variable)
    names = list(m.pa_u(cond.variable)) + [spec.error_name]
    table = ParticleTable({p: [row[p]] for p in names}, 1)
    return float(weights(m, table, cond)[0])


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resample_indices(w, n, scheme=MULTINOMIAL, seed=0):
    """Ancestor indices; row ``i`` is copied ``n * w_i / sum(w)`` times in expectation."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    w = np.asarray(w, dtype=float)
    if np.any(np.isnan(w)) or np.any(w < 0):
        raise ValueError("weights must be nonnegative numbers")
    total = w.sum()
    if not total > 0:
        raise InfeasibleEvidence("all particle weights are zero", {"particles": int(w.size)})
    if not np.isfinite(total):
        raise ValueError("weights must be finite")
    cumw = np.cumsum(w) / total
    last = int(np.flatnonzero(w > 0)[-1])
    cumw[last:] = 1.0
    if scheme == MULTINOMIAL:
        return _kernels.multinomial_indices(cumw, rng.uniforms(seed, int(n), "multinomial"))
    u0 = float(rng.uniforms(seed, 1, "systematic")[0])
    return _kernels.systematic_indices(cumw, u0, int(n))


def resample(t: ParticleTable, n, w, scheme=MULTINOMIAL, seed=0) -> ParticleTable:
    """Draw ``n`` rows of ``t`` with replacement, proportionally to ``w``."""
    idx = resample_indices(w, n, scheme, seed)
    out = t.take(idx)
    out.diagnostics["ancestors"] = idx
    return out


def ess(w):
    w = np.asarray(w, dtype=float)
    s = w.sum()
    if s <= 0:
        return 0.0
    p = w / s
    return float(1.0 / np.sum(p * p))


# ---------------------------------------------------------------------------
# conditional simulation
# ---------------------------------------------------------------------------

def _as_condition(m, cond):
    if isinstance(cond, Condition):
        return Condition(cond.variable, float(cond.value), m.spec(cond.variable).kind)
    name, value = cond
    return Condition(name, float(value), m.spec(name).kind)


def simulate_continuous_condition(n, m: Scm, cond, d0: Optional[ParticleTable] = None, seed=0,
                                  cfg: Optional[RootFindConfig] = None, scheme=MULTINOMIAL,
                                  weighted=False) -> ParticleTable:
    """Rows drawn from the model given a continuous condition ``C = c``.

    With ``weighted=True`` the resampling step is skipped and the rows with
    positive weight are returned with normalized weights attached.
    """
    cond = _as_condition(m, cond)
    if cond.kind != CONTINUOUS:
        raise ModelError(f"{cond.variable} is not continuous")
    spec = m.spec(cond.variable)
    fixed = set(d0.names) if d0 is not None else set()
    skip = m.descendants(cond.variable) - fixed
    d = simulate(m, n, d0, rng.child(seed, "propose"), skip=skip)
    before = d[cond.variable]
    roots = find_roots(m, d, cond, cfg)
    d.columns[spec.error_name] = roots
    lw = log_weights(m, d, cond)
    top = np.max(lw) if n else -np.inf
    # rescaled so the largest weight is 1; avoids underflow when c is far in the tails
    w = np.exp(lw - top) if np.isfinite(top) else np.zeros(n)
    diag = {
        "condition": cond.variable,
        "na_roots": int(np.isnan(roots).sum()),
        "f_min": float(np.nanmin(before)) if n and not np.all(np.isnan(before)) else float("nan"),
        "f_max": float(np.nanmax(before)) if n and not np.all(np.isnan(before)) else float("nan"),
        "ess": ess(w),
    }
    if n == 0:
        return ParticleTable({k: [] for k in m.columns}, 0, diagnostics=diag)
    if not np.any(w > 0):
        raise InfeasibleEvidence(f"no particle can satisfy {cond.variable} = {cond.value:g}", diag)
    if weighted:
        keep = np.flatnonzero(w > 0)
        base = d.take(keep).select(m.background_names)
        out = simulate(m, keep.size, base, rng.child(seed, "resim"))
        out = ParticleTable(out.columns, out.n, weights=w[keep], diagnostics=diag)
        out.diagnostics["unique_fraction"] = out.unique_fraction(m.background_names)
        return out
    idx = resample_indices(w, n, scheme, rng.child(seed, "resample"))
    base = d.take(idx).select(m.background_names)
    out = simulate(m, n, base, rng.child(seed, "resim"))
    out.diagnostics.update(diag)
    out.diagnostics["unique_fraction"] = out.unique_fraction(m.background_names)
    return out


def simulate_discrete_condition(n, m: Scm, cond, d0: Optional[ParticleTable] = None, seed=0,
                                scheme=MULTINOMIAL) -> ParticleTable:
    """Rows drawn from the model given a discrete condition ``C = c``."""
    cond = _as_condition(m, cond)
    if cond.kind != DISCRETE:
        raise ModelError(f"{cond.variable} is not discrete")
    d = simulate(m, n, d0, rng.child(seed, "propose"))
    vals = d[cond.variable]
    match = vals == cond.value
    count = int(match.sum())
    diag = {"condition": cond.variable, "matched": count, "ess": float(count)}
    if n == 0:
        return ParticleTable({k: [] for k in m.columns}, 0, diagnostics=diag)
    if count == 0:
        levels, counts = np.unique(vals[~np.isnan(vals)], return_counts=True)
        diag["marginal"] = {float(a): int(b) for a, b in zip(levels, counts)}
        raise InfeasibleEvidence(f"no particle has {cond.variable} = {cond.value:g}", diag)
    idx = resample_indices(match.astype(float), n, scheme, rng.child(seed, "resample"))
    out = d.take(idx)
    out.diagnostics.update(diag)
    out.diagnostics["unique_fraction"] = out.unique_fraction(m.background_names)
    return out


def simulate_multiple_conditions(n, m: Scm, cs, seed=0, cfg: Optional[RootFindConfig] = None,
                                 scheme=MULTINOMIAL) -> ParticleTable:
    """Rows drawn from the model given every condition in ``cs``.

    Conditions are processed in topological order.  Before condition ``k``
    the columns of earlier conditions and all their ancestors are held fixed
    and passed down; the rest is simulated afresh.
    """
    cs = ConditionSet.build(m, cs)
    if not cs:
        raise ValueError("empty condition set")
    d = None
    fixed = set()
    stages = []
    for k, cond in enumerate(cs):
        d0 = None
        if k:
            d0 = d.select([c for c in m.columns if c in fixed])
        sk = rng.child(seed, "condition", k)
        try:
            if cond.kind == CONTINUOUS:
                d = simulate_continuous_condition(n, m, cond, d0, sk, cfg, scheme)
            else:
                d = simulate_discrete_condition(n, m, cond, d0, sk, scheme)
        except InfeasibleEvidence as exc:
            exc.diagnostics["condition_index"] = k
            exc.diagnostics.setdefault("condition", cond.variable)
            raise
        stages.append({k2: v for k2, v in d.diagnostics.items() if k2 != "ancestors"})
        fixed |= m.closure([cond.variable])
    d.diagnostics = {
        "stages": stages,
        "ess": [s.get("ess") for s in stages],
        "na_roots": sum(s.get("na_roots", 0) for s in stages),
        "unique_fraction": d.unique_fraction(m.background_names) if d.n else float("nan"),
    }
    return d
