"""Structural causal models: declaration, graph queries and forward simulation."""
import csv
import heapq
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml

from . import _kernels, rng
from .dists import Dist
from .expr import ERROR_SYMBOL, Expr, Num, evaluate, free_vars, is_additive_in_error, parse, to_source

CONTINUOUS = "continuous"
DISCRETE = "discrete"
KINDS = (CONTINUOUS, DISCRETE)
ADDITIVE = "additive"
MONOTONIC = "monotonic_general"
NONE = "none"
MONOTONICITY = (ADDITIVE, MONOTONIC, NONE)
FORMAT_VERSION = 1


class ModelError(ValueError):
    """Invalid model declaration."""


class CycleError(ModelError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("cycle detected: " + " -> ".join(self.cycle + self.cycle[:1]))


def error_column(name):
    """Column that holds the dedicated error term of observed variable ``name``."""
    return f"u_{name}"


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    error: Dist
    expr: Expr
    monotonicity: str = NONE

    @property
    def error_name(self):
        return error_column(self.name)


@dataclass(frozen=True)
class GlobalBackgroundSpec:
    name: str
    dist: Dist


class Scm:
    """An immutable recursive SCM.

    Background variables (global ones, then dedicated errors) precede the
    observed variables in the topological order ``order``; among observed
    variables ties are broken by declaration order.
    """

    def __init__(self, variables: Sequence[VariableSpec], globals_: Sequence[GlobalBackgroundSpec] = (),
                 intervened: Optional[Mapping[str, float]] = None, options: Optional[dict] = None,
                 priority: Optional[Sequence[str]] = None):
        self.variables = tuple(variables)
        self.globals = tuple(globals_)
        self.intervened = dict(intervened or {})
        self.options = dict(options or {})
        self._spec = {v.name: v for v in self.variables}
        self._global = {g.name: g for g in self.globals}
        if len(self._spec) != len(self.variables):
            raise ModelError(f"duplicate variable name in {[v.name for v in self.variables]}")
        if len(self._global) != len(self.globals):
            raise ModelError("duplicate background variable name")
        names = set(self._spec) | set(self._global) | {v.error_name for v in self.variables}
        if len(names) != len(self._spec) + len(self._global) + len(self.variables):
            raise ModelError("names of variables, background variables and error columns "
                             "(u_<variable>) must all be distinct")
        if ERROR_SYMBOL in self._spec or ERROR_SYMBOL in self._global:
            raise ModelError(f"{ERROR_SYMBOL!r} is reserved for the dedicated error term")

        self.parents: Dict[str, tuple] = {}
        self.global_parents: Dict[str, tuple] = {}
        for v in self.variables:
            refs = free_vars(v.expr) - {ERROR_SYMBOL}
            unknown = refs - set(self._spec) - set(self._global)
            if unknown:
                raise ModelError(f"{v.name}: unknown identifier(s) {sorted(unknown)}")
            if v.name in refs:
                raise CycleError([v.name])
            self.parents[v.name] = tuple(sorted(refs & set(self._spec), key=self._decl_index))
            self.global_parents[v.name] = tuple(g.name for g in self.globals if g.name in refs)
        self.order = self._toposort(priority)
        self._pos = {name: i for i, name in enumerate(self.order)}
        self.background_names = tuple(g.name for g in self.globals) + tuple(
            self._spec[v].error_name for v in self.order)
        self.columns = self.background_names + self.order
        self._children = {v: [] for v in self.order}
        for v in self.order:
            for p in self.parents[v]:
                self._children[p].append(v)

    # -- construction helpers -------------------------------------------------

    def _decl_index(self, name):
        return [v.name for v in self.variables].index(name)

    def _toposort(self, priority):
        rank = {v.name: i for i, v in enumerate(self.variables)}
        if priority is not None:
            pr = {name: i for i, name in enumerate(priority)}
            rank = {k: (pr.get(k, len(pr)), rank[k]) for k in rank}
        indeg = {v: len(self.parents[v]) for v in self._spec}
        kids = {v: [] for v in self._spec}
        for v, ps in self.parents.items():
            for p in ps:
                kids[p].append(v)
        heap = [(rank[v], v) for v, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        out = []
        while heap:
            _, v = heapq.heappop(heap)
            out.append(v)
            for c in kids[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, (rank[c], c))
        if len(out) != len(self._spec):
            raise CycleError(self._find_cycle(set(self._spec) - set(out)))
        return tuple(out)

    def _find_cycle(self, remaining):
        start = min(remaining, key=self._decl_index)
        path, seen = [start], {start: 0}
        cur = start
        while True:
            nxt = next(p for p in self.parents[cur] if p in remaining)
            if nxt in seen:
                cyc = path[seen[nxt]:]
                return list(reversed(cyc))
            seen[nxt] = len(path)
            path.append(nxt)
            cur = nxt

    # -- queries ----------------------------------------------------------------

    @property
    def observed(self):
        return self.order

    def spec(self, name) -> VariableSpec:
        try:
            return self._spec[name]
        except KeyError:
            raise ModelError(f"unknown variable {name!r}") from None

    def has_variable(self, name):
        return name in self._spec

    def is_discrete(self, name):
        return self.spec(name).kind == DISCRETE

    def background_dist(self, name):
        if name in self._global:
            return self._global[name].dist
        for v in self.variables:
            if v.error_name == name:
                return v.error
        raise ModelError(f"unknown background variable {name!r}")

    def pa_star(self, name):
        """Observed parents, global parents and the dedicated error column."""
        return self.parents[name] + self.global_parents[name] + (self.spec(name).error_name,)

    def pa_u(self, name):
        """Parents other than the dedicated error term."""
        return self.parents[name] + self.global_parents[name]

    def position(self, name):
        return self._pos[name]

    def ancestors(self, names: Iterable[str], observed_only=False):
        """Ancestors (excluding the names themselves) over V and U."""
        names = list(names)
        for n in names:
            self.spec(n)
        seen, stack = set(), list(names)
        while stack:
            cur = stack.pop()
            for p in self.parents[cur]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        obs = seen
        if observed_only:
            return obs
        bg = set()
        for v in obs | set(names):
            bg.update(self.global_parents[v])
            bg.add(self.spec(v).error_name)
        return obs | bg

    def closure(self, names):
        """``names`` together with all their ancestors (observed and background)."""
        return set(names) | self.ancestors(names)

    def descendants(self, name):
        seen, stack = set(), [name]
        while stack:
            cur = stack.pop()
            for c in self._children[cur]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def edges(self):
        out = []
        for v in self.order:
            for p in self.pa_star(v):
                out.append((p, v))
        return out

    def __repr__(self):
        return f"Scm(observed={list(self.order)}, globals={[g.name for g in self.globals]})"

    def to_spec(self):
        """Structured form accepted by :func:`build`."""
        return {
            "format_version": FORMAT_VERSION,
            "background": [{"name": g.name, "dist": str(g.dist)} for g in self.globals],
            "variables": [
                {"name": v.name, "kind": v.kind, "error": str(v.error),
                 "expr": to_source(v.expr), "monotonic": v.monotonicity}
                for v in self.variables
            ],
            "options": dict(self.options),
        }


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------

def _variable_from_dict(d):
    if not isinstance(d, Mapping) or "name" not in d:
        raise ModelError(f"variable entry needs a name: {d!r}")
    name = str(d["name"])
    kind = d.get("kind", CONTINUOUS)
    if kind not in KINDS:
        raise ModelError(f"{name}: kind must be one of {KINDS}")
    if d.get("error") in (None, ""):
        raise ModelError(f"{name}: missing error distribution")
    try:
        err = Dist.parse(d["error"])
    except ValueError as exc:
        raise ModelError(f"{name}: {exc}") from None
    if "expr" not in d:
        raise ModelError(f"{name}: missing expr")
    try:
        e = parse(str(d["expr"]))
    except Exception as exc:
        raise ModelError(f"{name}: {exc}") from None
    mono = d.get("monotonic", NONE)
    if mono is True:
        mono = MONOTONIC
    if mono in (False, None):
        mono = NONE
    if mono not in MONOTONICITY:
        raise ModelError(f"{name}: monotonic must be one of {MONOTONICITY}")
    if mono != NONE and ERROR_SYMBOL not in free_vars(e):
        raise ModelError(f"{name}: declared {mono} but the expression does not use {ERROR_SYMBOL!r}")
    if mono == ADDITIVE and not is_additive_in_error(e):
        raise ModelError(f"{name}: declared additive but the expression is not of the form g(...) + u")
    return VariableSpec(name, kind, err, e, mono)


def build(spec) -> Scm:
    """Validate a model given as YAML text or a structured mapping."""
    if isinstance(spec, Scm):
        return spec
    if isinstance(spec, (str, bytes)):
        spec = yaml.safe_load(spec)
    if not isinstance(spec, Mapping):
        raise ModelError("model must be a mapping with 'variables'")
    version = spec.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported format_version {version!r}")
    variables = [_variable_from_dict(d) for d in spec.get("variables") or []]
    if not variables:
        raise ModelError("model declares no variables")
    globals_ = []
    for g in spec.get("background") or []:
        if "dist" not in g:
            raise ModelError(f"background {g.get('name')!r}: missing dist")
        try:
            globals_.append(GlobalBackgroundSpec(str(g["name"]), Dist.parse(g["dist"])))
        except ValueError as exc:
            raise ModelError(str(exc)) from None
    m = Scm(variables, globals_, options=spec.get("options") or {})
    used = set()
    for v in m.variables:
        used.update(m.global_parents[v.name])
    unused = [g.name for g in m.globals if g.name not in used]
    if unused:
        raise ModelError(f"background variable(s) {unused} are not referenced by any variable")
    return m


def load_model(path) -> Scm:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return build(fh.read())


def ancestral_prune(m: Scm, targets: Iterable[str]) -> Scm:
    """Restrict ``m`` to ``targets`` and their ancestors."""
    targets = list(targets)
    keep = m.ancestors(targets, observed_only=True) | set(targets)
    variables = [v for v in m.variables if v.name in keep]
    used = set()
    for v in variables:
        used.update(m.global_parents[v.name])
    globals_ = [g for g in m.globals if g.name in used]
    iv = {k: x for k, x in m.intervened.items() if k in keep}
    return Scm(variables, globals_, iv, m.options, priority=m.order)


def intervene(m: Scm, iv: Mapping[str, float]) -> Scm:
    """Submodel with the intervened variables replaced by constants."""
    if not iv:
        return m
    values = {}
    for k, x in iv.items():
        m.spec(k)
        x = float(x)
        if not np.isfinite(x):
            raise ModelError(f"intervention value for {k!r} must be finite")
        values[k] = x
    variables = [replace(v, expr=Num(values[v.name])) if v.name in values else v for v in m.variables]
    merged = dict(m.intervened)
    merged.update(values)
    return Scm(variables, m.globals, merged, m.options, priority=m.order)


# ---------------------------------------------------------------------------
# particle table
# ---------------------------------------------------------------------------

class TableError(ValueError):
    pass


class ParticleTable:
    """``n`` rows of named float64 columns; NaN marks an unavailable cell."""

    def __init__(self, columns: Mapping[str, np.ndarray], n: int, weights=None, diagnostics=None):
        self.n = int(n)
        self.columns = {}
        for k, v in columns.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != (self.n,):
                raise TableError(f"column {k!r} has shape {arr.shape}, expected ({self.n},)")
            self.columns[k] = arr
        self.weights = None
        if weights is not None:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (self.n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise TableError("weights must be finite, nonnegative and one per row")
            total = w.sum()
            if total <= 0:
                raise TableError("weights sum to zero")
            self.weights = w / total
        self.diagnostics = dict(diagnostics or {})

    @property
    def names(self):
        return tuple(self.columns)

    def __len__(self):
        return self.n

    def __contains__(self, name):
        return name in self.columns

    def __getitem__(self, name):
        return self.columns[name]

    def available(self, name):
        return ~np.isnan(self.columns[name])

    def select(self, names):
        return ParticleTable({k: self.columns[k] for k in names}, self.n)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ParticleTable({k: v[idx] for k, v in self.columns.items()}, idx.shape[0])

    def matrix(self, names=None):
        names = self.names if names is None else list(names)
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self.columns[k] for k in names])

    def unique_fraction(self, names=None):
        if self.n == 0:
            return float("nan")
        return _kernels.unique_row_count(self.matrix(names)) / self.n

    def ess(self):
        if self.weights is None:
            return float(self.n)
        return float(1.0 / np.sum(self.weights**2))

    def to_csv(self, fh=None, names=None):
        names = self.names if names is None else list(names)
        buf = fh or io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = list(names) + (["weight"] if self.weights is not None else [])
        writer.writerow(header)
        cols = [self.columns[k] for k in names]
        if self.weights is not None:
            cols.append(self.weights)
        for i in range(self.n):
            writer.writerow(["NA" if np.isnan(c[i]) else repr(float(c[i])) for c in cols])
        if fh is None:
            return buf.getvalue()
        return None

    def __repr__(self):
        return f"ParticleTable(n={self.n}, columns={list(self.columns)})"


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _env_for(m, name, cols):
    spec = m.spec(name)
    env = {p: cols[p] for p in m.pa_u(name)}
    env[ERROR_SYMBOL] = cols[spec.error_name]
    return env


def eval_variable(m: Scm, name, cols, errors="raise", error_values=None):
    """Evaluate ``f_name`` on column data, optionally overriding the error."""
    spec = m.spec(name)
    env = {p: cols[p] for p in m.pa_u(name)}
    env[ERROR_SYMBOL] = cols[spec.error_name] if error_values is None else error_values
    return evaluate(spec.expr, env, errors=errors)


def simulate(m: Scm, n: int, d0: Optional[ParticleTable] = None, seed=0,
             skip: Iterable[str] = ()) -> ParticleTable:
    """Draw ``n`` rows over all background and observed columns of ``m``.

    Columns of ``d0`` are copied as given.  Other background columns come
    from counter-based streams keyed by ``(seed, column name)``; observed
    columns are computed in topological order.  Observed names in ``skip``
    are left unavailable (for callers that will recompute them).
    """
    n = int(n)
    if n < 0:
        raise ValueError("n must be nonnegative")
    given = {}
    if d0 is not None:
        if d0.n != n:
            raise TableError(f"d0 has {d0.n} rows, expected {n}")
        cols = set(m.columns)
        for k in d0.names:
            if k not in cols:
                raise TableError(f"d0 column {k!r} is not in the model")
        for k in d0.names:
            if m.has_variable(k):
                missing = [p for p in m.pa_star(k) if p not in d0]
                if missing:
                    raise TableError(f"d0 fixes {k!r} but not its parents {missing}")
        given = d0.columns
    skip = set(skip)
    out = {}
    for name in m.background_names:
        if name in given:
            out[name] = np.array(given[name], dtype=np.float64, copy=True)
        else:
            out[name] = m.background_dist(name).from_uniform(rng.uniforms(seed, n, "bg", name))
    for name in m.order:
        if name in given:
            out[name] = np.array(given[name], dtype=np.float64, copy=True)
        elif name in skip:
            out[name] = np.full(n, np.nan)
        else:
            val = eval_variable(m, name, out)
            out[name] = np.broadcast_to(np.asarray(val, dtype=np.float64), (n,)).copy()
    return ParticleTable(out, n)


def consistency_errors(m: Scm, table: ParticleTable):
    """Variables whose available cells disagree with their structural function.

    Returns a dict ``name -> number of offending rows``; empty when the
    table is consistent with ``m``.
    """
    bad = {}
    for name in m.order:
        if name not in table:
            continue
        needed = m.pa_star(name)
        if any(p not in table for p in needed):
            continue
        avail = table.available(name)
        for p in needed:
            avail = avail & table.available(p)
        if not np.any(avail):
            continue
        sub = {p: table[p][avail] for p in needed}
        recomputed = np.broadcast_to(eval_variable(m, name, sub, errors="nan"), (int(avail.sum()),))
        mismatch = int(np.sum(recomputed != table[name][avail]))
        if mismatch:
            bad[name] = mismatch
    return bad
