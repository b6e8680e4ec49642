"""Counterfactual fairness audits of black-box predictors.

For every combination ``s`` of sensitive values the case is re-simulated in
the world ``do(S = s, W = w)``, where ``W`` are the non-sensitive parents of
the outcome held at their observed values, and the predictor is applied to
the simulated rows.  A predictor is fair for the case when the mean
prediction does not depend on ``s``.
"""
import csv
import io
import itertools
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import yaml

from . import expr as _expr
from . import rng
from .conditioning import MULTINOMIAL, InfeasibleEvidence, RootFindConfig
from .counterfactual import CounterfactualQuery, simulate_counterfactual
from .scm import ParticleTable, Scm, simulate

FIXED_PARENTS = "fixed_parents"
FREE_PARENTS = "free_parents"
MODES = (FIXED_PARENTS, FREE_PARENTS)


class PredictorError(RuntimeError):
    """The predictor broke its protocol (exit status, output shape, timeout, nondeterminism)."""


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

class Predictor:
    """Maps a table of observed columns to one prediction per row."""

    inputs: Optional[Sequence[str]] = None

    def predict(self, table: ParticleTable) -> np.ndarray:
        raise NotImplementedError

    def input_columns(self, m: Scm):
        return list(self.inputs) if self.inputs is not None else list(m.order)


class ExpressionPredictor(Predictor):
    """Predictor given by an expression over observed columns."""

    def __init__(self, text):
        self.text = text
        self.node = _expr.parse(text)
        self.inputs = sorted(_expr.free_vars(self.node))

    def predict(self, table: ParticleTable) -> np.ndarray:
        env = {k: table[k] for k in self.inputs}
        out = _expr.evaluate(self.node, env, errors="nan")
        return np.broadcast_to(np.asarray(out, dtype=float), (table.n,)).copy()

    def __repr__(self):
        return f"ExpressionPredictor({self.text!r})"


class ExternalPredictor(Predictor):
    """Predictor run as a subprocess speaking CSV in, one float per line out.

    Args:
        command: argv list or a shell-style string.
        timeout: seconds before the call is abandoned.
        inputs: columns to send; all observed columns when omitted.
        cwd: working directory for the subprocess.
    """

    def __init__(self, command, timeout: float = 60.0, inputs: Optional[Sequence[str]] = None,
                 cwd=None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty predictor command")
        self.timeout = float(timeout)
        self.inputs = list(inputs) if inputs is not None else None
        self.cwd = cwd
        self._columns: Optional[List[str]] = None

    def bind(self, m: Scm, exclude=()):
        """Fix the columns sent to the subprocess (all observed ones unless ``inputs`` is set)."""
        self._columns = [c for c in self.input_columns(m) if self.inputs is not None or c not in exclude]
        return self

    @property
    def columns(self):
        return self._columns if self._columns is not None else self.inputs

    def predict(self, table: ParticleTable) -> np.ndarray:
        cols = self.columns
        return external_predict(table, self.command, self.timeout, cols, self.cwd)

    def __repr__(self):
        return f"ExternalPredictor({self.command!r})"


def external_predict(table: ParticleTable, command, timeout: float = 60.0,
                     columns: Optional[Sequence[str]] = None, cwd=None) -> np.ndarray:
    """Send ``table`` to a predictor subprocess and read back ``n`` predictions."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    columns = list(columns) if columns is not None else list(table.names)
    missing = [c for c in columns if c not in table]
    if missing:
        raise PredictorError(f"table lacks predictor input column(s) {missing}")
    text = table.to_csv(names=columns)
    try:
        proc = subprocess.run(argv, input=text, capture_output=True, text=True, timeout=timeout,
                              cwd=cwd)
    except subprocess.TimeoutExpired:
        raise PredictorError(f"predictor timed out after {timeout:g} s") from None
    except OSError as exc:
        raise PredictorError(f"cannot launch predictor {argv[0]!r}: {exc}") from None
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-3:]
        raise PredictorError(f"predictor exited with status {proc.returncode}: {' | '.join(tail)}")
    lines = proc.stdout.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != table.n:
        raise PredictorError(f"predictor returned {len(lines)} lines for {table.n} rows")
    out = np.empty(table.n)
    for i, line in enumerate(lines):
        try:
            out[i] = float(line.strip())
        except ValueError:
            raise PredictorError(f"line {i + 1} of predictor output is not a number: {line!r}") from None
    return out


def check_deterministic(pred: Predictor, probe: ParticleTable):
    """Evaluate twice on ``probe``; raise :class:`PredictorError` if the answers differ."""
    a = np.asarray(pred.predict(probe), dtype=float)
    b = np.asarray(pred.predict(probe), dtype=float)
    if a.shape != b.shape or not np.array_equal(a, b, equal_nan=True):
        raise PredictorError("predictor is not deterministic: two calls on the same table differ")
    return a


def load_predictor(path_or_mapping, base_dir=None) -> Predictor:
    """Build a predictor from a YAML file or mapping (``kind: expression | external``)."""
    doc = path_or_mapping
    if not isinstance(doc, Mapping):
        with open(doc, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    if doc.get("format_version", 1) != 1:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    kind = doc.get("kind", "expression")
    if kind == "expression":
        if "expr" not in doc:
            raise ValueError("expression predictor needs 'expr'")
        return ExpressionPredictor(doc["expr"])
    if kind == "external":
        if "command" not in doc:
            raise ValueError("external predictor needs 'command'")
        return ExternalPredictor(doc["command"], doc.get("timeout", 60.0), doc.get("inputs"),
                                 cwd=base_dir)
    raise ValueError(f"unknown predictor kind {kind!r}")


# ---------------------------------------------------------------------------
# cases
# ---------------------------------------------------------------------------

@dataclass
class FairnessCase:
    """One audited individual.

    Attributes:
        outcome: the predicted variable ``Y``.
        sensitive: sensitive variable -> grid of values to intervene on.
        w_conditions: observed values of the non-sensitive parents of ``Y``.
        c_conditions: other observed evidence (may include sensitive values).
        n: rows simulated per sensitive-value cell.
        seed: master seed.
    """

    outcome: str
    sensitive: Dict[str, Sequence[float]]
    w_conditions: Dict[str, float] = field(default_factory=dict)
    c_conditions: Dict[str, float] = field(default_factory=dict)
    n: int = 1000
    seed: int = 0

    def validate(self, m: Scm):
        m.spec(self.outcome)
        if not self.sensitive:
            raise ValueError("no sensitive variables")
        for s, grid in self.sensitive.items():
            m.spec(s)
            if s == self.outcome:
                raise ValueError("the outcome cannot be sensitive")
            vals = list(grid)
            if not vals or not all(np.isfinite(float(v)) for v in vals):
                raise ValueError(f"value grid of {s!r} must be finite and nonempty")
        expected = set(m.parents[self.outcome]) - set(self.sensitive)
        if set(self.w_conditions) != expected:
            raise ValueError(f"w_conditions must be exactly the non-sensitive parents of "
                             f"{self.outcome!r}: {sorted(expected)}")
        overlap = set(self.w_conditions) & set(self.c_conditions)
        if overlap:
            raise ValueError(f"variables given both as w and c conditions: {sorted(overlap)}")
        for c in self.c_conditions:
            m.spec(c)
        if self.n < 1:
            raise ValueError("n must be positive")

    def cells(self):
        names = list(self.sensitive)
        for combo in itertools.product(*(list(self.sensitive[s]) for s in names)):
            yield dict(zip(names, (float(v) for v in combo)))


@dataclass
class Cell:
    values: Dict[str, float]
    mean: float = float("nan")
    error: Optional[str] = None


@dataclass
class FairnessReport:
    """Per-cell mean predictions for one case and their spread."""

    cells: List[Cell]
    mode: str = FIXED_PARENTS

    @property
    def feasible(self):
        return [c for c in self.cells if c.error is None]

    @property
    def complete(self):
        return all(c.error is None for c in self.cells)

    @property
    def difference(self):
        means = [c.mean for c in self.feasible]
        if not means:
            return float("nan")
        return float(max(means) - min(means))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.cells[0].values) if self.cells else []
        w.writerow(names + ["mean_prediction", "status"])
        for c in self.cells:
            w.writerow([repr(c.values[k]) for k in names]
                       + ["NA" if c.error else repr(c.mean), c.error or "ok"])
        w.writerow([])
        w.writerow(["counterfactual_difference", _fmt(self.difference)])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = []
        for c in self.cells:
            label = ", ".join(f"{k}={v:g}" for k, v in c.values.items())
            val = f"infeasible ({c.error})" if c.error else f"{c.mean:.6g}"
            lines.append(f"  {label:<40} {val}")
        lines.append(f"  counterfactual difference: {_fmt(self.difference)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "NA" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6g}"


def evaluate_fairness(pred: Predictor, m: Scm, case: FairnessCase, mode=FIXED_PARENTS,
                      cfg: Optional[RootFindConfig] = None, scheme=MULTINOMIAL) -> FairnessReport:
    """Mean prediction in each sensitive-value world and the max - min spread.

    Cells whose evidence is infeasible are reported as such and skipped.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; use one of {MODES}")
    case.validate(m)
    if isinstance(pred, ExternalPredictor):
        pred.bind(m, exclude=(case.outcome,))
    conditions = dict(case.w_conditions)
    conditions.update(case.c_conditions)
    cells = []
    for k, s in enumerate(case.cells()):
        iv = dict(s)
        if mode == FIXED_PARENTS:
            iv.update(case.w_conditions)
        inputs = pred.columns if isinstance(pred, ExternalPredictor) else pred.input_columns(m)
        wanted = [c for c in inputs if c not in iv]
        q = CounterfactualQuery(conditions, iv, wanted, case.n, rng.child(case.seed, "cell", k))
        try:
            table = simulate_counterfactual(m, q, cfg, scheme)
        except InfeasibleEvidence as exc:
            cells.append(Cell(s, error=str(exc)))
            continue
        preds = np.asarray(pred.predict(table), dtype=float)
        if preds.shape != (table.n,):
            raise PredictorError(f"predictor returned {preds.shape} for {table.n} rows")
        cells.append(Cell(s, float(np.mean(preds))))
    return FairnessReport(cells, mode)


# ---------------------------------------------------------------------------
# batches of cases
# ---------------------------------------------------------------------------

@dataclass
class BatchReport:
    """Aggregate over many sampled cases."""

    reports: List[FairnessReport]
    failures: int = 0

    @property
    def differences(self):
        return np.array([r.difference for r in self.reports if r.complete], dtype=float)

    def aggregate(self) -> Dict[str, float]:
        d = self.differences
        if d.size == 0:
            nan = float("nan")
            return {"cases": 0, "failed": self.failures, "zero_pct": nan, "below_001_pct": nan,
                    "median": nan, "max": nan}
        return {
            "cases": int(d.size),
            "failed": self.failures,
            "zero_pct": float(100.0 * np.mean(d == 0.0)),
            "below_001_pct": float(100.0 * np.mean(d < 0.01)),
            "median": float(np.median(d)),
            "max": float(np.max(d)),
        }

    def to_csv(self) -> str:
        agg = self.aggregate()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["measure", "value"])
        w.writerow(["zero_difference_pct", _fmt(agg["zero_pct"])])
        w.writerow(["difference_below_0.01_pct", _fmt(agg["below_001_pct"])])
        w.writerow(["median_difference", _fmt(agg["median"])])
        w.writerow(["maximum_difference", _fmt(agg["max"])])
        w.writerow(["cases", agg["cases"]])
        w.writerow(["failed_cases", agg["failed"]])
        return buf.getvalue()

    def cases_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "difference", "feasible_cells", "cells"])
        for i, r in enumerate(self.reports):
            w.writerow([i, _fmt(r.difference), len(r.feasible), len(r.cells)])
        return buf.getvalue()

    def to_table(self) -> str:
        agg = self.aggregate()
        rows = [("Zero difference (%)", agg["zero_pct"]),
                ("Difference < 0.01 (%)", agg["below_001_pct"]),
                ("Median difference", agg["median"]),
                ("Maximum difference", agg["max"])]
        out = [f"{label:<26}{_fmt(v):>12}" for label, v in rows]
        out.append(f"{'Cases':<26}{agg['cases']:>12}")
        out.append(f"{'Failed cases':<26}{agg['failed']:>12}")
        return "\n".join(out) + "\n"


def sample_cases(m: Scm, outcome: str, sensitive: Mapping[str, Sequence[float]], count: int,
                 seed=0, n: int = 1000) -> List[FairnessCase]:
    """Draw ``count`` individuals from ``m``; every observed value but the outcome is evidence."""
    rows = simulate(m, count, seed=rng.child(seed, "cases"))
    w_names = [p for p in m.parents[outcome] if p not in sensitive]
    c_names = [v for v in m.order if v != outcome and v not in w_names]
    out = []
    for i in range(count):
        out.append(FairnessCase(
            outcome=outcome,
            sensitive={k: list(v) for k, v in sensitive.items()},
            w_conditions={k: float(rows[k][i]) for k in w_names},
            c_conditions={k: float(rows[k][i]) for k in c_names},
            n=n,
            seed=rng.child(seed, "case", i),
        ))
    return out


def evaluate_fairness_batch(pred: Predictor, m: Scm, outcome: str,
                            sensitive: Mapping[str, Sequence[float]], count: int, seed=0,
                            n: int = 1000, mode=FIXED_PARENTS, cfg: Optional[RootFindConfig] = None,
                            scheme=MULTINOMIAL) -> BatchReport:
    """Audit ``count`` sampled cases and aggregate the counterfactual differences.

    A case with any infeasible cell is counted as failed and left out of the
    aggregate.
    """
    reports = []
    failures = 0
    for case in sample_cases(m, outcome, sensitive, count, seed, n):
        rep = evaluate_fairness(pred, m, case, mode, cfg, scheme)
        reports.append(rep)
        if not rep.complete:
            failures += 1
    return BatchReport(reports, failures)


def load_case(path_or_mapping):
    """Read a fairness case file.

    Returns either a :class:`FairnessCase` (explicit evidence) or a dict with
    keys ``outcome, sensitive, count, seed, n`` for a sampled batch.
    """
    doc = path_or_mapping
    if not isinstance(doc, Mapping):
        with open(doc, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    if doc.get("format_version", 1) != 1:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    for key in ("outcome", "sensitive"):
        if key not in doc:
            raise ValueError(f"fairness case needs {key!r}")
    sensitive = {k: [float(x) for x in v] for k, v in dict(doc["sensitive"]).items()}
    mode = doc.get("mode", FIXED_PARENTS)
    if "cases" in doc:
        spec = dict(doc["cases"] or {})
        return {"outcome": doc["outcome"], "sensitive": sensitive,
                "count": int(spec.get("sample", 100)), "seed": int(spec.get("seed", 0)),
                "n": int(doc.get("n", 1000)), "mode": mode}
    case = FairnessCase(
        outcome=doc["outcome"], sensitive=sensitive,
        w_conditions={k: float(v) for k, v in dict(doc.get("w_conditions") or {}).items()},
        c_conditions={k: float(v) for k, v in dict(doc.get("c_conditions") or {}).items()},
        n=int(doc.get("n", 1000)), seed=int(doc.get("seed", 0)))
    return {"case": case, "mode": mode}
