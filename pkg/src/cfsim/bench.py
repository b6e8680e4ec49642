"""Accuracy benchmark on random linear-Gaussian models.

Each round draws a random model, conditions on a few of its variables with
the particle sampler and compares one free variable (and one pair of free
variables) against the exact conditional law.
"""
import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml
from scipy import special

from . import _kernels, rng
from .conditioning import InfeasibleEvidence, MULTINOMIAL, simulate_multiple_conditions
from .gaussian import GaussianScm, condition, to_scm
from .scm import simulate

CONDITION_LAW = "one joint draw from the model itself"
DEGREE_LAW = "edge probability degree/(|V|-1) over ordered pairs (expected undirected degree)"
CONFOUNDER_LAW = "round(ratio * |V|) global columns, each loading on a uniformly chosen pair"


@dataclass(frozen=True)
class BenchCase:
    """Parameters of one benchmark setting.

    Attributes:
        name: label used in reports.
        n_vars: number of observed variables.
        n_conditions: number of conditioned variables per round.
        degree: expected number of neighbours of an observed variable.
        confounder_ratio: expected number of global background columns per variable.
        coef_min: smallest coefficient magnitude.
        coef_max: largest coefficient magnitude.
        rounds: rounds per sample size.
        n_grid: sample sizes.
        seed: master seed.
    """

    name: str
    n_vars: int
    n_conditions: int
    degree: float
    confounder_ratio: float
    coef_min: float = 0.1
    coef_max: float = 2.5
    rounds: int = 100
    n_grid: Sequence[int] = (1000, 10000, 100000)
    seed: int = 1

    def __post_init__(self):
        if self.n_vars < 1:
            raise ValueError("a case needs at least one variable")
        if not 0 <= self.n_conditions <= self.n_vars:
            raise ValueError("condition count must be between 0 and |V|")
        if self.degree < 0 or (self.n_vars > 1 and self.degree > self.n_vars - 1):
            raise ValueError("degree must lie in [0, |V| - 1]")
        if self.confounder_ratio < 0:
            raise ValueError("confounder ratio must be nonnegative")
        if not 0 <= self.coef_min < self.coef_max:
            raise ValueError("need 0 <= coef_min < coef_max")
        if self.rounds < 1:
            raise ValueError("rounds must be positive")
        if any(int(n) < 1 for n in self.n_grid):
            raise ValueError("sample sizes must be positive")

    def with_(self, **kw) -> "BenchCase":
        if "n_grid" in kw:
            kw["n_grid"] = tuple(int(n) for n in kw["n_grid"])
        return replace(self, **kw)


PRESETS: Dict[str, BenchCase] = {
    "A": BenchCase("A", 5, 1, 3, 0),
    "B": BenchCase("B", 10, 4, 5, 1),
    "C": BenchCase("C", 10, 9, 5, 1),
    "D": BenchCase("D", 50, 2, 5, 1),
    "E": BenchCase("E", 50, 9, 7, 1),
}

_CASE_KEYS = {"name", "n_vars", "n_conditions", "degree", "confounder_ratio", "coef_min",
              "coef_max", "rounds", "n_grid", "seed"}


def load_cases(path_or_text) -> List[BenchCase]:
    """Read a case file: ``cases`` entries either name a preset or give parameters."""
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    doc = yaml.safe_load(text) or {}
    if doc.get("format_version", 1) != 1:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    defaults = dict(doc.get("defaults") or {})
    out = []
    for entry in doc.get("cases") or []:
        if isinstance(entry, str):
            entry = {"preset": entry}
        entry = dict(defaults, **entry)
        preset = entry.pop("preset", None)
        bad = set(entry) - _CASE_KEYS
        if bad:
            raise ValueError(f"unknown case field(s) {sorted(bad)}")
        if "n_grid" in entry:
            entry["n_grid"] = tuple(int(n) for n in entry["n_grid"])
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r}")
            out.append(replace(PRESETS[preset], **entry))
        else:
            missing = {"name", "n_vars", "n_conditions", "degree", "confounder_ratio"} - set(entry)
            if missing:
                raise ValueError(f"case is missing {sorted(missing)}")
            out.append(BenchCase(**entry))
    if not out:
        raise ValueError("case file defines no cases")
    return out


def _coefs(gen, size, case):
    mag = gen.uniform(case.coef_min, case.coef_max, size)
    sign = np.where(gen.random(size) < 0.5, -1.0, 1.0)
    return sign * mag


def random_gaussian_scm(case: BenchCase, round_seed) -> GaussianScm:
    """Random linear-Gaussian model for one round.

    Variables ``V1..VJ`` are in topological order; each gets a dedicated
    unit error column ``u_Vj`` and the global columns ``G1..GK`` load on
    random pairs.
    """
    gen = rng.generator(round_seed, "model")
    J = case.n_vars
    p = case.degree / (J - 1) if J > 1 else 0.0
    B1 = np.zeros((J, J))
    lower = np.tril_indices(J, -1)
    edges = gen.random(lower[0].size) < p
    B1[lower[0][edges], lower[1][edges]] = _coefs(gen, int(edges.sum()), case)
    b0 = _coefs(gen, J, case)
    K = int(round(case.confounder_ratio * J)) if J > 1 else 0
    G = np.zeros((J, K))
    for k in range(K):
        pair = gen.choice(J, size=2, replace=False)
        G[pair, k] = _coefs(gen, 2, case)
    names = [f"V{j + 1}" for j in range(J)]
    B2 = np.hstack([np.eye(J), G])
    background = [f"u_{v}" for v in names] + [f"G{k + 1}" for k in range(K)]
    return GaussianScm(b0, B1, B2, names, background)


def ks_statistic(sample, cdf) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``sample`` and ``cdf``."""
    x = np.sort(np.asarray(sample, dtype=float).reshape(-1))
    if x.size == 0:
        raise ValueError("empty sample")
    f = np.asarray(cdf(x), dtype=float)
    return float(_kernels.ks_sup(np.ascontiguousarray(f)))


def normal_cdf(mean, sd):
    return lambda x: special.ndtr((np.asarray(x) - mean) / sd)


@dataclass
class RoundResult:
    unique_pct: float
    zbar: float
    sz: float
    ks: float
    cor_diff: float
    seconds: float
    infeasible: bool = False


def run_round(case: BenchCase, n: int, r: int, scheme=MULTINOMIAL) -> RoundResult:
    """One benchmark round; round ``r`` uses the same model for every ``n``."""
    rseed = rng.child(case.seed, "bench", case.name, r)
    g = random_gaussian_scm(case, rseed)
    m = to_scm(g)
    pick = rng.generator(rseed, "pick")
    J = case.n_vars
    cond_idx = sorted(pick.choice(J, size=case.n_conditions, replace=False).tolist())
    free = [g.names[j] for j in range(J) if j not in cond_idx]
    evidence = simulate(m, 1, seed=rng.child(rseed, "evidence"))
    fixed = {g.names[j]: float(evidence[g.names[j]][0]) for j in cond_idx}
    target = free[int(pick.integers(len(free)))] if free else None
    pair = list(pick.choice(free, size=2, replace=False)) if len(free) >= 2 else None

    t0 = time.perf_counter()
    try:
        if fixed:
            d = simulate_multiple_conditions(n, m, fixed, rng.child(rseed, "sample", n), scheme=scheme)
        else:
            d = simulate(m, n, seed=rng.child(rseed, "sample", n))
    except InfeasibleEvidence:
        return RoundResult(*([float("nan")] * 5), time.perf_counter() - t0, infeasible=True)
    seconds = time.perf_counter() - t0
    unique_pct = 100.0 * d.unique_fraction()
    nan = float("nan")
    zbar = sz = ks = cor_diff = nan
    if target is not None:
        law = condition(g, fixed)
        mu, sd = law.mean_of(target), law.sd_of(target)
        z = (d[target] - mu) / sd
        zbar = float(np.mean(z))
        sz = float(np.std(z, ddof=1)) if n > 1 else nan
        ks = ks_statistic(d[target], normal_cdf(mu, sd))
        if pair is not None:
            a, b = d[pair[0]], d[pair[1]]
            with np.errstate(invalid="ignore", divide="ignore"):
                sample_cor = float(np.corrcoef(a, b)[0, 1]) if n > 1 else nan
            cor_diff = sample_cor - law.corr(*pair)
    return RoundResult(unique_pct, zbar, sz, ks, cor_diff, seconds)


@dataclass
class BenchRow:
    case: str
    n: int
    rounds: int
    infeasible: int
    unique_pct: float
    zbar: float
    zbar_min: float
    zbar_max: float
    sz: float
    sz_min: float
    sz_max: float
    ks: float
    cor_diff: float
    seconds: float
    round_results: List[RoundResult] = field(default_factory=list, repr=False)


def _agg(values, fn):
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(fn(v)) if v.size else float("nan")


def summarize_rounds(case_name, n, results: Sequence[RoundResult]) -> BenchRow:
    ok = [r for r in results if not r.infeasible]
    col = lambda key: [getattr(r, key) for r in ok]  # noqa: E731
    return BenchRow(
        case=case_name, n=n, rounds=len(ok), infeasible=len(results) - len(ok),
        unique_pct=_agg(col("unique_pct"), np.mean),
        zbar=_agg(col("zbar"), np.mean), zbar_min=_agg(col("zbar"), np.min),
        zbar_max=_agg(col("zbar"), np.max),
        sz=_agg(col("sz"), np.mean), sz_min=_agg(col("sz"), np.min), sz_max=_agg(col("sz"), np.max),
        ks=_agg(col("ks"), np.mean), cor_diff=_agg(col("cor_diff"), np.mean),
        seconds=_agg([r.seconds for r in results], np.mean),
        round_results=list(results),
    )


@dataclass
class BenchReport:
    rows: List[BenchRow]
    coef_laws: Sequence[str] = ()

    HEADER = ("case", "n", "uniq_pct", "zbar", "zbar_min", "zbar_max", "sz", "sz_min", "sz_max",
              "ks", "diff_cor", "rounds", "infeasible", "seconds_per_round")

    def row(self, case, n) -> BenchRow:
        for r in self.rows:
            if r.case == case and r.n == n:
                return r
        raise KeyError((case, n))

    def _cells(self, r: BenchRow):
        vals = [r.unique_pct, r.zbar, r.zbar_min, r.zbar_max, r.sz, r.sz_min, r.sz_max, r.ks,
                r.cor_diff]
        return [r.case, r.n] + ["NA" if np.isnan(v) else f"{v:.6g}" for v in vals] + [
            r.rounds, r.infeasible, f"{r.seconds:.4g}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        for law in sorted(self.coef_laws):
            buf.write(f"# coefficients: {law}\n")
        buf.write(f"# condition values: {CONDITION_LAW}\n")
        buf.write(f"# neighbours: {DEGREE_LAW}\n# confounders: {CONFOUNDER_LAW}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow(self._cells(r))
        return buf.getvalue()

    def to_table(self) -> str:
        lines = []
        head = f"{'case':<5}{'n':>9}{'uniq%':>7}{'zbar':>8}{'zbar: min,max':>18}{'s_z':>7}" \
               f"{'s_z: min,max':>16}{'K-S':>7}{'diff.cor':>10}"
        lines.append(head)
        for r in self.rows:
            f = lambda v, spec: "---" if np.isnan(v) else format(v, spec)  # noqa: E731
            lines.append(
                f"{r.case:<5}{r.n:>9}{f(r.unique_pct, '.0f'):>7}{f(r.zbar, '.2f'):>8}"
                f"{'(' + f(r.zbar_min, '.2f') + ', ' + f(r.zbar_max, '.2f') + ')':>18}"
                f"{f(r.sz, '.2f'):>7}{'(' + f(r.sz_min, '.2f') + ', ' + f(r.sz_max, '.2f') + ')':>16}"
                f"{f(r.ks, '.2f'):>7}{f(r.cor_diff, '.2f'):>10}")
        return "\n".join(lines) + "\n"


def run_case(case: BenchCase, n_grid: Optional[Sequence[int]] = None, threads: int = 1,
             scheme=MULTINOMIAL) -> BenchReport:
    """Run every round of ``case`` at each sample size and aggregate."""
    rows = []
    for n in (n_grid or case.n_grid):
        n = int(n)
        if threads and threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(lambda r: run_round(case, n, r, scheme), range(case.rounds)))
        else:
            results = [run_round(case, n, r, scheme) for r in range(case.rounds)]
        rows.append(summarize_rounds(case.name, n, results))
    return BenchReport(rows, [coef_law(case)])


def coef_law(case: BenchCase) -> str:
    return (f"case {case.name}: random sign times uniform({case.coef_min:g}, {case.coef_max:g}); "
            "dedicated errors have coefficient 1")


def merge(reports: Sequence[BenchReport]) -> BenchReport:
    rows, laws = [], []
    for r in reports:
        rows.extend(r.rows)
        laws.extend(r.coef_laws)
    return BenchReport(rows, laws)
