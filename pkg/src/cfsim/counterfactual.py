"""Counterfactual sampling: condition, intervene, re-simulate."""
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import rng
from .conditioning import (MULTINOMIAL, ConditionSet, RootFindConfig,
                           simulate_multiple_conditions)
from .scm import ParticleTable, Scm, ancestral_prune, intervene, simulate

QUANTILES = (0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99)


@dataclass
class CounterfactualQuery:
    """Evidence ``conditions``, intervention ``do(X = x)`` and reported targets.

    Targets default to every observed variable that is not intervened on.
    """

    conditions: Mapping[str, float] = field(default_factory=dict)
    intervention: Mapping[str, float] = field(default_factory=dict)
    targets: Optional[Sequence[str]] = None
    n: int = 10000
    seed: int = 0

    def validate(self, m: Scm):
        for name in list(self.conditions) + list(self.intervention):
            m.spec(name)
        if self.n < 0:
            raise ValueError("n must be nonnegative")
        targets = self.resolved_targets(m)
        clash = [t for t in targets if t in self.intervention]
        if clash:
            raise ValueError(f"targets may not be intervened on: {', '.join(clash)}")
        return targets

    def resolved_targets(self, m: Scm):
        if self.targets is None:
            return [v for v in m.order if v not in self.intervention]
        out = list(self.targets)
        for t in out:
            m.spec(t)
        return out


def simulate_counterfactual(m: Scm, q: CounterfactualQuery, cfg: Optional[RootFindConfig] = None,
                            scheme=MULTINOMIAL, prune=True) -> ParticleTable:
    """Sample ``n`` rows from the counterfactual distribution of ``q``.

    The model is first cut down to the ancestors of the targets, the
    intervened variables and the evidence (``prune=False`` skips this, for
    debugging).  Rows hold the factual background values and the
    counterfactual observed values.
    """
    targets = q.validate(m)
    keep = set(targets) | set(q.intervention) | set(q.conditions)
    mp = ancestral_prune(m, keep) if prune else m
    cs = ConditionSet.build(mp, q.conditions)
    if cs:
        d0 = simulate_multiple_conditions(q.n, mp, cs, rng.child(q.seed, "evidence"), cfg, scheme)
    else:
        d0 = simulate(mp, q.n, seed=rng.child(q.seed, "evidence"))
    mx = intervene(mp, dict(q.intervention))
    base = d0.select(mx.background_names)
    out = simulate(mx, q.n, base, rng.child(q.seed, "counterfactual"))
    assert all(t in out for t in targets)
    out.diagnostics = dict(d0.diagnostics)
    out.diagnostics["pruned_to"] = list(mp.order)
    return out


def summarize(t: ParticleTable, targets) -> dict:
    """Per-target mean, variance, quantiles, unique-row fraction and ESS."""
    uniq = t.unique_fraction() if t.n else float("nan")
    out = {}
    for name in targets:
        x = np.asarray(t[name], dtype=float)
        w = t.weights
        rec = {"n": int(x.size)}
        if x.size == 0:
            rec.update(mean=float("nan"), var=float("nan"),
                       **{_qname(q): float("nan") for q in QUANTILES})
        elif w is None:
            rec["mean"] = float(np.mean(x))
            rec["var"] = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
            for q, v in zip(QUANTILES, np.quantile(x, QUANTILES)):
                rec[_qname(q)] = float(v)
        else:
            p = w
            mu = float(np.sum(p * x))
            rec["mean"] = mu
            rec["var"] = float(np.sum(p * (x - mu) ** 2))
            order = np.argsort(x, kind="stable")
            cum = np.cumsum(p[order])
            for q in QUANTILES:
                i = min(int(np.searchsorted(cum, q)), x.size - 1)
                rec[_qname(q)] = float(x[order][i])
        rec["unique_fraction"] = uniq
        rec["ess"] = t.ess()
        out[name] = rec
    return out


def _qname(q):
    return f"q{int(round(q * 100)):02d}"


def summary_rows(summary: dict):
    """Flatten a summary into CSV-ready rows with a fixed header."""
    header = ["target", "n", "mean", "var"] + [_qname(q) for q in QUANTILES] + ["unique_fraction", "ess"]
    rows = [[name] + [rec[h] for h in header[1:]] for name, rec in summary.items()]
    return header, rows
