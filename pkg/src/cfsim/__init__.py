"""Simulating counterfactuals in structural causal models.

Typical use::

    from cfsim import load_model, CounterfactualQuery, simulate_counterfactual
    m = load_model("model.yaml")
    q = CounterfactualQuery({"Y": 1.0}, {"X": -1.0}, ["Y"], n=10000)
    rows = simulate_counterfactual(m, q)
"""
from .conditioning import (Condition, ConditionSet, InfeasibleEvidence, RootFindConfig,
                           find_root, resample, simulate_continuous_condition,
                           simulate_discrete_condition, simulate_multiple_conditions, weight)
from .counterfactual import CounterfactualQuery, simulate_counterfactual, summarize
from .scm import (CycleError, ModelError, ParticleTable, Scm, ancestral_prune, build, intervene,
                  load_model, simulate)

__version__ = "0.1.0"

__all__ = [
    "Condition", "ConditionSet", "CounterfactualQuery", "CycleError", "InfeasibleEvidence",
    "ModelError", "ParticleTable", "RootFindConfig", "Scm", "ancestral_prune", "build",
    "find_root", "intervene", "load_model", "resample", "simulate", "simulate_continuous_condition",
    "simulate_counterfactual", "simulate_discrete_condition", "simulate_multiple_conditions",
    "summarize", "weight",
]
