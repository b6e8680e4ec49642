"""Command-line interface: ``cfsim simulate | counterfactual | fairness | bench``.

Exit status: 0 success, 2 bad input or model, 3 infeasible evidence,
4 predictor protocol failure.
"""
import argparse
import csv
import io
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional

import yaml

from . import bench, fairness, rng
from .conditioning import SCHEMES, InfeasibleEvidence, RootFindConfig
from .counterfactual import CounterfactualQuery, simulate_counterfactual, summarize, summary_rows
from .expr import ExprError
from .scm import ModelError, TableError, load_model, simulate

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_PREDICTOR = 4

THREADS_ENV = "CFSIM_THREADS"
BUNDLED = "bundled:"


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    model: Optional[str] = None
    query: Optional[str] = None
    case: Optional[str] = None
    predictor: Optional[str] = None
    n: Optional[int] = None
    seed: Optional[int] = None
    output: Optional[str] = None
    fmt: str = "csv"
    resampling: str = "multinomial"
    tol: Optional[float] = None
    prune: bool = True
    threads: int = 1
    mode: Optional[str] = None
    rounds: Optional[int] = None
    n_grid: List[int] = field(default_factory=list)


def resolve(path: str) -> Path:
    """Path on disk; ``bundled:name`` refers to a file shipped with the package."""
    if path.startswith(BUNDLED):
        p = Path(str(resources.files("cfsim") / "data" / path[len(BUNDLED):]))
    else:
        p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p


def _read_yaml(path: str):
    p = resolve(path)
    with open(p, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a mapping at top level")
    if doc.get("format_version", 1) != 1:
        raise InputError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    return doc


def _open_out(cfg):
    if cfg.output:
        return open(cfg.output, "w", encoding="utf-8", newline="")
    return None


def _emit(cfg, text):
    fh = _open_out(cfg)
    if fh is None:
        sys.stdout.write(text)
    else:
        with fh:
            fh.write(text)


def _root_cfg(cfg) -> Optional[RootFindConfig]:
    return RootFindConfig(rel_tol=cfg.tol) if cfg.tol is not None else None


def cmd_simulate(cfg: RunConfig) -> int:
    m = load_model(resolve(cfg.model))
    seed = cfg.seed if cfg.seed is not None else int(m.options.get("seed", 0))
    n = cfg.n if cfg.n is not None else 1000
    t = simulate(m, n, seed=seed)
    if cfg.fmt == "table":
        _emit(cfg, _format_table(t, list(m.columns)))
    else:
        _emit(cfg, t.to_csv(names=list(m.columns)))
    return EXIT_OK


def _format_table(t, names, limit=20):
    lines = ["  ".join(f"{k:>12}" for k in names)]
    for i in range(min(t.n, limit)):
        lines.append("  ".join(f"{t[k][i]:>12.5g}" for k in names))
    if t.n > limit:
        lines.append(f"... {t.n - limit} more rows")
    return "\n".join(lines) + "\n"


def load_query(path) -> CounterfactualQuery:
    doc = _read_yaml(path)
    try:
        return CounterfactualQuery(
            conditions={str(k): float(v) for k, v in dict(doc.get("conditions") or {}).items()},
            intervention={str(k): float(v) for k, v in dict(doc.get("intervention") or {}).items()},
            targets=list(doc["targets"]) if doc.get("targets") is not None else None,
            n=int(doc.get("n", 10000)),
            seed=int(doc.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_counterfactual(cfg: RunConfig) -> int:
    m = load_model(resolve(cfg.model))
    q = load_query(cfg.query)
    if cfg.n is not None:
        q.n = cfg.n
    if cfg.seed is not None:
        q.seed = cfg.seed
    targets = q.validate(m)
    t = simulate_counterfactual(m, q, _root_cfg(cfg), cfg.resampling, prune=cfg.prune)
    summary = summarize(t, targets) if t.n else {}
    header, rows = summary_rows(summary)
    if cfg.fmt == "table":
        lines = [f"{'target':<12}{'mean':>12}{'var':>12}{'q05':>12}{'q50':>12}{'q95':>12}"
                 f"{'ess':>10}{'unique%':>9}"]
        for name, r in summary.items():
            lines.append(f"{name:<12}{r['mean']:>12.5g}{r['var']:>12.5g}{r['q05']:>12.5g}"
                         f"{r['q50']:>12.5g}{r['q95']:>12.5g}{r['ess']:>10.0f}"
                         f"{100 * r['unique_fraction']:>9.1f}")
        sys.stdout.write("\n".join(lines) + "\n")
        if cfg.output:
            _emit(cfg, t.to_csv())
        return EXIT_OK
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([x if isinstance(x, str) else repr(x) for x in r])
    if cfg.output:
        _emit(cfg, t.to_csv())
        sys.stdout.write(buf.getvalue())
    else:
        sys.stdout.write(t.to_csv())
        sys.stdout.write("".join("# " + line + "\n" for line in buf.getvalue().splitlines()))
    return EXIT_OK


def cmd_fairness(cfg: RunConfig) -> int:
    m = load_model(resolve(cfg.model))
    case_doc = _read_yaml(cfg.case)
    if cfg.predictor is None:
        raise InputError("--predictor is required")
    ppath = resolve(cfg.predictor)
    pred = fairness.load_predictor(str(ppath), base_dir=str(ppath.parent))
    spec = fairness.load_case(case_doc)
    mode = cfg.mode or spec["mode"]
    probe = simulate(m, 32, seed=rng.child(0, "probe"))
    if isinstance(pred, fairness.ExternalPredictor):
        pred.bind(m, exclude=(case_doc["outcome"],))
    fairness.check_deterministic(pred, probe)
    rcfg = _root_cfg(cfg)
    if "case" in spec:
        case = spec["case"]
        if cfg.n is not None:
            case.n = cfg.n
        if cfg.seed is not None:
            case.seed = cfg.seed
        rep = fairness.evaluate_fairness(pred, m, case, mode, rcfg, cfg.resampling)
        _emit(cfg, rep.to_table() if cfg.fmt == "table" else rep.to_csv())
        return EXIT_OK
    n = cfg.n if cfg.n is not None else spec["n"]
    seed = cfg.seed if cfg.seed is not None else spec["seed"]
    batch = fairness.evaluate_fairness_batch(pred, m, spec["outcome"], spec["sensitive"],
                                             spec["count"], seed, n, mode, rcfg, cfg.resampling)
    if cfg.fmt == "table":
        sys.stdout.write(batch.to_table())
        if cfg.output:
            _emit(cfg, batch.to_csv())
    else:
        _emit(cfg, batch.to_csv())
    return EXIT_OK


def _bench_cases(cfg) -> List[bench.BenchCase]:
    spec = cfg.case or "A"
    names = [s.strip() for s in spec.split(",")]
    if all(s in bench.PRESETS for s in names):
        cases = [bench.PRESETS[s] for s in names]
    else:
        p = resolve(spec)
        cases = bench.load_cases(p.read_text(encoding="utf-8"))
    out = []
    for c in cases:
        kw = {}
        if cfg.rounds is not None:
            kw["rounds"] = cfg.rounds
        if cfg.seed is not None:
            kw["seed"] = cfg.seed
        if cfg.n_grid:
            kw["n_grid"] = cfg.n_grid
        out.append(c.with_(**kw))
    return out


def cmd_bench(cfg: RunConfig) -> int:
    reports = [bench.run_case(c, threads=cfg.threads, scheme=cfg.resampling)
               for c in _bench_cases(cfg)]
    rep = bench.merge(reports)
    if cfg.fmt == "table":
        sys.stdout.write(rep.to_table())
        if cfg.output:
            _emit(cfg, rep.to_csv())
    else:
        _emit(cfg, rep.to_csv())
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "counterfactual": cmd_counterfactual,
    "fairness": cmd_fairness,
    "bench": cmd_bench,
}


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    default_threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (default: from the input file, else 0)")
    common.add_argument("--output", "-o", help="write the main result here instead of stdout")
    common.add_argument("--format", dest="fmt", choices=("csv", "table"), default="csv")
    common.add_argument("--threads", type=_pos_int, default=default_threads,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    common.add_argument("--resampling", choices=SCHEMES, default="multinomial")
    common.add_argument("--tol", type=float, help="relative root-finding tolerance")

    p = argparse.ArgumentParser(prog="cfsim", description="Counterfactual simulation for structural causal models.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="sample rows from a model")
    s.add_argument("--model", required=True, help="model file (or bundled:NAME)")
    s.add_argument("--n", type=_nonneg_int, default=1000)

    c = sub.add_parser("counterfactual", parents=[common], help="sample a counterfactual distribution")
    c.add_argument("--model", required=True)
    c.add_argument("--query", required=True, help="query file with conditions, intervention, targets")
    c.add_argument("--n", type=_nonneg_int)
    c.add_argument("--no-prune", dest="prune", action="store_false",
                   help="skip the ancestral pruning step (debugging)")

    f = sub.add_parser("fairness", parents=[common], help="audit a predictor for counterfactual fairness")
    f.add_argument("--model", required=True)
    f.add_argument("--case", required=True, help="fairness case file")
    f.add_argument("--predictor", required=True, help="predictor file (expression or external)")
    f.add_argument("--n", type=_pos_int)
    f.add_argument("--mode", choices=fairness.MODES)

    b = sub.add_parser("bench", parents=[common], help="accuracy benchmark on random Gaussian models")
    b.add_argument("--case", help="preset letter(s) such as A or A,B,E, or a case file")
    b.add_argument("--n", dest="n_grid", type=_pos_int, nargs="+", default=[])
    b.add_argument("--rounds", type=_pos_int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    cfg = RunConfig(**{k: v for k, v in vars(ns).items() if k in RunConfig.__dataclass_fields__})
    try:
        return COMMANDS[cfg.command](cfg)
    except InfeasibleEvidence as exc:
        print(f"cfsim: infeasible evidence: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except fairness.PredictorError as exc:
        print(f"cfsim: predictor error: {exc}", file=sys.stderr)
        return EXIT_PREDICTOR
    except (InputError, ModelError, ExprError, TableError, ValueError, KeyError, OSError,
            yaml.YAMLError) as exc:
        print(f"cfsim: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
