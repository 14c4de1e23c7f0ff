"""Command-line front end.

Every subcommand writes its outputs plus ``manifest.json`` (configuration,
seed, library versions and a SHA-256 per written file) into ``--out``.
Exit codes: 0 success, 1 usage error, 2 a checked identity or inequality
failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, rng
from .errors import ContractViolation, RiskLabError, UsageError
from .experiments import (
    CRITICAL_M_M_GRID,
    CRITICAL_M_N_GRID,
    calibration_sweep,
    consistency_experiment,
    critical_m_default_config,
    critical_m_study,
    csv_text,
    default_study_problem,
    default_study_scorer,
    generalization_gap,
    git_describe,
    json_mirror,
    ring_problem,
    scaling_study,
)
from .oce import (
    CVaR,
    EntropyRisk,
    dro_dual_kl,
    dro_primal_grid,
    disutility,
    logsumexp_identity_check,
    oce_weighted,
    pairwise_loss,
)
from .probspace import ClassStructure, ContrastiveProblem, from_joint, random_problem
from .retrieval import auc_optimum, auc_score, zero_shot_posterior
from .risks import optimal_risk, optimal_scorer, population_oce_risk
from .scorers import TabularScorer
from .trainer import TrainConfig, minimize_population

SLOPE_BANDS = {
    "inner_m_scrl": (-1.2, -0.8),
    "inner_m_sscrl_bias": (-1.2, -0.8),
    "inner_m_sscrl_mad": (-0.65, -0.35),
    "outer_n": (-0.65, -0.35),
}
MIN_R2 = 0.95


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_grid(text: str) -> list[int]:
    """``lo:hi:xK`` (geometric, factor K) or a comma list."""
    text = str(text)
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3 or not parts[2].startswith("x"):
            raise UsageError(f"grid {text!r} is not of the form lo:hi:xK")
        try:
            lo, hi, k = int(parts[0]), int(parts[1]), float(parts[2][1:])
        except ValueError as exc:
            raise UsageError(f"bad grid {text!r}") from exc
        if lo < 1 or hi < lo or k <= 1:
            raise UsageError(f"bad grid {text!r}")
        out, v = [], float(lo)
        while v <= hi * (1 + 1e-12):
            out.append(int(round(v)))
            v *= k
        return out
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}") from exc


def _common(p: argparse.ArgumentParser, problem: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--config", default=None, help="flat JSON file of option defaults")
    p.add_argument("--workers", type=int, default=None, help="worker count (env CRL_RISKLAB_THREADS)")
    if problem:
        p.add_argument("--problem", default=None, help="problem JSON file")
        p.add_argument("--random", default=None, metavar="AxY", help="generate a random |X|x|Y| problem")
        p.add_argument("--problem-seed", type=int, default=0)
        p.add_argument("--floor", type=float, default=1e-3)
        p.add_argument("--tau", type=float, default=None, help="temperature override for --random")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crl-risklab", description="Contrastive risk laboratory on finite spaces.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("validate", help="check a problem file")
    _common(p)

    p = sub.add_parser("calibration", help="calibration inequality sweep")
    _common(p, problem=False)
    p.add_argument("--problems", type=int, default=50)
    p.add_argument("--scorers", type=int, default=20)
    p.add_argument("--controls", action="store_true")

    p = sub.add_parser("oce-check", help="log-sum-exp / OCE identity sweep")
    _common(p, problem=False)
    p.add_argument("--instances", type=int, default=500)

    p = sub.add_parser("dro-check", help="DRO duality sweeps")
    _common(p, problem=False)
    p.add_argument("--instances", type=int, default=500)
    p.add_argument("--grid-instances", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-3)

    p = sub.add_parser("scaling", help="inner/outer error scaling fit")
    _common(p)
    p.add_argument("--mode", choices=sorted(SLOPE_BANDS), required=True)
    p.add_argument("--grid", default="8:1024:x2")
    p.add_argument("--trials", type=int, default=4000)

    p = sub.add_parser("gap", help="generalization gap over a finite hypothesis set")
    _common(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--hypotheses", type=int, default=8, help="random scorers besides the optimal one")
    p.add_argument("--mode", choices=("scrl", "sscrl"), default="scrl")

    p = sub.add_parser("critical-m", help="critical negative size study")
    _common(p)
    p.add_argument("--n-grid", default=",".join(map(str, CRITICAL_M_N_GRID)))
    p.add_argument("--m-grid", default=",".join(map(str, CRITICAL_M_M_GRID)))
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--delta", type=float, default=0.005)
    p.add_argument("--iters", type=int, default=300)

    for name in ("train", "consistency"):
        p = sub.add_parser(name, help="population training" if name == "train" else "excess/AUC trace")
        _common(p)
        p.add_argument("--phi", default="entropy")
        p.add_argument("--ell", default="linear")
        p.add_argument("--max-iter", type=int, default=50_000)
        p.add_argument("--tol", type=float, default=1e-10)
        p.add_argument("--bound", type=float, default=None)
        p.add_argument("--step", type=float, default=None)

    p = sub.add_parser("zero-shot", help="zero-shot class posterior")
    _common(p)
    p.add_argument("--classes", required=True, help="JSON {class_prior, item_dist}")
    p.add_argument("--anchor", type=int, default=0)
    p.add_argument("--scorer", choices=("optimal", "zero"), default="optimal")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    if args.config is None:
        return args
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
        raise UsageError("config must be a flat JSON object")
    known = set(vars(args)) - {"command", "config"}
    unknown = sorted(set(k.replace("-", "_") for k in doc) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    # file values act as defaults; explicit flags win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items()})
    return parser.parse_args(argv)


def run_config(args: argparse.Namespace) -> dict:
    """The resolved options of a run, as stored in the manifest."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "config", "workers")}


def _load_problem(args, shared: bool = False, default=None) -> ContrastiveProblem:
    if args.problem and args.random:
        raise UsageError("give either --problem or --random")
    if args.problem:
        try:
            return ContrastiveProblem.from_json(args.problem)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read problem {args.problem}: {exc}") from exc
    if args.random:
        try:
            nx, ny = (int(v) for v in args.random.lower().split("x"))
        except ValueError as exc:
            raise UsageError(f"--random expects AxY, got {args.random!r}") from exc
        p = random_problem(nx, ny, args.problem_seed, args.floor, temperature=args.tau)
        if shared:
            p = from_joint(p.joint_positive(), p.temperature)
        return p
    if default is None:
        raise UsageError("a problem is required (--problem or --random)")
    return default


class _Run:
    """Collects output files and writes the manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}
        self.config = run_config(args)

    def write(self, name: str, text: str) -> None:
        (self.out / name).write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()

    def table(self, stem: str, header, rows, payload: dict) -> None:
        if self.args.format == "csv":
            self.write(stem + ".csv", csv_text(header, rows))
        else:
            self.write(stem + ".json", json_mirror(payload, self.config, self.args.seed))

    def finish(self) -> None:
        manifest = {
            "config": self.config,
            "seed": self.args.seed,
            "versions": {
                "crl_risklab": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "git_describe": git_describe(),
            },
            "files": dict(sorted(self.files.items())),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=float))


def _cmd_validate(args, run):
    p = _load_problem(args)
    summary = {
        "anchor_size": p.anchor_size,
        "item_size": p.item_size,
        "temperature": p.temperature,
        "optimal_risk": optimal_risk(p),
        "auc_optimum": auc_optimum(p),
        "shared_negatives": p.has_shared_negatives(),
    }
    run.write("validate.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, []


def _cmd_calibration(args, run):
    sweep = calibration_sweep(args.problems, args.scorers, args.seed, controls=args.controls)
    payload = {"rows": [r.__dict__ for r in sweep.rows], "min_slack": sweep.min_slack, "median_slack": sweep.median_slack}
    run.table("calibration", ("problem_seed", "scorer_seed", "lhs", "rhs", "slack"), sweep.csv_rows(), payload)
    summary = {"rows": len(sweep.rows), "min_slack": sweep.min_slack, "median_slack": sweep.median_slack}
    bad = [] if sweep.min_slack >= -1e-9 else [f"calibration slack {sweep.min_slack:.3g} < -1e-9"]
    return summary, bad


def _cmd_oce_check(args, run):
    worst = 0.0
    for i in range(args.instances):
        g = rng.stream(args.seed, i)
        tau = float(10.0 ** g.uniform(-1, 1))
        z = g.uniform(-10, 10, size=int(g.integers(1, 33)))
        worst = max(worst, logsumexp_identity_check(z, tau))
    summary = {"instances": args.instances, "max_deviation": worst}
    run.write("oce_check.json", json_mirror(summary, run.config, args.seed))
    return summary, [] if worst <= 1e-9 else [f"identity deviation {worst:.3g} > 1e-9"]


def _cmd_dro_check(args, run):
    dual_dev = 0.0
    ent = EntropyRisk()
    for i in range(args.instances):
        g = rng.stream(args.seed, 0, i)
        m = int(g.integers(1, 17))
        z = g.uniform(-5, 5, size=m)
        w = g.dirichlet(np.ones(m))
        tau = float(10.0 ** g.uniform(-1, 1))
        dual_dev = max(dual_dev, abs(dro_dual_kl(z, w, tau).value - oce_weighted(ent, z, w, tau).value))
    grid_ratio = 0.0
    for i in range(args.grid_instances):
        g = rng.stream(args.seed, 1, i)
        m = int(g.integers(1, 5))
        z = g.uniform(-2, 2, size=m)
        w = g.dirichlet(np.ones(m))
        tau = float(g.uniform(0.2, 2.0))
        phi = [ent, disutility("mean_variance"), CVaR(0.3)][i % 3]
        primal = dro_primal_grid(phi.divergence(), z, w, tau, args.step)
        tol = 10 * args.step * max(float(np.ptp(z)), 1e-300)
        dev = abs(primal - oce_weighted(phi, z, w, tau).value)
        grid_ratio = max(grid_ratio, dev / tol if np.ptp(z) > 0 else (0.0 if dev <= 1e-12 else math.inf))
    summary = {"dual_max_deviation": dual_dev, "grid_max_deviation_over_tolerance": grid_ratio}
    run.write("dro_check.json", json_mirror(summary, run.config, args.seed))
    bad = []
    if dual_dev > 1e-12:
        bad.append(f"KL dual deviation {dual_dev:.3g} > 1e-12")
    if grid_ratio > 1.0:
        bad.append("grid primal outside 10*step*range")
    return summary, bad


def _cmd_scaling(args, run):
    shared = args.mode != "inner_m_scrl" and args.mode != "outer_n"
    problem = _load_problem(args, shared=shared, default=default_study_problem(shared))
    scorer = default_study_scorer(problem, args.seed)
    fit = scaling_study(problem, scorer, args.mode, parse_grid(args.grid), args.trials, args.seed, workers=args.workers)
    run.table("scaling", ("sweep_var", "mean_err", "se", "trials"), fit.csv_rows(), fit.to_dict())
    lo, hi = SLOPE_BANDS[args.mode]
    summary = fit.to_dict()
    bad = []
    if not lo <= fit.slope <= hi:
        bad.append(f"slope {fit.slope:.3f} outside [{lo}, {hi}]")
    if fit.r2 < MIN_R2:
        bad.append(f"R^2 {fit.r2:.3f} < {MIN_R2}")
    return summary, bad


def _cmd_gap(args, run):
    problem = _load_problem(args, shared=args.mode == "sscrl", default=default_study_problem(args.mode == "sscrl"))
    tau = problem.temperature
    hyps = [optimal_scorer(problem)]
    for k in range(args.hypotheses):
        hyps.append(TabularScorer(rng.stream(args.seed, 7, k).uniform(-tau, tau, size=(problem.anchor_size, problem.item_size))))
    rep = generalization_gap(problem, hyps, args.n, args.m, args.trials, args.seed, args.mode, args.workers)
    run.write("gap.json", json_mirror(rep.to_dict(), run.config, args.seed))
    return rep.to_dict(), []


def _cmd_critical_m(args, run):
    problem = _load_problem(args, default=ring_problem())
    n_grid, m_grid = parse_grid(args.n_grid), parse_grid(args.m_grid)
    cfg = TrainConfig(max_iter=args.iters, bound=critical_m_default_config(problem).bound)
    rep = critical_m_study(problem, n_grid, m_grid, cfg, args.delta, args.seed, args.seeds, args.workers)
    run.table("critical_m", ("n", "m", "mean_auc", "se", "is_mstar"), rep.csv_rows(), rep.to_dict())
    summary = {k: v for k, v in rep.to_dict().items() if k not in ("mean_auc", "se")}
    bad = []
    if any(b < a for a, b in zip(rep.m_star, rep.m_star[1:])):
        bad.append(f"m* not nondecreasing: {rep.m_star}")
    for n, pl, ex in zip(rep.n_grid, rep.plateau, rep.exact_auc):
        if abs(pl - ex) > args.delta:
            bad.append(f"n={n}: plateau {pl:.4f} vs exact {ex:.4f}")
    return summary, bad


def _train_config(args) -> TrainConfig:
    return TrainConfig(step=args.step, max_iter=args.max_iter, tol=args.tol, bound=args.bound)


def _cmd_train(args, run):
    problem = _load_problem(args)
    phi, ell = disutility(args.phi), pairwise_loss(args.ell)
    scorer, trace = minimize_population(problem, phi, ell, _train_config(args), track_auc=True)
    run.write("trace.csv", trace.to_csv())
    run.write("scorer.json", json.dumps({"matrix": scorer.matrix.tolist()}, indent=2) + "\n")
    summary = {
        "iterations": trace.iters[-1],
        "converged": trace.converged,
        "risk": population_oce_risk(problem, scorer, phi, ell).value,
        "auc": auc_score(problem, scorer).score,
        "auc_optimum": auc_optimum(problem),
    }
    bad = []
    if any(b > a + 1e-12 * max(1.0, abs(a)) for a, b in zip(trace.risks, trace.risks[1:])):
        bad.append("risk increased along the trace")
    return summary, bad


def _cmd_consistency(args, run):
    problem = _load_problem(args)
    phi, ell = disutility(args.phi), pairwise_loss(args.ell)
    tr = consistency_experiment(problem, phi, ell, _train_config(args))
    rows = list(zip(tr.iters, tr.excess, tr.auc_gap))
    run.table("consistency", ("iter", "excess", "auc_gap"), rows, tr.to_dict())
    summary = {"final_excess": tr.excess[-1], "final_auc_gap": tr.auc_gap[-1], "final_is_maximizer": tr.final_is_maximizer}
    bad = []
    if tr.excess[-1] <= 1e-8 and not tr.final_is_maximizer:
        bad.append("excess <= 1e-8 but the final scorer does not maximize the AUC")
    return summary, bad


def _cmd_zero_shot(args, run):
    problem = _load_problem(args)
    try:
        doc = json.loads(Path(args.classes).read_text())
        classes = ClassStructure(doc["class_prior"], doc["item_dist"], doc.get("label_map"))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read classes {args.classes}: {exc}") from exc
    scorer = optimal_scorer(problem) if args.scorer == "optimal" else TabularScorer.constant(problem.anchor_size, problem.item_size)
    post = zero_shot_posterior(problem, classes, scorer, args.anchor)
    summary = {"raw": post.raw.tolist(), "normalized": post.normalized.tolist()}
    run.write("zero_shot.json", json_mirror(summary, run.config, args.seed))
    return summary, []


COMMANDS = {
    "validate": _cmd_validate,
    "calibration": _cmd_calibration,
    "oce-check": _cmd_oce_check,
    "dro-check": _cmd_dro_check,
    "scaling": _cmd_scaling,
    "gap": _cmd_gap,
    "critical-m": _cmd_critical_m,
    "train": _cmd_train,
    "consistency": _cmd_consistency,
    "zero-shot": _cmd_zero_shot,
}


def run(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = _apply_config(parser, list(sys.argv[1:] if argv is None else argv))
        runner = _Run(args)
        summary, violations = COMMANDS[args.command](args, runner)
        runner.finish()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 2
    except RiskLabError as exc:
        # invalid inputs (bad distributions, shapes, ...) are usage errors
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit(summary)
    if violations:
        for v in violations:
            print(f"contract violation: {v}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
