"""Monte-Carlo studies: error decompositions, scaling fits, gaps, sweeps, critical m.

Trials run in fixed-size blocks; block ``b`` of a study draws from the stream
``(seed, b)``, so results do not depend on how blocks are spread over workers.

Inner errors are simulated from multinomial counts of the negatives rather
than from lists of drawn indices.  An OCE over ``m`` draws only depends on how
often each item was drawn, so both give the same distribution of empirical
risks while the count form costs O(|Y|) per anchor instead of O(m).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import linregress

from . import rng
from .errors import HeterogeneousNegatives, InsufficientTrials, TrainingDiverged
from .oce import Disutility, EntropyRisk, Linear, PairwiseLoss, oce_batch
from .probspace import ContrastiveProblem, from_joint, random_problem
from .retrieval import (
    auc_optimum,
    auc_score,
    calibration_bound,
    is_auc_maximizer,
    oce_reference,
)
from .risks import ContrastTerms, optimal_scorer
from .sampling import SscrlSample, sample_sscrl
from .scorers import TabularScorer, as_matrix
from .trainer import TrainConfig, minimize_empirical, minimize_population

BLOCK = 256
SWEEPS = ("inner_m_scrl", "inner_m_sscrl_bias", "inner_m_sscrl_mad", "outer_n")


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get("CRL_RISKLAB_THREADS", "1")))


def _blocks(trials: int) -> list[int]:
    full, rest = divmod(trials, BLOCK)
    return [BLOCK] * full + ([rest] if rest else [])


def _map(fn, items, workers):
    if worker_count(workers) == 1 or len(items) == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# per-cell tables


@dataclass(frozen=True, eq=False)
class _Cells:
    """Exact inner quantities for every (x, y) cell with positive mass."""

    x: np.ndarray
    y: np.ndarray
    prob: np.ndarray  # p_X(x) p+_x(y)
    z: np.ndarray  # ell(s(x, y') - s(x, y)) over y'
    w: np.ndarray  # p-_x
    h: np.ndarray  # exact inner OCE
    cv: np.ndarray  # tau phi((z - mu*)/tau), the weight-derivative of the inner OCE
    risk: float
    phi: Disutility
    tau: float

    @classmethod
    def build(cls, problem, scorer, phi: Disutility, ell: PairwiseLoss) -> "_Cells":
        s = as_matrix(scorer, (problem.anchor_size, problem.item_size))
        x, y = np.nonzero(problem.pos_cond > 0)
        prob = problem.anchor_marginal[x] * problem.pos_cond[x, y]
        z = ell(s[x] - s[x, y][:, None])
        w = np.asarray(problem.neg_cond)[x]
        res = oce_batch(phi, z, w, problem.temperature)
        tau = problem.temperature
        cv = np.where(w > 0, tau * phi((z - res.minimizer[:, None]) / tau), 0.0)
        return cls(x, y, prob, z, w, res.value, cv, float(prob @ res.value), phi, tau)

    def inner_hat(self, units: np.ndarray, freq: np.ndarray) -> np.ndarray:
        """Inner OCE of each unit under empirical negative frequencies ``freq``."""
        z = self.z[units]
        freq = np.broadcast_to(freq, z.shape)
        if isinstance(self.phi, EntropyRisk):
            with np.errstate(divide="ignore"):
                return self.tau * logsumexp(np.log(freq) + z / self.tau, axis=-1)
        return oce_batch(self.phi, z, freq, self.tau).value


def _mc_block(problem, tables, n, m, mode, gen, size):
    """Simulate ``size`` trials; per table return (outer, inner, cv) arrays."""
    base = tables[0]
    c = base.x.size
    if n is None:
        units = np.broadcast_to(np.arange(c), (size, c))
        wt = np.broadcast_to(base.prob, (size, c))
    else:
        units = rng.inverse_cdf(base.prob / base.prob.sum(), gen.random((size, n)))
        wt = np.full((size, n), 1.0 / n)
    freq = None
    if m is not None:
        if mode == "scrl":
            freq = gen.multinomial(m, base.w[units]) / m
        else:
            freq = (gen.multinomial(m, problem.neg_cond[0], size=size) / m)[:, None, :]
    out = []
    for t in tables:
        h = t.h[units]
        outer = t.risk - np.sum(wt * h, axis=1)
        if freq is None:
            out.append((outer, np.zeros(size), np.zeros(size)))
            continue
        hh = t.inner_hat(units, freq)
        inner = np.sum(wt * (h - hh), axis=1)
        cv = np.sum(wt * np.sum((freq - t.w[units]) * t.cv[units], axis=-1), axis=1)
        out.append((outer, inner, cv))
    return out


def _simulate(problem, tables, n, m, mode, trials, seed, workers):
    if mode not in ("scrl", "sscrl"):
        raise ValueError(f"mode must be 'scrl' or 'sscrl', got {mode!r}")
    if mode == "sscrl" and m is not None and not problem.has_shared_negatives(1e-12):
        raise HeterogeneousNegatives("shared negatives need identical negative rows")
    sizes = _blocks(trials)
    jobs = list(enumerate(sizes))
    parts = _map(lambda j: _mc_block(problem, tables, n, m, mode, rng.stream(seed, j[0]), j[1]), jobs, workers)
    return [tuple(np.concatenate([p[i][k] for p in parts]) for k in range(3)) for i in range(len(tables))]


def _mean_se(a: np.ndarray) -> tuple[float, float]:
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0


@dataclass(frozen=True)
class DecompositionReport:
    """Generalization-gap split for one (n, m) setting.

    ``outer``, ``inner_mad`` and ``total`` are mean absolute values over
    trials; ``inner_bias`` is the signed mean of L - L_hat with a zero-mean
    control variate removed.  ``n``/``m`` of None mean exact expectations.
    """

    mode: str
    n: int | None
    m: int | None
    trials: int
    total: float
    total_se: float
    inner_bias: float
    inner_bias_se: float
    inner_mad: float
    inner_mad_se: float
    outer: float
    outer_se: float

    @property
    def combined_se(self) -> float:
        return math.sqrt(self.total_se**2 + self.inner_mad_se**2 + self.outer_se**2)

    def triangle_ok(self) -> bool:
        return self.total <= self.inner_mad + self.outer + 3.0 * self.combined_se

    def to_dict(self) -> dict:
        return asdict(self)


def _report(mode, n, m, outer, inner, cv) -> DecompositionReport:
    total = outer + inner
    return DecompositionReport(
        mode, n, m, outer.size,
        *_mean_se(np.abs(total)),
        *_mean_se(inner + cv),
        *_mean_se(np.abs(inner)),
        *_mean_se(np.abs(outer)),
    )


def inner_outer_decomposition(
    problem: ContrastiveProblem,
    scorer,
    n: int | None,
    m: int | None,
    trials: int,
    seed: int,
    mode: str = "scrl",
    phi: Disutility | None = None,
    ell: PairwiseLoss | None = None,
    workers: int | None = None,
) -> DecompositionReport:
    """Monte-Carlo inner/outer split of L - L_hat.

    Per trial, with ``h`` the exact inner risk of a cell and ``h_hat`` its
    m-negative estimate: outer = L - mean_i h(x_i, y_i), inner =
    mean_i (h - h_hat), total = outer + inner.  ``n=None`` averages over all
    cells with exact weights (so outer = 0); ``m=None`` uses exact inner
    risks (so inner = 0).  In ``scrl`` mode every unit draws its own
    negatives; in ``sscrl`` mode one list is shared per trial.
    """
    if trials < 100:
        raise InsufficientTrials("use at least 100 trials")
    tab = _Cells.build(problem, scorer, phi or EntropyRisk(), ell or Linear())
    (outer, inner, cv), = _simulate(problem, [tab], n, m, mode, trials, seed, workers)
    return _report(mode, n, m, outer, inner, cv)


# ---------------------------------------------------------------------------
# scaling fits


@dataclass(frozen=True)
class SlopeFit:
    sweep: str
    grid: list
    mean: list
    se: list
    slope: float
    intercept: float
    r2: float
    trials: int
    reports: list = field(default_factory=list, repr=False)

    @property
    def inconclusive(self) -> bool:
        return self.r2 < 0.9

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("sweep", "grid", "mean", "se", "slope", "intercept", "r2", "trials")}
        d["inconclusive"] = self.inconclusive
        d["signed_inner_bias"] = [r.inner_bias for r in self.reports]
        d["signed_inner_bias_se"] = [r.inner_bias_se for r in self.reports]
        return d

    def csv_rows(self):
        return [(g, mu, se, self.trials) for g, mu, se in zip(self.grid, self.mean, self.se)]


def fit_loglog(x, y) -> tuple[float, float, float]:
    """OLS of log y on log x: slope, intercept, R^2."""
    res = linregress(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)))
    return float(res.slope), float(res.intercept), float(res.rvalue**2)


def scaling_study(
    problem: ContrastiveProblem,
    scorer,
    sweep: str,
    grid,
    trials: int,
    seed: int,
    phi: Disutility | None = None,
    ell: PairwiseLoss | None = None,
    workers: int | None = None,
    max_rel_se: float = 0.10,
) -> SlopeFit:
    """Measure an error along a geometric grid and fit a log-log slope.

    Sweeps: ``inner_m_scrl`` (signed inner bias, own negatives per cell),
    ``inner_m_sscrl_bias`` (same with shared negatives),
    ``inner_m_sscrl_mad`` (mean |inner| with shared negatives) and
    ``outer_n`` (mean |outer| with exact inner risks).

    Raises:
        InsufficientTrials: a grid point's relative standard error exceeds
            ``max_rel_se`` or its mean error is not positive.
    """
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}; choose from {SWEEPS}")
    grid = [int(g) for g in grid]
    if len(grid) < 2:
        raise ValueError("grid needs at least two points")
    means, ses, reports = [], [], []
    for i, g in enumerate(grid):
        sub = rng.derive_seed(seed, i)
        if sweep == "outer_n":
            rep = inner_outer_decomposition(problem, scorer, g, None, trials, sub, "scrl", phi, ell, workers)
            mu, se = rep.outer, rep.outer_se
        else:
            mode = "scrl" if sweep == "inner_m_scrl" else "sscrl"
            rep = inner_outer_decomposition(problem, scorer, None, g, trials, sub, mode, phi, ell, workers)
            mu, se = (rep.inner_mad, rep.inner_mad_se) if sweep == "inner_m_sscrl_mad" else (rep.inner_bias, rep.inner_bias_se)
        if mu <= 0 or se > max_rel_se * mu:
            raise InsufficientTrials(f"{sweep} at {g}: mean {mu:.3g} with standard error {se:.3g}")
        means.append(mu)
        ses.append(se)
        reports.append(rep)
    slope, intercept, r2 = fit_loglog(grid, means)
    return SlopeFit(sweep, grid, means, ses, slope, intercept, r2, trials, reports)


# ---------------------------------------------------------------------------
# generalization gap


@dataclass(frozen=True)
class GapReport:
    mean: float
    se: float
    quantiles: dict
    per_hypothesis: list
    trials: int

    def to_dict(self) -> dict:
        return asdict(self)


def generalization_gap(
    problem: ContrastiveProblem,
    hypotheses,
    n: int | None,
    m: int | None,
    trials: int,
    seed: int,
    mode: str = "scrl",
    workers: int | None = None,
) -> GapReport:
    """max over a finite hypothesis set of |L(s) - L_hat(s)| per trial.

    All hypotheses see the same draws in a trial.  The finite set stands in
    for the supremum over a model class, so the result is a lower bound on it.
    """
    if not hypotheses:
        raise ValueError("hypothesis set is empty")
    tables = [_Cells.build(problem, h, EntropyRisk(), Linear()) for h in hypotheses]
    sims = _simulate(problem, tables, n, m, mode, trials, seed, workers)
    gaps = np.stack([np.abs(o + i) for o, i, _ in sims])
    worst = gaps.max(axis=0)
    mean, se = _mean_se(worst)
    q = {str(p): float(np.quantile(worst, p)) for p in (0.5, 0.9, 0.99)}
    return GapReport(mean, se, q, [float(g.mean()) for g in gaps], trials)


# ---------------------------------------------------------------------------
# calibration sweep


@dataclass(frozen=True)
class CalibrationRow:
    problem_seed: int
    scorer_seed: int
    lhs: float
    rhs: float
    slack: float


@dataclass(frozen=True)
class CalibrationSweep:
    rows: list

    @property
    def min_slack(self) -> float:
        return min(r.slack for r in self.rows)

    @property
    def median_slack(self) -> float:
        return float(np.median([r.slack for r in self.rows]))

    def csv_rows(self):
        return [(r.problem_seed, r.scorer_seed, r.lhs, r.rhs, r.slack) for r in self.rows]


def sweep_problem(problem_seed: int, floor: float = 1e-3) -> ContrastiveProblem:
    """Random problem with |X| in 1..5 and |Y| in 2..8 picked from the seed."""
    g = rng.stream(problem_seed, 0xC0DE)
    nx, ny = int(g.integers(1, 6)), int(g.integers(2, 9))
    return random_problem(nx, ny, problem_seed, floor)


def calibration_sweep(problem_count: int, scorer_count: int, seed: int, controls: bool = False) -> CalibrationSweep:
    """Calibration triples for random problems and random scorers.

    Scorer entries are uniform on ``[-3 tau, 3 tau]``.  With ``controls`` each
    problem also contributes its optimal scorer (``scorer_seed = -1``).
    """
    if problem_count < 1 or scorer_count < 1:
        raise ValueError("counts must be positive")
    rows = []
    for i in range(problem_count):
        ps = rng.derive_seed(seed, 0, i)
        p = sweep_problem(ps)
        tau = p.temperature
        for j in range(scorer_count):
            ss = rng.derive_seed(seed, 1, i, j)
            s = rng.stream(ss).uniform(-3 * tau, 3 * tau, size=(p.anchor_size, p.item_size))
            rows.append(CalibrationRow(ps, ss, *calibration_bound(p, s)))
        if controls:
            rows.append(CalibrationRow(ps, -1, *calibration_bound(p, optimal_scorer(p))))
    return CalibrationSweep(rows)


# ---------------------------------------------------------------------------
# critical negative size


def ring_problem(anchor_size: int = 4, item_size: int = 24, kappa: float = 3.0, temperature: float = 1.0) -> ContrastiveProblem:
    """Shared-negative problem on a ring.

    Anchor ``x`` prefers items near angle ``2 pi x / |X|``:
    p(y | x) ∝ exp(kappa cos(2 pi (y/|Y| - x/|X|))), with uniform anchors.
    """
    y = np.arange(item_size) / item_size
    x = np.arange(anchor_size)[:, None] / anchor_size
    logits = kappa * np.cos(2 * np.pi * (y[None, :] - x))
    cond = np.exp(logits - logits.max(axis=1, keepdims=True))
    cond /= cond.sum(axis=1, keepdims=True)
    return from_joint(cond / anchor_size, temperature)


@dataclass(frozen=True)
class CriticalMReport:
    n_grid: list
    m_grid: list
    mean_auc: np.ndarray  # [n, m]
    se: np.ndarray
    exact_auc: list  # per n, trained with exact negative expectations
    exact_se: list
    plateau: list  # best mean AUC per n
    m_star: list
    between_sqrt_n_and_n: list
    delta: float
    seeds: int
    optimum: float

    def csv_rows(self):
        rows = []
        for i, n in enumerate(self.n_grid):
            for j, m in enumerate(self.m_grid):
                rows.append((n, m, float(self.mean_auc[i, j]), float(self.se[i, j]), int(m == self.m_star[i])))
        return rows

    def to_dict(self) -> dict:
        return {
            "n_grid": self.n_grid,
            "m_grid": self.m_grid,
            "mean_auc": self.mean_auc.tolist(),
            "se": self.se.tolist(),
            "exact_auc": self.exact_auc,
            "exact_se": self.exact_se,
            "plateau": self.plateau,
            "m_star": self.m_star,
            "between_sqrt_n_and_n": self.between_sqrt_n_and_n,
            "delta": self.delta,
            "seeds": self.seeds,
            "optimum": self.optimum,
        }


def _train_auc(problem, terms, cfg) -> float:
    scorer, _ = minimize_empirical(terms, terms.shape, EntropyRisk(), Linear(), terms.tau, cfg)
    return auc_score(problem, scorer).score


def critical_m_study(
    problem: ContrastiveProblem,
    n_grid,
    m_grid,
    train_config: TrainConfig | None = None,
    delta: float = 0.005,
    seed: int = 0,
    seeds: int = 20,
    workers: int | None = None,
) -> CriticalMReport:
    """Downstream AUC of scorers trained on SSCRL samples, over an (n, m) grid.

    For each n and replicate, one set of positive pairs and one long negative
    list are drawn; the cell for m trains on the first m negatives, so cells
    along m share randomness.  The same pairs trained against the exact
    negative law give the reference AUC for that n.  m*(n) is the smallest m
    whose mean AUC is within ``delta`` of the best mean AUC for that n.
    """
    if not problem.has_shared_negatives(1e-12):
        raise HeterogeneousNegatives("the critical-m study needs shared negatives")
    cfg = train_config or critical_m_default_config(problem)
    n_grid, m_grid = [int(v) for v in n_grid], [int(v) for v in m_grid]
    tau = problem.temperature
    shape = (problem.anchor_size, problem.item_size)
    p_y = problem.neg_cond[0]

    def replicate(job):
        i, r = job
        base = sample_sscrl(problem, n_grid[i], max(m_grid), rng.derive_seed(seed, n_grid[i], r))
        row = []
        for m in m_grid:
            s = SscrlSample(base.anchors, base.positives, base.negatives[:m], base.seed, *shape)
            row.append(_train_auc(problem, ContrastTerms.from_sample(s, tau), cfg))
        t = ContrastTerms.from_sample(base, tau)
        exact = ContrastTerms(t.anchor, t.pos, np.broadcast_to(p_y, t.pos.shape), t.weight, tau, shape)
        return row, _train_auc(problem, exact, cfg)

    jobs = [(i, r) for i in range(len(n_grid)) for r in range(seeds)]
    try:
        results = _map(replicate, jobs, workers)
    except FloatingPointError as exc:  # pragma: no cover - defensive
        raise TrainingDiverged(str(exc)) from exc
    auc = np.array([row for row, _ in results]).reshape(len(n_grid), seeds, len(m_grid))
    ex = np.array([e for _, e in results]).reshape(len(n_grid), seeds)
    mean = auc.mean(axis=1)
    se = auc.std(axis=1, ddof=1) / math.sqrt(seeds) if seeds > 1 else np.zeros_like(mean)
    plateau = mean.max(axis=1)
    m_star = [m_grid[int(np.argmax(mean[i] >= plateau[i] - delta))] for i in range(len(n_grid))]
    between = [bool(math.sqrt(n) <= ms <= n) for n, ms in zip(n_grid, m_star)]
    ex_se = (ex.std(axis=1, ddof=1) / math.sqrt(seeds)).tolist() if seeds > 1 else [0.0] * len(n_grid)
    return CriticalMReport(
        n_grid, m_grid, mean, se, ex.mean(axis=1).tolist(), ex_se, plateau.tolist(), m_star, between, delta, seeds, auc_optimum(problem)
    )


# ---------------------------------------------------------------------------
# consistency


@dataclass(frozen=True)
class ConsistencyTrace:
    iters: list
    excess: list
    auc_gap: list
    reference: float
    final_is_maximizer: bool

    def to_dict(self) -> dict:
        return asdict(self)


def consistency_experiment(
    problem: ContrastiveProblem,
    phi: Disutility | None = None,
    ell: PairwiseLoss | None = None,
    train_config: TrainConfig | None = None,
    init=None,
) -> ConsistencyTrace:
    """Train on the population risk and pair each recorded excess with E* - E.

    The excess is measured against the closed-form minimum when there is one
    and against the smallest recorded risk otherwise.
    """
    phi, ell = phi or EntropyRisk(), ell or Linear()
    scorer, trace = minimize_population(problem, phi, ell, train_config, init, track_auc=True)
    ref = oce_reference(problem, phi, ell)
    if ref is None:
        ref = min(trace.risks)
    e_star = auc_optimum(problem)
    excess = [r - ref for r in trace.risks]
    gap = [e_star - a for a in trace.aucs]
    ok = bool(is_auc_maximizer(problem, scorer, 1e-9))
    return ConsistencyTrace(trace.iters, excess, gap, ref, ok)


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def json_mirror(payload: dict, config: dict, seed: int) -> str:
    doc = {"meta": {"git_describe": git_describe(), "config_hash": config_hash(config), "seed": seed}, "data": payload}
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")

# ---------------------------------------------------------------------------
# default study settings


def default_study_problem(shared_negatives: bool = False) -> ContrastiveProblem:
    """The fixed 3x6 instance used by the scaling studies.

    With ``shared_negatives`` its positive-pair joint is turned into a
    shared-negative problem.
    """
    p = random_problem(3, 6, 11, 0.02, temperature=1.0)
    if shared_negatives:
        return from_joint(p.joint_positive(), p.temperature)
    return p


def default_study_scorer(problem: ContrastiveProblem, seed: int = 5) -> TabularScorer:
    """Scores uniform on [-tau, tau] from a fixed stream."""
    tau = problem.temperature
    return TabularScorer(rng.stream(seed).uniform(-tau, tau, size=(problem.anchor_size, problem.item_size)))


CRITICAL_M_N_GRID = (64, 256, 1024)
CRITICAL_M_M_GRID = tuple(2**k for k in range(13))


def critical_m_default_config(problem: ContrastiveProblem) -> TrainConfig:
    """Fixed 300-step budget in the box [-5 tau, 5 tau]."""
    return TrainConfig(max_iter=300, bound=5.0 * problem.temperature)
