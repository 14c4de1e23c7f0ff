"""Projected gradient descent on the contrastive risks, with gradient certification."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from .errors import DimensionMismatch, NonSmoothDisutility, TrainingDiverged
from .oce import Disutility, EntropyRisk, Linear, PairwiseLoss
from .probspace import ContrastiveProblem, density_ratio
from .retrieval import auc_score
from .risks import ContrastTerms, contrast_terms
from .scorers import LinearEmbedScorer, TabularScorer, as_matrix

# smallest curvature weight per item, relative to the uniform law
CURV_FLOOR = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Settings for :func:`minimize_population` and :func:`minimize_empirical`.

    Attributes:
        step: base step size; ``None`` means ``0.5 * tau``.
        step_rule: ``"constant"`` or ``"inv_sqrt"`` (step / sqrt(k)).
        max_iter: iteration cap.
        tol: stop once the projected-gradient norm falls to this level.
        bound: score box ``[-B, B]``; ``None`` picks a default from the problem.
        trace_stride: record every ``trace_stride``-th iterate (the last one always).
        backtrack: halve the step until the risk does not increase.
    """

    step: float | None = None
    step_rule: str = "constant"
    max_iter: int = 50_000
    tol: float = 1e-10
    bound: float | None = None
    trace_stride: int = 1
    backtrack: bool = True

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.step_rule not in ("constant", "inv_sqrt"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.bound is not None and not self.bound > 0:
            raise ValueError("bound must be positive")
        if self.max_iter < 0 or self.trace_stride < 1:
            raise ValueError("max_iter must be >= 0 and trace_stride >= 1")


@dataclass
class TrainTrace:
    iters: list[int] = field(default_factory=list)
    risks: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    aucs: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    converged: bool = False
    rejected_steps: int = 0

    def record(self, k: int, risk: float, gnorm: float, auc: float | None) -> None:
        self.iters.append(k)
        self.risks.append(risk)
        self.grad_norms.append(gnorm)
        if auc is not None:
            self.aucs.append(auc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "risk", "grad_norm", "auc"])
        for i, k in enumerate(self.iters):
            auc = repr(self.aucs[i]) if self.aucs else ""
            w.writerow([k, repr(self.risks[i]), repr(self.grad_norms[i]), auc])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class Objective:
    """A risk as a function of tabular scores: value and gradient."""

    terms: ContrastTerms
    phi: Disutility = field(default_factory=EntropyRisk)
    ell: PairwiseLoss = field(default_factory=Linear)

    @classmethod
    def of(cls, source, phi=None, ell=None, tau: float | None = None) -> "Objective":
        return cls(contrast_terms(source, tau), EntropyRisk() if phi is None else phi, Linear() if ell is None else ell)

    @property
    def shape(self) -> tuple[int, int]:
        return self.terms.shape

    @property
    def tau(self) -> float:
        return self.terms.tau

    def value(self, scores) -> float:
        return self.terms.value(as_matrix(scores, self.shape), self.phi, self.ell)

    def gradient(self, scores) -> np.ndarray:
        return self.terms.gradient(as_matrix(scores, self.shape), self.phi, self.ell)

    def curvature(self, scores) -> np.ndarray:
        """Positive diagonal curvature proxy used to scale gradient steps.

        For the log-sum-exp risk the Hessian block of anchor ``x`` is
        ``w_x/tau (diag q - q q^T)`` with ``q`` the tilted negative law, so
        ``w_x q / tau`` makes the scaled Hessian the identity off the gauge
        direction.  Other risks use the negative law in place of ``q``.
        """
        t = self.terms
        s = as_matrix(scores, self.shape)[t.anchor]
        if isinstance(self.phi, EntropyRisk) and isinstance(self.ell, Linear):
            with np.errstate(divide="ignore"):
                q = softmax(np.log(t.neg) + s / t.tau, axis=1)
        else:
            q = np.asarray(t.neg, dtype=float)
        k = self.shape[1]
        q = np.maximum(q, CURV_FLOOR / k)
        out = np.zeros(self.shape)
        np.add.at(out, t.anchor, t.weight[:, None] * q / t.tau)
        return out

    def anchor_weight(self) -> np.ndarray:
        """Total term weight per anchor (zero for anchors that never occur)."""
        return np.bincount(self.terms.anchor, weights=self.terms.weight, minlength=self.shape[0])


def default_bound(problem: ContrastiveProblem, phi: Disutility | None = None) -> float:
    """5 tau max|log r| over items with positive mass, and at least tau.

    Disutilities other than the entropic one are minimized by scores on the
    scale of ``tau * r`` rather than ``tau * log r``, so for them the box also
    covers ``tau * max r``.
    """
    r = density_ratio(problem)
    live = problem.pos_cond > 0
    logs = np.abs(np.log(r[live]))
    b = max(5.0 * logs.max(initial=0.0), 1.0)
    if phi is not None and not isinstance(phi, EntropyRisk):
        b = max(b, float(r.max()))
    return float(problem.temperature * b)


def _descend(obj: Objective, s0: np.ndarray, cfg: TrainConfig, bound: float, auc_fn=None) -> tuple[np.ndarray, TrainTrace]:
    """Projected gradient descent on tabular scores in a diagonal curvature metric."""
    start = time.perf_counter()
    base = 0.5 * obj.tau if cfg.step is None else cfg.step
    proj = lambda s: np.clip(s, -bound, bound)
    s = proj(np.array(s0, dtype=float))
    f = obj.value(s)
    trace = TrainTrace()
    step = base
    rises = 0
    k = 0
    while True:
        g = obj.gradient(s)
        curv = obj.curvature(s)
        precond = np.where(curv > 0, 1.0 / np.where(curv > 0, curv, 1.0), 0.0) / obj.tau
        pg = s - proj(s - obj.tau * precond * g)
        gnorm = float(np.linalg.norm(pg))
        done = gnorm <= cfg.tol or k >= cfg.max_iter
        if done or k % cfg.trace_stride == 0:
            trace.record(k, f, gnorm, None if auc_fn is None else auc_fn(s))
        if done:
            trace.converged = gnorm <= cfg.tol
            break
        eta = step if cfg.step_rule == "constant" else base / np.sqrt(k + 1)
        while True:
            cand = proj(s - eta * precond * g)
            fc = obj.value(cand)
            if not cfg.backtrack or fc <= f + 1e-15 * max(1.0, abs(f)) or eta < 1e-20:
                break
            trace.rejected_steps += 1
            eta *= 0.5
        if cfg.backtrack and cfg.step_rule == "constant":
            # grow back toward the base step after a successful step
            step = min(base, 2.0 * eta)
        rises = rises + 1 if fc > f else 0
        if rises >= 10:
            raise TrainingDiverged(f"risk rose for 10 consecutive steps at iteration {k}")
        if not np.isfinite(fc):
            raise TrainingDiverged(f"non-finite risk at iteration {k}")
        s, f = cand, fc
        k += 1
    trace.wall_clock = time.perf_counter() - start
    return s, trace


def _descend_embed(obj: Objective, u0, v0, cfg: TrainConfig, bound: float, auc_fn=None):
    """Gradient descent on embeddings with row norms capped at sqrt(B)."""
    start = time.perf_counter()
    cap = np.sqrt(bound)

    def proj(a):
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return a * np.minimum(1.0, cap / np.maximum(n, 1e-300))

    u, v = proj(np.array(u0, dtype=float)), proj(np.array(v0, dtype=float))
    f = obj.value(u @ v.T)
    base = 0.5 * obj.tau if cfg.step is None else cfg.step
    trace = TrainTrace()
    step = base
    rises = 0
    k = 0
    while True:
        g = obj.gradient(u @ v.T)
        gu, gv = g @ v, g.T @ u
        pu, pv = u - proj(u - gu), v - proj(v - gv)
        gnorm = float(np.sqrt(np.sum(pu * pu) + np.sum(pv * pv)))
        done = gnorm <= cfg.tol or k >= cfg.max_iter
        if done or k % cfg.trace_stride == 0:
            trace.record(k, f, gnorm, None if auc_fn is None else auc_fn(u @ v.T))
        if done:
            trace.converged = gnorm <= cfg.tol
            break
        eta = step if cfg.step_rule == "constant" else base / np.sqrt(k + 1)
        while True:
            cu, cv = proj(u - eta * gu), proj(v - eta * gv)
            fc = obj.value(cu @ cv.T)
            if not cfg.backtrack or fc <= f + 1e-15 * max(1.0, abs(f)) or eta < 1e-20:
                break
            trace.rejected_steps += 1
            eta *= 0.5
        if cfg.backtrack and cfg.step_rule == "constant":
            step = min(base, 2.0 * eta)
        rises = rises + 1 if fc > f else 0
        if rises >= 10 or not np.isfinite(fc):
            raise TrainingDiverged(f"risk rose for 10 consecutive steps at iteration {k}")
        u, v, f = cu, cv, fc
        k += 1
    trace.wall_clock = time.perf_counter() - start
    return u, v, trace


def _check_smooth(phi: Disutility) -> None:
    if not phi.smooth:
        raise NonSmoothDisutility(f"{phi!r} cannot be trained by gradient descent")


def _run(obj: Objective, init, cfg: TrainConfig, bound: float, auc_fn):
    if isinstance(init, LinearEmbedScorer):
        if init.shape != obj.shape:
            raise DimensionMismatch(f"init shape {init.shape} does not match {obj.shape}")
        u, v, trace = _descend_embed(obj, init.anchor_embed, init.item_embed, cfg, bound, auc_fn)
        return LinearEmbedScorer(u, v), trace
    s, trace = _descend(obj, as_matrix(init, obj.shape), cfg, bound, auc_fn)
    return TabularScorer(s), trace


def minimize_population(
    problem: ContrastiveProblem,
    phi: Disutility | None = None,
    ell: PairwiseLoss | None = None,
    config: TrainConfig | None = None,
    init=None,
    track_auc: bool = False,
):
    """Minimize the population risk L^{phi,ell} from ``init`` (zeros by default).

    Returns the final scorer (same kind as ``init``) and the trace.

    Raises:
        NonSmoothDisutility: ``phi`` is CVaR.
        TrainingDiverged: the risk rose for 10 consecutive accepted steps.
    """
    obj = Objective.of(problem, phi, ell)
    _check_smooth(obj.phi)
    cfg = TrainConfig() if config is None else config
    bound = default_bound(problem, obj.phi) if cfg.bound is None else cfg.bound
    if init is None:
        init = TabularScorer.constant(problem.anchor_size, problem.item_size)
    auc_fn = (lambda s: auc_score(problem, s).score) if track_auc else None
    return _run(obj, init, cfg, bound, auc_fn)


def minimize_empirical(
    sample,
    scorer_shape: tuple[int, int],
    phi: Disutility | None,
    ell: PairwiseLoss | None,
    tau: float,
    config: TrainConfig | None = None,
    init=None,
    auc_problem: ContrastiveProblem | None = None,
):
    """Minimize the empirical risk of an SCRL/SSCRL sample (or prebuilt terms).

    Without an explicit bound in ``config`` the score box is ``[-10 tau, 10 tau]``.
    ``auc_problem``, when given, adds the population AUC of each recorded iterate.
    """
    obj = Objective.of(sample, phi, ell, tau)
    if tuple(scorer_shape) != obj.shape:
        raise DimensionMismatch(f"scorer shape {tuple(scorer_shape)} does not match sample {obj.shape}")
    _check_smooth(obj.phi)
    cfg = TrainConfig() if config is None else config
    bound = 10.0 * tau if cfg.bound is None else cfg.bound
    if init is None:
        init = TabularScorer.constant(*obj.shape)
    auc_fn = (lambda s: auc_score(auc_problem, s).score) if auc_problem is not None else None
    return _run(obj, init, cfg, bound, auc_fn)


@dataclass(frozen=True)
class FdReport:
    """Gradient check: ``error`` is relative unless ``relative`` is False."""

    error: float
    relative: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    def __float__(self) -> float:
        return self.error


def finite_diff_certify(objective: Objective, scorer, h: float = 1e-5) -> FdReport:
    """Central differences on every score entry against the analytic gradient.

    The error is max|analytic - numeric| / max|numeric|; when the numeric
    gradient is below 1e-8 everywhere the absolute error is reported instead.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    s = np.array(as_matrix(scorer, objective.shape), dtype=float)
    analytic = objective.gradient(s)
    numeric = np.zeros_like(s)
    for idx in np.ndindex(*s.shape):
        e = np.zeros_like(s)
        e[idx] = h
        numeric[idx] = (objective.value(s + e) - objective.value(s - e)) / (2.0 * h)
    diff = float(np.max(np.abs(analytic - numeric)))
    scale = float(np.max(np.abs(numeric)))
    if scale < 1e-8:
        return FdReport(diff, False, analytic, numeric)
    return FdReport(diff / scale, True, analytic, numeric)


def with_bound(config: TrainConfig, bound: float) -> TrainConfig:
    return replace(config, bound=bound)
