"""Retrieval criterion: AUC-type score, its optimum, calibration and zero-shot posteriors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .oce import Disutility, EntropyRisk, Linear, MeanVariance, PairwiseLoss
from .probspace import ClassStructure, ContrastiveProblem, density_ratio
from .risks import optimal_risk, population_oce_risk, population_risk
from .scorers import TabularScorer, as_matrix

TIE_TOL = 1e-12


@dataclass(frozen=True)
class AucBreakdown:
    strict_win: float
    tie: float
    strict_loss: float

    @property
    def score(self) -> float:
        return self.strict_win + 0.5 * self.tie

    def to_dict(self) -> dict:
        return {"strict_win": self.strict_win, "tie": self.tie, "strict_loss": self.strict_loss, "score": self.score}


def auc_score(problem: ContrastiveProblem, scorer, tie_tol: float = TIE_TOL) -> AucBreakdown:
    """P(s(x, y) > s(x, y')) + P(tie)/2 with y ~ p+_x, y' ~ p-_x, by enumeration."""
    s = as_matrix(scorer, (problem.anchor_size, problem.item_size))
    d = s[:, :, None] - s[:, None, :]  # [x, y, y']
    mass = problem.anchor_marginal[:, None, None] * problem.pos_cond[:, :, None] * problem.neg_cond[:, None, :]
    tie = np.abs(d) <= tie_tol
    win = float(np.sum(mass[(d > 0) & ~tie]))
    ties = float(np.sum(mass[tie]))
    loss = float(np.sum(mass[(d < 0) & ~tie]))
    return AucBreakdown(win, ties, loss)


def auc_optimum(problem: ContrastiveProblem) -> float:
    """Supremum of the AUC criterion over all scorers.

    Computed as (1/2) sum_{y,y'} max(p+(y) p-(y'), p+(y') p-(y)) per anchor,
    which equals (1/2) E_{y,y'~p-} max(r(y), r(y')) without forming ratios.
    """
    pos, neg = problem.pos_cond, problem.neg_cond
    a = pos[:, :, None] * neg[:, None, :]
    per_anchor = 0.5 * np.maximum(a, np.swapaxes(a, 1, 2)).sum(axis=(1, 2))
    return float(problem.anchor_marginal @ per_anchor)


@dataclass(frozen=True)
class MaximizerCheck:
    ok: bool
    triple: tuple[int, int, int] | None = None

    def __bool__(self) -> bool:
        return self.ok


def is_auc_maximizer(problem: ContrastiveProblem, scorer, tol: float = 1e-9) -> MaximizerCheck:
    """Check that scores order items like the density ratio wherever ratios differ by > tol.

    Only items with negative mass enter (the criterion integrates over them).
    Returns the first offending ``(x, y, y')`` when the check fails.
    """
    s = as_matrix(scorer, (problem.anchor_size, problem.item_size))
    r = density_ratio(problem)
    seen = problem.neg_cond > 0
    dr = r[:, :, None] - r[:, None, :]
    ds = s[:, :, None] - s[:, None, :]
    both = seen[:, :, None] & seen[:, None, :]
    bad = both & (dr > tol) & ~(ds > tol)
    if bad.any():
        x, y, yp = (int(v) for v in np.argwhere(bad)[0])
        return MaximizerCheck(False, (x, y, yp))
    return MaximizerCheck(True, None)


@dataclass(frozen=True)
class CalibrationTriple:
    lhs: float
    rhs: float
    slack: float

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.slack))


def calibration_bound(problem: ContrastiveProblem, scorer) -> CalibrationTriple:
    """E* - E(s) against sqrt(2/tau (L(s) - L*))."""
    lhs = auc_optimum(problem) - auc_score(problem, scorer).score
    excess = population_risk(problem, scorer).value - optimal_risk(problem)
    rhs = math.sqrt(max(0.0, 2.0 / problem.temperature * excess))
    return CalibrationTriple(lhs, rhs, rhs - lhs)


def oce_reference(problem: ContrastiveProblem, phi: Disutility, ell: PairwiseLoss) -> float | None:
    """Minimum of the general risk when it is known in closed form, else None.

    Entropy with the linear loss gives the usual optimum.  Mean-variance with
    the linear loss is minimized by ``tau * r`` (its inner argument never
    reaches the flat part there), so the reference is the risk at that scorer.
    """
    if not isinstance(ell, Linear):
        return None
    if isinstance(phi, EntropyRisk):
        return optimal_risk(problem)
    if isinstance(phi, MeanVariance):
        return population_oce_risk(problem, mean_variance_optimal_scorer(problem), phi, ell).value
    return None


def mean_variance_optimal_scorer(problem: ContrastiveProblem) -> TabularScorer:
    """s = tau * p+/p- (0/0 read as 0)."""
    return TabularScorer(problem.temperature * density_ratio(problem))


@dataclass(frozen=True)
class GeneralExcess:
    lhs: float
    excess_oce: float

    def __iter__(self):
        return iter((self.lhs, self.excess_oce))


def excess_bounds_general(problem: ContrastiveProblem, scorer, phi: Disutility, ell: PairwiseLoss, reference: float | None = None) -> GeneralExcess:
    """Diagnostic pair (E* - E(s), L^{phi,ell}(s) - reference); no inequality is asserted.

    ``reference`` defaults to the closed-form minimum from :func:`oce_reference`.
    """
    if reference is None:
        reference = oce_reference(problem, phi, ell)
        if reference is None:
            raise ValueError(f"no closed-form minimum for ({phi.name}, {ell.name}); pass reference")
    lhs = auc_optimum(problem) - auc_score(problem, scorer).score
    return GeneralExcess(lhs, population_oce_risk(problem, scorer, phi, ell).value - reference)


@dataclass(frozen=True)
class ZeroShot:
    raw: np.ndarray
    normalized: np.ndarray


def zero_shot_posterior(problem: ContrastiveProblem, classes: ClassStructure, scorer, x: int) -> ZeroShot:
    """Class scores E_{y~D_c}[p_Y(y) e^{s(x,y)/tau}] / E_{y~p_Y}[e^{s(x,y)/tau}] at anchor ``x``.

    ``p_Y`` is the negative row of ``x``.  The normalized vector rescales the
    raw one to sum to one across classes.
    """
    s = as_matrix(scorer, (problem.anchor_size, problem.item_size))[x]
    if classes.item_dist.shape[1] != problem.item_size:
        raise DimensionMismatch("class item laws must live on the problem's items")
    p_y = problem.neg_cond[x]
    e = np.exp((s - s.max()) / problem.temperature)
    raw = (classes.item_dist @ (p_y * e)) / (p_y @ e)
    return ZeroShot(raw, raw / raw.sum())
