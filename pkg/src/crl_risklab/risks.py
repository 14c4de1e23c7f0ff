"""Population and empirical contrastive risks, the optimal scorer family and gradients.

Every risk here has the form

    sum_k weight_k * sum_y pos_k(y) * OCE_{y' ~ neg_k}[ ell(s(a_k, y') - s(a_k, y)) ]

for a list of terms ``k`` with anchor ``a_k``: one term per anchor for the
population risk, one per drawn anchor for SCRL samples, one per distinct
anchor (with empirical conditionals) for SSCRL samples.  :class:`ContrastTerms`
holds that list; the trainer and :func:`risk_gradient` work on it directly.
The literal sample-level formulas are kept separately so both routes can be
checked against each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DimensionMismatch, NonSmoothDisutility, ShapeMismatch
from .oce import Disutility, EntropyRisk, Linear, PairwiseLoss, oce_batch
from .probspace import ContrastiveProblem, density_ratio
from .sampling import ScrlSample, SscrlSample
from .scorers import TabularScorer, as_matrix

# log-ratio offset below the smallest finite optimal score, for items with
# zero positive mass: exp(-40) keeps their effect on the risk below 1e-17
ZERO_MASS_OFFSET = 40.0
# offset for items with no mass at all
EMPTY_OFFSET = 10.0


@dataclass(frozen=True)
class RiskValue:
    """A risk and its per-unit contributions (anchors or samples)."""

    value: float
    contributions: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    kind: str = "population"
    phi: str = "entropy"
    ell: str = "linear"
    tau: float = 1.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "phi": self.phi,
            "ell": self.ell,
            "tau": self.tau,
            "value": self.value,
            "contributions": np.asarray(self.contributions).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _defaults(phi, ell):
    return (EntropyRisk() if phi is None else phi), (Linear() if ell is None else ell)


def _is_logsumexp(phi, ell) -> bool:
    return isinstance(phi, EntropyRisk) and isinstance(ell, Linear)


@dataclass(frozen=True, eq=False)
class ContrastTerms:
    """Weighted list of (anchor, positive law, negative law) terms."""

    anchor: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    weight: np.ndarray
    tau: float
    shape: tuple[int, int]

    @classmethod
    def from_problem(cls, problem: ContrastiveProblem) -> "ContrastTerms":
        return cls(
            np.arange(problem.anchor_size),
            np.asarray(problem.pos_cond),
            np.asarray(problem.neg_cond),
            np.asarray(problem.anchor_marginal),
            problem.temperature,
            (problem.anchor_size, problem.item_size),
        )

    @classmethod
    def from_sample(cls, sample: ScrlSample | SscrlSample, tau: float) -> "ContrastTerms":
        if not isinstance(sample, (ScrlSample, SscrlSample)):
            raise TypeError(f"unsupported sample type {type(sample).__name__}")
        k = sample.item_size
        shape = (sample.anchor_size, k)
        if isinstance(sample, ScrlSample):
            n, m = sample.negatives.shape
            pos = np.zeros((n, k))
            pos[np.arange(n), sample.positives] = 1.0
            neg = np.zeros((n, k))
            np.add.at(neg, (np.repeat(np.arange(n), m), sample.negatives.ravel()), 1.0 / m)
            return cls(np.asarray(sample.anchors), pos, neg, np.full(n, 1.0 / n), tau, shape)
        anchors, inv = np.unique(sample.anchors, return_inverse=True)
        counts = np.zeros((anchors.size, k))
        np.add.at(counts, (inv, sample.positives), 1.0)
        n_x = counts.sum(axis=1)
        shared = np.bincount(sample.negatives, minlength=k) / sample.m
        neg = np.broadcast_to(shared, counts.shape)
        return cls(anchors, counts / n_x[:, None], neg, n_x / sample.n, tau, shape)

    def term_values(self, scores: np.ndarray, phi: Disutility, ell: PairwiseLoss) -> np.ndarray:
        """Per-term risk contributions (before weighting)."""
        s = scores[self.anchor]
        if _is_logsumexp(phi, ell):
            with np.errstate(divide="ignore"):
                c = self.tau * logsumexp(np.log(self.neg) + s / self.tau, axis=1)
            return c - np.sum(self.pos * s, axis=1)
        kk, yy = np.nonzero(self.pos > 0)
        z = ell(s[kk] - s[kk, yy][:, None])
        vals = oce_batch(phi, z, self.neg[kk], self.tau).value
        return np.bincount(kk, weights=self.pos[kk, yy] * vals, minlength=self.anchor.size)

    def value(self, scores, phi, ell) -> float:
        return float(self.weight @ self.term_values(scores, phi, ell))

    def gradient(self, scores: np.ndarray, phi: Disutility, ell: PairwiseLoss) -> np.ndarray:
        """d value / d scores, by the envelope theorem at each inner minimizer."""
        if not phi.smooth:
            raise NonSmoothDisutility(f"{phi!r} has no derivative; use it for evaluation only")
        s = scores[self.anchor]
        grad = np.zeros(self.shape)
        if _is_logsumexp(phi, ell):
            with np.errstate(divide="ignore"):
                q = softmax(np.log(self.neg) + s / self.tau, axis=1)
            np.add.at(grad, self.anchor, self.weight[:, None] * (q - self.pos))
            return grad
        kk, yy = np.nonzero(self.pos > 0)
        delta = s[kk] - s[kk, yy][:, None]
        z = ell(delta)
        res = oce_batch(phi, z, self.neg[kk], self.tau)
        g = phi.sensitivity(z, self.neg[kk], res.minimizer, self.tau) * ell.grad(delta)
        g *= (self.weight[kk] * self.pos[kk, yy])[:, None]
        a = self.anchor[kk]
        np.add.at(grad, a, g)
        np.add.at(grad, (a, yy), -g.sum(axis=1))
        return grad


def _scores(problem: ContrastiveProblem, scorer) -> np.ndarray:
    return as_matrix(scorer, (problem.anchor_size, problem.item_size))


def population_risk(problem: ContrastiveProblem, scorer) -> RiskValue:
    """E_x E_{y~p+} tau log E_{y'~p-} exp((s(x,y') - s(x,y)) / tau)."""
    s = _scores(problem, scorer)
    tau = problem.temperature
    with np.errstate(divide="ignore"):
        lse = tau * logsumexp(np.log(problem.neg_cond) + s / tau, axis=1)
    contrib = lse - np.sum(problem.pos_cond * s, axis=1)
    return RiskValue(float(problem.anchor_marginal @ contrib), contrib, problem.anchor_marginal.copy(), "population", "entropy", "linear", tau)


def population_oce_risk(problem: ContrastiveProblem, scorer, phi: Disutility, ell: PairwiseLoss) -> RiskValue:
    """E_x E_{y~p+} OCE^phi_{y'~p-}[ell(s(x,y') - s(x,y))], each inner OCE solved numerically."""
    s = _scores(problem, scorer)
    tau = problem.temperature
    ax, ay = np.nonzero(problem.pos_cond > 0)
    z = ell(s[ax] - s[ax, ay][:, None])
    vals = oce_batch(phi, z, problem.neg_cond[ax], tau).value
    contrib = np.bincount(ax, weights=problem.pos_cond[ax, ay] * vals, minlength=problem.anchor_size)
    return RiskValue(float(problem.anchor_marginal @ contrib), contrib, problem.anchor_marginal.copy(), "population_oce", phi.name, ell.name, tau)


def optimal_risk(problem: ContrastiveProblem) -> float:
    """tau E_x E_{y~p+} log(p-(y) / p+(y)), the infimum of the population risk."""
    pos, neg = problem.pos_cond, problem.neg_cond
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos > 0, pos * np.log(np.where(pos > 0, neg / pos, 1.0)), 0.0)
    return float(problem.temperature * problem.anchor_marginal @ terms.sum(axis=1))


def optimal_scorer(problem: ContrastiveProblem, g=None) -> TabularScorer:
    """tau log(p+/p-) + g(x), with finite stand-ins where the ratio vanishes.

    Items with zero positive mass have ratio 0; they get the row's smallest
    finite score minus ``40 tau`` (small enough that the risk is unaffected at
    1e-10).  Items without any mass get the smallest finite score minus
    ``10 tau``.  Both kinds are marked in ``flags``.
    """
    tau = problem.temperature
    pos, neg = problem.pos_cond, problem.neg_cond
    live = pos > 0
    with np.errstate(divide="ignore"):
        logr = np.where(live, np.log(np.where(live, density_ratio(problem), 1.0)), np.nan)
    row_min = np.nanmin(logr, axis=1, keepdims=True)
    s = tau * logr
    s = np.where(~live & (neg > 0), tau * (row_min - ZERO_MASS_OFFSET), s)
    s = np.where(~live & (neg <= 0), tau * (row_min - EMPTY_OFFSET), s)
    if g is not None:
        g = np.asarray(g, dtype=float)
        if g.shape != (problem.anchor_size,):
            raise DimensionMismatch("gauge must have one entry per anchor")
        s = s + g[:, None]
    return TabularScorer(s, flags=~live)


def tilted_positive(problem: ContrastiveProblem, scorer) -> np.ndarray:
    """Rows q_x(y) ∝ p-_x(y) exp(s(x,y)/tau)."""
    s = _scores(problem, scorer)
    with np.errstate(divide="ignore"):
        return softmax(np.log(problem.neg_cond) + s / problem.temperature, axis=1)


@dataclass(frozen=True)
class KlExcess:
    excess: float
    kl_term: float
    deviation: float

    def __iter__(self):
        return iter((self.excess, self.kl_term, self.deviation))


def kl_excess_identity(problem: ContrastiveProblem, scorer) -> KlExcess:
    """Compare L(s) - L* with tau E_x KL(p+_x || q_x), computed independently."""
    excess = population_risk(problem, scorer).value - optimal_risk(problem)
    s = _scores(problem, scorer)
    tau = problem.temperature
    with np.errstate(divide="ignore"):
        log_q = np.log(problem.neg_cond) + s / tau
    log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
    pos = problem.pos_cond
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(pos > 0, pos * (np.log(np.where(pos > 0, pos, 1.0)) - log_q), 0.0).sum(axis=1)
    kl_term = float(tau * problem.anchor_marginal @ kl)
    return KlExcess(excess, kl_term, abs(excess - kl_term))


def _sample_scores(sample, scorer) -> np.ndarray:
    return as_matrix(scorer, (sample.anchor_size, sample.item_size))


def empirical_scrl_risk(sample: ScrlSample, scorer, phi=None, ell=None, tau: float = 1.0) -> RiskValue:
    """(1/n) sum_i OCE of the m values ell(s(x_i, y'_ij) - s(x_i, y_i))."""
    if not isinstance(sample, ScrlSample) or sample.negatives.ndim != 2:
        raise ShapeMismatch("expected an SCRL sample with an (n, m) negative block")
    phi, ell = _defaults(phi, ell)
    s = _sample_scores(sample, scorer)
    x, y = sample.anchors, sample.positives
    z = ell(s[x[:, None], sample.negatives] - s[x, y][:, None])
    vals = oce_batch(phi, z, np.full(z.shape[1], 1.0 / z.shape[1]), tau).value
    w = np.full(sample.n, 1.0 / sample.n)
    return RiskValue(float(vals.mean()), vals, w, "scrl", phi.name, ell.name, tau)


def empirical_sscrl_risk(sample: SscrlSample, scorer, phi=None, ell=None, tau: float = 1.0) -> RiskValue:
    """(1/n) sum_i OCE of the m values ell(s(x_i, y'_j) - s(x_i, y_i)) over shared y'_j."""
    if not isinstance(sample, SscrlSample) or sample.negatives.ndim != 1:
        raise ShapeMismatch("expected an SSCRL sample with one shared negative list")
    phi, ell = _defaults(phi, ell)
    s = _sample_scores(sample, scorer)
    x, y = sample.anchors, sample.positives
    z = ell(s[x[:, None], sample.negatives[None, :]] - s[x, y][:, None])
    vals = oce_batch(phi, z, np.full(z.shape[1], 1.0 / z.shape[1]), tau).value
    w = np.full(sample.n, 1.0 / sample.n)
    return RiskValue(float(vals.mean()), vals, w, "sscrl", phi.name, ell.name, tau)


def empirical_logsumexp_risk(sample: ScrlSample | SscrlSample, scorer, tau: float) -> float:
    """(1/n) sum_i tau log((1/m) sum_j exp(Delta_ij / tau)), the direct formula."""
    s = _sample_scores(sample, scorer)
    x, y = sample.anchors, sample.positives
    negs = sample.negatives if sample.negatives.ndim == 2 else sample.negatives[None, :]
    d = s[x[:, None], negs] - s[x, y][:, None]
    return float(np.mean(tau * (logsumexp(d / tau, axis=1) - np.log(d.shape[1]))))


def symmetric_sscrl_risk(problem_xy: ContrastiveProblem, problem_yx: ContrastiveProblem, scorer) -> float:
    """Population risk of x -> y plus that of y -> x, sharing one score table."""
    s = as_matrix(scorer)
    if (problem_xy.anchor_size, problem_xy.item_size) != (problem_yx.item_size, problem_yx.anchor_size):
        raise DimensionMismatch("the two problems must be transposes of each other")
    return population_risk(problem_xy, s).value + population_risk(problem_yx, s.T).value


def contrast_terms(source, tau: float | None = None) -> ContrastTerms:
    if isinstance(source, ContrastTerms):
        return source
    if isinstance(source, ContrastiveProblem):
        return ContrastTerms.from_problem(source)
    if tau is None:
        raise ValueError("samples need an explicit tau")
    return ContrastTerms.from_sample(source, tau)


def risk_gradient(source, scorer, phi=None, ell=None, tau: float | None = None) -> np.ndarray:
    """Gradient of a risk in the tabular scores.

    ``source`` is a problem (population risk) or a sample (empirical risk,
    needs ``tau``).

    Raises:
        NonSmoothDisutility: ``phi`` is CVaR.
    """
    phi, ell = _defaults(phi, ell)
    terms = contrast_terms(source, tau)
    return terms.gradient(as_matrix(scorer, terms.shape), phi, ell)


def risk_value(source, scorer, phi=None, ell=None, tau: float | None = None) -> float:
    """Risk of ``scorer`` through the term representation (any source)."""
    phi, ell = _defaults(phi, ell)
    terms = contrast_terms(source, tau)
    return terms.value(as_matrix(scorer, terms.shape), phi, ell)
