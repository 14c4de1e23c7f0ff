"""Optimized certainty equivalents, pairwise losses and DRO duality checks.

For a disutility ``phi`` the OCE of a discrete random value ``z`` with
weights ``w`` at temperature ``tau`` is

    OCE(z) = min_mu  tau * sum_j w_j phi((z_j - mu) / tau) + mu.

The objective is convex in ``mu`` and its minimizer lies in
``[min z, max z]`` (over positive-weight entries), so every evaluation here is
a bracketed 1-D solve.  :func:`oce_batch` runs many such solves at once; it is
the workhorse behind the risks and the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .errors import NonFiniteInput, NotADistribution, SimplexTooLarge

MU_TOL = 1e-12
MAX_ITER = 400
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# disutilities


class Disutility:
    """Base class; subclasses set ``name`` and implement the evaluators."""

    name: str = "?"
    smooth: bool = True

    def __call__(self, t):
        raise NotImplementedError

    def grad(self, t):
        """Derivative (a subgradient at kinks)."""
        raise NotImplementedError

    def subgradient(self, t):
        """Lower and upper ends of the subdifferential at ``t``."""
        g = self.grad(t)
        return g, g

    def constants(self, lo: float, hi: float) -> tuple[float, float]:
        """Lipschitz constant and strong-convexity modulus on ``[lo, hi]``."""
        raise NotImplementedError

    def divergence(self) -> "Divergence":
        """The conjugate divergence of the DRO representation."""
        raise NotImplementedError

    def _root(self, z, w, mu, tau):
        """Decreasing function of ``mu`` vanishing at the OCE minimizer, and its slope."""
        t = (z - mu[..., None]) / tau
        g = np.sum(w * self.grad(t), axis=-1) - 1.0
        return g, -np.sum(w * self._curv(t), axis=-1) / tau

    def _curv(self, t):
        raise NotImplementedError

    def sensitivity(self, z, w, mu, tau):
        """``w_j * phi'((z_j - mu)/tau)``, the derivative of the OCE in ``z_j`` at the minimizer."""
        return w * self.grad((z - np.asarray(mu)[..., None]) / tau)

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __hash__(self) -> int:
        return hash((type(self).__name__, tuple(sorted(self.__dict__.items()))))


class Identity(Disutility):
    """phi(t) = t; the OCE is the weighted mean."""

    name = "identity"

    def __call__(self, t):
        return np.asarray(t, dtype=float) * 1.0

    def grad(self, t):
        return np.ones_like(np.asarray(t, dtype=float))

    def _curv(self, t):
        return np.zeros_like(t)

    def constants(self, lo, hi):
        return 1.0, 0.0

    def divergence(self):
        return Divergence("identity")


class EntropyRisk(Disutility):
    """phi(t) = exp(t) - 1; the OCE is tau * log E exp(z / tau)."""

    name = "entropy"

    def __call__(self, t):
        return np.expm1(t)

    def grad(self, t):
        return np.exp(t)

    def _curv(self, t):
        return np.exp(t)

    def _root(self, z, w, mu, tau):
        # log of sum_j w_j exp((z_j - mu)/tau); linear in mu, so Newton is exact
        with np.errstate(divide="ignore"):
            lw = np.log(w)
        h = logsumexp(lw + (z - mu[..., None]) / tau, axis=-1)
        return h, np.full_like(h, -1.0 / tau)

    def sensitivity(self, z, w, mu, tau):
        with np.errstate(divide="ignore"):
            lw = np.log(w)
        return np.exp(lw + (z - np.asarray(mu)[..., None]) / tau)

    def constants(self, lo, hi):
        return math.exp(hi), math.exp(lo)

    def divergence(self):
        return Divergence("kl")


class MeanVariance(Disutility):
    """phi(t) = t^2/2 + t for t >= -1, held at -1/2 below."""

    name = "mean_variance"

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= -1.0, 0.5 * t * t + t, -0.5)

    def grad(self, t):
        return np.maximum(np.asarray(t, dtype=float) + 1.0, 0.0)

    def _curv(self, t):
        return (t > -1.0).astype(float)

    def constants(self, lo, hi):
        return max(hi + 1.0, 0.0), 1.0 if lo >= -1.0 else 0.0

    def divergence(self):
        return Divergence("chi2")


class CVaR(Disutility):
    """phi(t) = max(t, 0) / alpha; the OCE averages the upper alpha tail."""

    name = "cvar"
    smooth = False

    def __init__(self, alpha: float):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        self.alpha = float(alpha)

    def __call__(self, t):
        return np.maximum(np.asarray(t, dtype=float), 0.0) / self.alpha

    def grad(self, t):
        # right derivative at the kink
        return np.where(np.asarray(t, dtype=float) >= 0.0, 1.0 / self.alpha, 0.0)

    def subgradient(self, t):
        t = np.asarray(t, dtype=float)
        lo = np.where(t > 0.0, 1.0 / self.alpha, 0.0)
        hi = np.where(t >= 0.0, 1.0 / self.alpha, 0.0)
        return lo, hi

    def constants(self, lo, hi):
        return (1.0 / self.alpha if hi >= 0.0 else 0.0), 0.0

    def divergence(self):
        return Divergence("cvar_box", self.alpha)

    def __repr__(self):
        return f"CVaR(alpha={self.alpha})"


DISUTILITIES = {"identity": Identity, "entropy": EntropyRisk, "mean_variance": MeanVariance, "cvar": CVaR}


def disutility(name: str, alpha: float = 0.5) -> Disutility:
    """Look a disutility up by name (``cvar`` takes ``alpha``)."""
    if name not in DISUTILITIES:
        raise ValueError(f"unknown disutility {name!r}; choose from {sorted(DISUTILITIES)}")
    return CVaR(alpha) if name == "cvar" else DISUTILITIES[name]()


# ---------------------------------------------------------------------------
# pairwise losses


class PairwiseLoss:
    name: str = "?"

    def __call__(self, t):
        raise NotImplementedError

    def grad(self, t):
        raise NotImplementedError

    def constants(self, bound: float) -> tuple[float, float]:
        """Lipschitz constant G and range bound M on ``[-2B, 2B]``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self).__name__)


class Linear(PairwiseLoss):
    name = "linear"

    def __call__(self, t):
        return np.asarray(t, dtype=float) * 1.0

    def grad(self, t):
        return np.ones_like(np.asarray(t, dtype=float))

    def constants(self, bound):
        return 1.0, 2.0 * bound


class Exponential(PairwiseLoss):
    name = "exponential"

    def __call__(self, t):
        return np.exp(t)

    def grad(self, t):
        return np.exp(t)

    def constants(self, bound):
        e = math.exp(2.0 * bound)
        return e, e


class SoftPlus(PairwiseLoss):
    name = "softplus"

    def __call__(self, t):
        return np.logaddexp(0.0, t)

    def grad(self, t):
        return expit(t)

    def constants(self, bound):
        return float(expit(2.0 * bound)), float(np.logaddexp(0.0, 2.0 * bound))


class SquaredHinge(PairwiseLoss):
    name = "squared_hinge"

    def __call__(self, t):
        return np.maximum(0.0, 1.0 + np.asarray(t, dtype=float)) ** 2

    def grad(self, t):
        return 2.0 * np.maximum(0.0, 1.0 + np.asarray(t, dtype=float))

    def constants(self, bound):
        return 2.0 * (1.0 + 2.0 * bound), (1.0 + 2.0 * bound) ** 2


LOSSES = {"linear": Linear, "exponential": Exponential, "softplus": SoftPlus, "squared_hinge": SquaredHinge}


def pairwise_loss(name: str) -> PairwiseLoss:
    if name not in LOSSES:
        raise ValueError(f"unknown pairwise loss {name!r}; choose from {sorted(LOSSES)}")
    return LOSSES[name]()


# ---------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class OceResult:
    """Solution of one (or, with array fields, many) OCE problems."""

    value: float | np.ndarray
    minimizer: float | np.ndarray
    bracket: tuple
    iterations: int | np.ndarray

    @property
    def mu(self):
        return self.minimizer


def oce_objective(phi: Disutility, values, weights, mu, tau: float) -> np.ndarray:
    """tau * sum_j w_j phi((z_j - mu)/tau) + mu, vectorized over leading axes."""
    z = np.asarray(values, dtype=float)
    mu = np.asarray(mu, dtype=float)
    t = (z - mu[..., None]) / tau
    term = np.where(np.asarray(weights) > 0, np.asarray(weights) * phi(t), 0.0)
    return tau * term.sum(axis=-1) + mu


def _bracket(z, w):
    live = w > 0
    lo = np.where(live, z, np.inf).min(axis=-1)
    hi = np.where(live, z, -np.inf).max(axis=-1)
    return lo, hi


def _solve_smooth(phi, z, w, tau, lo, hi):
    """Newton on the first-order condition, safeguarded by bisection."""
    a, b = lo.copy(), hi.copy()
    mu = 0.5 * (a + b)
    iters = np.zeros(mu.shape, dtype=int)
    active = b - a > MU_TOL
    for _ in range(MAX_ITER):
        if not active.any():
            break
        g, dg = phi._root(z[active], w[active], mu[active], tau)
        m, aa, bb = mu[active], a[active], b[active]
        aa = np.where(g > 0, m, aa)
        bb = np.where(g <= 0, m, bb)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(dg < 0, m - g / dg, np.nan)
        tiny = np.isfinite(step) & (np.abs(step - m) <= MU_TOL)
        inside = np.isfinite(step) & (step > aa) & (step < bb)
        new = np.where(inside, step, 0.5 * (aa + bb))
        new = np.where(tiny, np.clip(step, aa, bb), new)
        done = tiny | (bb - aa <= MU_TOL)
        mu[active], a[active], b[active] = new, aa, bb
        iters[active] += 1
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return mu, iters


def _solve_golden(phi, z, w, tau, lo, hi):
    """Golden-section search, then snap to the best nearby breakpoint."""
    a, b = lo.copy(), hi.copy()
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = oce_objective(phi, z, w, c, tau)
    fd = oce_objective(phi, z, w, d, tau)
    iters = np.zeros(a.shape, dtype=int)
    for _ in range(MAX_ITER):
        active = b - a > MU_TOL
        if not active.any():
            break
        left = fc < fd
        na, nb = np.where(left, a, c), np.where(left, d, b)
        nc = np.where(left, nb - _GOLDEN * (nb - na), d)
        nd = np.where(left, c, na + _GOLDEN * (nb - na))
        fp = oce_objective(phi, z, w, np.where(left, nc, nd), tau)
        nfc, nfd = np.where(left, fp, fd), np.where(left, fc, fp)
        a, b = np.where(active, na, a), np.where(active, nb, b)
        c, d = np.where(active, nc, c), np.where(active, nd, d)
        fc, fd = np.where(active, nfc, fc), np.where(active, nfd, fd)
        iters += active
    mu = 0.5 * (a + b)
    # the objective is piecewise linear with kinks at the z_j; its minimum sits on one
    live = w > 0
    below = np.where(live & (z <= mu[..., None]), z, -np.inf).max(axis=-1)
    above = np.where(live & (z >= mu[..., None]), z, np.inf).min(axis=-1)
    below = np.where(np.isfinite(below), below, mu)
    above = np.where(np.isfinite(above), above, mu)
    cands = np.stack([mu, below, above], axis=-1)
    vals = np.stack([oce_objective(phi, z, w, cands[..., k], tau) for k in range(3)], axis=-1)
    mu = np.take_along_axis(cands, vals.argmin(axis=-1)[..., None], axis=-1)[..., 0]
    return mu, iters


def oce_batch(phi: Disutility, values, weights, tau: float) -> OceResult:
    """Solve OCE problems along the last axis of ``values``.

    ``weights`` broadcasts against ``values``; each row must be a distribution.
    Returns an :class:`OceResult` whose fields are arrays over the leading axes.
    """
    z = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("OCE values must be finite")
    if not (np.isfinite(tau) and tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    w = np.broadcast_to(np.asarray(weights, dtype=float), z.shape)
    shape = z.shape[:-1]
    z2 = z.reshape(-1, z.shape[-1])
    w2 = np.ascontiguousarray(w).reshape(-1, z.shape[-1])
    lo, hi = _bracket(z2, w2)
    if isinstance(phi, Identity):
        mu = 0.5 * (lo + hi)
        value = np.sum(w2 * z2, axis=-1)
        iters = np.zeros(mu.shape, dtype=int)
    else:
        solver = _solve_smooth if phi.smooth else _solve_golden
        mu, iters = solver(phi, z2, w2, tau, lo, hi)
        value = oce_objective(phi, z2, w2, mu, tau)
        value = np.where(hi - lo <= 0, lo, value)
    r = lambda a: a.reshape(shape)
    return OceResult(r(value), r(mu), (r(lo), r(hi)), r(iters))


def _check_weights(weights, size):
    w = np.asarray(weights, dtype=float)
    if w.shape != (size,):
        raise NotADistribution(f"expected {size} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise NotADistribution("weights must be nonnegative and sum to 1")
    return w / w.sum()


def _scalar(res: OceResult) -> OceResult:
    lo, hi = res.bracket
    return OceResult(float(res.value), float(res.minimizer), (float(lo), float(hi)), int(res.iterations))


def oce_weighted(phi: Disutility, values, weights, tau: float) -> OceResult:
    """OCE of a discrete value distribution.

    Example:
        >>> round(oce_weighted(EntropyRisk(), [0.0, math.log(3)], [0.5, 0.5], 1.0).value, 6)
        0.693147
    """
    z = np.asarray(values, dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("values must be a nonempty vector")
    return _scalar(oce_batch(phi, z, _check_weights(weights, z.size), tau))


def oce_empirical(phi: Disutility, samples, tau: float) -> OceResult:
    """OCE under the uniform empirical distribution of ``samples``."""
    z = np.asarray(samples, dtype=float)
    return oce_weighted(phi, z, np.full(z.size, 1.0 / z.size), tau)


def log_mean_exp(samples, tau: float) -> float:
    """tau * log((1/m) sum_j exp(z_j / tau)), computed stably."""
    z = np.asarray(samples, dtype=float)
    return float(tau * (logsumexp(z / tau) - math.log(z.size)))


def logsumexp_identity_check(samples, tau: float) -> float:
    """|tau log-mean-exp(z/tau) - (min_mu tau mean exp((z - mu)/tau) + mu - tau)|.

    The right side is minimized numerically over ``mu`` in ``[-2B, 2B]`` with
    ``B = max|z| / 2`` and evaluated literally at the minimizer.
    """
    z = np.asarray(samples, dtype=float)
    lhs = log_mean_exp(z, tau)
    res = oce_empirical(EntropyRisk(), z, tau)
    bound = float(np.max(np.abs(z))) / 2.0
    mu = min(max(res.minimizer, -2.0 * bound), 2.0 * bound)
    rhs = -tau + tau * float(np.mean(np.exp((z - mu) / tau))) + mu
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# DRO


@dataclass(frozen=True)
class DroDual:
    """Value of the KL-penalized worst case and the maximizing reweighting."""

    value: float
    tilt: np.ndarray = field(repr=False)


def dro_dual_kl(values, weights, tau: float) -> DroDual:
    """max_p sum_j p_j z_j - tau KL(p, w), via the exponential tilt p ∝ w exp(z/tau)."""
    z = np.asarray(values, dtype=float)
    w = _check_weights(weights, z.size)
    with np.errstate(divide="ignore"):
        logits = np.log(w) + z / tau
    lse = logsumexp(logits)
    tilt = np.exp(logits - lse)
    return DroDual(float(tau * lse), tilt)


@dataclass(frozen=True)
class Divergence:
    """phi-divergence D(p, q) = sum_j q_j f(p_j / q_j) with generator f.

    ``kl``: f(s) = s log s - s + 1; ``chi2``: f(s) = (s - 1)^2 / 2 on s >= 0;
    ``cvar_box``: f = 0 on [0, 1/alpha], infinite elsewhere; ``identity``:
    f = 0 at s = 1 only.
    """

    kind: str
    alpha: float = 0.5

    def generator(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "kl":
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.where(s > 0, s * np.log(s) - s + 1.0, 1.0)
        elif self.kind == "chi2":
            v = 0.5 * (s - 1.0) ** 2
        elif self.kind == "cvar_box":
            v = np.where(s <= 1.0 / self.alpha + 1e-12, 0.0, np.inf)
        elif self.kind == "identity":
            v = np.where(np.abs(s - 1.0) <= 1e-12, 0.0, np.inf)
        else:
            raise ValueError(f"unknown divergence {self.kind!r}")
        return np.where(s >= 0, v, np.inf)

    def __call__(self, p, q) -> float:
        p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
        return float(np.sum(self._terms(p, q)))

    def _terms(self, p, q):
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = q * self.generator(np.where(q > 0, p / np.where(q > 0, q, 1.0), 0.0))
        # q_j = 0: only p_j = 0 is admissible
        return np.where(q > 0, inner, np.where(p > 0, np.inf, 0.0))


def _maxplus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[k] = max_{i <= k} a[i] + b[k - i]."""
    n = a.size
    i = np.arange(n)
    k = i[None, :] - i[:, None]  # row i, column k
    with np.errstate(invalid="ignore"):
        m = np.where(k >= 0, a[:, None] + b[np.clip(k, 0, None)], -np.inf)
    return m.max(axis=0)


def dro_primal_grid(divergence: Divergence, values, weights, tau: float, grid_step: float = 1e-3) -> float:
    """Brute-force max over the simplex grid of sum_j p_j z_j - tau D(p, w).

    The objective separates across coordinates, so the search over all grid
    points with coordinates summing to one is a max-plus convolution of
    per-coordinate tables; the result equals exhaustive enumeration.
    """
    z = np.asarray(values, dtype=float)
    if z.size > 4:
        raise SimplexTooLarge(f"simplex grid search supports m <= 4, got {z.size}")
    if not 0 < grid_step <= 1e-2 + 1e-15:
        raise ValueError("grid_step must lie in (0, 1e-2]")
    w = _check_weights(weights, z.size)
    steps = int(round(1.0 / grid_step))
    p = np.arange(steps + 1) / steps
    tables = [p * z[j] - tau * divergence._terms(p, np.full_like(p, w[j])) for j in range(z.size)]
    acc = tables[0]
    for t in tables[1:]:
        acc = _maxplus(acc, t)
    return float(acc[steps])
