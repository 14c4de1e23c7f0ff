"""Drawing SCRL (per-anchor negatives) and SSCRL (shared negatives) samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import HeterogeneousNegatives
from .probspace import ContrastiveProblem


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=np.int64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScrlSample:
    """Anchors ``x_i``, positives ``y_i`` and an ``(n, m)`` block of negatives."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    seed: int
    anchor_size: int
    item_size: int

    def __post_init__(self):
        for name in ("anchors", "positives", "negatives"):
            object.__setattr__(self, name, _ro(getattr(self, name)))

    @property
    def n(self) -> int:
        return self.anchors.size

    @property
    def m(self) -> int:
        return self.negatives.shape[1]


@dataclass(frozen=True, eq=False)
class SscrlSample:
    """Positive pairs ``(x_i, y_i)`` and one negative list shared by all anchors."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    seed: int
    anchor_size: int
    item_size: int

    def __post_init__(self):
        for name in ("anchors", "positives", "negatives"):
            object.__setattr__(self, name, _ro(getattr(self, name)))

    @property
    def n(self) -> int:
        return self.anchors.size

    @property
    def m(self) -> int:
        return self.negatives.size


def _pairs(problem: ContrastiveProblem, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    x = rng.inverse_cdf(problem.anchor_marginal, rng.stream(seed, 0).random(n))
    y = rng.inverse_cdf(problem.pos_cond[x], rng.stream(seed, 1).random(n))
    return x, y


def _check_sizes(n: int, m: int) -> None:
    if n < 1 or m < 1:
        raise ValueError(f"n and m must be positive, got n={n}, m={m}")


def sample_scrl(problem: ContrastiveProblem, n: int, m: int, seed: int) -> ScrlSample:
    """n anchors with one positive and m i.i.d. negatives each."""
    _check_sizes(n, m)
    x, y = _pairs(problem, n, seed)
    neg = rng.inverse_cdf(problem.neg_cond[x], rng.stream(seed, 2).random((n, m)))
    return ScrlSample(x, y, neg, seed, problem.anchor_size, problem.item_size)


def sample_sscrl(problem: ContrastiveProblem, n: int, m: int, seed: int) -> SscrlSample:
    """n positive pairs and m negatives drawn once from the shared negative law.

    Raises:
        HeterogeneousNegatives: the negative rows of ``problem`` differ.
    """
    _check_sizes(n, m)
    if not problem.has_shared_negatives(1e-12):
        raise HeterogeneousNegatives("shared negatives need identical negative rows")
    x, y = _pairs(problem, n, seed)
    neg = rng.inverse_cdf(problem.neg_cond[0], rng.stream(seed, 2).random(m))
    return SscrlSample(x, y, neg, seed, problem.anchor_size, problem.item_size)
