"""Finite probability spaces and contrastive problems.

A :class:`ContrastiveProblem` fixes, for every anchor ``x``, a positive item
distribution ``p_x^+`` and a negative item distribution ``p_x^-`` over a
finite item set, plus the anchor marginal and the temperature.  All risks and
retrieval quantities in this package are computed exactly against it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import rng
from .errors import (
    DegenerateClassPrior,
    DimensionMismatch,
    InfeasibleFloor,
    MissingLabelSlice,
    NotADistribution,
    SupportViolation,
    ZeroMarginal,
)

INPUT_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_simplex(a: np.ndarray, what: str, axis: int = -1) -> np.ndarray:
    """Validate rows to 1e-9 and renormalize them exactly."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NotADistribution(f"{what} has non-finite entries")
    if np.any(a < 0):
        raise NotADistribution(f"{what} has negative entries")
    sums = a.sum(axis=axis, keepdims=True)
    if np.any(np.abs(sums - 1.0) > INPUT_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise NotADistribution(f"{what} sums off by {worst:.3g}")
    return a / sums


def _check_support(pos: np.ndarray, neg: np.ndarray) -> None:
    bad = (pos > 0) & (neg <= 0)
    if np.any(bad):
        x, y = (int(v) for v in np.argwhere(bad)[0])
        raise SupportViolation(f"anchor {x}: positive mass on item {y} with zero negative mass")


@dataclass(frozen=True, eq=False)
class ContrastiveProblem:
    """Anchor marginal, positive/negative conditionals and temperature.

    Arrays are read-only; instances are safe to share between workers.
    """

    anchor_marginal: np.ndarray
    pos_cond: np.ndarray
    neg_cond: np.ndarray
    temperature: float

    @property
    def anchor_size(self) -> int:
        return self.pos_cond.shape[0]

    @property
    def item_size(self) -> int:
        return self.pos_cond.shape[1]

    @property
    def tau(self) -> float:
        return self.temperature

    @property
    def support_ok(self) -> bool:
        return not np.any((self.pos_cond > 0) & (self.neg_cond <= 0))

    def joint_positive(self) -> np.ndarray:
        """p_X(x) * p_x^+(y), the law of positive pairs."""
        return self.anchor_marginal[:, None] * self.pos_cond

    def has_shared_negatives(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.neg_cond - self.neg_cond[0]) <= tol))

    def to_dict(self) -> dict[str, Any]:
        return {
            "anchor_marginal": self.anchor_marginal.tolist(),
            "pos_cond": self.pos_cond.tolist(),
            "neg_cond": self.neg_cond.tolist(),
            "temperature": float(self.temperature),
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ContrastiveProblem":
        keys = {"anchor_marginal", "pos_cond", "neg_cond", "temperature"}
        missing = keys - set(doc)
        if missing:
            raise DimensionMismatch(f"problem document lacks {sorted(missing)}")
        return new_problem(doc["anchor_marginal"], doc["pos_cond"], doc["neg_cond"], doc["temperature"])

    @classmethod
    def from_json(cls, path: str | Path) -> "ContrastiveProblem":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(anchor_marginal, pos_cond, neg_cond, temperature, *, check_support=True) -> ContrastiveProblem:
    p_x = np.asarray(anchor_marginal, dtype=float)
    pos = np.asarray(pos_cond, dtype=float)
    neg = np.asarray(neg_cond, dtype=float)
    if p_x.ndim != 1 or pos.ndim != 2 or neg.ndim != 2:
        raise DimensionMismatch("expected a vector and two matrices")
    if pos.shape != neg.shape or pos.shape[0] != p_x.shape[0]:
        raise DimensionMismatch(f"shapes {p_x.shape}, {pos.shape}, {neg.shape} disagree")
    if pos.shape[0] < 1 or pos.shape[1] < 1:
        raise DimensionMismatch("anchor and item sets must be nonempty")
    tau = float(temperature)
    if not (np.isfinite(tau) and tau > 0):
        raise ValueError(f"temperature must be positive, got {temperature!r}")
    p_x = _check_simplex(p_x, "anchor_marginal")
    pos = _check_simplex(pos, "pos_cond")
    neg = _check_simplex(neg, "neg_cond")
    if check_support:
        _check_support(pos, neg)
    return ContrastiveProblem(_frozen(p_x), _frozen(pos), _frozen(neg), tau)


def new_problem(anchor_marginal, pos_cond, neg_cond, temperature) -> ContrastiveProblem:
    """Validate and freeze a problem.

    Raises:
        DimensionMismatch: shapes disagree.
        NotADistribution: a row is negative somewhere or sums off 1 by > 1e-9.
        SupportViolation: positive mass where the negative row is zero.
    """
    return _build(anchor_marginal, pos_cond, neg_cond, temperature)


def two_point_problem(temperature: float = 1.0) -> ContrastiveProblem:
    """One anchor, two items, p^+ = (0.8, 0.2), p^- = (0.5, 0.5)."""
    return new_problem([1.0], [[0.8, 0.2]], [[0.5, 0.5]], temperature)


def from_joint(joint_xy, temperature) -> ContrastiveProblem:
    """Self-supervised problem from a joint law of positive pairs.

    Positives follow ``p(y|x)``; every anchor shares the item marginal
    ``p_Y`` as its negative distribution.
    """
    joint = np.asarray(joint_xy, dtype=float)
    if joint.ndim != 2:
        raise DimensionMismatch("joint must be a matrix")
    if np.any(joint < 0) or abs(joint.sum() - 1.0) > INPUT_TOL:
        raise NotADistribution("joint must be nonnegative and sum to 1")
    joint = joint / joint.sum()
    p_x = joint.sum(axis=1)
    if np.any(p_x <= 0):
        raise ZeroMarginal(f"anchor {int(np.argmin(p_x))} has zero mass")
    p_y = joint.sum(axis=0)
    pos = joint / p_x[:, None]
    neg = np.broadcast_to(p_y, joint.shape)
    return _build(p_x, pos, neg, temperature)


@dataclass(frozen=True, eq=False)
class LabeledJoint:
    """Joint law of (x, y, z); ``tensor[x, y, k]`` with k=0 for z=-1, k=1 for z=+1."""

    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=float)
        if t.ndim != 3 or t.shape[2] != 2:
            raise DimensionMismatch("labeled joint must have shape (|X|, |Y|, 2)")
        if np.any(t < 0) or abs(t.sum() - 1.0) > INPUT_TOL:
            raise NotADistribution("labeled joint must be nonnegative and sum to 1")
        object.__setattr__(self, "tensor", _frozen(t / t.sum()))


def from_labeled(labeled: LabeledJoint, temperature) -> ContrastiveProblem:
    """Supervised problem: p_x^+ = p(y|x, z=+1), p_x^- = p(y|x, z=-1)."""
    t = labeled.tensor
    p_x = t.sum(axis=(1, 2))
    neg_mass = t[:, :, 0].sum(axis=1)
    pos_mass = t[:, :, 1].sum(axis=1)
    live = p_x > 0
    if np.any(live & ((neg_mass <= 0) | (pos_mass <= 0))):
        x = int(np.argmax(live & ((neg_mass <= 0) | (pos_mass <= 0))))
        raise MissingLabelSlice(f"anchor {x} lacks mass on one label")
    if not np.all(live):
        raise ZeroMarginal(f"anchor {int(np.argmin(live))} has zero mass")
    pos = t[:, :, 1] / pos_mass[:, None]
    neg = t[:, :, 0] / neg_mass[:, None]
    return _build(p_x, pos, neg, temperature)


@dataclass(frozen=True, eq=False)
class ClassStructure:
    """Class prior, per-class item law and an optional item -> class map."""

    class_prior: np.ndarray
    item_dist: np.ndarray
    label_map: np.ndarray | None = None

    def __post_init__(self):
        rho = _check_simplex(np.asarray(self.class_prior, dtype=float), "class_prior")
        dist = np.asarray(self.item_dist, dtype=float)
        if dist.ndim != 2 or dist.shape[0] != rho.shape[0]:
            raise DimensionMismatch("item_dist must have one row per class")
        dist = _check_simplex(dist, "item_dist")
        object.__setattr__(self, "class_prior", _frozen(rho))
        object.__setattr__(self, "item_dist", _frozen(dist))
        if self.label_map is not None:
            lm = np.asarray(self.label_map, dtype=int)
            if lm.shape != (dist.shape[1],) or lm.min() < 0 or lm.max() >= rho.shape[0]:
                raise DimensionMismatch("label_map must send every item to a class")
            lm.setflags(write=False)
            object.__setattr__(self, "label_map", lm)

    @property
    def n_classes(self) -> int:
        return self.class_prior.shape[0]

    def complement_dist(self) -> np.ndarray:
        """Row c is the item law given the class is *not* c."""
        rho = self.class_prior
        if np.any(rho >= 1.0):
            raise DegenerateClassPrior("a class carries all prior mass")
        mix = rho @ self.item_dist
        return (mix[None, :] - rho[:, None] * self.item_dist) / (1.0 - rho[:, None])

    def item_marginal(self) -> np.ndarray:
        return self.class_prior @ self.item_dist


def from_multiclass(classes: ClassStructure, per_class_cond, temperature, *, strict_support: bool = False) -> ContrastiveProblem:
    """Multi-class problem with class-tagged anchors.

    ``per_class_cond[c, x]`` is the law of anchor inputs given class ``c``.
    Anchor ``c * n_inputs + x`` has marginal ``rho(c) * per_class_cond[c, x]``,
    positives ``D_c`` and negatives the complement mixture.

    Disjoint class supports are the usual multi-class situation and give
    infinite density ratios, so the support check is off unless
    ``strict_support`` is set.
    """
    cond = np.asarray(per_class_cond, dtype=float)
    C = classes.n_classes
    if cond.ndim != 2 or cond.shape[0] != C:
        raise DimensionMismatch("per_class_cond must have one row per class")
    cond = _check_simplex(cond, "per_class_cond")
    neg_rows = classes.complement_dist()
    n_in = cond.shape[1]
    p_x = (classes.class_prior[:, None] * cond).reshape(C * n_in)
    pos = np.repeat(classes.item_dist, n_in, axis=0)
    neg = np.repeat(neg_rows, n_in, axis=0)
    return _build(p_x, pos, neg, temperature, check_support=strict_support)


def density_ratio(problem: ContrastiveProblem, x: int | None = None) -> np.ndarray:
    """p_x^+ / p_x^- with 0/0 read as 0; all anchors when ``x`` is None."""
    pos = problem.pos_cond if x is None else problem.pos_cond[x]
    neg = problem.neg_cond if x is None else problem.neg_cond[x]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(pos > 0, pos / neg, 0.0)
    return r


def random_problem(anchor_size: int, item_size: int, seed: int, min_mass: float, *, temperature: float | None = None) -> ContrastiveProblem:
    """Deterministic random problem with every probability entry >= ``min_mass``.

    The anchor marginal uses the same floor when it is feasible for the anchor
    count, else half the uniform mass.  The temperature is log-uniform on
    [0.1, 10] unless given.
    """
    if min_mass <= 0 or min_mass * item_size >= 1:
        raise InfeasibleFloor(f"floor {min_mass} infeasible for {item_size} items")
    g = rng.stream(seed, 0xB0B)

    def floored(k: int, floor: float, size=None) -> np.ndarray:
        d = g.dirichlet(np.ones(k), size=size)
        return floor + (1.0 - k * floor) * d

    anchor_floor = min_mass if min_mass * anchor_size < 1 else 0.5 / anchor_size
    p_x = floored(anchor_size, anchor_floor)
    pos = floored(item_size, min_mass, size=anchor_size)
    neg = floored(item_size, min_mass, size=anchor_size)
    tau = float(np.exp(g.uniform(np.log(0.1), np.log(10.0)))) if temperature is None else temperature
    return new_problem(p_x, pos, neg, tau)
