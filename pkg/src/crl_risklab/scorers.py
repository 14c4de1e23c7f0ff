"""Scoring functions s(x, y) on finite anchor/item sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteInput


def _readonly(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularScorer:
    """A full score matrix, one row per anchor.

    ``flags`` marks entries that hold a finite stand-in for a score of minus
    infinity (see :func:`crl_risklab.risks.optimal_scorer`).
    """

    matrix: np.ndarray
    flags: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2:
            raise DimensionMismatch("score matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            raise NonFiniteInput("scores must be finite")
        object.__setattr__(self, "matrix", _readonly(m))
        if self.flags is not None:
            f = np.asarray(self.flags, dtype=bool)
            if f.shape != m.shape:
                raise DimensionMismatch("flags must match the score matrix")
            object.__setattr__(self, "flags", _readonly(f, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def scores(self) -> np.ndarray:
        return self.matrix

    @property
    def bound(self) -> float:
        return float(np.max(np.abs(self.matrix)))

    def delta(self, x, y, y_prime):
        """s(x, y') - s(x, y)."""
        return self.matrix[x, y_prime] - self.matrix[x, y]

    def to_tabular(self) -> "TabularScorer":
        return self

    def shifted(self, g) -> "TabularScorer":
        """Add the per-anchor gauge ``g(x)`` to every score."""
        return TabularScorer(self.matrix + np.asarray(g, dtype=float)[:, None], self.flags)

    @classmethod
    def constant(cls, anchor_size: int, item_size: int, value: float = 0.0) -> "TabularScorer":
        return cls(np.full((anchor_size, item_size), float(value)))


@dataclass(frozen=True, eq=False)
class LinearEmbedScorer:
    """s(x, y) = <U_x, V_y> with anchor embeddings U and item embeddings V."""

    anchor_embed: np.ndarray
    item_embed: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.anchor_embed, dtype=float)
        v = np.asarray(self.item_embed, dtype=float)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise DimensionMismatch(f"embeddings {u.shape} and {v.shape} are incompatible")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NonFiniteInput("embeddings must be finite")
        object.__setattr__(self, "anchor_embed", _readonly(u))
        object.__setattr__(self, "item_embed", _readonly(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.anchor_embed.shape[0], self.item_embed.shape[0]

    @property
    def dim(self) -> int:
        return self.anchor_embed.shape[1]

    def scores(self) -> np.ndarray:
        return self.anchor_embed @ self.item_embed.T

    @property
    def bound(self) -> float:
        return float(np.max(np.abs(self.scores())))

    def delta(self, x, y, y_prime):
        return self.anchor_embed[x] @ (self.item_embed[y_prime] - self.item_embed[y])

    def to_tabular(self) -> TabularScorer:
        return TabularScorer(self.scores())

    @classmethod
    def from_tabular(cls, scorer: TabularScorer) -> "LinearEmbedScorer":
        """Exact factorization S = I S: identity anchor embeddings, items carry the columns."""
        s = scorer.matrix
        return cls(np.eye(s.shape[0]), s.T.copy())


Scorer = TabularScorer | LinearEmbedScorer


def as_matrix(scorer, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Score matrix of any scorer, checked against ``shape`` when given."""
    if isinstance(scorer, (TabularScorer, LinearEmbedScorer)):
        s = scorer.scores()
    else:
        s = np.asarray(scorer, dtype=float)
    if shape is not None and s.shape != tuple(shape):
        raise DimensionMismatch(f"scorer shape {s.shape} does not match problem {tuple(shape)}")
    return s


def random_scorer(anchor_size: int, item_size: int, rng: np.random.Generator, scale: float) -> TabularScorer:
    """Entries uniform on ``[-scale, scale]``."""
    return TabularScorer(rng.uniform(-scale, scale, size=(anchor_size, item_size)))
