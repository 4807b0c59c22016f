"""Space-filling designs: Sobol' streams and the maximin distance criterion."""

from __future__ import annotations

import copy
import functools
import itertools
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import qmc


_BLOCK = 2**16


@functools.lru_cache(maxsize=None)
def _sobol_block(dim: int) -> np.ndarray:
    engine = qmc.Sobol(dim, scramble=False)
    block = engine.random_base2(16)
    block.setflags(write=False)
    return block


def sobol_points(dim: int, count: int, skip: int = 1) -> np.ndarray:
    """Unscrambled Sobol' points with indices ``skip .. skip + count - 1`` in ``[0, 1)^dim``.

    Index 0 is the all-zeros point; the default ``skip=1`` drops it.
    """
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if count <= 0:
        return np.empty((0, dim))
    if skip + count <= _BLOCK:
        return _sobol_block(dim)[skip : skip + count].copy()
    engine = qmc.Sobol(dim, scramble=False)
    if skip:
        engine.fast_forward(skip)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return engine.random(count)


class SobolStream:
    """Sequential Sobol' generator scaled to a box.

    Deterministic given ``(dimension, index)``; single-owner, use :meth:`clone` to fork.
    """

    table = "joe-kuo-6.21201"

    def __init__(self, dimension: int, lower=None, upper=None, index: int = 1):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.lower = np.zeros(dimension) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.ones(dimension) if upper is None else np.asarray(upper, dtype=float)
        self.index = index

    def __repr__(self):
        return f"SobolStream(dimension={self.dimension}, index={self.index})"

    def take(self, count: int) -> np.ndarray:
        u = sobol_points(self.dimension, count, skip=self.index)
        self.index += count
        return self.lower + u * (self.upper - self.lower)

    def next(self) -> np.ndarray:
        return self.take(1)[0]

    def clone(self) -> "SobolStream":
        return copy.deepcopy(self)


def min_distance(x, X) -> float:
    """Euclidean distance from ``x`` to the nearest member of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        raise ValueError("point set is empty")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(cdist(x, X).min())


def min_distances(x, X) -> np.ndarray:
    """Vectorized :func:`min_distance` over the rows of ``x``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        raise ValueError("point set is empty")
    return cdist(np.atleast_2d(x), X).min(axis=1)


def box_corners(lower, upper) -> np.ndarray:
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    return np.array([np.where(bits, upper, lower) for bits in itertools.product([0, 1], repeat=len(lower))])


@dataclass
class MaximinResult:
    x: np.ndarray
    value: float
    ranked: np.ndarray  # alternatives, best first (x itself excluded)
    ranked_values: np.ndarray


def maximin_search(
    X, lower, upper, n_candidates: Optional[int] = None, max_iter: int = 200, polish_starts: int = 4
) -> MaximinResult:
    """Maximize ``min_distance(., X)`` over a box.

    Candidates are ``256 * dim`` Sobol' points plus the ``2^dim`` corners; the best
    ``polish_starts`` are polished by a clamped simplex search, since the distance surface
    has many local maxima on the faces of the box. Remaining candidates are returned in rank order
    for callers that need a fallback.
    """
    from .inner_opt import nelder_mead_batch

    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        raise ValueError("point set is empty")
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    dim = len(lower)
    n_candidates = n_candidates or 256 * dim
    cand = np.vstack([lower + sobol_points(dim, n_candidates) * (upper - lower), box_corners(lower, upper)])
    vals = min_distances(cand, X)
    order = np.argsort(-vals, kind="stable")

    def neg(P, idx):
        return -min_distances(P.reshape(-1, dim), X).reshape(P.shape[:2])

    xb, fb = nelder_mead_batch(neg, cand[order[:polish_starts]], lower, upper, max_iter=max_iter, xtol=1e-9, ftol=1e-12)
    i = int(np.argmin(fb))
    return MaximinResult(xb[i], float(-fb[i]), cand[order[1:]], vals[order[1:]])


def maximin_next(X, lower, upper) -> np.ndarray:
    """Point of the box approximately farthest from its nearest neighbour in ``X``."""
    return maximin_search(X, lower, upper).x
