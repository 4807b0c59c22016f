"""Multistart box-constrained derivative-free minimization.

Every argmin/argmax subproblem in the package goes through here: score a space-filling
candidate set, then polish the best few candidates with a Nelder-Mead simplex whose
trial points are clamped to the box. The simplex runs many independent problems in
lock-step so that one vectorized objective call serves all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .design import sobol_points


@dataclass(frozen=True)
class SearchSpec:
    lower: np.ndarray
    upper: np.ndarray
    n_candidates: Optional[int] = None  # default 128 * dim
    top_k: int = 4
    max_iter: int = 200
    xtol: float = 1e-6
    ftol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("lower bound above upper bound")
        if self.n_candidates is not None and self.n_candidates < 1:
            raise ValueError("candidate count must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.xtol <= 0 or self.ftol <= 0:
            raise ValueError("tolerances must be positive")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def candidate_count(self) -> int:
        return self.n_candidates or 128 * self.dim

    def with_(self, **kw) -> "SearchSpec":
        return replace(self, **kw)


def candidate_points(spec: SearchSpec) -> np.ndarray:
    """Seeded space-filling candidates: a seed-dependent window of the Sobol' sequence."""
    n = spec.candidate_count
    skip = 1 + (spec.seed % 64) * n
    return spec.lower + sobol_points(spec.dim, n, skip=skip) * (spec.upper - spec.lower)


def nelder_mead_batch(fun, x0, lower, upper, max_iter=200, xtol=1e-6, ftol=1e-10, step=0.05, restarts=2):
    """Run independent clamped Nelder-Mead searches in lock-step.

    Clamping trial points to the box can flatten a simplex onto a line, after which it
    stalls. In two or more dimensions each converged search is therefore restarted from
    its best point with a fresh small simplex, up to ``restarts`` times, as long as the
    previous restart improved it.

    Args:
        fun: ``fun(P, idx) -> values`` where ``P`` has shape ``(k, m, dim)`` holding ``m``
            trial points for each of the ``k`` problems listed in ``idx``; returns ``(k, m)``.
        x0: ``(n_problems, dim)`` starting points.
        max_iter: Iteration cap per problem and per restart.

    Returns:
        ``(x_best, f_best)``; each ``f_best`` is no worse than the value at its start.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    P, dim = x0.shape
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    width = upper - lower
    all_idx = np.arange(P)

    scale = np.where(width > 0, width, 1.0)

    def fresh(x, idx, rel_step):
        # x plus one axis step per coordinate, stepping inward at the upper face
        h = rel_step * scale
        sim = np.repeat(x[:, None, :], dim + 1, axis=1)
        for j in range(dim):
            up = x[:, j] + h[j] <= upper[j]
            sim[:, j + 1, j] = np.where(up, x[:, j] + h[j], x[:, j] - h[j])
        sim = np.clip(sim, lower, upper)
        return sim, _finite(fun(sim, idx))

    simplex, fs = fresh(x0, all_idx, step)
    live = np.ones(P, dtype=bool)
    simplex, fs = _nm_loop(fun, simplex, fs, live, lower, upper, max_iter, xtol, ftol)
    restart_step = max(1e-3, 100.0 * xtol / float(np.max(scale)))
    for _ in range(restarts if dim > 1 else 0):
        idx = np.flatnonzero(live)
        best = np.argmin(fs[idx], axis=1)
        xb, fb = simplex[idx, best], fs[idx, best]
        simplex[idx], fs[idx] = fresh(xb, idx, restart_step)
        simplex, fs = _nm_loop(fun, simplex, fs, live, lower, upper, max_iter, xtol, ftol)
        # keep restarting only the searches the restart improved
        live[idx] = fs[idx].min(axis=1) < fb - ftol * (1.0 + np.abs(fb))
        if not live.any():
            break

    best = np.argmin(fs, axis=1)
    return simplex[all_idx, best], fs[all_idx, best]


def _nm_loop(fun, simplex, fs, live, lower, upper, max_iter, xtol, ftol):
    """Advance the ``live`` searches until they converge or hit ``max_iter``."""
    for _ in range(max_iter):
        order = np.argsort(fs, axis=1, kind="stable")
        simplex = np.take_along_axis(simplex, order[:, :, None], axis=1)
        fs = np.take_along_axis(fs, order, axis=1)
        xspread = np.max(np.abs(simplex[:, 1:] - simplex[:, :1]), axis=(1, 2))
        fspread = np.max(np.abs(fs[:, 1:] - fs[:, :1]), axis=1)
        done = (xspread <= xtol) & (fspread <= ftol * (1.0 + np.abs(fs[:, 0])))
        act = np.flatnonzero(~done & live)
        if act.size == 0:
            break
        S, F = simplex[act], fs[act]
        centroid = S[:, :-1].mean(axis=1)
        worst = S[:, -1]
        dirn = centroid - worst
        trial = np.clip(
            np.stack([centroid + dirn, centroid + 2.0 * dirn, centroid + 0.5 * dirn, centroid - 0.5 * dirn], axis=1),
            lower,
            upper,
        )
        ft = _finite(fun(trial, act))
        fr, fe, foc, fic = ft.T
        f0, fsec, fw = F[:, 0], F[:, -2], F[:, -1]

        new_x = np.full_like(worst, np.nan)
        new_f = np.full_like(fw, np.nan)
        expand = (fr < f0) & (fe < fr)
        reflect = ((fr < f0) & ~expand) | ((fr >= f0) & (fr < fsec))
        outside = (fr >= fsec) & (fr < fw) & (foc <= fr)
        inside = (fr >= fw) & (fic < fw)
        for mask, k in ((expand, 1), (reflect, 0), (outside, 2), (inside, 3)):
            new_x[mask] = trial[mask, k]
            new_f[mask] = ft[mask, k]
        shrink = ~(expand | reflect | outside | inside)

        keep = ~shrink
        S[keep, -1] = new_x[keep]
        F[keep, -1] = new_f[keep]
        if np.any(shrink):
            Ss = S[shrink]
            Ss[:, 1:] = Ss[:, :1] + 0.5 * (Ss[:, 1:] - Ss[:, :1])
            S[shrink] = Ss
            F[shrink, 1:] = _finite(fun(Ss[:, 1:], act[shrink]))
        simplex[act], fs[act] = S, F
    return simplex, fs


def _finite(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.where(np.isfinite(v), v, np.inf)


class BatchResult(NamedTuple):
    x: np.ndarray  # (B, dim)
    fun: np.ndarray  # (B,)
    candidates: np.ndarray  # (N, dim), shared by all problems
    candidate_values: np.ndarray  # (B, N)


def batch_minimize(objective, spec: SearchSpec, n_problems: int = 1, extra_starts=None, candidates=None) -> BatchResult:
    """Minimize ``n_problems`` related objectives sharing one box.

    Args:
        objective: ``objective(P, idx) -> values`` as in :func:`nelder_mead_batch`, with ``idx``
            indexing the problems.
        extra_starts: optional ``(n_problems, dim)`` warm starts polished alongside the best candidates.
        candidates: overrides the seeded candidate set.
    """
    cand = candidate_points(spec) if candidates is None else np.atleast_2d(np.asarray(candidates, dtype=float))
    idx = np.arange(n_problems)
    vals = _finite(objective(np.broadcast_to(cand, (n_problems,) + cand.shape), idx))
    if not np.any(np.isfinite(vals), axis=1).all():
        raise ValueError("objective is non-finite at every candidate")
    k = min(spec.top_k, len(cand))
    top = np.argsort(vals, axis=1, kind="stable")[:, :k]
    starts = cand[top]  # (B, k, dim)
    start_vals = np.take_along_axis(vals, top, axis=1)
    if extra_starts is not None:
        extra = np.clip(np.atleast_2d(extra_starts), spec.lower, spec.upper).reshape(n_problems, 1, spec.dim)
        starts = np.concatenate([starts, extra], axis=1)
        k += 1
    owner = np.repeat(idx, k)

    def flat(P, sub):
        return objective(P, owner[sub])

    xs, fs = nelder_mead_batch(
        flat,
        starts.reshape(-1, spec.dim),
        spec.lower,
        spec.upper,
        spec.max_iter,
        spec.xtol,
        spec.ftol,
    )
    fs = fs.reshape(n_problems, k)
    xs = xs.reshape(n_problems, k, spec.dim)
    # stable argmin keeps the lowest-ranked start on ties
    best = np.argmin(fs, axis=1)
    x_best, f_best = xs[idx, best], fs[idx, best]
    worse = f_best > start_vals[:, 0]
    if np.any(worse):
        x_best[worse], f_best[worse] = starts[worse, 0], start_vals[worse, 0]
    return BatchResult(x_best, f_best, cand, vals)


def _vectorize(objective: Callable, vectorized: bool):
    if vectorized:
        return lambda P, idx: np.asarray(objective(P.reshape(-1, P.shape[-1])), dtype=float).reshape(P.shape[:2])

    def looped(P, idx):
        flat = P.reshape(-1, P.shape[-1])
        return np.array([objective(x) for x in flat], dtype=float).reshape(P.shape[:2])

    return looped


def search(objective: Callable, spec: SearchSpec, vectorized: bool = False, extra_start=None) -> BatchResult:
    """Single-problem :func:`batch_minimize`; keeps the candidate ranking for fallbacks."""
    extra = None if extra_start is None else np.asarray(extra_start, dtype=float).reshape(1, -1)
    res = batch_minimize(_vectorize(objective, vectorized), spec, 1, extra)
    return BatchResult(res.x[0], float(res.fun[0]), res.candidates, res.candidate_values[0])


def minimize(objective: Callable, spec: SearchSpec, vectorized: bool = False):
    """Return ``(argmin, min value)`` of ``objective`` over the box of ``spec``.

    ``objective`` maps a point to a float, or an ``(N, dim)`` array to ``N`` values when
    ``vectorized`` is set.
    """
    res = search(objective, spec, vectorized)
    return res.x, res.fun


def maximize(objective: Callable, spec: SearchSpec, vectorized: bool = False):
    """Return ``(argmax, max value)``; defined as :func:`minimize` of the negation."""
    if vectorized:
        neg = lambda X: -np.asarray(objective(X), dtype=float)  # noqa: E731
    else:
        neg = lambda x: -objective(x)  # noqa: E731
    x, v = minimize(neg, spec, vectorized)
    return x, -v


def profile_argmin(fun, T, spec: SearchSpec, candidates=None, chunk: int = 256):
    """Minimize ``s -> fun(s, t)`` over the box of ``spec`` separately for every row ``t`` of ``T``.

    ``fun(S, T)`` is vectorized over matching rows. Rows are processed in chunks to bound memory.

    Returns:
        ``(S_best, values)`` with shapes ``(len(T), dim)`` and ``(len(T),)``.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    S_out = np.empty((len(T), spec.dim))
    v_out = np.empty(len(T))
    for lo in range(0, len(T), chunk):
        Tc = T[lo : lo + chunk]

        def objective(P, idx, Tc=Tc):
            k, m, _ = P.shape
            Tr = np.broadcast_to(Tc[idx][:, None, :], (k, m, Tc.shape[1]))
            return np.asarray(fun(P.reshape(k * m, -1), Tr.reshape(k * m, -1)), dtype=float).reshape(k, m)

        res = batch_minimize(objective, spec, len(Tc), candidates=candidates)
        S_out[lo : lo + chunk] = res.x
        v_out[lo : lo + chunk] = res.fun
    return S_out, v_out
