"""Sequential designs (``sha1``, ``sha2``) for estimating the best decision per environment.

Each iteration fits the Kriging surrogate, picks the next environmental value ``t`` and
then the control ``s`` minimizing the lower prediction bound at that ``t``:

* ``sha1`` picks ``t`` farthest from the environmental values already run (maximin distance);
* ``sha2`` picks ``t`` where the predictive sd at the lower-bound minimizer ``(s(t), t)`` is largest.

The profile optimal surface is estimated by minimizing the predictive mean over ``s``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .design import maximin_search, sobol_points
from .gp import Dataset, Domain, GPConfig, GpModel, fit_model
from .inner_opt import SearchSpec, batch_minimize, profile_argmin

log = logging.getLogger(__name__)

VARIANTS = ("sha1", "sha2")
STOP_MODES = ("integral", "maximum", "budget")
REL_FLOOR = 1e-8


@dataclass(frozen=True)
class SearchSettings:
    """Inner-search knobs shared by the acquisition and POS subproblems."""

    n_candidates: Optional[int] = None  # per dimension default 128
    top_k: int = 4
    max_iter: int = 200
    xtol: float = 1e-6
    ftol: float = 1e-10

    def spec(self, lower, upper, seed: int) -> SearchSpec:
        return SearchSpec(
            lower, upper, self.n_candidates, self.top_k, self.max_iter, self.xtol, self.ftol, seed
        )


@dataclass(frozen=True)
class ShaConfig:
    variant: str = "sha2"
    n0: int = 10
    alpha: float = 0.5
    budget: int = 40
    eps1: float = 1e-3
    eps2: float = 1e-3
    stop_mode: str = "budget"
    stop_grid_size: Optional[int] = None  # default 128 * q
    seed: int = 0
    gp: GPConfig = GPConfig()
    search: SearchSettings = SearchSettings()
    # the outer search over t only needs to land near the peak of the sd profile
    acquisition: SearchSettings = SearchSettings(xtol=1e-4, ftol=1e-6)

    def validate(self, domain: Domain) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.stop_mode not in STOP_MODES:
            raise ValueError(f"stop_mode must be one of {STOP_MODES}, got {self.stop_mode!r}")
        if self.n0 < domain.d + 2:
            raise ValueError(f"n0 must be >= d + 2 = {domain.d + 2}, got {self.n0}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.budget < self.n0:
            raise ValueError(f"budget {self.budget} is below n0 {self.n0}")


class AcquisitionResult(NamedTuple):
    t_next: np.ndarray
    s_next: np.ndarray
    lower: float  # L(s_next, t_next)
    sd: float  # predictive sd at the chosen point
    criterion: float  # maximin distance (sha1) or sd at the lower-bound minimizer (sha2)


@dataclass
class ShaState:
    data: Dataset
    model: GpModel
    iteration: int = 0
    history: list = field(default_factory=list)
    pos_snapshot: Optional[np.ndarray] = None  # predicted optimal value per t on the stop grid
    stop_grid: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.data.n


class StopCheck(NamedTuple):
    stop: bool
    reason: str
    rel_change: float
    sd_stat: float
    snapshot: Optional[np.ndarray]


class TraceEntry(NamedTuple):
    iteration: int
    n: int
    acquisition: Optional[AcquisitionResult]
    theta: np.ndarray
    rel_change: float
    sd_stat: float


class ShaRunError(RuntimeError):
    """A run failed part-way; ``state`` and ``trace`` hold what was completed."""

    def __init__(self, message, state, trace):
        super().__init__(message)
        self.state = state
        self.trace = trace


def subseed(seed: int, n: int, purpose: int) -> int:
    return (seed * 1_000_003 + n * 7_919 + purpose * 104_729) % (2**31 - 1)


# --- profile subproblems -------------------------------------------------------------


def _s_spec(model: GpModel, settings: SearchSettings, seed: int) -> SearchSpec:
    dom = model.domain
    return settings.spec(dom.s_lower, dom.s_upper, seed)


def profile_lcb_min_batch(model: GpModel, T, alpha: float, settings=SearchSettings(), seed: int = 0):
    """Minimizer of the lower bound over ``s`` and its value, for every row of ``T``.

    ``alpha == 1`` minimizes the predictive mean (the quantile term vanishes).
    """
    dom = model.domain
    if alpha >= 1.0:
        fun = lambda S, Tr: model.mean(dom.join(S, Tr))  # noqa: E731
    else:
        q = model.quantile(alpha)

        def fun(S, Tr):
            mean, sd = model.mean_sd(dom.join(S, Tr))
            return mean - q * sd

    return profile_argmin(fun, T, _s_spec(model, settings, seed))


def profile_lcb_min(model: GpModel, t, alpha: float, settings=SearchSettings(), seed: int = 0):
    """Return ``(s, lower bound at (s, t))`` minimizing the bound for a single ``t``."""
    S, L = profile_lcb_min_batch(model, np.reshape(t, (1, -1)), alpha, settings, seed)
    return S[0], float(L[0])


def estimate_pos_batch(model: GpModel, T, settings=SearchSettings(), seed: int = 0) -> np.ndarray:
    """Estimated best decision ``argmin_s mean(s, t)`` at the rows of ``T``."""
    return profile_lcb_min_batch(model, T, 1.0, settings, seed)[0]


def estimate_pos(model: GpModel, t, settings=SearchSettings(), seed: int = 0) -> np.ndarray:
    return estimate_pos_batch(model, np.reshape(t, (1, -1)), settings, seed)[0]


# --- environmental selection ---------------------------------------------------------


class _Ranked(NamedTuple):
    t: np.ndarray  # (k, q), best first
    score: np.ndarray  # (k,)


def _rank_sha1(state: ShaState) -> _Ranked:
    dom = state.data.domain
    _, T = dom.split(state.data.points)
    res = maximin_search(T, dom.t_lower, dom.t_upper)
    return _Ranked(np.vstack([res.x, res.ranked]), np.concatenate([[res.value], res.ranked_values]))


def select_t_sha1(state: ShaState) -> np.ndarray:
    """Environmental value maximizing the distance to those already in the design."""
    return _rank_sha1(state).t[0]


def _rank_sha2(state: ShaState, alpha: float, settings: SearchSettings, seed: int, outer=None) -> _Ranked:
    model = state.model
    dom = model.domain
    inner_seed = subseed(seed, state.n, 1)

    def neg_sd(P, idx):
        k, m, q = P.shape
        T = P.reshape(k * m, q)
        S, _ = profile_lcb_min_batch(model, T, alpha, settings, inner_seed)
        return -model.mean_sd(dom.join(S, T))[1].reshape(k, m)

    spec = (outer or settings).spec(dom.t_lower, dom.t_upper, subseed(seed, state.n, 2))
    res = batch_minimize(neg_sd, spec, 1)
    cand, vals = res.candidates, res.candidate_values[0]
    order = np.argsort(vals, kind="stable")
    return _Ranked(np.vstack([res.x[0], cand[order]]), -np.concatenate([[res.fun[0]], vals[order]]))


def select_t_sha2(state: ShaState, alpha: float, settings=SearchSettings(), seed: int = 0) -> np.ndarray:
    """Environmental value maximizing the predictive sd at its lower-bound minimizer."""
    return _rank_sha2(state, alpha, settings, seed).t[0]


# --- the loop ------------------------------------------------------------------------


def initial_design(domain: Domain, n0: int) -> np.ndarray:
    """First ``n0`` points of the Sobol' sequence (zero point skipped) scaled to the box."""
    return domain.lower + sobol_points(domain.d, n0) * domain.width


def _gp_config(config: ShaConfig, n: int) -> GPConfig:
    return replace(config.gp, seed=subseed(config.seed, n, 0))


def start(f: Callable, config: ShaConfig, domain: Domain, initial_points=None) -> ShaState:
    """Evaluate the initial design and fit the first model."""
    config.validate(domain)
    X = initial_design(domain, config.n0) if initial_points is None else np.atleast_2d(initial_points)
    y = np.array([f(*domain.split(x)) for x in X], dtype=float)
    data = Dataset(X, y, domain)
    model = fit_model(data, _gp_config(config, data.n))
    state = ShaState(data, model)
    if config.stop_mode != "budget":
        q = domain.q
        size = config.stop_grid_size or 128 * q
        state.stop_grid = domain.t_lower + sobol_points(q, size) * (domain.t_upper - domain.t_lower)
        state.pos_snapshot = pos_snapshot(model, state.stop_grid, config)[0]
    return state


def pos_snapshot(model: GpModel, grid: np.ndarray, config: ShaConfig):
    """Predicted mean and sd at the estimated best decision, on the frozen stopping grid."""
    S = estimate_pos_batch(model, grid, config.search, subseed(config.seed, 0, 3))
    return model.mean_sd(model.domain.join(S, grid))


def step(state: ShaState, f: Callable, config: ShaConfig) -> ShaState:
    """One iteration: choose ``(s, t)``, evaluate ``f`` once, refit."""
    dom = state.data.domain
    if state.n >= config.budget:
        raise RuntimeError(f"budget of {config.budget} runs already used")
    model = state.model
    inner_seed = subseed(config.seed, state.n, 1)
    if config.variant == "sha1":
        ranked = _rank_sha1(state)
    else:
        ranked = _rank_sha2(state, config.alpha, config.search, config.seed, config.acquisition)

    # walk down the ranking until the proposed point is not already in the design
    for t, score in zip(ranked.t, ranked.score):
        s, _ = profile_lcb_min(model, t, config.alpha, config.search, inner_seed)
        x = dom.join(s, t)[0]
        if not state.data.is_duplicate(x):
            break
        log.debug("acquisition (%s) duplicates an existing run; trying next candidate", x)
    else:
        raise RuntimeError("every acquisition candidate duplicates an existing run")

    pred = model.predict(x, config.alpha)
    acq = AcquisitionResult(t.copy(), s.copy(), float(pred.lower[0]), float(pred.sd[0]), float(score))
    y = float(f(s, t))
    data = state.data.append(x, y)
    new_model = fit_model(data, _gp_config(config, data.n), warm_start=model.theta)
    return replace(
        state,
        data=data,
        model=new_model,
        iteration=state.iteration + 1,
        history=state.history + [acq],
    )


def check_stop(state: ShaState, previous: Optional[np.ndarray], config: ShaConfig) -> StopCheck:
    """Evaluate the active stopping rule; the budget rule always applies.

    ``previous`` is the predicted-optimum snapshot of the prior iteration on the frozen
    grid. Relative changes use denominators floored at ``1e-8 * (1 + max |y|)``.
    """
    if state.n >= config.budget:
        return StopCheck(True, "budget", np.nan, np.nan, None)
    if config.stop_mode == "budget":
        return StopCheck(False, "", np.nan, np.nan, None)
    if state.stop_grid is None:
        raise ValueError("state has no stopping grid; start it with a non-budget stop mode")
    cur, sd = pos_snapshot(state.model, state.stop_grid, config)
    if state.iteration < 2 or previous is None:
        return StopCheck(False, "", np.nan, np.nan, cur)
    floor = REL_FLOOR * (1.0 + np.max(np.abs(state.data.responses)))
    rel = np.abs(previous - cur) / np.maximum(np.abs(cur), floor)
    # uniform weights over the grid
    reduce = np.mean if config.stop_mode == "integral" else np.max
    r, s = float(reduce(rel)), float(reduce(sd))
    stop = r < config.eps1 and s < config.eps2
    return StopCheck(stop, config.stop_mode if stop else "", r, s, cur)


def run(
    f: Callable,
    config: ShaConfig,
    domain: Domain,
    initial_points=None,
    on_iteration: Optional[Callable[[ShaState], None]] = None,
):
    """Run ``sha1``/``sha2`` until a stopping rule fires.

    Returns ``(final_state, trace)``; ``trace[0]`` describes the initial fit. On failure a
    :class:`ShaRunError` carries the partial state and trace.
    """
    state = start(f, config, domain, initial_points)
    trace = [TraceEntry(0, state.n, None, state.model.theta, np.nan, np.nan)]
    if on_iteration is not None:
        on_iteration(state)
    try:
        while True:
            chk = check_stop(state, state.pos_snapshot, config)
            if chk.snapshot is not None:
                state.pos_snapshot = chk.snapshot
            if chk.stop:
                log.info("stopping at n=%d (%s)", state.n, chk.reason)
                break
            state = step(state, f, config)
            trace.append(
                TraceEntry(state.iteration, state.n, state.history[-1], state.model.theta, chk.rel_change, chk.sd_stat)
            )
            if on_iteration is not None:
                on_iteration(state)
    except Exception as exc:
        raise ShaRunError(f"run failed at n={state.n}: {exc}", state, trace) from exc
    return state, trace
