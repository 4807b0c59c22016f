"""Constant robust decisions and the expected/maximum cost of personalized decisions.

Costs are computed with the true (cheap) cost function on a shared quadrature grid:
a midpoint tensor rule for up to two environmental dimensions and seeded Monte Carlo
above that. Maxima are taken over the grid and then polished locally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np
from scipy.interpolate import griddata
from scipy.spatial import cKDTree

from .gp import Domain
from .inner_opt import SearchSpec, batch_minimize, nelder_mead_batch

BOX_TOL = 1e-9  # decisions may overshoot the control box by this much before being rejected
DOMINANCE_TOL = 1e-9


# --- quadrature ------------------------------------------------------------------------


@dataclass(frozen=True)
class CostGrid:
    """Quadrature settings shared by every decision in a comparison.

    Attributes:
        points_per_dim: Midpoint-rule cells per environmental dimension (used when q <= 2).
        mc_draws: Monte Carlo sample size when q > 2.
        seed: Seeds the Monte Carlo draws.
        polish: Locally refine the maximum found on the grid.
        polish_starts: Number of best grid nodes the maximum polish starts from.
        polish_xtol: Simplex size (relative to the box) at which the polish stops.
    """

    points_per_dim: int = 101
    mc_draws: int = 4096
    seed: int = 0
    polish: bool = True
    polish_starts: int = 3
    polish_xtol: float = 1e-7

    def __post_init__(self):
        if self.points_per_dim < 2:
            raise ValueError("points_per_dim must be >= 2")
        if self.mc_draws < 2:
            raise ValueError("mc_draws must be >= 2")
        if self.polish_starts < 1:
            raise ValueError("polish_starts must be >= 1")

    def describe(self, q: int) -> dict:
        if q <= 2:
            return {"rule": "midpoint", "points_per_dim": self.points_per_dim}
        return {"rule": "monte-carlo", "draws": self.mc_draws, "seed": self.seed}

    def quadrature(self, lower, upper, density: Optional[Callable] = None) -> "Quadrature":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        q = len(lower)
        width = upper - lower
        vol = float(np.prod(width))
        if q <= 2:
            m = self.points_per_dim
            mid = _tensor(lower + ((np.arange(m) + 0.5) / m)[:, None] * width, q)
            closed = _tensor(np.linspace(lower, upper, m), q)
            # trapezoid weights on the closed grid give the error estimate
            tw1 = np.full(m, 1.0 / (m - 1))
            tw1[[0, -1]] *= 0.5
            tw = np.prod(_tensor(np.repeat(tw1[:, None], q, axis=1), q), axis=1) * vol
            nodes = np.vstack([mid, closed])
            w_mid = np.concatenate([np.full(len(mid), vol / len(mid)), np.zeros(len(closed))])
            w_alt = np.concatenate([np.zeros(len(mid)), tw])
        else:
            rng = np.random.default_rng(self.seed)
            nodes = lower + rng.random((self.mc_draws, q)) * width
            w_mid = np.full(self.mc_draws, vol / self.mc_draws)
            w_alt = None
        dens = np.full(len(nodes), 1.0 / vol) if density is None else np.asarray(density(nodes), dtype=float)
        if dens.shape != (len(nodes),) or np.any(dens < 0) or not np.all(np.isfinite(dens)):
            raise ValueError("density must return finite non-negative values, one per node")
        return Quadrature(
            nodes,
            w_mid * dens,
            None if w_alt is None else w_alt * dens,
            lower,
            upper,
            self.describe(q),
        )


def _tensor(axes, q: int) -> np.ndarray:
    """Tensor product of per-dimension node columns ``axes[:, j]``."""
    axes = np.asarray(axes)
    mesh = np.meshgrid(*[axes[:, j] for j in range(q)], indexing="ij")
    return np.stack(mesh, -1).reshape(-1, q)


class Quadrature(NamedTuple):
    nodes: np.ndarray  # (N, q); also the search set for maxima
    weights: np.ndarray  # integration weights incl. density (zero on nodes outside the rule)
    alt_weights: Optional[np.ndarray]  # second rule for the error estimate, None for Monte Carlo
    lower: np.ndarray
    upper: np.ndarray
    descriptor: dict

    def integrate(self, values) -> tuple[float, float]:
        """Return ``(integral, error estimate)`` of ``values`` given at the nodes."""
        values = np.asarray(values, dtype=float)
        est = float(self.weights @ values)
        if self.alt_weights is not None:
            return est, abs(est - float(self.alt_weights @ values))
        used = self.weights > 0
        scaled = values[used] * self.weights[used] * used.sum()
        return est, float(np.std(scaled, ddof=1) / np.sqrt(used.sum()))


# --- decisions -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PersonalizedDecision:
    """A map from environmental values to control settings.

    Use the ``constant``, ``surrogate``, ``tabulated`` and ``oracle`` constructors. Calling a
    decision with ``T`` of shape ``(m, q)`` returns ``(m, p)``; a 1-D ``t`` returns ``(p,)``.
    """

    kind: str
    domain: Domain
    _fn: Callable = field(repr=False)
    s: Optional[np.ndarray] = None  # the setting of a constant decision
    value: Optional[float] = None  # objective value reported by the solver that built it

    def __call__(self, T) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        single = T.ndim == 1
        T2 = np.atleast_2d(T)
        if T2.shape[1] != self.domain.q:
            raise ValueError(f"expected {self.domain.q} environmental coordinates, got {T2.shape[1]}")
        S = np.asarray(self._fn(T2), dtype=float).reshape(len(T2), self.domain.p)
        lo, hi = self.domain.s_lower, self.domain.s_upper
        slack = BOX_TOL * np.maximum(hi - lo, 1.0)
        if np.any(S < lo - slack) or np.any(S > hi + slack) or not np.all(np.isfinite(S)):
            raise ValueError(f"{self.kind} decision left the control box")
        S = np.clip(S, lo, hi)
        return S[0] if single else S

    @classmethod
    def constant(cls, s, domain: Domain, value: Optional[float] = None) -> "PersonalizedDecision":
        s = np.asarray(s, dtype=float).reshape(domain.p)
        return cls("constant", domain, lambda T: np.broadcast_to(s, (len(T), domain.p)), s.copy(), value)

    @classmethod
    def surrogate(cls, model, settings=None, seed: int = 0) -> "PersonalizedDecision":
        """Estimated profile optimum ``argmin_s mean(s, t)`` of a fitted model."""
        from .sha import SearchSettings, estimate_pos_batch

        settings = settings or SearchSettings()
        return cls("surrogate", model.domain, lambda T: estimate_pos_batch(model, T, settings, seed))

    @classmethod
    def tabulated(cls, t_grid, s_values, domain: Domain, lookup: str = "nearest") -> "PersonalizedDecision":
        """Decision stored on a finite set of environmental values.

        ``nearest`` returns the stored setting of the closest tabulated value, so only
        previously validated settings are ever returned. ``linear`` interpolates (nearest
        outside the convex hull when q > 1).
        """
        t_grid = np.atleast_2d(np.asarray(t_grid, dtype=float)).reshape(-1, domain.q)
        s_values = np.asarray(s_values, dtype=float).reshape(len(t_grid), domain.p)
        if lookup == "nearest":
            tree = cKDTree(t_grid)
            fn = lambda T: s_values[tree.query(T)[1]]  # noqa: E731
        elif lookup == "linear":
            if domain.q == 1:
                order = np.argsort(t_grid[:, 0], kind="stable")
                tg, sv = t_grid[order, 0], s_values[order]
                fn = lambda T: np.column_stack([np.interp(T[:, 0], tg, sv[:, j]) for j in range(domain.p)])  # noqa: E731
            else:

                def fn(T):
                    out = griddata(t_grid, s_values, T, method="linear")
                    bad = ~np.all(np.isfinite(out), axis=1)
                    if np.any(bad):
                        out[bad] = griddata(t_grid, s_values, T[bad], method="nearest")
                    return out

        else:
            raise ValueError(f"unknown lookup {lookup!r}")
        return cls(f"tabulated-{lookup}", domain, fn)

    @classmethod
    def oracle(cls, fn: Callable, domain: Domain) -> "PersonalizedDecision":
        """Wrap a vectorized callable ``fn(T) -> S``."""
        return cls("oracle", domain, fn)


# --- cost functionals ------------------------------------------------------------------


@dataclass(frozen=True)
class CostEstimate:
    expected: float
    maximum: float
    expected_error: float  # quadrature error estimate of ``expected``
    argmax_t: np.ndarray
    descriptor: dict


def _domain_of(f, domain: Optional[Domain]) -> Domain:
    if domain is not None:
        return domain
    try:
        return f.domain
    except AttributeError:
        raise ValueError("domain is required for cost functions without a .domain attribute") from None


def _costs_at(f, S, T) -> np.ndarray:
    vals = np.asarray(f(S, T), dtype=float).reshape(len(T))
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise ValueError(f"non-finite cost at t={T[np.argmax(bad)]}")
    return vals


def _polish_max(g: Callable, starts, lower, upper, xtol) -> tuple[np.ndarray, np.ndarray]:
    """Maximize a vectorized ``g(T) -> values`` from each start; returns ``(T_best, values)``."""

    def neg(P, idx):
        k, m, q = P.shape
        return -g(P.reshape(k * m, q)).reshape(k, m)

    x, fv = nelder_mead_batch(neg, starts, lower, upper, max_iter=400, xtol=xtol, ftol=1e-9)
    return x, -fv


def _node_values(u: PersonalizedDecision, f, quad: Quadrature) -> np.ndarray:
    return _costs_at(f, u(quad.nodes), quad.nodes)


def _maximum(u, f, quad: Quadrature, values, grid: CostGrid) -> tuple[float, np.ndarray]:
    k = min(grid.polish_starts, len(values))
    top = np.argsort(-values, kind="stable")[:k]
    best_t, best = quad.nodes[top[0]], float(values[top[0]])
    if grid.polish:
        xtol = grid.polish_xtol * float(np.max(quad.upper - quad.lower))
        T, v = _polish_max(lambda T: _costs_at(f, u(T), T), quad.nodes[top], quad.lower, quad.upper, xtol)
        j = int(np.argmax(v))
        if v[j] > best:
            best_t, best = T[j], float(v[j])
    return best, np.array(best_t)


def cost_estimate(
    u: PersonalizedDecision, f, grid: CostGrid = CostGrid(), density=None, domain: Optional[Domain] = None
) -> CostEstimate:
    """Expected and maximum cost of ``u`` under the vectorized cost ``f(S, T)``.

    The decision is evaluated once on the shared node set; both functionals reuse it.
    """
    dom = _domain_of(f, domain)
    quad = grid.quadrature(dom.t_lower, dom.t_upper, density)
    values = _node_values(u, f, quad)
    expected, err = quad.integrate(values)
    maximum, t_max = _maximum(u, f, quad, values, grid)
    return CostEstimate(expected, maximum, err, t_max, quad.descriptor)


def expected_cost(u: PersonalizedDecision, f, density=None, grid: CostGrid = CostGrid(), domain=None) -> float:
    """Integral of ``f(u(t), t)`` against the environmental density (uniform by default)."""
    dom = _domain_of(f, domain)
    quad = grid.quadrature(dom.t_lower, dom.t_upper, density)
    return quad.integrate(_node_values(u, f, quad))[0]


def max_cost(u: PersonalizedDecision, f, grid: CostGrid = CostGrid(), domain=None) -> float:
    """Largest ``f(u(t), t)`` over the environmental box: grid maximum, then local polish."""
    dom = _domain_of(f, domain)
    quad = grid.quadrature(dom.t_lower, dom.t_upper)
    values = _node_values(u, f, quad)
    return _maximum(u, f, quad, values, grid)[0]


# --- robust constant decisions ---------------------------------------------------------


def _robust_spec(dom: Domain, seed: int) -> SearchSpec:
    return SearchSpec(dom.s_lower, dom.s_upper, top_k=4, max_iter=1000, xtol=1e-10, ftol=1e-15, seed=seed)


def solve_u_e(f, density=None, grid: CostGrid = CostGrid(), domain=None, seed: int = 0) -> PersonalizedDecision:
    """Constant setting minimizing the expected cost on the quadrature grid."""
    dom = _domain_of(f, domain)
    quad = grid.quadrature(dom.t_lower, dom.t_upper, density)
    used = quad.weights > 0
    T, w = quad.nodes[used], quad.weights[used]
    rows = max(1, 2_000_000 // len(T))

    def block(S):
        vals = np.asarray(f(S[:, None, :], T[None, :, :]), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite cost on the quadrature grid")
        return vals @ w

    def objective(P, idx):
        S = P.reshape(-1, dom.p)
        out = np.concatenate([block(S[i : i + rows]) for i in range(0, len(S), rows)])
        return out.reshape(P.shape[:2])

    res = batch_minimize(objective, _robust_spec(dom, seed))
    return PersonalizedDecision.constant(res.x[0], dom, float(res.fun[0]))


def worst_case(f, S, grid: CostGrid = CostGrid(), domain=None) -> tuple[np.ndarray, np.ndarray]:
    """``max_t f(s, t)`` for every row of ``S`` (grid maximum, then local polish).

    Returns:
        ``(values, T_argmax)``.
    """
    dom = _domain_of(f, domain)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    quad = grid.quadrature(dom.t_lower, dom.t_upper)
    T = quad.nodes
    rows = max(1, 2_000_000 // len(T))
    vals = np.concatenate(
        [np.asarray(f(S[i : i + rows, None, :], T[None, :, :]), dtype=float) for i in range(0, len(S), rows)]
    )
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite cost on the maximization grid")
    k = min(grid.polish_starts, len(T))
    top = np.argsort(-vals, axis=1, kind="stable")[:, :k]
    best = np.take_along_axis(vals, top[:, :1], axis=1)[:, 0]
    best_t = T[top[:, 0]]
    if grid.polish:
        owner = np.repeat(np.arange(len(S)), k)

        def neg(P, idx):
            kk, m, q = P.shape
            Ss = np.broadcast_to(S[owner[idx]][:, None, :], (kk, m, dom.p))
            return -np.asarray(f(Ss, P), dtype=float)

        x, fv = nelder_mead_batch(neg, T[top].reshape(-1, dom.q), quad.lower, quad.upper, 400, 1e-10, 1e-14)
        pv = -fv.reshape(len(S), k)
        j = np.argmax(pv, axis=1)
        pj = pv[np.arange(len(S)), j]
        better = pj > best
        best = np.where(better, pj, best)
        best_t = np.where(better[:, None], x.reshape(len(S), k, dom.q)[np.arange(len(S)), j], best_t)
    return best, best_t


def solve_u_m(f, grid: CostGrid = CostGrid(), domain=None, seed: int = 0) -> PersonalizedDecision:
    """Constant setting minimizing the worst-case cost over the environmental box."""
    dom = _domain_of(f, domain)

    def objective(P, idx):
        return worst_case(f, P.reshape(-1, dom.p), grid, dom)[0].reshape(P.shape[:2])

    res = batch_minimize(objective, _robust_spec(dom, seed))
    return PersonalizedDecision.constant(res.x[0], dom, float(res.fun[0]))


# --- profile optimum of the true function ----------------------------------------------


def pos_oracle(f, domain=None, grid_size: int = 1001, n_candidates: Optional[int] = None, chunk: int = 512):
    """Decision ``t -> argmin_s f(s, t)`` solved per ``t`` on the true function.

    With one control variable the search is a closed ``grid_size`` grid on the control box
    refined by a local polish from the best three nodes; otherwise a Sobol' candidate set
    (``n_candidates``, default ``1024 * p``) plays the role of the grid.
    """
    dom = _domain_of(f, domain)
    if dom.p == 1:
        cand = np.linspace(dom.s_lower, dom.s_upper, grid_size)
    else:
        from .design import sobol_points

        cand = dom.s_lower + sobol_points(dom.p, n_candidates or 1024 * dom.p) * (dom.s_upper - dom.s_lower)
    spec = SearchSpec(dom.s_lower, dom.s_upper, top_k=3, max_iter=400, xtol=1e-10, ftol=1e-15)

    def solve(T):
        out = np.empty((len(T), dom.p))
        for lo in range(0, len(T), chunk):
            Tc = T[lo : lo + chunk]

            def objective(P, idx, Tc=Tc):
                Tr = np.broadcast_to(Tc[idx][:, None, :], P.shape[:2] + (dom.q,))
                return np.asarray(f(P, Tr), dtype=float)

            out[lo : lo + chunk] = batch_minimize(objective, spec, len(Tc), candidates=cand).x
        return out

    return PersonalizedDecision.oracle(solve, dom)


# --- dominance -------------------------------------------------------------------------


class Violation(NamedTuple):
    check: str
    lhs: float
    rhs: float
    tolerance: float
    t: Optional[np.ndarray] = None

    def __str__(self):
        where = "" if self.t is None else f" at t={np.array2string(np.asarray(self.t), precision=6)}"
        return f"{self.check}: {self.lhs:.12g} > {self.rhs:.12g} + {self.tolerance:.3g}{where}"


@dataclass
class DominanceReport:
    costs: dict
    violations: list
    pointwise_tol: float

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        out = [f"{name}: ce={c.expected:.12g} (+-{c.expected_error:.2g}) cm={c.maximum:.12g}" for name, c in self.costs.items()]
        out += [f"VIOLATION {v}" for v in self.violations] or ["all checks passed"]
        return out

    def __str__(self):
        return "\n".join(self.lines())


def dominance_check(
    f,
    decisions: Mapping[str, PersonalizedDecision],
    grid: CostGrid = CostGrid(),
    pos: Optional[PersonalizedDecision] = None,
    density=None,
    domain=None,
    tol: float = DOMINANCE_TOL,
) -> DominanceReport:
    """Check that the exact profile optimum beats every supplied decision.

    Checks pointwise dominance on every grid node, ``ce(pos) <= ce(u)`` for every ``u``,
    and, when decisions named ``uE`` and ``uM`` are supplied, both robust chains
    ``ce(pos) <= ce(uE) <= ce(uM)`` and ``cm(pos) <= cm(uM) <= cm(uE)``.
    Expected-cost comparisons allow twice the larger quadrature error estimate.
    """
    dom = _domain_of(f, domain)
    pos = pos or pos_oracle(f, dom)
    quad = grid.quadrature(dom.t_lower, dom.t_upper, density)
    everything = {"pos": pos, **dict(decisions)}
    values = {name: _node_values(u, f, quad) for name, u in everything.items()}
    costs = {}
    for name, u in everything.items():
        e, err = quad.integrate(values[name])
        m, t_max = _maximum(u, f, quad, values[name], grid)
        costs[name] = CostEstimate(e, m, err, t_max, quad.descriptor)

    violations = []
    for name in decisions:
        excess = values["pos"] - values[name] - tol * (1.0 + np.abs(values[name]))
        if np.any(excess > 0):
            i = int(np.argmax(excess))
            violations.append(Violation(f"pointwise pos <= {name}", values["pos"][i], values[name][i], tol, quad.nodes[i]))

    def le(check, a, b, slack, t=None):
        if a > b + slack:
            violations.append(Violation(check, a, b, slack, t))

    def e_slack(a, b):
        return 2.0 * max(costs[a].expected_error, costs[b].expected_error) + tol * (1.0 + abs(costs[b].expected))

    def m_slack(b):
        return tol * (1.0 + abs(costs[b].maximum))

    for name in decisions:
        le(f"ce(pos) <= ce({name})", costs["pos"].expected, costs[name].expected, e_slack("pos", name))
    if "uE" in decisions and "uM" in decisions:
        le("ce(uE) <= ce(uM)", costs["uE"].expected, costs["uM"].expected, e_slack("uE", "uM"))
        le("cm(pos) <= cm(uM)", costs["pos"].maximum, costs["uM"].maximum, m_slack("uM"), costs["pos"].argmax_t)
        le("cm(uM) <= cm(uE)", costs["uM"].maximum, costs["uE"].maximum, m_slack("uE"), costs["uM"].argmax_t)
    return DominanceReport(costs, violations, tol)


def robust_baselines(f, grid: CostGrid = CostGrid(), density=None, domain=None, seed: int = 0):
    """Solve both constant decisions and cost them on the shared grid.

    Returns:
        ``{"uE": (decision, CostEstimate), "uM": (decision, CostEstimate)}``.
    """
    dom = _domain_of(f, domain)
    u_e = solve_u_e(f, density, grid, dom, seed)
    u_m = solve_u_m(f, grid, dom, seed)
    return {
        "uE": (u_e, cost_estimate(u_e, f, grid, density, dom)),
        "uM": (u_m, cost_estimate(u_m, f, grid, density, dom)),
    }
