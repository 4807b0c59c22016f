"""Gaussian-process (Kriging) surrogate with a linear trend and Gaussian correlation.

The model is ``f(x) = g(x)'beta + Z(x)`` with ``g(x) = (1, s_1..s_p, t_1..t_q)'`` and
``Z`` a zero-mean stationary process with covariance ``sigma^2 exp(-sum_i theta_i u_i^2)``.
All linear algebra goes through a Cholesky factor of the correlation matrix; no
explicit inverses are formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg, stats
from scipy.linalg import lapack
from scipy.optimize import minimize as _nelder_mead
from scipy.spatial.distance import cdist, pdist

DUPLICATE_TOL = 1e-8
NUGGET_FACTOR = 1e-10
NUGGET_MAX = 1e-6
THETA_BOUNDS = (1e-3, 1e3)
SIGMA2_FLOOR = np.finfo(float).tiny

_potrf = lapack.dpotrf
_trtrs = lapack.dtrtrs


class FactorizationError(np.linalg.LinAlgError):
    """Correlation matrix could not be factored even with the largest nugget."""


class RankDeficientError(ValueError):
    """Regression matrix G does not have full column rank."""


class DuplicatePointError(ValueError):
    """Two design points coincide within the duplicate tolerance."""


@dataclass(frozen=True)
class Domain:
    """Box holding ``p`` control and ``q`` environmental coordinates."""

    p: int
    q: int
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ValueError(f"need p >= 1 and q >= 1, got p={self.p}, q={self.q}")
        d = self.p + self.q
        lo = np.zeros(d) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.ones(d) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != (d,) or hi.shape != (d,):
            raise ValueError(f"bounds must have length p + q = {d}")
        if not np.all(lo < hi):
            raise ValueError("lower bounds must be strictly below upper bounds")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def d(self) -> int:
        return self.p + self.q

    @property
    def s_lower(self) -> np.ndarray:
        return self.lower[: self.p]

    @property
    def s_upper(self) -> np.ndarray:
        return self.upper[: self.p]

    @property
    def t_lower(self) -> np.ndarray:
        return self.lower[self.p :]

    @property
    def t_upper(self) -> np.ndarray:
        return self.upper[self.p :]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def join(self, s, t) -> np.ndarray:
        """Stack control and environmental parts into full inputs (broadcasting rows)."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        t = np.atleast_2d(np.asarray(t, dtype=float))
        n = max(len(s), len(t))
        return np.hstack([np.broadcast_to(s, (n, self.p)), np.broadcast_to(t, (n, self.q))])

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.p], x[..., self.p :]

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.atleast_2d(x)
        slack = tol * self.width
        return np.all((x >= self.lower - slack) & (x <= self.upper + slack), axis=1)


def min_scaled_distance(points: np.ndarray, width: np.ndarray) -> float:
    if len(points) < 2:
        return np.inf
    return float(pdist(points / width).min())


@dataclass(frozen=True)
class Dataset:
    """Design points ``x_i = (s_i', t_i')'`` with responses ``y_i``."""

    points: np.ndarray
    responses: np.ndarray
    domain: Domain

    def __post_init__(self):
        x = np.array(self.points, dtype=float, ndmin=2)
        y = np.array(self.responses, dtype=float).reshape(-1)
        if x.shape[1] != self.domain.d:
            raise ValueError(f"points have {x.shape[1]} columns, domain has d={self.domain.d}")
        if len(x) != len(y):
            raise ValueError(f"{len(x)} points but {len(y)} responses")
        if len(x) < 2:
            raise ValueError("a dataset needs at least two points")
        if not np.all(np.isfinite(y)):
            raise ValueError("responses must be finite")
        if not np.all(self.domain.contains(x)):
            raise ValueError("dataset contains points outside the domain box")
        if min_scaled_distance(x, self.domain.width) <= DUPLICATE_TOL:
            raise DuplicatePointError("dataset contains duplicate points")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "points", x)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return len(self.responses)

    def is_duplicate(self, x) -> bool:
        """True when ``x`` lies within the duplicate tolerance of an existing point."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        w = self.domain.width
        return bool(cdist(x / w, self.points / w).min() <= DUPLICATE_TOL)

    def append(self, x, y: float) -> "Dataset":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return Dataset(np.vstack([self.points, x]), np.append(self.responses, y), self.domain)


def regressors(x: np.ndarray) -> np.ndarray:
    """Trend basis ``g(x) = (1, x_1, ..., x_d)`` for each row of ``x``."""
    x = np.atleast_2d(x)
    return np.hstack([np.ones((len(x), 1)), x])


def _check_theta(theta, d: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (d,):
        raise ValueError(f"theta has length {theta.size}, expected {d}")
    if not np.all(theta > 0):
        raise ValueError("correlation parameters must be positive")
    return theta


def gaussian_correlation(u, theta) -> float:
    """Gaussian correlation ``exp(-sum_i theta_i u_i^2)`` of a single lag vector."""
    u = np.asarray(u, dtype=float).reshape(-1)
    theta = _check_theta(theta, u.size)
    return float(np.exp(-np.dot(theta, u * u)))


def correlation_matrix(xa: np.ndarray, xb: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Pairwise Gaussian correlations between the rows of ``xa`` and ``xb``."""
    w = np.sqrt(theta)
    return np.exp(-cdist(np.atleast_2d(xa) * w, np.atleast_2d(xb) * w, "sqeuclidean"))


class CorrelationFactor(NamedTuple):
    chol: np.ndarray  # lower triangular, chol @ chol.T == R + nugget * I
    nugget: float


def factor_correlation(points: np.ndarray, theta: np.ndarray, nugget: Optional[float] = None) -> CorrelationFactor:
    """Cholesky-factor the correlation matrix, escalating the nugget on failure.

    The starting nugget defaults to ``1e-10 * n`` and grows tenfold up to ``1e-6``.
    """
    R = correlation_matrix(points, points, theta)
    n = len(R)
    delta = NUGGET_FACTOR * n if nugget is None else float(nugget)
    diag = np.arange(n)
    while True:
        A = R.copy()
        A[diag, diag] += delta
        try:
            return CorrelationFactor(linalg.cholesky(A, lower=True, check_finite=False), delta)
        except linalg.LinAlgError:
            pass
        if delta >= NUGGET_MAX:
            raise FactorizationError(f"correlation matrix not positive definite with nugget {delta:g}")
        delta = min(delta * 10.0, NUGGET_MAX)


def build_correlation_matrix(data: Dataset, theta, nugget: Optional[float] = None) -> CorrelationFactor:
    """Factored correlation matrix of a dataset; rejects coincident points."""
    theta = _check_theta(theta, data.domain.d)
    if data.n < 2:
        raise ValueError("need at least two points")
    if min_scaled_distance(data.points, data.domain.width) <= DUPLICATE_TOL:
        raise DuplicatePointError("coincident design points make R singular")
    return factor_correlation(data.points, theta, nugget)


def _check_rank(G: np.ndarray) -> None:
    n, m = G.shape
    if n <= m:
        raise RankDeficientError(f"need n > m = {m} points, got {n}")
    sv = np.linalg.svd(G, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficientError("regressor matrix G is rank deficient (degenerate design)")


class _GLS(NamedTuple):
    chol: np.ndarray
    nugget: float
    F: np.ndarray  # chol^{-1} G
    F_qr_r: np.ndarray  # R-factor of F, so G'R^{-1}G = F_qr_r' F_qr_r
    beta: np.ndarray
    whitened_resid: np.ndarray  # chol^{-1} (y - G beta)
    sigma2: float
    rss: float  # residual sum of squares of the whitened GLS fit
    logdet: float


def _gls(points: np.ndarray, y: np.ndarray, theta: np.ndarray, nugget: Optional[float] = None) -> _GLS:
    chol, delta = factor_correlation(points, theta, nugget)
    G = regressors(points)
    n, m = G.shape
    if n <= m:
        raise RankDeficientError(f"need n > m = {m} points, got {n}")
    F = linalg.solve_triangular(chol, G, lower=True, check_finite=False)
    z = linalg.solve_triangular(chol, y, lower=True, check_finite=False)
    qf, rf = linalg.qr(F, mode="economic", check_finite=False)
    rd = np.abs(np.diag(rf))
    if rd.min() <= 1e-10 * max(rd.max(), 1.0):
        raise RankDeficientError("regressor matrix G is rank deficient (degenerate design)")
    beta = linalg.solve_triangular(rf, qf.T @ z, check_finite=False)
    e = z - F @ beta
    rss = float(e @ e)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return _GLS(chol, delta, F, rf, beta, e, rss / n, rss, logdet)


def fit_gls(data: Dataset, theta) -> tuple[np.ndarray, float]:
    """Generalized-least-squares estimates ``(beta_hat, sigma2_hat)`` at fixed theta."""
    theta = _check_theta(theta, data.domain.d)
    g = _gls(data.points, data.responses, theta)
    return g.beta, g.sigma2


class _Likelihood:
    """Profile negative log-likelihood of one dataset, tuned for repeated evaluation."""

    def __init__(self, points: np.ndarray, y: np.ndarray):
        self.n = len(y)
        self.lags = (points[:, None, :] - points[None, :, :]) ** 2
        self.rhs = np.column_stack([regressors(points), y])

    def __call__(self, theta: np.ndarray) -> float:
        n = self.n
        R0 = np.exp(-(self.lags @ theta))
        delta = NUGGET_FACTOR * n
        while True:
            R = R0.copy()
            R.flat[:: n + 1] += delta
            chol, info = _potrf(R, lower=1, clean=1, overwrite_a=1)
            if info == 0:
                break
            if delta >= NUGGET_MAX:
                return np.inf
            delta = min(delta * 10.0, NUGGET_MAX)
        FZ, info = _trtrs(chol, self.rhs, lower=1)
        F, z = FZ[:, :-1], FZ[:, -1]
        try:
            beta = np.linalg.solve(F.T @ F, F.T @ z)
        except np.linalg.LinAlgError:
            return np.inf
        e = z - F @ beta
        sigma2 = float(e @ e) / n
        if not sigma2 >= SIGMA2_FLOOR:
            return np.inf
        return n * np.log(sigma2) + 2.0 * float(np.sum(np.log(np.diag(chol))))


def _negloglik(points, y, theta) -> float:
    return _Likelihood(points, y)(theta)


def profile_negloglik(data: Dataset, theta) -> float:
    """Concentrated negative log-likelihood ``n log(sigma2_hat) + log det R``.

    Returns ``inf`` when ``sigma2_hat`` underflows. Factorization failures propagate.
    """
    theta = _check_theta(theta, data.domain.d)
    g = _gls(data.points, data.responses, theta)
    if g.sigma2 < SIGMA2_FLOOR:
        return np.inf
    return data.n * np.log(g.sigma2) + g.logdet


@dataclass(frozen=True)
class GPConfig:
    """Hyperparameter-fit settings.

    Attributes:
        theta_bounds: Box for every theta_i.
        n_starts: Multistart count in log-theta space; defaults to ``10 * d``.
        optimize: If False, ``theta`` is used as-is.
        theta: Fixed correlation parameters (required when ``optimize`` is False).
        dof: ``"default"`` for ``n - d`` degrees of freedom, ``"regression"`` for ``n - (d + 1)``,
            or an explicit integer.
        polish_maxiter: Iteration cap of each simplex polish.
        seed: Seeds the multistart point set.
    """

    theta_bounds: tuple[float, float] = THETA_BOUNDS
    n_starts: Optional[int] = None
    optimize: bool = True
    theta: Optional[Sequence[float]] = None
    dof: object = "default"
    polish_maxiter: int = 200
    seed: int = 0


def degrees_of_freedom(n: int, d: int, dof="default") -> int:
    if dof == "default":
        nu = n - d
    elif dof == "regression":
        nu = n - d - 1
    else:
        nu = int(dof)
    if nu < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {nu} (n={n}, d={d})")
    return nu


class Prediction(NamedTuple):
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray


@dataclass(frozen=True, eq=False)
class GpModel:
    """Fitted Kriging surrogate. Immutable; safe to share across readers."""

    theta: np.ndarray
    beta: np.ndarray
    sigma2: float
    chol_R: np.ndarray
    G: np.ndarray
    data: Dataset
    nugget: float
    dof: int
    rss: float  # residual sum of squares of the whitened GLS fit
    negloglik: float = np.nan
    _F: np.ndarray = field(default=None, repr=False)
    _F_r: np.ndarray = field(default=None, repr=False)
    _weights: np.ndarray = field(default=None, repr=False)

    @classmethod
    def _from_gls(cls, data: Dataset, theta: np.ndarray, g: _GLS, dof) -> "GpModel":
        nu = degrees_of_freedom(data.n, data.domain.d, dof)
        weights = linalg.solve_triangular(g.chol, g.whitened_resid, lower=True, trans="T", check_finite=False)
        nll = data.n * np.log(g.sigma2) + g.logdet if g.sigma2 >= SIGMA2_FLOOR else np.inf
        arrays = [theta, g.beta, g.chol, g.F, g.F_qr_r, weights]
        for a in arrays:
            a.setflags(write=False)
        return cls(
            theta=theta,
            beta=g.beta,
            sigma2=g.sigma2,
            chol_R=g.chol,
            G=regressors(data.points),
            data=data,
            nugget=g.nugget,
            dof=nu,
            rss=g.rss,
            negloglik=nll,
            _F=g.F,
            _F_r=g.F_qr_r,
            _weights=weights,
        )

    @property
    def domain(self) -> Domain:
        return self.data.domain

    def quantile(self, alpha: float) -> float:
        """Upper ``alpha/2`` quantile of Student's t with ``dof`` degrees of freedom."""
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        if alpha == 1.0:
            return 0.0
        return float(stats.t.ppf(1.0 - alpha / 2.0, self.dof))

    def _cross(self, x0: np.ndarray):
        w = np.sqrt(self.theta)
        d2 = cdist(x0 * w, self.data.points * w, "sqeuclidean")
        r0 = np.exp(-d2)
        # the nugget belongs to the zero-lag correlation, so training points are reproduced exactly
        r0[d2 == 0.0] += self.nugget
        return r0

    def mean(self, x0) -> np.ndarray:
        """BLUP mean only (cheaper than :meth:`mean_sd`)."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        return self.beta[0] + x0 @ self.beta[1:] + self._cross(x0) @ self._weights

    def mean_sd(self, x0) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized BLUP mean and predictive standard deviation at the rows of ``x0``."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        r0 = self._cross(x0)
        g0 = regressors(x0)
        mean = g0 @ self.beta + r0 @ self._weights

        u, _ = _trtrs(self.chol_R, r0.T, lower=1)
        v = g0.T - self._F.T @ u
        a, _ = _trtrs(self._F_r, v, lower=0, trans=1)
        bracket = (1.0 + self.nugget) - np.einsum("ij,ij->j", u, u) + np.einsum("ij,ij->j", a, a)
        var = self.rss / self.dof * bracket
        if self.rss > 0 and np.any(var < -1e-8 * self.rss):
            warnings.warn("negative predictive variance beyond rounding; model may be ill-conditioned", RuntimeWarning)
        sd = np.sqrt(np.maximum(var, 0.0))
        return mean, sd

    def predict(self, x0, alpha: float) -> Prediction:
        """Mean, predictive sd and lower prediction bound at the rows of ``x0``."""
        mean, sd = self.mean_sd(x0)
        return Prediction(mean, sd, mean - sd * self.quantile(alpha))

    def lower_bound(self, x0, alpha: float) -> np.ndarray:
        mean, sd = self.mean_sd(x0)
        return mean - sd * self.quantile(alpha)

    def flags_outside(self, x0) -> np.ndarray:
        """Boolean mask of rows of ``x0`` lying outside the domain box."""
        return ~self.domain.contains(np.atleast_2d(x0))


def predict(model: GpModel, x0, alpha: float) -> Prediction:
    """Scalar-friendly wrapper: a single point gives float fields."""
    x0 = np.asarray(x0, dtype=float)
    pred = model.predict(x0, alpha)
    if x0.ndim == 1:
        return Prediction(float(pred.mean[0]), float(pred.sd[0]), float(pred.lower[0]))
    return pred


def _start_points(d: int, count: int, lo: float, hi: float, seed: int) -> np.ndarray:
    from .design import sobol_points  # local import keeps gp usable standalone

    u = sobol_points(d, count, skip=1 + (seed % 997) * count)
    return lo + u * (hi - lo)


def fit_model(data: Dataset, config: GPConfig = GPConfig(), warm_start=None) -> GpModel:
    """Fit theta by minimizing the profile negative log-likelihood over a log-scale box.

    Multistart: ``config.n_starts`` space-filling points in ``log(theta)`` (plus an optional
    warm start), each polished by a bounded Nelder-Mead search.
    """
    d = data.domain.d
    X, y = data.points, data.responses
    if not config.optimize:
        if config.theta is None:
            raise ValueError("fixed-theta mode requires config.theta")
        theta = _check_theta(config.theta, d).copy()
        return GpModel._from_gls(data, theta, _gls(X, y, theta), config.dof)

    lo, hi = np.log(config.theta_bounds[0]), np.log(config.theta_bounds[1])
    n_starts = config.n_starts or 10 * d
    starts = _start_points(d, n_starts, lo, hi, config.seed)
    if warm_start is not None:
        starts = np.vstack([np.clip(np.log(_check_theta(warm_start, d)), lo, hi), starts])
    _check_rank(regressors(X))

    nll = _Likelihood(X, y)

    def objective(log_theta):
        return nll(np.exp(np.clip(log_theta, lo, hi)))

    best_x, best_f = None, np.inf
    for x0 in starts:
        f0 = objective(x0)
        if not np.isfinite(f0):
            continue
        res = _nelder_mead(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=[(lo, hi)] * d,
            options={"maxiter": config.polish_maxiter, "xatol": 1e-2, "fatol": 1e-4},
        )
        x, f = (np.clip(res.x, lo, hi), res.fun) if res.fun < f0 else (x0, f0)
        # strict improvement only, so ties go to the earliest start
        if f < best_f:
            best_x, best_f = x, f
    if best_x is None:
        # every start either failed to factor or fit the data exactly (sigma2 underflow);
        # in the latter case any factorizable theta reproduces the data
        for x0 in starts:
            try:
                _gls(X, y, np.exp(x0))
            except FactorizationError:
                continue
            best_x = x0
            break
        else:
            raise FactorizationError("likelihood could not be evaluated at any multistart point")
    theta = np.exp(best_x)
    return GpModel._from_gls(data, theta, _gls(X, y, theta), config.dof)
