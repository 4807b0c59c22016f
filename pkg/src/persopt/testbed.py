"""Benchmark cost functions on unit boxes, plus an evaluation-metering wrapper."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gp import Domain


class BudgetExhausted(RuntimeError):
    pass


def _sq(s, t):
    return (s[..., 0] - t[..., 0]) ** 2


def _f1(s, t):
    s, t = s[..., 0], t[..., 0]
    return 2.0 * np.abs(s**3 - t) + np.exp(t) * (s - 2.0 * t) ** 2


def _f2(s, t):
    r = np.sqrt(s[..., 0] ** 2 + t[..., 0] ** 2)
    return np.cos(10.0 * r) / (r + 1.0)


def _f3(s, t):
    s, t = s[..., 0], t[..., 0]
    return np.minimum(3.0 - 2.0 * s + 3.0 * t, 3.0 + 2.0 * s - t)


def _f4(s, t):
    # Branin on x1 = 15 s - 5 in [-5, 10], x2 = 15 t in [0, 15]
    x1, x2 = 15.0 * s[..., 0] - 5.0, 15.0 * t[..., 0]
    return (x2 - 5.1 / (4.0 * np.pi**2) * x1**2 + 5.0 / np.pi * x1 - 6.0) ** 2 + 10.0 * (
        1.0 - 1.0 / (8.0 * np.pi)
    ) * np.cos(x1) + 10.0


def _f5(s, t):
    t1, t2 = t[..., 0], t[..., 1]
    return (s[..., 0] - np.abs(t1 - t2)) ** 2 + (s[..., 1] - np.sqrt((t1**2 + t2**2) / 2.0)) ** 4


def _f6(s, t):
    s1, s2, s3, s4 = (s[..., i] for i in range(4))
    t1, t2 = t[..., 0], t[..., 1]
    return np.sin(5.0 * s1**2) * (t1 + 2.0 * s2) - np.cos(5.0 * s3**2) / np.sqrt(1.0 + s4**2) - 2.0 * t2 * (s1 - s4)


@dataclass(frozen=True)
class TestFunction:
    """Cost function ``f(s, t)`` on ``[0, 1]^p x [0, 1]^q``.

    Calling it broadcasts over leading axes: ``s`` of shape ``(..., p)`` and ``t`` of shape
    ``(..., q)`` give values of shape ``(...)``; 1-D inputs give a float.
    """

    __test__ = False  # not a pytest class

    id: str
    p: int
    q: int
    fn: Callable

    @property
    def domain(self) -> Domain:
        return Domain(self.p, self.q)

    def __call__(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if s.shape[-1] != self.p or t.shape[-1] != self.q:
            raise ValueError(f"{self.id} takes p={self.p}, q={self.q}; got {s.shape[-1]} and {t.shape[-1]}")
        out = self.fn(s, t)
        return float(out) if np.ndim(out) == 0 else out


REGISTRY: dict[str, TestFunction] = {
    "sq": TestFunction("sq", 1, 1, _sq),
    "f1": TestFunction("f1", 1, 1, _f1),
    "f2": TestFunction("f2", 1, 1, _f2),
    "f3": TestFunction("f3", 1, 1, _f3),
    "f4": TestFunction("f4", 1, 1, _f4),
    "f5": TestFunction("f5", 2, 2, _f5),
    "f6": TestFunction("f6", 4, 2, _f6),
}


def get(function_id: str) -> TestFunction:
    try:
        return REGISTRY[function_id]
    except KeyError:
        raise KeyError(f"unknown test function {function_id!r}; known: {', '.join(REGISTRY)}") from None


def register(func: TestFunction) -> None:
    """Add a user-defined function to the registry."""
    if func.id in REGISTRY:
        raise ValueError(f"function id {func.id!r} already registered")
    REGISTRY[func.id] = func


def evaluate(function_id: str, s, t, tol: float = 1e-12) -> float:
    """Evaluate a registered function at one point of its unit box."""
    func = get(function_id)
    s = np.asarray(s, dtype=float).reshape(-1)
    t = np.asarray(t, dtype=float).reshape(-1)
    if s.size != func.p or t.size != func.q:
        raise ValueError(f"{function_id} takes p={func.p}, q={func.q}")
    x = np.concatenate([s, t])
    if np.any(x < -tol) or np.any(x > 1.0 + tol):
        raise ValueError(f"input {x} outside the unit box of {function_id}")
    return func(s, t)


class MeteredBlackBox:
    """Counts evaluations of a scalar black box and refuses to exceed ``cap``."""

    def __init__(self, inner: Callable, cap: int):
        if cap < 0:
            raise ValueError("cap must be non-negative")
        self.inner = inner
        self.cap = cap
        self.count = 0
        self._lock = threading.Lock()

    def __call__(self, s, t) -> float:
        with self._lock:
            if self.count >= self.cap:
                raise BudgetExhausted(f"evaluation budget of {self.cap} exhausted")
            self.count += 1
        return float(self.inner(np.asarray(s, dtype=float), np.asarray(t, dtype=float)))

    @property
    def remaining(self) -> int:
        return self.cap - self.count


def metered(f: MeteredBlackBox, s, t) -> float:
    return f(s, t)
