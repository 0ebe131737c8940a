"""Adam and L-BFGS on flat float64 parameter vectors."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the updated parameters; ``x`` is not modified."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self, mask: np.ndarray) -> None:
        """Zero the moment estimates of the masked entries."""
        self.m[mask] = 0.0
        self.v[mask] = 0.0

    def state_dict(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    accepted: bool
    step_size: float
    evaluations: int


@dataclass
class LBFGS:
    """Two-loop recursion L-BFGS with Armijo backtracking.

    ``fun(x)`` returns ``(loss, gradient)``.
    """

    history: int = 10
    max_line_search: int = 25
    c1: float = 1e-4
    shrink: float = 0.5
    curvature_eps: float = 1e-10
    pairs: deque = field(default_factory=deque)

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q

    def clear(self) -> None:
        self.pairs.clear()

    def step(self, x: np.ndarray, fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
             f0: float | None = None, g0: np.ndarray | None = None) -> LBFGSResult:
        evals = 0
        if f0 is None or g0 is None:
            f0, g0 = fun(x)
            evals += 1
        if not np.any(g0):
            return LBFGSResult(x, f0, g0, True, 0.0, evals)
        d = self.direction(g0)
        slope = float(g0 @ d)
        if slope >= 0:
            # not a descent direction: restart from steepest descent
            self.clear()
            d = -g0
            slope = float(g0 @ d)
        t = 1.0 if self.pairs else min(1.0, 1.0 / np.abs(g0).sum())
        for _ in range(self.max_line_search):
            x_new = x + t * d
            try:
                f_new, g_new = fun(x_new)
            except (FloatingPointError, ArithmeticError):
                f_new, g_new = np.inf, None
            evals += 1
            if np.isfinite(f_new) and f_new <= f0 + self.c1 * t * slope:
                s, y = x_new - x, g_new - g0
                sy = float(s @ y)
                if sy > self.curvature_eps:
                    self.pairs.append((s, y, 1.0 / sy))
                    while len(self.pairs) > self.history:
                        self.pairs.popleft()
                return LBFGSResult(x_new, float(f_new), g_new, True, t, evals)
            t *= self.shrink
        log.warning("L-BFGS line search failed after %d steps; history cleared", self.max_line_search)
        self.clear()
        return LBFGSResult(x, f0, g0, False, 0.0, evals)
