"""Limited-memory BFGS with a bounded step and monotone backtracking."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    nit: int
    nfev: int
    costs: list[float] = field(default_factory=list)
    stop: str = ""


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def lbfgs(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    memory: int = 5,
    max_iter: int = 200,
    max_step: float = 2.0,
    tol: float = 1e-6,
    max_backtracks: int = 12,
) -> OptimizeResult:
    """Minimize ``fun`` from ``x0``.

    Every search direction is clipped so that no component moves more than
    ``max_step``; the Armijo backtracking search only accepts points that do
    not raise the cost, so the recorded cost sequence is non-increasing.
    """
    x = np.array(x0, dtype=np.float64)
    fx = float(fun(x))
    nfev = 1
    g = grad(x)
    costs = [fx]
    hist: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=memory)
    stop = "max_iter"
    for _ in range(max_iter):
        if not np.any(g):
            stop = "zero_gradient"
            break
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(hist):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if hist:
            s, y, _ = hist[-1]
            q *= np.dot(s, y) / np.dot(y, y)
        else:
            q *= max_step / np.max(np.abs(q))
        for (s, y, rho), a in zip(hist, reversed(alphas)):
            b = rho * np.dot(y, q)
            q += s * (a - b)
        d = -q
        slope = float(np.dot(g, d))
        if slope >= 0.0:
            hist.clear()
            d = -g * (max_step / np.max(np.abs(g)))
            slope = float(np.dot(g, d))
        big = np.max(np.abs(d))
        if big > max_step:
            d *= max_step / big
            slope = float(np.dot(g, d))

        t = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new = float(fun(x_new))
            nfev += 1
            if f_new <= fx + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if hist:
                # curvature pairs can go stale on a non-smooth cost: retry from steepest descent
                hist.clear()
                continue
            stop = "line_search"
            break
        g_new = grad(x_new)
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * max(1.0, float(np.dot(y, y))):
            hist.append((s, y, 1.0 / sy))
        rel = abs(fx - f_new) / max(abs(fx), 1e-12)
        x, fx, g = x_new, f_new, g_new
        costs.append(fx)
        if rel < tol:
            stop = "converged"
            break
    return OptimizeResult(x=x, fun=fx, nit=len(costs) - 1, nfev=nfev, costs=costs, stop=stop)
