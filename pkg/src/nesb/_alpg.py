"""Augmented-Lagrangian method with projected-gradient inner solves.

Solves  min f(u)  s.t.  A u = b,  u in X  where X admits a cheap projection.
Inner iterations are spectral (Barzilai-Borwein) projected-gradient steps with
Armijo backtracking in the diagonal metric ``weight``. After every block of
``inner`` iterations the multipliers are updated and the penalty doubles
unless the constraint residual fell by at least a factor four.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ALResult:
    u: np.ndarray
    value: float
    residual: float
    stationarity: float
    outer: int
    converged: bool


def project_rows_simplex(v):
    """Euclidean projection of each row onto the probability simplex."""
    v = np.atleast_2d(v)
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    k = cond.sum(axis=1)
    theta = css[np.arange(v.shape[0]), k - 1] / k
    return np.maximum(v - theta[:, None], 0.0)


def minimize(fun, A, b, project, u0, *, weight=None, penalty=1.0, inner=50,
             feas_tol=1e-8, obj_tol=1e-10, stat_tol=1e-9, max_outer=400,
             penalty_max=1e6):
    """``fun(u)`` returns ``(f, grad)``; ``project`` maps into X."""
    u = project(np.asarray(u0, dtype=float))
    w = np.ones_like(u) if weight is None else np.asarray(weight, dtype=float)
    lam = np.zeros(A.shape[0])
    rho = float(penalty)

    def lagr(x):
        f, g = fun(x)
        r = A @ x - b
        return f + lam @ r + 0.5 * rho * (r @ r), g + A.T @ (lam + rho * r), f, r

    alpha = 1.0
    f_prev = np.inf
    res_prev = np.inf
    stat = np.inf
    for outer in range(1, max_outer + 1):
        L, g, f, r = lagr(u)
        for _ in range(inner):
            d = project(u - alpha * g / w) - u
            gd = g @ d
            if gd >= 0 or not np.any(np.abs(d) > 1e-16 * (1 + np.abs(u))):
                break
            t = 1.0
            slack = 1e-14 * (1.0 + abs(L))
            while True:
                Ln, gn, fn, rn = lagr(u + t * d)
                if Ln <= L + 1e-4 * t * gd + slack:
                    break
                t *= 0.5
                if t < 1e-12:
                    break
            if t < 1e-12:
                break
            s_ = t * d
            y = gn - g
            sy = s_ @ y
            if sy > 0:
                alpha = float(np.clip((s_ * w) @ s_ / sy, 1e-10, 1e10))
            u = u + s_
            L, g, f, r = Ln, gn, fn, rn
        pg = project(u - g / w) - u
        stat = float(np.max(np.abs(pg))) if pg.size else 0.0
        res = float(np.max(np.abs(r))) if r.size else 0.0
        if (res <= feas_tol and abs(f - f_prev) <= obj_tol * (1 + abs(f))
                and stat <= stat_tol):
            return ALResult(u, float(f), res, stat, outer, True)
        f_prev = f
        lam = lam + rho * r
        if res > 0.25 * res_prev:
            rho = min(2.0 * rho, penalty_max)
        res_prev = res
    res = float(np.max(np.abs(A @ u - b)))
    return ALResult(u, float(fun(u)[0]), res, stat, max_outer, False)
