"""Weak transport costs on a 1-D grid and their Q_c transforms.

A weak cost ``c(x, rho)`` charges a state ``x`` for being moved to a
distribution ``rho``. The transform ``Q_c phi(x) = inf_rho c(x, rho) + <phi, rho>``
is the only way the bridge solver sees the cost; ``weak_ot_value`` solves the
primal transport problem directly and is used as a certificate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import _alpg
from .divergence import as_measure
from .errors import InvalidArgument, NumericalFailure

THETAS = {
    "square": (lambda t: t * t, lambda t: 2.0 * t),
    "abs": (np.abs, np.sign),
}


def lower_hull(x, y):
    """Indices of the lower convex hull of points sorted by ``x`` (monotone chain)."""
    hull = []
    for i in range(len(x)):
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (x[a] - x[o]) * (y[i] - y[o]) - (y[a] - y[o]) * (x[i] - x[o])
            if cross > 0:
                break
            hull.pop()
        hull.append(i)
    return np.array(hull)


@dataclass(frozen=True, eq=False)
class WeakCost:
    """Weak cost variant.

    ``kind`` is one of ``total_variation``, ``marton``, ``barycentric`` and
    ``moreau_yosida``. Variants other than total variation need the grid
    ``points`` for the inner minimization over targets.
    """

    kind: str
    points: Optional[np.ndarray] = None
    p: float = 1.0
    lam: float = 1.0
    theta: Union[str, Callable] = "square"
    theta_prime: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        kinds = ("total_variation", "marton", "barycentric", "moreau_yosida")
        if self.kind not in kinds:
            raise InvalidArgument(f"unknown weak cost {self.kind!r}")
        if self.kind != "total_variation":
            if self.points is None:
                raise InvalidArgument(f"{self.kind} needs grid points")
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim != 1 or np.any(np.diff(pts) <= 0):
                raise InvalidArgument("grid points must be strictly increasing")
            object.__setattr__(self, "points", pts)
        if self.kind == "marton" and not self.p >= 1:
            raise InvalidArgument("Marton exponent must be >= 1")
        if self.kind == "moreau_yosida" and not self.lam > 0:
            raise InvalidArgument("Moreau-Yosida parameter must be positive")
        if self.kind == "barycentric" and isinstance(self.theta, str) and self.theta not in THETAS:
            raise InvalidArgument(f"unknown theta {self.theta!r}")

    @classmethod
    def total_variation(cls):
        return cls("total_variation")

    @classmethod
    def marton(cls, points, p=1.0):
        return cls("marton", points, p=float(p))

    @classmethod
    def barycentric(cls, points, theta="square", theta_prime=None):
        return cls("barycentric", points, theta=theta, theta_prime=theta_prime)

    @classmethod
    def moreau_yosida(cls, points, lam=1.0):
        return cls("moreau_yosida", points, lam=float(lam))

    # -- cost evaluation -----------------------------------------------------

    def _theta(self):
        if isinstance(self.theta, str):
            return THETAS[self.theta]
        f = self.theta
        if self.theta_prime is not None:
            return f, self.theta_prime
        h = 1e-6
        return f, lambda t: (f(t + h) - f(t - h)) / (2 * h)

    def _pair_cost(self):
        """Matrix c(x_i, delta_{x_j}) for the linear variants."""
        d = self.points[:, None] - self.points[None, :]
        if self.kind == "marton":
            return np.abs(d) ** self.p
        if self.kind == "moreau_yosida":
            return 0.5 * self.lam * d * d
        return self._theta()[0](d)

    def cost(self, i, rho):
        """c(x_i, rho) for a state index ``i`` and a probability vector ``rho``."""
        rho = np.asarray(rho, dtype=float)
        if self.kind == "total_variation":
            return float(1.0 - rho[i])
        if self.kind == "barycentric":
            return float(self._theta()[0](self.points[i] - rho @ self.points))
        return float(self._pair_cost()[i] @ rho)


def apply_qc(cost, phi, return_kernel=False):
    """Q_c phi on the grid; optionally also a minimizing kernel ``rho(x, .)``."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 1:
        raise InvalidArgument("phi must be 1-D")
    n = phi.size
    if cost.kind == "total_variation":
        return (phi.copy(), np.eye(n)) if return_kernel else phi.copy()
    if cost.points.size != n:
        raise InvalidArgument("phi does not match the cost grid")
    if not np.all(np.isfinite(phi)):
        raise InvalidArgument("phi must be finite for transport costs")
    pts = cost.points
    if cost.kind == "barycentric":
        hull = lower_hull(pts, phi)
        base = np.interp(pts, pts[hull], phi[hull])
    else:
        base = phi
    total = base[None, :] + cost._pair_cost()
    j = np.argmin(total, axis=1)
    qc = total[np.arange(n), j]
    if not return_kernel:
        return qc
    kern = np.zeros((n, n))
    if cost.kind != "barycentric":
        kern[np.arange(n), j] = 1.0
        return qc, kern
    # Spread each minimizer onto the hull vertices that bracket it.
    pos = np.searchsorted(pts[hull], pts[j], side="right") - 1
    pos = np.clip(pos, 0, len(hull) - 2) if len(hull) > 1 else np.zeros_like(pos)
    for i in range(n):
        if len(hull) == 1:
            kern[i, hull[0]] = 1.0
            continue
        a, b = hull[pos[i]], hull[pos[i] + 1]
        t = (pts[j[i]] - pts[a]) / (pts[b] - pts[a])
        kern[i, a] += 1.0 - t
        kern[i, b] += t
    return qc, kern


def weak_ot_value(cost, mu, nu, *, feas_tol=1e-8, return_plan=False):
    """W_c(mu, nu) = inf over kernels pi with mu pi = nu of sum_x mu(x) c(x, pi_x)."""
    mu = as_measure(mu, "mu")
    nu = as_measure(nu, "nu")
    if mu.shape != nu.shape:
        raise InvalidArgument("mu and nu must live on the same grid")
    n = mu.size
    if cost.kind != "total_variation" and cost.points.size != n:
        raise InvalidArgument("measures do not match the cost grid")
    rows = np.flatnonzero(mu > 0)
    m = rows.size
    wrow = mu[rows]

    if cost.kind == "barycentric":
        th, dth = cost._theta()
        pts = cost.points

        def fun(u):
            pi = u.reshape(m, n)
            gap = pts[rows] - pi @ pts
            g = -(wrow * dth(gap))[:, None] * pts[None, :]
            return float(wrow @ th(gap)), g.ravel()
    else:
        if cost.kind == "total_variation":
            c = 1.0 - np.eye(n)
        else:
            c = cost._pair_cost()
        lin = (wrow[:, None] * c[rows]).ravel()

        def fun(u):
            return float(lin @ u), lin

    A = np.zeros((n, m * n))
    for k in range(m):
        A[:, k * n:(k + 1) * n] = wrow[k] * np.eye(n)

    def project(u):
        return _alpg.project_rows_simplex(u.reshape(m, n)).ravel()

    u0 = np.tile(nu, m)
    res = _alpg.minimize(fun, A, nu, project, u0, weight=np.repeat(wrow, n),
                         feas_tol=feas_tol, obj_tol=1e-12, stat_tol=1e-10,
                         max_outer=600, penalty_max=1e5)
    if res.residual > feas_tol:
        raise NumericalFailure(f"weak transport residual {res.residual:.3g} exceeds {feas_tol:g}")
    value = max(res.value, 0.0)
    if return_plan:
        plan = np.zeros((n, n))
        plan[rows] = res.u.reshape(m, n)
        return value, plan
    return value


def check_weak_target(cost, mu, nu, tol=1e-8):
    """True when ``W_c(mu, nu) <= tol``, i.e. ``mu`` reaches ``nu`` at no cost."""
    if cost.kind == "total_variation":
        mu = as_measure(mu, "mu")
        nu = as_measure(nu, "nu")
        return bool(0.5 * np.abs(mu - nu).sum() <= tol)
    return bool(weak_ot_value(cost, mu, nu) <= tol)
