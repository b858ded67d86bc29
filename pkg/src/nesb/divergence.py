"""Convex penalty families, their conjugates, and the optimized certainty equivalent.

A penalty ``l`` is a convex function on ``[0, inf)`` with ``l(1) = 0``. The
divergence between two discrete measures is ``sum_i p_i l(q_i / p_i)`` and the
optimized certainty equivalent of a payoff ``xi`` under ``p`` is

    Phi_p(xi) = inf_r  E_p[l*(xi - r)] + r,

whose minimizer solves ``E_p[dl*(xi - r)] = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import DomainError, Infeasible, InvalidArgument

KINDS = ("entropy", "chi_squared", "tsallis", "hellinger")


def as_measure(w, name="measure", *, probability=True, atol=1e-10):
    """Validate a discrete measure given as a 1-D array of nonnegative weights."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise InvalidArgument(f"{name} must be a non-empty 1-D array")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidArgument(f"{name} must have finite nonnegative weights")
    if probability and abs(w.sum() - 1.0) > atol:
        raise InvalidArgument(f"{name} must sum to 1 (got {w.sum():.3g})")
    return w


def _check_nan(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)):
        raise InvalidArgument("NaN argument")
    return x


@dataclass(frozen=True)
class Divergence:
    """One of the four supported penalty families.

    ``q`` is the Tsallis exponent and is ignored by the other kinds.
    """

    kind: str
    q: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown divergence {self.kind!r}")
        if self.kind == "tsallis" and not (self.q > 1.0 and math.isfinite(self.q)):
            raise InvalidArgument("Tsallis exponent must exceed 1")

    @classmethod
    def entropy(cls):
        return cls("entropy")

    @classmethod
    def chi_squared(cls):
        return cls("chi_squared")

    @classmethod
    def tsallis(cls, q=2.0):
        return cls("tsallis", float(q))

    @classmethod
    def hellinger(cls):
        return cls("hellinger")

    @property
    def label(self):
        return f"tsallis(q={self.q:g})" if self.kind == "tsallis" else self.kind

    @property
    def slope_at_one(self):
        """l'(1); zero except for Tsallis, whose penalty is not centred."""
        return self.q / (self.q - 1.0) if self.kind == "tsallis" else 0.0

    # -- pointwise functions ------------------------------------------------

    def ell(self, x):
        x = _check_nan(x)
        with np.errstate(invalid="ignore", divide="ignore"):
            xp = np.maximum(x, 0.0)
            if self.kind == "entropy":
                out = xlogy(xp, xp) - xp + 1.0
            elif self.kind == "chi_squared":
                out = 0.5 * (xp - 1.0) ** 2
            elif self.kind == "tsallis":
                out = (xp**self.q - 1.0) / (self.q - 1.0)
            else:
                out = (1.0 - np.sqrt(xp)) ** 2
        return np.where(x < 0, np.inf, out)

    def conjugate(self, y):
        y = _check_nan(y)
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            if self.kind == "entropy":
                return np.expm1(y)
            if self.kind == "chi_squared":
                return np.where(y >= -1.0, y + 0.5 * y * y, -0.5)
            if self.kind == "tsallis":
                c = (self.q - 1.0) / self.q
                return 1.0 / (self.q - 1.0) + (c * np.maximum(y, 0.0)) ** (self.q / (self.q - 1.0))
            out = np.where(y < 1.0, y / (1.0 - y), np.inf)
            return np.where(np.isneginf(y), -1.0, out)

    def conjugate_derivative(self, y):
        """Derivative of l*; raises DomainError outside its effective domain."""
        y = _check_nan(y)
        if self.kind == "hellinger" and np.any(y >= 1.0):
            raise DomainError("Hellinger conjugate is infinite for y >= 1")
        return self._dconj(y)

    def _dconj(self, y):
        # Unchecked variant: returns +inf outside the domain, which the root
        # finder reads as "shift too small".
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            if self.kind == "entropy":
                return np.exp(y)
            if self.kind == "chi_squared":
                return np.maximum(1.0 + y, 0.0)
            if self.kind == "tsallis":
                c = (self.q - 1.0) / self.q
                return (c * np.maximum(y, 0.0)) ** (1.0 / (self.q - 1.0))
            out = np.where(y < 1.0, 1.0 / (1.0 - y) ** 2, np.inf)
            return np.where(np.isneginf(y), 0.0, out)

    def second_derivative(self, x):
        x = _check_nan(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "entropy":
                return 1.0 / x
            if self.kind == "chi_squared":
                return np.ones_like(x)
            if self.kind == "tsallis":
                return self.q * x ** (self.q - 2.0)
            return 0.5 * x ** -1.5


def eval_ell(div, x):
    return float(div.ell(x)) if np.ndim(x) == 0 else div.ell(x)


def eval_conjugate(div, y):
    return float(div.conjugate(y)) if np.ndim(y) == 0 else div.conjugate(y)


def eval_conjugate_derivative(div, y):
    out = div.conjugate_derivative(y)
    return float(out) if np.ndim(y) == 0 else out


def divergence_value(div, q, p):
    """sum_i p_i l(q_i/p_i) with 0 l(0/0) = 0 and +inf when q is not << p."""
    q = _check_nan(q)
    p = _check_nan(p)
    if q.shape != p.shape:
        raise InvalidArgument("measures must have the same shape")
    if np.any(p < 0) or np.any(q < 0):
        return math.inf
    if np.any((p == 0) & (q > 0)):
        return math.inf
    s = p > 0
    return float(np.sum(p[s] * div.ell(q[s] / p[s])))


def solve_shift(div, xi, weights, target=1.0, *, tol=1e-12, max_iter=200):
    """Row-wise root r of  sum_j w_ij dl*(xi_ij - r) = target_i.

    The left side is nonincreasing in ``r``. Bisection keeps ``g(lo) > 0`` and
    ``g(hi) <= 0``, so when the root set is an interval its infimum is
    returned. Entries with zero weight are ignored and ``xi = -inf`` entries
    contribute nothing.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if xi.shape != w.shape:
        raise InvalidArgument("payoff and weight shapes differ")
    if np.any(np.isnan(xi)):
        raise InvalidArgument("NaN payoff")
    m = xi.shape[0]
    target = np.broadcast_to(np.asarray(target, dtype=float), (m,)).copy()
    active = w > 0
    if np.any(active & (xi == np.inf)):
        raise Infeasible("payoff is +inf on the support")
    finite = active & np.isfinite(xi)
    has_finite = finite.any(axis=1)
    if np.any(~has_finite & (target > 0)):
        raise Infeasible("no mass available to meet a positive target")
    big = np.where(finite, xi, np.nan)
    with np.errstate(all="ignore"):
        lo = np.where(has_finite, np.nanmin(big, axis=1), 0.0) - 10.0
        hi = np.where(has_finite, np.nanmax(big, axis=1), 0.0) + 10.0
    ws = np.where(active, w, 0.0)
    xs = np.where(active, xi, 0.0)

    def g(r):
        d = div._dconj(xs - r[:, None])
        with np.errstate(invalid="ignore"):
            d = np.where(active, d, 0.0)
        return (ws * d).sum(axis=1) - target

    width = hi - lo
    for _ in range(80):
        bad = ~(g(lo) > 0)
        if not bad.any():
            break
        lo = np.where(bad, lo - width, lo)
        width = np.where(bad, 2 * width, width)
    else:
        raise Infeasible("could not bracket the root from below")
    width = hi - lo
    for _ in range(80):
        bad = g(hi) > 0
        if not bad.any():
            break
        hi = np.where(bad, hi + width, hi)
        width = np.where(bad, 2 * width, width)
    else:
        raise Infeasible("could not bracket the root from above")

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        up = gm > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
        if np.all((hi - lo) <= 4 * np.spacing(np.maximum(abs(lo), abs(hi)))):
            break
    glo, ghi = np.abs(g(lo)), np.abs(g(hi))
    r = np.where(ghi <= glo, hi, lo)
    res = np.minimum(glo, ghi)
    scale = np.maximum(1.0, np.abs(target))
    if np.any(res > tol * scale * 1e3):
        raise Infeasible(f"root residual {res.max():.3g} too large")
    return r


def oce_value(div, xi, p):
    """Return ``(Phi_p(xi), r*)``."""
    xi = _check_nan(xi)
    p = as_measure(p, "p")
    if xi.shape != p.shape:
        raise InvalidArgument("payoff and measure must have the same shape")
    r = float(solve_shift(div, xi[None], p[None])[0])
    s = p > 0
    with np.errstate(invalid="ignore"):
        val = float(np.sum(p[s] * div.conjugate(xi[s] - r))) + r
    return val, r


def oce_optimizer(div, xi, p):
    """Optimal measure q = p dl*(xi - r*) attaining the OCE supremum."""
    xi = _check_nan(xi)
    p = as_measure(p, "p")
    _, r = oce_value(div, xi, p)
    d = np.where(p > 0, div._dconj(xi - r), 0.0)
    return p * d
