"""Reference Markov chains on a 1-D grid approximating a Langevin diffusion.

The continuous reference is ``dX = -U'(X)/2 dt + dW``, whose invariant law is
proportional to ``exp(-U)``. Two discretizations are provided:

``euler``
    Gaussian Euler step binned onto the grid, tails folded into the end states.
``metropolized``
    Symmetric binned Gaussian proposal with Metropolis acceptance for the
    grid Gibbs measure; reversible by construction.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .divergence import as_measure
from .errors import DiscretizationWarning, InvalidArgument, SupportError, TooLarge

ESCAPE_TOL = 1e-3
MAX_BRIDGE_PATHS = 10**6


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    n_states: int

    def __post_init__(self):
        if int(self.n_states) != self.n_states or self.n_states < 2:
            raise InvalidArgument("need at least two grid states")
        if not self.x_max > self.x_min:
            raise InvalidArgument("x_max must exceed x_min")

    @property
    def points(self):
        return np.linspace(self.x_min, self.x_max, self.n_states)

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n_states - 1)

    def refined(self):
        """Grid with half the spacing on the same interval."""
        return GridSpec(self.x_min, self.x_max, 2 * self.n_states - 1)


@dataclass(frozen=True)
class TimeGridSpec:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidArgument("need at least one time step")
        if not self.horizon > 0:
            raise InvalidArgument("horizon must be positive")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refined(self):
        return TimeGridSpec(self.horizon, 2 * self.n_steps)


@dataclass(eq=False)
class ReferenceChain:
    """A (possibly time-inhomogeneous) chain with ``kernels[t]`` for step t -> t+1."""

    grid: GridSpec
    time: TimeGridSpec
    kernels: np.ndarray
    nu0: np.ndarray
    U: np.ndarray
    dU: np.ndarray
    mode: str
    reversible: bool
    warnings: list = field(default_factory=list)
    is_reversed: bool = False

    @property
    def n(self):
        return self.grid.n_states

    @property
    def homogeneous(self):
        return bool(np.all(self.kernels == self.kernels[0]))

    @property
    def K(self):
        if not self.homogeneous:
            raise InvalidArgument("chain is time-inhomogeneous")
        return self.kernels[0]

    @property
    def lam(self):
        """Grid Gibbs measure proportional to exp(-U)."""
        w = np.exp(-(self.U - self.U.min()))
        return w / w.sum()

    def transition(self, s, t):
        """Product of the step kernels from time index s to t."""
        out = np.eye(self.n)
        for k in range(s, t):
            out = out @ self.kernels[k]
        return out

    def marginals(self):
        m = np.empty((self.time.n_steps + 1, self.n))
        m[0] = self.nu0
        for t, K in enumerate(self.kernels):
            m[t + 1] = m[t] @ K
        return m


def _potential_on_grid(U, points):
    if callable(U):
        vals = np.asarray(U(points), dtype=float) * np.ones_like(points)
        h = 1e-6 * np.maximum(1.0, np.abs(points))
        dvals = (np.asarray(U(points + h), dtype=float) - np.asarray(U(points - h), dtype=float)) / (2 * h)
        dvals = dvals * np.ones_like(points)
    else:
        vals = np.asarray(U, dtype=float)
        if vals.shape != points.shape:
            raise InvalidArgument("tabulated potential does not match the grid")
        dvals = np.gradient(vals, points)
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(dvals))):
        raise InvalidArgument("potential must be finite on the grid")
    return vals, dvals


def _euler_kernel(points, dx, drift, dt):
    mean = points + drift * dt
    sd = np.sqrt(dt)
    edges = np.concatenate([[-np.inf], 0.5 * (points[1:] + points[:-1]), [np.inf]])
    cdf = ndtr((edges[None, :] - mean[:, None]) / sd)
    K = np.diff(cdf, axis=1)
    lo, hi = points[0] - dx / 2, points[-1] + dx / 2
    escape = ndtr((lo - mean) / sd) + ndtr((mean - hi) / sd)
    return K, escape


def _metropolis_kernel(points, dx, U, dt):
    n = points.size
    sd = np.sqrt(dt)
    d = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) * dx
    w = ndtr((d + dx / 2) / sd) - ndtr((d - dx / 2) / sd)
    np.fill_diagonal(w, 0.0)
    ratio = np.exp(-(U[None, :] - U[:, None]))
    K = w * np.minimum(1.0, ratio)
    np.fill_diagonal(K, 0.0)
    np.fill_diagonal(K, 1.0 - K.sum(axis=1))
    # Proposal mass falling outside the grid is rejected, i.e. stays put.
    escape = ndtr((points[0] - dx / 2 - points) / sd) + ndtr((points - points[-1] - dx / 2) / sd)
    return K, escape


def build_chain(grid, time, U, nu0=None, mode="metropolized"):
    """Discretize the Langevin reference on ``grid`` with step ``time.dt``.

    ``U`` is a callable or an array of grid values; ``nu0`` defaults to the
    grid Gibbs measure.
    """
    points = grid.points
    vals, dvals = _potential_on_grid(U, points)
    if nu0 is None:
        w = np.exp(-(vals - vals.min()))
        nu0 = w / w.sum()
    nu0 = as_measure(nu0, "nu0")
    if nu0.size != grid.n_states:
        raise InvalidArgument("nu0 does not match the grid")
    if mode == "euler":
        K, escape = _euler_kernel(points, grid.dx, -0.5 * dvals, time.dt)
        K = K / K.sum(axis=1, keepdims=True)
    elif mode == "metropolized":
        K, escape = _metropolis_kernel(points, grid.dx, vals, time.dt)
    else:
        raise InvalidArgument(f"unknown chain mode {mode!r}")
    notes = []
    leak = float(nu0 @ escape)
    if leak > ESCAPE_TOL:
        msg = f"Gaussian step mass escaping the grid is {leak:.3g} > {ESCAPE_TOL:g}"
        notes.append(msg)
        warnings.warn(msg, DiscretizationWarning, stacklevel=2)
    kernels = np.broadcast_to(K, (time.n_steps,) + K.shape).copy()
    return ReferenceChain(grid, time, kernels, nu0, vals, dvals, mode,
                          reversible=(mode == "metropolized"), warnings=notes)


def endpoint_kernel(chain):
    """Joint law of (X_0, X_T): diag(nu0) K_0 ... K_{n-1}."""
    return chain.nu0[:, None] * chain.transition(0, chain.time.n_steps)


def reverse_chain(chain):
    """Time reversal: the step-t kernel is m_{T-t-1}(x) K(x, y) / m_{T-t}(y)."""
    m = chain.marginals()
    T = chain.time.n_steps
    rev = np.empty_like(chain.kernels)
    for t in range(T):
        s = T - t - 1
        denom = m[s + 1]
        if np.any(denom <= 0):
            raise SupportError(f"zero marginal mass at time index {s + 1}")
        rev[t] = (m[s][:, None] * chain.kernels[s]).T / denom[:, None]
    start = m[T] / m[T].sum()
    return ReferenceChain(chain.grid, chain.time, rev, start, chain.U, chain.dU, chain.mode,
                          chain.reversible, list(chain.warnings), not chain.is_reversed)


def bridge_expectation(chain, f, x0, xT):
    """E[f(X) | X_0 = x0, X_T = xT] by exact enumeration.

    ``f`` maps an array of paths (rows of grid positions, one column per
    time) to one value per path.
    """
    n, T = chain.n, chain.time.n_steps
    count = n ** (T - 1)
    if count > MAX_BRIDGE_PATHS:
        raise TooLarge(f"{count} bridge paths exceed {MAX_BRIDGE_PATHS}", count)
    inner = np.array(list(itertools.product(range(n), repeat=T - 1)), dtype=int).reshape(count, T - 1)
    idx = np.empty((count, T + 1), dtype=int)
    idx[:, 0] = x0
    idx[:, -1] = xT
    idx[:, 1:-1] = inner
    prob = np.ones(count)
    for t in range(T):
        prob *= chain.kernels[t][idx[:, t], idx[:, t + 1]]
    total = prob.sum()
    if total <= 0:
        raise SupportError("endpoint pair has zero probability")
    vals = np.asarray(f(chain.grid.points[idx]), dtype=float)
    return float(prob @ vals / total)
