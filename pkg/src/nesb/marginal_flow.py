"""Time marginals of the optimal bridge.

``chain_marginals`` is exact on the chain. The PDE route recovers the same
marginals from potentials: for the entropy penalty the value function of the
control problem solves

    d_t v + b d_x v + 1/2 d_xx v - 1/2 |d_x v|^2 = 0,   v(T) = phi,

with ``b = -U'/2``, and the marginal density at time ``t`` is proportional to
``exp(-v(t) - rv(T - t) - U)`` where ``rv`` is the value function of the
time-reversed problem. For the chi-squared penalty a pair of linear equations
replaces the HJB equation and the flow is checked in weak form on the
(state, density-process) plane by Monte Carlo.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.ndimage import gaussian_filter

from .bridge_solver import ProblemSpec, solve_sinkhorn
from .errors import InvalidArgument, NumericalFailure, StatisticalFailure
from .ref_chain import reverse_chain

log = logging.getLogger(__name__)


@dataclass
class MarginalFlow:
    times: np.ndarray
    points: np.ndarray
    density: np.ndarray     # (n_steps + 1, n_states); rows are probability vectors

    def tv_to(self, other):
        """Per-time total variation distance to another flow on the same grid."""
        return 0.5 * np.abs(self.density - np.asarray(other)).sum(axis=1)


@dataclass
class PDESolution:
    times: np.ndarray
    points: np.ndarray
    values: np.ndarray      # (n_steps + 1, n_states), row k at time times[k]
    theta: float = 0.5
    substeps: int = 1


# -- exact marginals ----------------------------------------------------------

def chain_marginals(problem, f):
    """m_t(z) = sum mu0(x0) K^t(x0, z) K^{n-t}(z, xT) f(x0, xT), exactly."""
    ch = problem.chain
    T = ch.time.n_steps
    rows = problem.mu0 > 0
    g = np.where(rows[:, None], np.nan_to_num(f, nan=0.0), 0.0)
    out = np.empty((T + 1, ch.n))
    fwd = np.eye(ch.n)
    back = [None] * (T + 1)
    back[T] = np.eye(ch.n)
    for t in range(T - 1, -1, -1):
        back[t] = ch.kernels[t] @ back[t + 1]
    for t in range(T + 1):
        cond = back[t] @ g.T                       # (z, x0): E[f(x0, X_T) | X_t = z]
        out[t] = ((problem.mu0[:, None] * fwd) * cond.T).sum(axis=0)
        if t < T:
            fwd = fwd @ ch.kernels[t]
    return MarginalFlow(ch.time.times, ch.grid.points, out)


# -- finite differences -------------------------------------------------------

def generator_bands(points, drift):
    """Banded form of L = b d_x + 1/2 d_xx with reflecting ends."""
    n = points.size
    dx = points[1] - points[0]
    lower = 0.5 / dx**2 - drift / (2 * dx)
    upper = 0.5 / dx**2 + drift / (2 * dx)
    diag = np.full(n, -1.0 / dx**2)
    upper[0], lower[-1] = 1.0 / dx**2, 1.0 / dx**2
    return lower, diag, upper


def apply_generator(bands, h):
    lower, diag, upper = bands
    out = diag * h
    out[:-1] += upper[:-1] * h[1:]
    out[1:] += lower[1:] * h[:-1]
    return out


def _step_matrix(bands, a):
    """Banded storage of I - a L for solve_banded."""
    lower, diag, upper = bands
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -a * upper[:-1]
    ab[1] = 1.0 - a * diag
    ab[2, :-1] = -a * lower[1:]
    return ab


def solve_backward(chain, terminal, source=None, theta=0.5, substeps=1):
    """theta-scheme for  d_t u + L u = s(t),  u(T) = terminal, on the chain's grids.

    ``source`` is None or an array of shape (n_steps + 1, n_states) sampled at
    the chain times; it is interpolated linearly inside each substep.
    """
    if not 0 <= theta <= 1:
        raise InvalidArgument("theta must lie in [0, 1]")
    pts = chain.grid.points
    bands = generator_bands(pts, -0.5 * chain.dU)
    T = chain.time.n_steps
    dt = chain.time.dt / substeps
    if theta < 0.5 and (1 - 2 * theta) * dt / chain.grid.dx**2 > 1.0:
        raise NumericalFailure("explicit step violates the stability bound dt <= dx^2")
    ab = _step_matrix(bands, theta * dt)
    vals = np.empty((T + 1, pts.size))
    vals[T] = terminal
    u = np.asarray(terminal, dtype=float).copy()
    for k in range(T - 1, -1, -1):
        for j in range(substeps, 0, -1):
            rhs = u + (1 - theta) * dt * apply_generator(bands, u)
            if source is not None:
                s_hi = source[k] + (source[k + 1] - source[k]) * j / substeps
                s_lo = source[k] + (source[k + 1] - source[k]) * (j - 1) / substeps
                rhs -= dt * (theta * s_lo + (1 - theta) * s_hi)
            u = solve_banded((1, 1), ab, rhs)
        vals[k] = u
    return PDESolution(chain.time.times, pts, vals, theta, substeps)


def solve_hjb_entropic(chain, terminal, theta=0.5, substeps=1):
    """HJB value function through the Cole-Hopf transform h = exp(-v)."""
    terminal = np.asarray(terminal, dtype=float)
    finite = np.isfinite(terminal)
    if not finite.any() or np.any(terminal == -np.inf):
        raise InvalidArgument("terminal potential must be finite somewhere and never -inf")
    shift = terminal[finite].min()
    h = solve_backward(chain, np.exp(-(terminal - shift)), theta=theta, substeps=substeps)
    inner = h.values[:-1]
    if np.any(~(inner > 0)):
        raise NumericalFailure("Cole-Hopf variable lost positivity; refine the time step")
    values = np.empty_like(h.values)
    values[:-1] = -np.log(inner) + shift
    values[-1] = terminal
    return PDESolution(h.times, h.points, values, theta, substeps)


def solve_pde_chisquared(chain, terminal, theta=0.5, substeps=1):
    """Return ``(v, vt)``: ``vt`` solves the linear equation with terminal
    ``terminal``; ``v`` solves it with source ``1/2 |d_x vt|^2`` and zero
    terminal value."""
    terminal = np.asarray(terminal, dtype=float)
    if not np.all(np.isfinite(terminal)):
        raise InvalidArgument("terminal potential must be finite")
    vt = solve_backward(chain, terminal, theta=theta, substeps=substeps)
    grad = np.gradient(vt.values, chain.grid.points, axis=1)
    v = solve_backward(chain, np.zeros_like(terminal), source=0.5 * grad**2,
                       theta=theta, substeps=substeps)
    return v, vt


# -- entropic flow --------------------------------------------------------------

def _check_flow_problem(problem, kind):
    ch = problem.chain
    if problem.divergence.kind != kind:
        raise InvalidArgument(f"this flow needs the {kind} penalty")
    if not problem.tv:
        raise InvalidArgument("marginal flows are implemented for the hard terminal constraint")
    if not ch.reversible or np.max(np.abs(ch.kernels - ch.kernels[0])) > 1e-12:
        raise InvalidArgument("marginal flows need a Metropolized (reversible) chain")
    if np.max(np.abs(ch.nu0 - ch.lam)) > 1e-12:
        raise InvalidArgument("marginal flows need the chain started at its invariant law")
    if np.any(problem.cost != 0):
        raise InvalidArgument("marginal flows assume a zero endpoint cost")


def reversed_problem(problem):
    return ProblemSpec(reverse_chain(problem.chain), problem.divergence, problem.weak_cost,
                       mu0=problem.muT, muT=problem.mu0, cost=problem.cost.T)


@dataclass
class EntropicFlow(MarginalFlow):
    forward: PDESolution = None
    backward: PDESolution = None
    potentials: tuple = field(default=None, repr=False)


def entropic_flow(problem, *, theta=0.5, substeps=1, solver_tol=1e-11):
    """Marginals from the forward and reversed value functions."""
    _check_flow_problem(problem, "entropy")
    ch = problem.chain
    fwd_pair = solve_sinkhorn(problem, tol=solver_tol).potentials
    rev_pair = solve_sinkhorn(reversed_problem(problem), tol=solver_tol).potentials
    v = solve_hjb_entropic(ch, fwd_pair.phi, theta, substeps)
    rv = solve_hjb_entropic(ch, rev_pair.phi, theta, substeps)
    logq = -v.values - rv.values[::-1] - ch.U[None, :]
    with np.errstate(invalid="ignore"):
        logq = np.where(np.isnan(logq), -np.inf, logq)
    dens = np.exp(logq - logq.max(axis=1, keepdims=True))
    dens /= dens.sum(axis=1, keepdims=True)
    return EntropicFlow(ch.time.times, ch.grid.points, dens, v, rv, (fwd_pair, rev_pair))


# -- chi-squared flow -------------------------------------------------------------

@dataclass
class ChiSquaredFlowCheck:
    residual: float             # mean over the evaluated times
    per_time: np.ndarray
    times: np.ndarray
    floor_rate: float           # fraction of (path, step) pairs where Z hit the floor
    min_ess: float
    bandwidth: float
    moments: list = field(default_factory=list, repr=False)   # (lhs, rhs) per time
    # kernel-free variant: derivatives moved onto the test functions
    sample_per_time: np.ndarray = None
    sample_components: np.ndarray = None   # (n_times, 2): x and z rows separately


def _bump(u):
    return np.clip(1.0 - u * u, 0.0, None) ** 3


def _dbump(u):
    return -6.0 * u * np.clip(1.0 - u * u, 0.0, None) ** 2


def _linear_solution(problem, theta, substeps, solver_tol):
    phi = solve_sinkhorn(problem, tol=solver_tol).potentials.phi
    if not np.all(np.isfinite(phi)):
        raise InvalidArgument("the chi-squared flow needs a terminal law with full support")
    return solve_backward(problem.chain, phi, theta=theta, substeps=substeps).values


def _kde(x, z, h, weights=(), n_cells=160):
    """Binned product-Gaussian KDE on a regular (x, z) mesh.

    Returns the mesh, the density, its gradient and one smoothed measure per
    entry of ``weights`` (per-sample values), all with the same kernel.
    """
    lo = np.array([x.min(), z.min()]) - 4 * h
    hi = np.array([x.max(), z.max()]) + 4 * h
    rng = [[lo[0], hi[0]], [lo[1], hi[1]]]
    hist, ex, ez = np.histogram2d(x, z, bins=n_cells, range=rng)
    cx, cz = 0.5 * (ex[1:] + ex[:-1]), 0.5 * (ez[1:] + ez[:-1])
    step = np.array([cx[1] - cx[0], cz[1] - cz[0]])
    norm = x.size * step.prod()

    def smooth(w=None):
        hw = hist if w is None else np.histogram2d(x, z, bins=n_cells, range=rng, weights=w)[0]
        return gaussian_filter(hw, sigma=h / step, mode="constant", truncate=5.0) / norm

    dens = smooth()
    gx, gz = np.gradient(dens, cx, cz)
    return cx, cz, step, dens, gx, gz, [smooth(w) for w in weights]


def chisquared_flow_check(problem, mc_paths=100_000, bandwidth=None, seed=0, *,
                          substeps=8, z_floor=1e-8, min_ess=100.0, theta=0.5,
                          solver_tol=1e-11):
    """Weak-form check of the forward/backward drift identity on the (x, z) plane.

    Paths of (X, Z) follow the optimally controlled dynamics
    dX = (-g/Z - U'/2) dt + dW,  dZ = g^2/Z dt - g dW  with  g = d_x vt.
    At each time in the middle half of the horizon the law of (X_t, Z_t) is
    estimated by a KDE; both sides of
        F(t) + rF(T - t) = S S^T grad log q_t,   S = (1, -g),
    are integrated against bump functions and compared. ``bandwidth`` is a
    multiple of the per-axis sample standard deviation (default: 1.5 times
    the two-dimensional Silverman factor).
    """
    _check_flow_problem(problem, "chi_squared")
    if mc_paths < 10_000:
        raise InvalidArgument("mc_paths must be at least 1e4")
    ch = problem.chain
    pts, dx = ch.grid.points, ch.grid.dx
    a, b = pts[0], pts[-1]
    T, dt = ch.time.n_steps, ch.time.dt

    vt = _linear_solution(problem, theta, substeps, solver_tol)
    rvt = _linear_solution(reversed_problem(problem), theta, substeps, solver_tol)
    g_f = np.gradient(vt, pts, axis=1)
    g_b = np.gradient(rvt, pts, axis=1)
    h_f = np.gradient(g_f, pts, axis=1)
    factor = 1.5 * mc_paths ** (-1.0 / 6.0) if bandwidth is None else float(bandwidth)
    if factor <= 0:
        raise InvalidArgument("bandwidth must be positive")

    rng = np.random.default_rng(seed)
    X = pts[rng.choice(ch.n, size=mc_paths, p=problem.mu0)]
    X = np.clip(X + rng.uniform(-0.5, 0.5, mc_paths) * dx, a, b)
    Z = np.ones(mc_paths)
    keep = [k for k in range(T + 1) if T / 4 <= k <= 3 * T / 4]
    snaps = {}
    floored = 0
    ds = dt / substeps
    for k in range(T):
        if k in keep:
            snaps[k] = (X.copy(), Z.copy())
        for j in range(substeps):
            w = j / substeps
            g = np.interp(X, pts, (1 - w) * g_f[k] + w * g_f[k + 1])
            dW = rng.normal(scale=np.sqrt(ds), size=mc_paths)
            Xn = X + (-g / Z - 0.5 * np.interp(X, pts, ch.dU)) * ds + dW
            Zn = Z + g * g / Z * ds - g * dW
            # reflect at the ends, as the reference chain does
            Xn = np.where(Xn < a, 2 * a - Xn, Xn)
            Xn = np.where(Xn > b, 2 * b - Xn, Xn)
            X = np.clip(Xn, a, b)
            low = Zn < z_floor
            floored += int(low.sum())
            Z = np.where(low, z_floor, Zn)
    if T in keep:
        snaps[T] = (X, Z)

    per_time, moments, worst_ess = [], [], np.inf
    sample_res, sample_comp = [], []
    for k in keep:
        x, z = snaps[k]
        sd = np.array([x.std(), z.std()])
        h = factor * np.where(sd > 1e-12, sd, 1e-3 / factor)
        # drifts at the samples, smoothed with the density's own kernel
        gs = np.interp(x, pts, g_f[k])
        gbs = np.interp(x, pts, g_b[T - k])
        drift_x = -(gs + gbs) / z - np.interp(x, pts, ch.dU)
        dgs = np.interp(x, pts, h_f[k])
        drift_z = (gs * gs + gbs * gbs) / z + dgs
        cx, cz, step, q, qx, qz, (fq_x, fq_z) = _kde(x, z, h, (drift_x, drift_z))
        XX, ZZ = np.meshgrid(cx, cz, indexing="ij")
        g = np.interp(XX, pts, g_f[k])
        rhs_x = qx - g * qz
        rhs_z = -g * qx + g * g * qz

        qs_x = np.quantile(x, [0.2, 0.35, 0.5, 0.65, 0.8])
        if sd[1] > 1e-12:
            qs_z = np.quantile(z, [0.25, 0.5, 0.75])
            rz = max(0.5 * (qs_z[-1] - qs_z[0]), 3 * h[1])
        else:
            qs_z, rz = np.array([np.median(z)]), 3 * h[1]
        rx = max(0.5 * (qs_x[-1] - qs_x[0]) / 1.5, 3 * h[0])
        lhs, rhs, s_lhs, s_rhs = [], [], [], []
        for cxi in qs_x:
            bx, bxs = _bump((XX - cxi) / rx), _bump((x - cxi) / rx)
            for czj in qs_z:
                chi = bx * _bump((ZZ - czj) / rz)
                wts = bxs * _bump((z - czj) / rz)
                ess = wts.sum() ** 2 / max((wts * wts).sum(), 1e-300)
                worst_ess = min(worst_ess, ess)
                if ess < min_ess:
                    raise StatisticalFailure(
                        f"effective sample size {ess:.1f} < {min_ess:g} at t={ch.time.times[k]:.4g}")
                dA = step.prod()
                lhs += [np.sum(fq_x * chi) * dA, np.sum(fq_z * chi) * dA]
                rhs += [np.sum(rhs_x * chi) * dA, np.sum(rhs_z * chi) * dA]
                # E[(F + rF) chi] = -E[div(a chi)] evaluated on the samples
                uz = (z - czj) / rz
                chi_x = _dbump((x - cxi) / rx) / rx * _bump(uz)
                chi_z = bxs * _dbump(uz) / rz
                s_lhs += [np.mean(drift_x * wts), np.mean(drift_z * wts)]
                s_rhs += [-np.mean(chi_x - gs * chi_z),
                          -np.mean(-dgs * wts - gs * chi_x + gs * gs * chi_z)]
        lhs, rhs = np.array(lhs), np.array(rhs)
        moments.append((lhs, rhs))
        s_lhs, s_rhs = np.array(s_lhs), np.array(s_rhs)
        sc = max(np.linalg.norm(s_lhs), np.linalg.norm(s_rhs), 1e-300)
        sample_res.append(np.linalg.norm(s_lhs - s_rhs) / sc)
        sample_comp.append([np.linalg.norm((s_lhs - s_rhs)[j::2])
                            / max(np.linalg.norm(s_lhs[j::2]), np.linalg.norm(s_rhs[j::2]), 1e-300)
                            for j in (0, 1)])
        scale = max(np.linalg.norm(lhs), np.linalg.norm(rhs), 1e-300)
        per_time.append(np.linalg.norm(lhs - rhs) / scale)

    per_time = np.array(per_time)
    rate = floored / (mc_paths * T * substeps)
    log.info("chi-squared flow: residual %.4g, floor rate %.3g, min ESS %.0f",
             per_time.mean(), rate, worst_ess)
    return ChiSquaredFlowCheck(float(per_time.mean()), per_time, ch.time.times[keep],
                               rate, float(worst_ess), factor, moments,
                               np.array(sample_res), np.array(sample_comp))


def chisquared_flow_residual(problem, mc_paths=100_000, bandwidth=None, seed=0):
    return chisquared_flow_check(problem, mc_paths, bandwidth, seed).residual
