"""Non-entropic Schrodinger bridge on a reference chain.

The optimal law has density ``dQ/dP = (mu0/nu0)(X_0) f(X_0, X_T)`` with

    f(x, y) = dl*(-Q_c phi(y) - C(x, y) - psi(x)),

where the potentials solve the Schrodinger system: every row of ``f`` has
conditional mean one under the reference, and the induced terminal law is
``muT`` (or reaches it at zero weak cost). Two solvers are provided: a
generalized Sinkhorn iteration for the hard marginal constraint and
preconditioned dual ascent for any weak cost.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .divergence import Divergence, as_measure, divergence_value, solve_shift
from .errors import DualInfeasible, Infeasible, InvalidArgument, Unconverged
from .ref_chain import ReferenceChain, reverse_chain
from .weak_cost import WeakCost, apply_qc, weak_ot_value

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ProblemSpec:
    chain: ReferenceChain
    divergence: Divergence
    weak_cost: Optional[WeakCost] = None
    mu0: np.ndarray = None
    muT: np.ndarray = None
    cost: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.chain.n
        if self.weak_cost is None:
            self.weak_cost = WeakCost.total_variation()
        if self.mu0 is None or self.muT is None:
            raise InvalidArgument("both marginals are required")
        self.mu0 = as_measure(self.mu0, "mu0")
        self.muT = as_measure(self.muT, "muT")
        if self.mu0.size != n or self.muT.size != n:
            raise InvalidArgument("marginals do not match the grid")
        if np.any((self.mu0 > 0) & (self.chain.nu0 == 0)):
            raise InvalidArgument("mu0 must be absolutely continuous w.r.t. nu0")
        self.cost = np.zeros((n, n)) if self.cost is None else np.asarray(self.cost, dtype=float)
        if self.cost.shape != (n, n) or not np.all(np.isfinite(self.cost)):
            raise InvalidArgument("endpoint cost must be a finite n x n matrix")
        if self.weak_cost.kind != "total_variation" and self.weak_cost.points.size != n:
            raise InvalidArgument("weak cost grid does not match the chain")

    @property
    def n(self):
        return self.chain.n

    @property
    def tv(self):
        return self.weak_cost.kind == "total_variation"

    @cached_property
    def Pn(self):
        """Conditional law of X_T given X_0."""
        return self.chain.transition(0, self.chain.time.n_steps)

    @property
    def P01(self):
        return self.chain.nu0[:, None] * self.Pn

    @property
    def ratio0(self):
        nu0 = self.chain.nu0
        return np.where(nu0 > 0, self.mu0 / np.where(nu0 > 0, nu0, 1.0), 0.0)


@dataclass
class PotentialPair:
    phi: np.ndarray
    psi: np.ndarray


@dataclass
class SolveReport:
    primal_value: float
    dual_value: float
    gap: float
    residual_initial: float
    residual_terminal: float
    iterations: int
    converged: bool


class BridgeSolution(NamedTuple):
    potentials: PotentialPair
    density: np.ndarray
    report: SolveReport


@dataclass
class SchrodingerResiduals:
    initial: float
    terminal: float
    terminal_reversed: Optional[float] = None


def density(problem, phi, psi, qc=None):
    """f(x, y) = dl*(-Q_c phi(y) - C(x, y) - psi(x))."""
    if qc is None:
        qc = apply_qc(problem.weak_cost, phi)
    with np.errstate(invalid="ignore"):
        arg = -qc[None, :] - problem.cost - psi[:, None]
    return problem.divergence._dconj(arg)


def terminal_law(problem, f):
    w = problem.mu0[:, None] * problem.Pn * np.where(problem.mu0[:, None] > 0, f, 0.0)
    return w.sum(axis=0)


def _initial_residual(problem, f):
    rows = problem.mu0 > 0
    mass = (problem.Pn[rows] * f[rows]).sum(axis=1)
    return float(np.max(np.abs(mass - 1.0)))


def _terminal_residual(problem, f):
    nu = terminal_law(problem, f)
    if problem.tv:
        return float(np.max(np.abs(nu - problem.muT)))
    return weak_ot_value(problem.weak_cost, nu / nu.sum(), problem.muT)


def _psi_sweep(problem, qc, rows):
    xi = -qc[None, :] - problem.cost[rows]
    return solve_shift(problem.divergence, xi, problem.Pn[rows], 1.0)


def dual_value(problem, phi):
    """Dual objective at ``phi`` and the induced ``psi`` (the inner OCE roots).

    ``-sum_x mu0(x) Phi_{P_x}(-Q_c phi - C(x, .)) - <phi, muT> + I(mu0 | nu0)``
    """
    phi = np.asarray(phi, dtype=float)
    div = problem.divergence
    qc = apply_qc(problem.weak_cost, phi)
    rows = np.flatnonzero(problem.mu0 > 0)
    try:
        r = _psi_sweep(problem, qc, rows)
    except Infeasible as err:
        raise DualInfeasible(str(err)) from err
    psi = np.full(problem.n, np.nan)
    psi[rows] = r
    xi = -qc[None, :] - problem.cost[rows]
    P = problem.Pn[rows]
    with np.errstate(invalid="ignore"):
        conj = np.where(P > 0, div.conjugate(xi - r[:, None]), 0.0)
    oce = (P * conj).sum(axis=1) + r
    on = problem.muT > 0
    value = (-(problem.mu0[rows] @ oce) - float(phi[on] @ problem.muT[on])
             + divergence_value(div, problem.mu0, problem.chain.nu0))
    return float(value), psi


def primal_value(problem, f):
    """E_Q[C] + I(Q | P) for dQ/dP = (mu0/nu0)(X_0) f(X_0, X_T)."""
    P01 = problem.P01
    a = problem.ratio0[:, None]
    dens = np.where(a > 0, a * np.nan_to_num(f, nan=0.0), 0.0)
    on = P01 > 0
    transport = float(np.sum(P01[on] * dens[on] * problem.cost[on]))
    return transport + float(np.sum(P01[on] * problem.divergence.ell(dens[on])))


def _fill_psi(problem, qc, psi):
    """Solve the first equation on rows outside the support of mu0 too."""
    off = np.flatnonzero(~(problem.mu0 > 0))
    if off.size:
        try:
            psi[off] = _psi_sweep(problem, qc, off)
        except Infeasible:
            pass
    return psi


def _report(problem, phi, psi, f, iterations, converged):
    primal = primal_value(problem, f)
    dual, _ = dual_value(problem, phi)
    return SolveReport(primal, dual, primal - dual, _initial_residual(problem, f),
                       _terminal_residual(problem, f), iterations, converged)


def solve_sinkhorn(problem, *, tol=1e-11, max_iters=10000, damping=1.0):
    """Alternate exact solves of the two Schrodinger equations (TV target)."""
    if not problem.tv:
        raise InvalidArgument("Sinkhorn needs the hard marginal constraint; use solve_dual_ascent")
    if not 0 < damping <= 1:
        raise InvalidArgument("damping must lie in (0, 1]")
    div, n = problem.divergence, problem.n
    S0 = np.flatnonzero(problem.mu0 > 0)
    ST = np.flatnonzero(problem.muT > 0)
    W = problem.mu0[S0, None] * problem.Pn[S0][:, ST]   # (|S0|, |ST|)
    if np.any(W.sum(axis=0) <= 0):
        raise Infeasible("terminal marginal charges states the reference cannot reach")
    phi = np.full(n, np.inf)
    phi[ST] = 0.0
    psi = np.zeros(n)
    for it in range(1, max_iters + 1):
        old_phi, old_psi = phi[ST].copy(), psi[S0].copy()
        psi[S0] = _psi_sweep(problem, phi, S0)
        xi = (-problem.cost[np.ix_(S0, ST)] - psi[S0, None]).T
        new = solve_shift(div, xi, W.T, problem.muT[ST])
        phi[ST] = (1 - damping) * phi[ST] + damping * new
        shift = problem.muT[ST] @ phi[ST]
        phi[ST] -= shift
        psi[S0] += shift
        f = density(problem, phi, psi, qc=phi)
        res0 = _initial_residual(problem, f)
        resT = float(np.max(np.abs(terminal_law(problem, f) - problem.muT)))
        change = max(np.max(np.abs(phi[ST] - old_phi)), np.max(np.abs(psi[S0] - old_psi)))
        log.debug("sinkhorn it=%d res0=%.3g resT=%.3g dpot=%.3g", it, res0, resT, change)
        if max(res0, resT, change) <= tol:
            psi = _fill_psi(problem, phi, psi)
            f = density(problem, phi, psi, qc=phi)
            rep = _report(problem, phi, psi, f, it, True)
            log.info("sinkhorn converged in %d iterations, gap %.3g", it, rep.gap)
            return BridgeSolution(PotentialPair(phi, psi), f, rep)
    raise Unconverged(f"Sinkhorn did not converge in {max_iters} iterations "
                      f"(residuals {res0:.3g}, {resT:.3g})")


def _ascent_state(problem, phi):
    """Dual value, psi, candidate density, terminal law and supergradient."""
    qc, kern = apply_qc(problem.weak_cost, phi, return_kernel=True)
    value, psi = dual_value(problem, phi)
    f = density(problem, phi, psi, qc=qc)
    nu = terminal_law(problem, f)
    grad = nu @ kern - problem.muT
    if problem.tv:
        grad = np.where(problem.muT > 0, grad, 0.0)
    return value, psi, f, nu, grad


def solve_dual_ascent(problem, *, phi0=None, tol=1e-11, max_iters=20000, weak_tol=1e-6):
    """Maximize the dual by preconditioned supergradient ascent with backtracking.

    The ascent direction is ``(terminal law - muT) / (terminal law + muT)``.
    For weak costs the dual is not smooth; when the line search stalls the
    candidate is accepted if its terminal law reaches the target within
    ``weak_tol``.
    """
    n = problem.n
    if phi0 is None:
        phi = np.zeros(n)
        if problem.tv:
            phi[problem.muT == 0] = np.inf
    else:
        phi = np.asarray(phi0, dtype=float).copy()
    free = (problem.muT > 0) if problem.tv else np.ones(n, dtype=bool)
    value, psi, f, nu, grad = _ascent_state(problem, phi)
    step = 1.0
    it = 0
    stalled = False
    while np.max(np.abs(grad[free])) > tol:
        if it >= max_iters:
            break
        it += 1
        d = np.where(free, grad / np.maximum(nu + problem.muT, 1e-12), 0.0)
        slope = float(grad[free] @ d[free])
        t = min(2.0 * step, 1.0)
        while True:
            trial = np.where(free, phi + t * d, phi)
            try:
                tv_, tpsi, tf, tnu, tg = _ascent_state(problem, trial)
                ok = tv_ >= value + 1e-4 * t * slope - 1e-15 * abs(value)
            except DualInfeasible:
                ok = False
            if ok or t < 1e-12:
                break
            t *= 0.5
        if not ok:
            stalled = True
            break
        step = t
        phi = trial
        if problem.tv:
            phi[free] -= problem.muT[free] @ phi[free]
        value, psi, f, nu, grad = _ascent_state(problem, phi)
        log.debug("ascent it=%d value=%.12g |g|=%.3g t=%.3g", it, value, np.max(np.abs(grad)), t)
    converged = bool(np.max(np.abs(grad[free])) <= tol)
    if not converged and not problem.tv:
        converged = weak_ot_value(problem.weak_cost, nu / nu.sum(), problem.muT) <= weak_tol
    if not converged:
        why = "line search stalled" if stalled else f"{max_iters} iterations"
        raise Unconverged(f"dual ascent stopped ({why}), gradient {np.max(np.abs(grad)):.3g}")
    psi = _fill_psi(problem, apply_qc(problem.weak_cost, phi), psi)
    f = density(problem, phi, psi)
    return BridgeSolution(PotentialPair(phi, psi), f, _report(problem, phi, psi, f, it, True))


def verify_schrodinger_system(problem, pair):
    """Residuals of both equations; on reversible chains also the terminal
    equation written with the reversed kernel,
    ``muT(y) = m_T(y) E_rev[(mu0/nu0)(X_T) f | X_0 = y]``.
    """
    f = density(problem, pair.phi, pair.psi)
    out = SchrodingerResiduals(_initial_residual(problem, f), _terminal_residual(problem, f))
    if problem.chain.reversible and problem.tv:
        rev = reverse_chain(problem.chain)
        Pr = rev.transition(0, rev.time.n_steps)
        mT = problem.chain.marginals()[-1]
        a = problem.ratio0
        g = np.where(a[:, None] > 0, a[:, None] * f, 0.0)
        nu = mT * (Pr * g.T).sum(axis=1)
        out.terminal_reversed = float(np.max(np.abs(nu - problem.muT)))
    return out


def tensorization_check(problem, f):
    """Compare I(Q|P) with sum_x mu0(x) I(Q_x|P_x) when mu0 = nu0."""
    if not np.allclose(problem.mu0, problem.chain.nu0, rtol=0, atol=1e-12):
        raise InvalidArgument("tensorization requires mu0 = nu0")
    div = problem.divergence
    P01 = problem.P01
    lhs = divergence_value(div, (P01 * f).ravel(), P01.ravel())
    rhs = 0.0
    for x in np.flatnonzero(problem.mu0 > 0):
        rhs += problem.mu0[x] * divergence_value(div, problem.Pn[x] * f[x], problem.Pn[x])
    return lhs, rhs
