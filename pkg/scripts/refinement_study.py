"""Entropic marginal flow against exact chain marginals under grid refinement.

    python scripts/refinement_study.py --levels 3 --a 0.05
"""
import argparse
import warnings

import numpy as np

from nesb.bridge_solver import ProblemSpec, solve_sinkhorn
from nesb.divergence import Divergence
from nesb.marginal_flow import chain_marginals, entropic_flow
from nesb.ref_chain import GridSpec, TimeGridSpec, build_chain


def gaussian(pts, m, s):
    w = np.exp(-0.5 * ((pts - m) / s) ** 2)
    return w / w.sum()


def error(grid, tgrid, a):
    ch = build_chain(grid, tgrid, lambda x: a * x * x)
    pts = ch.grid.points
    prob = ProblemSpec(ch, Divergence.entropy(), mu0=gaussian(pts, -1, 0.5), muT=gaussian(pts, 1, 0.5))
    _, f, _ = solve_sinkhorn(prob)
    return entropic_flow(prob).tv_to(chain_marginals(prob, f).density).max()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--a", type=float, default=0.05, help="potential U(x) = a x^2")
    ap.add_argument("--half-width", type=float, default=3.0)
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    grid, tgrid = GridSpec(-args.half_width, args.half_width, 31), TimeGridSpec(1.0, 16)
    prev = None
    print(f"{'states':>7} {'steps':>6} {'max TV':>10} {'ratio':>7}")
    for _ in range(args.levels):
        err = error(grid, tgrid, args.a)
        ratio = "" if prev is None else f"{prev / err:7.2f}"
        print(f"{grid.n_states:7d} {tgrid.n_steps:6d} {err:10.3e} {ratio}")
        prev = err
        grid, tgrid = grid.refined(), tgrid.refined()


if __name__ == "__main__":
    main()
