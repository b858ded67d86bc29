"""Generalized Sinkhorn against brute-force path optimization on random small instances.

    python scripts/oracle_agreement.py --instances 30
"""
import argparse
import time
import warnings

import numpy as np

from nesb.bridge_solver import ProblemSpec, solve_sinkhorn
from nesb.divergence import Divergence
from nesb.oracle import endpoint_factorization_defect, path_table, solve_paths
from nesb.ref_chain import GridSpec, TimeGridSpec, build_chain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    rng = np.random.default_rng(args.seed)
    divs = [Divergence.entropy(), Divergence.chi_squared(), Divergence.tsallis(2.0), Divergence.hellinger()]
    print(f"{'div':>12} {'n':>3} {'T':>3} {'sinkhorn':>14} {'oracle':>14} {'rel gap':>9} {'defect':>9} {'sec':>6}")
    for k in range(args.instances):
        div = divs[k % len(divs)]
        n, steps = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        ch = build_chain(GridSpec(-1, 1, n), TimeGridSpec(0.5 * steps, steps), rng.normal(size=n) * 0.5)
        mu0 = rng.dirichlet(np.ones(n) * 2) if div.kind == "entropy" else ch.nu0
        prob = ProblemSpec(ch, div, mu0=mu0, muT=rng.dirichlet(np.ones(n) * 2),
                           cost=rng.uniform(-1, 1, (n, n)))
        start = time.perf_counter()
        rep = solve_sinkhorn(prob).report
        table = path_table(ch, prob.cost)
        sol = solve_paths(table, div, prob.mu0, prob.muT)
        gap = abs(rep.primal_value - sol.value) / (1 + abs(sol.value))
        print(f"{div.label:>12} {n:3d} {steps:3d} {rep.primal_value:14.10f} {sol.value:14.10f} "
              f"{gap:9.1e} {endpoint_factorization_defect(table, sol.q):9.1e} {time.perf_counter() - start:6.2f}")


if __name__ == "__main__":
    main()
