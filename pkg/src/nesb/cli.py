"""Batch front end: ``nesb {solve,flow,check} --config run.json [--out DIR]``.

Exit codes: 0 success, 1 bad config or unsupported request, 2 solver did not
converge, 3 infeasible marginals, 4 instance too large for path enumeration.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .bridge_solver import ProblemSpec, solve_dual_ascent, solve_sinkhorn, tensorization_check
from .divergence import Divergence
from .errors import Infeasible, NesbError, TooLarge, Unconverged
from .marginal_flow import chain_marginals, chisquared_flow_check, entropic_flow
from .oracle import data_processing_decomposition, endpoint_factorization_defect, path_table, solve_paths
from .ref_chain import GridSpec, TimeGridSpec, build_chain
from .weak_cost import WeakCost

log = logging.getLogger("nesb")

EXIT_OK, EXIT_CONFIG, EXIT_UNCONVERGED, EXIT_INFEASIBLE, EXIT_TOO_LARGE = range(5)


class ConfigError(Exception):
    def __init__(self, where, message):
        super().__init__(f"config field '{where}': {message}")
        self.where = where


# -- configuration ------------------------------------------------------------

@dataclass
class PotentialConfig:
    family: str = "zero"            # zero | quadratic | double_well | tabulated
    a: float = 0.5
    b: float = 1.0
    values: Optional[list] = None


@dataclass
class MeasureConfig:
    family: str = "reference"       # reference | uniform | gaussian | tabulated
    mean: float = 0.0
    std: float = 1.0
    weights: Optional[list] = None


@dataclass
class DivergenceConfig:
    name: str = "entropy"           # entropy | chi_squared | tsallis | hellinger
    q: float = 2.0


@dataclass
class WeakCostConfig:
    name: str = "total_variation"   # total_variation | marton | barycentric | moreau_yosida
    p: float = 1.0
    theta: str = "square"
    lam: float = 1.0


@dataclass
class CostConfig:
    family: str = "zero"            # zero | quadratic | random | tabulated
    scale: float = 1.0
    matrix: Optional[list] = None


@dataclass
class SolverConfig:
    method: str = "sinkhorn"        # sinkhorn | dual_ascent
    tol: float = 1e-11
    max_iters: int = 10000


@dataclass
class FlowConfig:
    mc_paths: int = 100_000
    bandwidth: Optional[float] = None
    refinement: bool = False


@dataclass
class RunConfig:
    grid: GridSpec
    time: TimeGridSpec
    divergence: DivergenceConfig
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    chain_mode: str = "metropolized"
    weak_cost: WeakCostConfig = field(default_factory=WeakCostConfig)
    mu0: MeasureConfig = field(default_factory=MeasureConfig)
    muT: MeasureConfig = field(default_factory=MeasureConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    seed: int = 0
    output: str = "out"


_SECTIONS = {
    "grid": GridSpec, "time": TimeGridSpec, "divergence": DivergenceConfig,
    "potential": PotentialConfig, "weak_cost": WeakCostConfig, "mu0": MeasureConfig,
    "muT": MeasureConfig, "cost": CostConfig, "solver": SolverConfig, "flow": FlowConfig,
}
_REQUIRED = ("grid", "time", "divergence")


def _build_section(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def parse_config(raw):
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(key, "missing")
    known = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown key")
    kw = {k: _build_section(k, _SECTIONS[k], v) if k in _SECTIONS else v for k, v in raw.items()}
    cfg = RunConfig(**kw)
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    return cfg


def config_hash(raw):
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- building the problem -----------------------------------------------------

def _potential(cfg, pts):
    p = cfg.potential
    if p.family == "zero":
        return np.zeros_like(pts)
    if p.family == "quadratic":
        return p.a * pts**2
    if p.family == "double_well":
        return p.a * (pts**2 - p.b) ** 2
    if p.family == "tabulated":
        if p.values is None or len(p.values) != pts.size:
            raise ConfigError("potential.values", f"need {pts.size} values")
        return np.asarray(p.values, dtype=float)
    raise ConfigError("potential.family", f"unknown family {p.family!r}")


def _measure(m, name, pts, reference):
    if m.family == "reference":
        return reference.copy()
    if m.family == "uniform":
        return np.full(pts.size, 1.0 / pts.size)
    if m.family == "gaussian":
        if not m.std > 0:
            raise ConfigError(f"{name}.std", "must be positive")
        w = np.exp(-0.5 * ((pts - m.mean) / m.std) ** 2)
        return w / w.sum()
    if m.family == "tabulated":
        if m.weights is None or len(m.weights) != pts.size:
            raise ConfigError(f"{name}.weights", f"need {pts.size} weights")
        w = np.asarray(m.weights, dtype=float)
        if np.any(w < 0) or not w.sum() > 0:
            raise ConfigError(f"{name}.weights", "must be non-negative with positive sum")
        return w / w.sum()
    raise ConfigError(f"{name}.family", f"unknown family {m.family!r}")


def _divergence(cfg):
    d = cfg.divergence
    makers = {"entropy": Divergence.entropy, "chi_squared": Divergence.chi_squared,
              "hellinger": Divergence.hellinger, "tsallis": lambda: Divergence.tsallis(d.q)}
    if d.name not in makers:
        raise ConfigError("divergence.name", f"unknown divergence {d.name!r}")
    return makers[d.name]()


def _weak_cost(cfg, pts):
    w = cfg.weak_cost
    if w.name == "total_variation":
        return WeakCost.total_variation()
    if w.name == "marton":
        return WeakCost.marton(pts, w.p)
    if w.name == "barycentric":
        return WeakCost.barycentric(pts, w.theta)
    if w.name == "moreau_yosida":
        return WeakCost.moreau_yosida(pts, w.lam)
    raise ConfigError("weak_cost.name", f"unknown weak cost {w.name!r}")


def _cost(cfg, pts, rng):
    c = cfg.cost
    n = pts.size
    if c.family == "zero":
        return np.zeros((n, n))
    if c.family == "quadratic":
        return c.scale * (pts[:, None] - pts[None, :]) ** 2
    if c.family == "random":
        return rng.uniform(-c.scale, c.scale, (n, n))
    if c.family == "tabulated":
        mat = np.asarray(c.matrix, dtype=float) if c.matrix is not None else None
        if mat is None or mat.shape != (n, n):
            raise ConfigError("cost.matrix", f"need an {n} x {n} matrix")
        return mat
    raise ConfigError("cost.family", f"unknown family {c.family!r}")


def build_problem(cfg, grid=None, time_grid=None):
    grid = grid or cfg.grid
    time_grid = time_grid or cfg.time
    rng = np.random.default_rng(cfg.seed)
    pts = grid.points
    if cfg.chain_mode not in ("metropolized", "euler"):
        raise ConfigError("chain_mode", f"unknown mode {cfg.chain_mode!r}")
    chain = build_chain(grid, time_grid, _potential(cfg, pts), mode=cfg.chain_mode)
    mu0 = _measure(cfg.mu0, "mu0", pts, chain.nu0)
    muT = _measure(cfg.muT, "muT", pts, chain.lam)
    return ProblemSpec(chain, _divergence(cfg), _weak_cost(cfg, pts), mu0=mu0, muT=muT,
                       cost=_cost(cfg, pts, rng))


# -- output helpers -----------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def write_csv(path, header, rows, chash, seed):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# config_hash={chash} seed={seed}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload, chash, seed):
    body = {"config_hash": chash, "seed": seed, **payload}
    with open(path, "w") as fh:
        json.dump(_jsonable(body), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands -------------------------------------------------------------------

def _solve(problem, cfg):
    s = cfg.solver
    if s.method == "sinkhorn":
        return solve_sinkhorn(problem, tol=s.tol, max_iters=s.max_iters)
    if s.method == "dual_ascent":
        return solve_dual_ascent(problem, tol=s.tol, max_iters=s.max_iters)
    raise ConfigError("solver.method", f"unknown method {s.method!r}")


def cmd_solve(cfg, out, chash, raw):
    problem = build_problem(cfg)
    start = time.perf_counter()
    pair, f, report = _solve(problem, cfg)
    wall = time.perf_counter() - start
    pts = problem.chain.grid.points
    write_csv(out / "potentials.csv", ["state", "x", "phi", "psi"],
              zip(range(problem.n), pts, pair.phi, pair.psi), chash, cfg.seed)
    write_csv(out / "density.csv", ["x0", "xT", "f"],
              ((pts[i], pts[j], f[i, j]) for i in range(problem.n) for j in range(problem.n)),
              chash, cfg.seed)
    write_json(out / "report.json", {"report": asdict(report), "config": raw,
                                     "warnings": problem.chain.warnings, "wall_time_s": wall},
               chash, cfg.seed)
    log.info("solve: primal %.10g dual %.10g gap %.3g in %d iterations",
             report.primal_value, report.dual_value, report.gap, report.iterations)
    return EXIT_OK


def _entropic_errors(problem, flow):
    _, f, _ = solve_sinkhorn(problem)
    exact = chain_marginals(problem, f)
    return exact, flow.tv_to(exact.density)


def cmd_flow(cfg, out, chash, raw):
    problem = build_problem(cfg)
    kind = problem.divergence.kind
    if kind not in ("entropy", "chi_squared"):
        raise ConfigError("divergence.name", "flow unsupported for this divergence")
    payload = {"divergence": kind}
    if kind == "entropy":
        flow = entropic_flow(problem, solver_tol=cfg.solver.tol)
        exact, tv = _entropic_errors(problem, flow)
        density, method = flow.density, "hjb"
        payload.update(tv_per_time=tv, tv_max=tv.max())
        if cfg.flow.refinement:
            fine = build_problem(cfg, cfg.grid.refined(), cfg.time.refined())
            _, tv_fine = _entropic_errors(fine, entropic_flow(fine, solver_tol=cfg.solver.tol))
            payload.update(refined_tv_max=tv_fine.max(), refinement_ratio=tv.max() / tv_fine.max())
    else:
        _, f, _ = solve_sinkhorn(problem, tol=cfg.solver.tol)
        exact = chain_marginals(problem, f)
        density, method = exact.density, "chain"
        chk = chisquared_flow_check(problem, cfg.flow.mc_paths, cfg.flow.bandwidth, cfg.seed)
        payload.update(weak_form_residual=chk.residual, residual_per_time=chk.per_time,
                       residual_times=chk.times, z_floor_rate=chk.floor_rate, min_ess=chk.min_ess,
                       bandwidth_factor=chk.bandwidth,
                       kernel_free_residual=chk.sample_per_time.mean())
    payload["density_method"] = method
    t, x = problem.chain.time.times, problem.chain.grid.points
    rows = ((t[k], x[i], density[k, i], exact.density[k, i])
            for k in range(t.size) for i in range(x.size))
    write_csv(out / "flow.csv", ["t", "x", "density", "chain_density"], rows, chash, cfg.seed)
    write_json(out / "consistency.json", payload, chash, cfg.seed)
    return EXIT_OK


def cmd_check(cfg, out, chash, raw):
    problem = build_problem(cfg)
    if not problem.tv:
        raise ConfigError("weak_cost.name", "the path oracle supports the total-variation target only")
    table = path_table(problem.chain, problem.cost)
    div = problem.divergence
    sol = solve_paths(table, div, problem.mu0, problem.muT, seed=cfg.seed)
    _, f, rep = _solve(problem, cfg)
    agree = abs(rep.primal_value - sol.value)
    lhs, rhs_p, rhs_q = data_processing_decomposition(table, sol.q, div)
    endpoint = table.endpoint_divergence(sol.q, div)
    checks = {
        "value_agreement": agree <= 1e-6 * (1 + abs(sol.value)),
        "factorization": endpoint_factorization_defect(table, sol.q) <= 1e-6,
        "data_processing": lhs - endpoint >= -1e-12,
    }
    payload = {
        "solver_value": rep.primal_value, "oracle_value": sol.value, "value_difference": agree,
        "factorization_defect": endpoint_factorization_defect(table, sol.q),
        "data_processing": {"path": lhs, "weighted_reference": rhs_p, "weighted_optimizer": rhs_q,
                            "endpoint": endpoint},
        "n_paths": len(table.prob),
    }
    if div.kind == "entropy":
        checks["entropy_decomposition"] = abs(lhs - rhs_q) <= 1e-10
    if np.max(np.abs(problem.mu0 - problem.chain.nu0)) <= 1e-12:
        t_lhs, t_rhs = tensorization_check(problem, f)
        payload["tensorization"] = [t_lhs, t_rhs]
        checks["tensorization"] = abs(t_lhs - t_rhs) <= 1e-12
    else:
        payload["tensorization"] = None
    payload["checks"] = checks
    payload["passed"] = all(checks.values())
    write_json(out / "check.json", payload, chash, cfg.seed)
    if not payload["passed"]:
        failed = [k for k, ok in checks.items() if not ok]
        print(f"check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "flow": cmd_flow, "check": cmd_check}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nesb", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None, help="rng seed (overrides config)")
    args = parser.parse_args(argv)

    level = os.environ.get("NESB_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        raw = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and isinstance(raw, dict):
        raw["seed"] = args.seed
    try:
        cfg = parse_config(raw)
        chash = config_hash(raw)
        out = args.out or Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit(args.threads), warnings.catch_warnings():
            warnings.simplefilter("ignore" if level == "ERROR" else "default")
            return COMMANDS[args.command](cfg, out, chash, raw)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except TooLarge as exc:
        print(f"instance too large: {exc.count} paths", file=sys.stderr)
        return EXIT_TOO_LARGE
    except Unconverged as exc:
        print(f"unconverged: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NesbError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
