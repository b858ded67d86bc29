import json

import numpy as np
import pytest

from nesb.cli import ConfigError, config_hash, main, parse_config

BASE = {
    "grid": {"x_min": -1.0, "x_max": 1.0, "n_states": 3},
    "time": {"horizon": 0.6, "n_steps": 2},
    "potential": {"family": "quadratic", "a": 0.5},
    "divergence": {"name": "chi_squared"},
    "mu0": {"family": "reference"},
    "muT": {"family": "tabulated", "weights": [0.2, 0.3, 0.5]},
    "cost": {"family": "random", "scale": 1.0},
    "seed": 1,
}


def run(tmp_path, cfg, command="solve", name="cfg.json", extra=()):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    out = tmp_path / f"out_{command}_{name}"
    return main([command, "--config", str(path), "--out", str(out), *extra]), out


def with_(**changes):
    cfg = json.loads(json.dumps(BASE))
    cfg.update(changes)
    return cfg


def test_solve_writes_artifacts(tmp_path):
    code, out = run(tmp_path, with_(divergence={"name": "entropy"}))
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert abs(report["report"]["gap"]) <= 1e-6
    assert report["seed"] == 1
    chash = report["config_hash"]
    for name in ("potentials.csv", "density.csv"):
        lines = (out / name).read_text().splitlines()
        assert lines[0] == f"# config_hash={chash} seed=1"
    rows = np.loadtxt(out / "density.csv", delimiter=",", skiprows=2)
    assert rows.shape == (9, 3)


def test_csv_uses_full_precision(tmp_path):
    _, out = run(tmp_path, BASE)
    line = (out / "potentials.csv").read_text().splitlines()[2]
    phi = line.split(",")[2]
    assert float(phi) == float(format(float(phi), ".17g"))
    assert len(phi.replace("-", "").replace(".", "").split("e")[0]) >= 15


def test_missing_divergence_is_exit_1(tmp_path, capsys):
    cfg = with_()
    del cfg["divergence"]
    code, _ = run(tmp_path, cfg)
    assert code == 1
    assert "divergence" in capsys.readouterr().err


@pytest.mark.parametrize("field,value,where", [
    ("grid", {"x_min": 1, "x_max": -1, "n_states": 3}, "grid"),
    ("mu0", {"family": "banana"}, "mu0.family"),
    ("cost", {"family": "tabulated", "matrix": [[0]]}, "cost.matrix"),
    ("solver", {"method": "newton"}, "solver.method"),
    ("colour", "blue", "colour"),
])
def test_malformed_fields_are_named(tmp_path, capsys, field, value, where):
    code, _ = run(tmp_path, with_(**{field: value}))
    assert code == 1
    assert f"'{where}" in capsys.readouterr().err


def test_unreachable_target_is_exit_3(tmp_path):
    cfg = with_(potential={"family": "zero"}, time={"horizon": 1e-4, "n_steps": 1},
                grid={"x_min": -10.0, "x_max": 10.0, "n_states": 3},
                mu0={"family": "tabulated", "weights": [1, 0, 0]},
                muT={"family": "tabulated", "weights": [0, 0, 1]},
                divergence={"name": "entropy"}, cost={"family": "zero"})
    code, _ = run(tmp_path, cfg)
    assert code == 3


def test_iteration_cap_is_exit_2(tmp_path):
    code, _ = run(tmp_path, with_(solver={"max_iters": 1}))
    assert code == 2


def test_check_passes_on_small_instance(tmp_path):
    code, out = run(tmp_path, BASE, "check")
    assert code == 0
    report = json.loads((out / "check.json").read_text())
    assert report["passed"] and report["value_difference"] <= 1e-6


def test_check_records_entropy_decomposition(tmp_path):
    code, out = run(tmp_path, with_(divergence={"name": "entropy"}), "check")
    assert code == 0
    dp = json.loads((out / "check.json").read_text())["data_processing"]
    assert dp["path"] == pytest.approx(dp["weighted_optimizer"], abs=1e-10)


def test_oversized_check_is_exit_4(tmp_path, capsys):
    cfg = with_(grid={"x_min": -1, "x_max": 1, "n_states": 10}, time={"horizon": 1.0, "n_steps": 6},
                muT={"family": "uniform"})
    code, _ = run(tmp_path, cfg, "check")
    assert code == 4
    assert "10000000" in capsys.readouterr().err


def test_flow_unsupported_divergence(tmp_path, capsys):
    code, _ = run(tmp_path, with_(divergence={"name": "tsallis", "q": 2.0}), "flow")
    assert code == 1
    assert "flow unsupported" in capsys.readouterr().err


def test_entropic_flow_rows_sum_to_one(tmp_path):
    cfg = with_(grid={"x_min": -3, "x_max": 3, "n_states": 15}, time={"horizon": 1.0, "n_steps": 6},
                potential={"family": "quadratic", "a": 0.1}, divergence={"name": "entropy"},
                mu0={"family": "gaussian", "mean": -1, "std": 0.6},
                muT={"family": "gaussian", "mean": 1, "std": 0.6}, cost={"family": "zero"})
    code, out = run(tmp_path, cfg, "flow")
    assert code == 0
    data = np.loadtxt(out / "flow.csv", delimiter=",", skiprows=2)
    sums = np.bincount(np.searchsorted(np.unique(data[:, 0]), data[:, 0]), weights=data[:, 2])
    np.testing.assert_allclose(sums, 1.0, atol=1e-10)
    cons = json.loads((out / "consistency.json").read_text())
    assert len(cons["tv_per_time"]) == 7


def test_seed_flag_overrides_config(tmp_path):
    _, out = run(tmp_path, BASE, extra=("--seed", "5"))
    assert json.loads((out / "report.json").read_text())["seed"] == 5


def test_runs_are_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(BASE))
    for out in (a, b):
        assert main(["solve", "--config", str(path), "--out", str(out), "--threads", "1"]) == 0
    for name in ("potentials.csv", "density.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ra, rb = (json.loads((d / "report.json").read_text()) for d in (a, b))
    ra.pop("wall_time_s"), rb.pop("wall_time_s")
    assert ra == rb


def test_config_hash_is_order_independent():
    flipped = dict(reversed(list(BASE.items())))
    assert config_hash(BASE) == config_hash(flipped)


def test_parse_config_rejects_unknown_section_keys():
    with pytest.raises(ConfigError) as err:
        parse_config(with_(solver={"tolerance": 1e-9}))
    assert err.value.where == "solver.tolerance"
