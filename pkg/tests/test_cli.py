import numpy as np
import pytest

from constrained_hjb import __version__
from constrained_hjb.cli import ConfigError, main, parse_config, read_value_csv, write_value_csv
from constrained_hjb.catalog import get_problem
from constrained_hjb.geometry import build_grid
from constrained_hjb.hjb import solve


def _cfg(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


MINIMAL = '[problem]\nname = "constant-cost"\nparams = { c = 2.0, beta = 1.0 }\n'


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(_cfg(tmp_path, MINIMAL))
    assert cfg.problem["params"] == {"c": 2.0, "beta": 1.0}
    assert cfg.grid["h"] == 0.1 and cfg.solver["method"] == "value" and cfg.solver["tol"] == 1e-8
    assert cfg.sim["seed"] == 0


@pytest.mark.parametrize(
    "extra,msg",
    [
        ("[grid]\nh = 0\n", "grid.h must be positive"),
        ("[solver]\ntolrance = 1e-6\n", "solver.tolrance"),
        ("[sim]\ndt = -1.0\n", "sim.dt must be positive"),
        ("[bogus]\nx = 1\n", "bogus"),
        ("[solver]\nmethod = \"newton\"\n", "solver.method"),
    ],
)
def test_config_errors(tmp_path, extra, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(_cfg(tmp_path, MINIMAL + extra))


def test_bad_problem_names(tmp_path):
    with pytest.raises(ConfigError, match="problem.name"):
        parse_config(_cfg(tmp_path, '[problem]\nname = "nope"\n'))
    with pytest.raises(ConfigError, match="problem.params.gamma"):
        parse_config(_cfg(tmp_path, '[problem]\nname = "constant-cost"\nparams = { gamma = 1 }\n'))
    with pytest.raises(ConfigError, match="problem.params.beta must be positive"):
        parse_config(_cfg(tmp_path, '[problem]\nname = "constant-cost"\nparams = { beta = 0 }\n'))


def test_overrides_and_seed(tmp_path):
    cfg = parse_config(_cfg(tmp_path, MINIMAL), ["grid.h=0.05", "solver.method=\"policy\""], seed=7)
    assert cfg.grid["h"] == 0.05 and cfg.solver["method"] == "policy" and cfg.sim["seed"] == 7
    with pytest.raises(ConfigError, match="solver.tolrance"):
        parse_config(_cfg(tmp_path, MINIMAL), ["solver.tolrance=1"])


def test_inline_problem(tmp_path):
    text = """
[problem]
name = "inline"
domain = { kind = "box", lower = [-1.0], upper = [1.0] }
drift = { name = "linear", rate = -1.0 }
diffusion = { name = "zero" }
cost = { name = "constant", c = 3.0 }
beta = 2.0
controls = [0.0]
[grid]
h = 0.25
"""
    cfg = parse_config(_cfg(tmp_path, text))
    assert main(["solve", "--config", str(_cfg(tmp_path, text)), "--out", str(tmp_path / "o")]) == 0
    data = read_value_csv(tmp_path / "o" / "value.csv")
    assert np.allclose(data["value"], 1.5)
    prob, dom = cfg.build()
    assert prob.cost_bounds == (3.0, 3.0)


def test_value_csv_roundtrip(tmp_path):
    prob, dom = get_problem("deterministic-decay")
    g = build_grid(dom, 0.5)
    _, res = solve(prob, g)
    path = tmp_path / "v.csv"
    write_value_csv(res, path, ["a", "b"])
    lines = path.read_text().splitlines()
    assert lines[:2] == ["# a", "# b"] and lines[2] == "x0,value,policy_index,node_class"
    assert len(lines) == 2 + 1 + 5
    back = read_value_csv(path)
    assert np.array_equal(back["value"], res.value.values)
    assert np.array_equal(back["coords"], g.coords)
    assert back["node_class"][0] == "boundary" and back["node_class"][2] == "interior"


def test_exit_codes(tmp_path):
    out = str(tmp_path / "o")
    assert main(["solve", "--config", str(_cfg(tmp_path, MINIMAL + "[grid]\nh = 0\n")), "--out", out]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.toml"), "--out", out]) == 2
    assert main(["frobnicate", "--config", "x"]) == 2
    od = _cfg(tmp_path, '[problem]\nname = "outward-drift"\n', "od.toml")
    assert main(["viability", "--config", str(od), "--out", out]) == 1


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("CONSTRAINED_HJB_OUT", str(tmp_path / "env_out"))
    assert main(["solve", "--config", str(_cfg(tmp_path, MINIMAL))]) == 0
    assert (tmp_path / "env_out" / "value.csv").exists()


def test_provenance_headers(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(_cfg(tmp_path, MINIMAL)), "--out", str(out)]) == 0
    cfg = parse_config(_cfg(tmp_path, MINIMAL))
    for f in ("value.csv", "history.csv", "solve_report.txt"):
        text = (out / f).read_text()
        assert f"config-sha256 {cfg.config_hash()}" in text
        assert f"constrained-hjb {__version__}" in text
    assert "--- summary (json) ---" in (out / "solve_report.txt").read_text()


def test_all_degenerate_ball_and_reproducible(tmp_path):
    text = '[problem]\nname = "degenerate-ball"\n[sim]\nn_paths = 200\ndt = 0.02\nx0 = [[0.5, 0.0]]\n'
    c = _cfg(tmp_path, text)
    assert main(["all", "--config", str(c), "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    assert main(["all", "--config", str(c), "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "value.csv" in files and "ztest.csv" in files and "all_report.txt" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
