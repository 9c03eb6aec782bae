"""Config parsing, pipeline orchestration and report/grid serialisation.

Configs are TOML with sections ``problem``, ``grid``, ``solver``, ``sim``,
``verify`` and ``output``. Unknown keys are hard errors. Every output file
starts with comment lines carrying the tool version and a sha256 of the
resolved config (output section excluded), and no timestamps, so identical
config + seed gives byte-identical files.

Exit codes: 0 success, 1 a check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import inspect
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .catalog import PROBLEMS, get_problem, inline_problem
from .geometry import Grid, NodeClass, Policy, ValueFunction, build_grid
from .hjb import MonotonicityError, AdmissibilityError, SolveResult, solve
from .simulate import PROJECT, RESAMPLE, SimParams, estimate_cost, simulate_paths, test_z_process, upper_bound_check
from .verify import check_comparison, check_sandwich, check_subsolution, check_supersolution
from .viability import ViabilityError, construct_feedback, scan_boundary

logger = logging.getLogger(__name__)

ENV_OUT = "CONSTRAINED_HJB_OUT"
SUBCOMMANDS = ("solve", "simulate", "ztest", "verify", "viability", "sandwich", "all")
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "problem": {},
    "grid": {"h": 0.1, "boundary_band": None},
    "solver": {"method": "value", "tol": 1e-8, "max_iter": 1_000_000},
    "sim": {
        "dt": 0.01,
        "horizon": 5.0,
        "n_paths": 1000,
        "seed": 0,
        "projection_mode": PROJECT,
        "x0": None,
        "checkpoints": [0.5, 1.0, 2.0, 5.0],
        "write_paths": False,
    },
    "verify": {
        "tol": None,
        "viability_samples": 1000,
        "tol_sigma": 1e-8,
        "tol_b": 0.0,
        "delta_strict": 1e-6,
        "psi": None,
        "order_tol": 1e-9,
    },
    "output": {"dir": None, "formats": ["csv", "txt"]},
}
PROBLEM_KEYS = {"name", "params", "domain", "drift", "diffusion", "cost", "beta", "controls", "cost_bounds"}


@dataclass
class RunConfig:
    problem: dict
    grid: dict
    solver: dict
    sim: dict
    verify: dict
    output: dict
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of everything except the output section."""
        body = {k: getattr(self, k) for k in ("problem", "grid", "solver", "sim", "verify")}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"), default=_jsonable)
        return hashlib.sha256(text.encode()).hexdigest()

    def build(self):
        p = self.problem
        if p["name"] == "inline":
            args = {k: p[k] for k in ("domain", "drift", "diffusion", "cost", "beta", "controls") if k in p}
            try:
                return inline_problem(cost_bounds=p.get("cost_bounds"), **args)
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"problem: invalid inline problem ({exc})") from None
        return get_problem(p["name"], **p.get("params", {}))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _merge(section: str, given: dict, defaults: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {section}.{key}")
        out[key] = val
    return out


def _require_positive(cfg: dict, section: str, key: str):
    v = cfg[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        raise ConfigError(f"{section}.{key} must be positive")


def validate(raw: dict) -> RunConfig:
    for key in raw:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key}")
    if "problem" not in raw or "name" not in raw["problem"]:
        raise ConfigError("missing required key problem.name")
    problem = dict(raw["problem"])
    for key in problem:
        if key not in PROBLEM_KEYS:
            raise ConfigError(f"unknown config key problem.{key}")
    name = problem["name"]
    if name == "inline":
        for key in ("domain", "drift", "diffusion", "cost", "beta", "controls"):
            if key not in problem:
                raise ConfigError(f"missing required key problem.{key}")
        if not problem["beta"] > 0:
            raise ConfigError("problem.beta must be positive")
    else:
        if name not in PROBLEMS:
            raise ConfigError(f"problem.name: unknown catalog problem {name!r}; choose from {sorted(PROBLEMS)}")
        params = dict(problem.get("params", {}))
        allowed = inspect.signature(PROBLEMS[name]).parameters
        for key in params:
            if key not in allowed:
                raise ConfigError(f"unknown config key problem.params.{key}")
        if "beta" in params and not params["beta"] > 0:
            raise ConfigError("problem.params.beta must be positive")
        problem["params"] = params
        extra = set(problem) - {"name", "params"}
        if extra:
            raise ConfigError(f"unknown config key problem.{sorted(extra)[0]} for catalog problem")

    grid = _merge("grid", raw.get("grid", {}), DEFAULTS["grid"])
    _require_positive(grid, "grid", "h")
    solver = _merge("solver", raw.get("solver", {}), DEFAULTS["solver"])
    if solver["method"] not in ("value", "policy"):
        raise ConfigError("solver.method must be 'value' or 'policy'")
    _require_positive(solver, "solver", "tol")
    _require_positive(solver, "solver", "max_iter")
    sim = _merge("sim", raw.get("sim", {}), DEFAULTS["sim"])
    _require_positive(sim, "sim", "dt")
    _require_positive(sim, "sim", "horizon")
    _require_positive(sim, "sim", "n_paths")
    if sim["projection_mode"] not in (PROJECT, RESAMPLE):
        raise ConfigError(f"sim.projection_mode must be {PROJECT!r} or {RESAMPLE!r}")
    if not isinstance(sim["seed"], int) or not 0 <= sim["seed"] < 2**64:
        raise ConfigError("sim.seed must be an unsigned 64-bit integer")
    if any(t > sim["horizon"] for t in sim["checkpoints"]):
        raise ConfigError("sim.checkpoints must not exceed sim.horizon")
    verify = _merge("verify", raw.get("verify", {}), DEFAULTS["verify"])
    _require_positive(verify, "verify", "viability_samples")
    output = _merge("output", raw.get("output", {}), DEFAULTS["output"])
    bad = set(output["formats"]) - {"csv", "txt"}
    if bad:
        raise ConfigError(f"output.formats: unsupported format {sorted(bad)[0]!r}")
    return RunConfig(problem, grid, solver, sim, verify, output, raw)


def _set_path(raw: dict, dotted: str, value):
    parts = dotted.split(".")
    if len(parts) < 2:
        raise ConfigError(f"--set expects section.key=value, got {dotted!r}")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {p} is not a table")
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_config(path, overrides=(), seed: int | None = None) -> RunConfig:
    """Read and validate a TOML config; ``overrides`` are ``section.key=value`` strings."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(raw, key.strip(), _parse_value(val.strip()))
    if seed is not None:
        raw.setdefault("sim", {})["seed"] = seed
    return validate(raw)


# -- serialisation ---------------------------------------------------------

def header_lines(cfg: RunConfig, kind: str) -> list[str]:
    return [f"constrained-hjb {__version__}", f"config-sha256 {cfg.config_hash()}", f"content {kind}"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_value_csv(result: SolveResult, path, header=()):
    g = result.value.grid
    X = g.coords
    try:
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i}" for i in range(g.dim)] + ["value", "policy_index", "node_class"])
            for i in range(g.n_nodes):
                w.writerow(
                    [_fmt(c) for c in X[i]]
                    + [_fmt(result.value.values[i]), int(result.policy.index[i]), NodeClass(g.classes[i]).name.lower()]
                )
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_value_csv(path) -> dict:
    """Inverse of :func:`write_value_csv` (comment lines skipped)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    head, body = rows[0], rows[1:]
    d = sum(1 for h in head if h.startswith("x"))
    return {
        "coords": np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d),
        "value": np.array([float(r[d]) for r in body]),
        "policy_index": np.array([int(r[d + 1]) for r in body]),
        "node_class": [r[d + 2] for r in body],
    }


def write_history_csv(result: SolveResult, path, header=()):
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "update"])
        for k, r in enumerate(result.history, 1):
            w.writerow([k, _fmt(r)])


def write_report(title: str, summary: dict, path, header=(), lines=()):
    """Structured text: header comments, free lines, then a JSON summary block."""
    try:
        with open(path, "w") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            fh.write(f"{title}\n")
            for line in lines:
                fh.write(f"{line}\n")
            fh.write("--- summary (json) ---\n")
            fh.write(json.dumps(summary, sort_keys=True, indent=2, default=_jsonable))
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# -- pipeline --------------------------------------------------------------

class Pipeline:
    """Runs stages on one config, caching the problem, grid and solve."""

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.problem, self.domain = cfg.build()
        self._grid: Grid | None = None
        self._solved = None
        self.results: dict = {}

    @property
    def grid(self) -> Grid:
        if self._grid is None:
            self._grid = build_grid(self.domain, self.cfg.grid["h"], self.cfg.grid["boundary_band"])
        return self._grid

    def solved(self):
        if self._solved is None:
            s = self.cfg.solver
            self._solved = solve(self.problem, self.grid, s["method"], s["tol"], int(s["max_iter"]))
        return self._solved

    def _want(self, fmt: str) -> bool:
        return fmt in self.cfg.output["formats"]

    def _header(self, kind):
        return header_lines(self.cfg, kind)

    def _report(self, name, title, summary, lines=()):
        if self._want("txt"):
            write_report(title, summary, self.out / name, self._header(name), lines)

    def x0_list(self) -> list[np.ndarray]:
        x0 = self.cfg.sim["x0"]
        if x0 is None:
            lo, hi = self.domain.bounding_box()
            c = 0.5 * (lo + hi)
            return [c + 0.3 * (hi - c)]
        pts = np.atleast_2d(np.asarray(x0, dtype=float))
        if pts.shape[1] != self.problem.dim:
            raise ConfigError(f"sim.x0 points must have dimension {self.problem.dim}")
        return list(pts)

    def sim_params(self, horizon=None) -> SimParams:
        s = self.cfg.sim
        return SimParams(float(s["dt"]), float(horizon or s["horizon"]), int(s["n_paths"]), int(s["seed"]), s["projection_mode"])

    def verify_tol(self) -> float:
        t = self.cfg.verify["tol"]
        return 10.0 * self.cfg.solver["tol"] if t is None else float(t)

    # stages; each returns True on success

    def stage_solve(self) -> bool:
        op, res = self.solved()
        if self._want("csv"):
            write_value_csv(res, self.out / "value.csv", self._header("value"))
            write_history_csv(res, self.out / "history.csv", self._header("history"))
        summary = {
            "problem": self.problem.name,
            "method": res.method,
            "nodes": self.grid.n_nodes,
            "interior_nodes": int(self.grid.interior_mask.sum()),
            "boundary_nodes": int(self.grid.boundary_mask.sum()),
            "h": float(self.cfg.grid["h"]),
            "iterations": res.iterations,
            "final_residual": res.final_residual,
            "converged": res.converged,
            "clipped_drift_terms": op.clipped_drift,
            "dropped_diffusion_terms": op.dropped_diffusion,
            "value_min": float(res.value.values.min()),
            "value_max": float(res.value.values.max()),
        }
        self._report("solve_report.txt", "solve", summary)
        self.results["solve"] = summary
        return bool(res.converged)

    def stage_viability(self) -> bool:
        v = self.cfg.verify
        rep = scan_boundary(
            self.problem, self.domain, int(v["viability_samples"]), v["tol_sigma"], v["tol_b"], v["psi"], v["delta_strict"]
        )
        summary = rep.summary()
        ok = rep.all_pass
        try:
            fb = construct_feedback(self.problem, self.domain, self.grid, v["tol_sigma"], v["tol_b"])
            summary["feedback"] = {"viability_nodes": fb.provenance.count("viability"), "min_cost_nodes": fb.provenance.count("min-cost")}
        except ViabilityError as exc:
            summary["feedback"] = {"error": str(exc)}
            ok = False
        summary["passed"] = ok
        if self._want("csv"):
            rep.write_csv(self.out / "viability.csv", self._header("viability"))
        self._report("viability_report.txt", "viability", summary)
        self.results["viability"] = summary
        return ok

    def stage_verify(self) -> bool:
        op, res = self.solved()
        tol = self.verify_tol()
        sub = check_subsolution(res.value, op, tol)
        sup = check_supersolution(res.value, op, tol)
        if self._want("csv"):
            sub.write_csv(self.out / "verify_sub_violations.csv", self._header("subsolution violations"))
            sup.write_csv(self.out / "verify_super_violations.csv", self._header("supersolution violations"))
        summary = {"subsolution": sub.summary(), "supersolution": sup.summary(), "passed": sub.passed and sup.passed}
        self._report("verify_report.txt", "verify", summary)
        self.results["verify"] = summary
        return summary["passed"]

    def stage_simulate(self) -> bool:
        op, res = self.solved()
        params = self.sim_params()
        rows = []
        for i, x0 in enumerate(self.x0_list()):
            est = estimate_cost(self.problem, self.domain, res.policy, x0, params)
            rows.append((x0, est, float(res.value(x0))))
            if self.cfg.sim["write_paths"] and self._want("csv"):
                self._write_paths(x0, params, i)
        if self._want("csv"):
            with open(self.out / "estimates.csv", "w", newline="") as fh:
                for line in self._header("cost estimates"):
                    fh.write(f"# {line}\n")
                w = csv.writer(fh, lineterminator="\n")
                d = self.problem.dim
                w.writerow([f"x{i}" for i in range(d)] + ["mean", "se", "n_paths", "bias_bound", "projection_fraction", "value_h"])
                for x0, e, vh in rows:
                    w.writerow([_fmt(c) for c in x0] + [_fmt(e.mean), _fmt(e.se), e.n_paths, _fmt(e.bias_bound), _fmt(e.projection_fraction), _fmt(vh)])
        summary = {
            "policy": "greedy policy of the solve",
            "estimates": [dict(x0=x0.tolist(), value_h=vh, **e.summary()) for x0, e, vh in rows],
        }
        self._report("simulate_report.txt", "simulate", summary)
        self.results["simulate"] = summary
        return True

    def _write_paths(self, x0, params, i):
        r = simulate_paths(self.problem, self.domain, Policy(self.grid, self.problem.control_set.points, self.solved()[1].policy.index), x0, params)
        with open(self.out / f"paths_{i}.csv", "w", newline="") as fh:
            for line in self._header("sample paths"):
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            d = self.problem.dim
            w.writerow(["path", "step", "t"] + [f"x{j}" for j in range(d)] + ["in_domain"])
            traj, inside = r["traj"], r["inside"]
            for p in range(traj.shape[1]):
                for k in range(traj.shape[0]):
                    w.writerow([p, k, _fmt(k * params.dt)] + [_fmt(c) for c in traj[k, p]] + [int(inside[k, p])])

    def stage_ztest(self) -> bool:
        op, res = self.solved()
        params = self.sim_params(max(self.cfg.sim["checkpoints"]))
        times = self.cfg.sim["checkpoints"]
        g = self.grid
        reports = []
        for x0 in self.x0_list():
            up = ValueFunction.constant(g, self.problem.upper_constant, "fbar/beta")
            lo = ValueFunction.constant(g, self.problem.lower_constant, "flow/beta")
            reports.append(test_z_process(self.problem, up, res.policy, x0, times, params, "super"))
            reports.append(test_z_process(self.problem, lo, res.policy, x0, times, params, "sub"))
        if self._want("csv"):
            with open(self.out / "ztest.csv", "w", newline="") as fh:
                for line in self._header("z-process tests"):
                    fh.write(f"# {line}\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["direction", "function", "x0", "policy", "t", "mean", "se", "radius", "w_x0", "holds"])
                for rep in reports:
                    for r in rep.rows:
                        w.writerow([rep.direction, rep.function, " ".join(map(_fmt, rep.x0)), r.policy, _fmt(r.t),
                                    _fmt(r.mean), _fmt(r.se), _fmt(r.radius), _fmt(rep.w_x0), int(r.holds)])
        ok = all(r.overall for r in reports)
        summary = {"reports": [r.summary() for r in reports], "passed": ok}
        lines = [f"{r.direction} {r.function} at {r.x0}: {'consistent' if r.overall else 'inconsistent'} at 99%" for r in reports]
        self._report("ztest_report.txt", "ztest", summary, lines)
        self.results["ztest"] = summary
        return ok

    def stage_sandwich(self) -> bool:
        op, res = self.solved()
        g = self.grid
        tol = float(self.cfg.verify["order_tol"])
        lo = ValueFunction.constant(g, self.problem.lower_constant, "flow/beta")
        up = ValueFunction.constant(g, self.problem.upper_constant, "fbar/beta")
        sw = check_sandwich(lo, res.value, up, tol)
        cmp_ = check_comparison(lo, up, tol)
        ub = [upper_bound_check(self.problem, self.domain, res.policy, x0, self.sim_params(), res.value).summary()
              for x0 in self.x0_list()]
        summary = {
            "sandwich": sw.summary(),
            "comparison": cmp_.summary(),
            "mc_upper_bound": ub,
            "mc_upper_bound_note": "informational; spatial error of the solve is not budgeted, so this does not affect the exit status",
            "passed": sw.passed and cmp_.passed,
        }
        self._report("sandwich_report.txt", "sandwich", summary)
        self.results["sandwich"] = summary
        return summary["passed"]

    def run(self, sub: str) -> bool:
        order = ["solve", "viability", "verify", "simulate", "ztest", "sandwich"] if sub == "all" else [sub]
        ok = True
        for stage in order:
            ok = getattr(self, f"stage_{stage}")() and ok
        if sub == "all":
            self._report("all_report.txt", "all", {"stages": self.results, "passed": ok})
        return ok


def run(subcommand: str, cfg: RunConfig, out_dir) -> int:
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        pipe = Pipeline(cfg, out)
        return EXIT_OK if pipe.run(subcommand) else EXIT_FAIL
    except (ConfigError, KeyError, TypeError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_USAGE
    except (MonotonicityError, AdmissibilityError, ViabilityError) as exc:
        logger.error("check failed: %s", exc)
        return EXIT_FAIL


def _resolve_out(arg: str | None, cfg: RunConfig) -> str:
    return arg or cfg.output["dir"] or os.environ.get(ENV_OUT) or "out"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="constrained-hjb", description="State-constrained discounted control toolkit.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="TOML run config")
    ap.add_argument("--seed", type=int, default=None, help="override sim.seed (u64)")
    ap.add_argument("--out", default=None, help=f"output directory (default: output.dir, ${ENV_OUT}, ./out)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("-v", "--verbose", action="store_true")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    code = run(args.subcommand, cfg, _resolve_out(args.out, cfg))
    print(f"{args.subcommand}: {'ok' if code == 0 else 'failed' if code == 1 else 'error'}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
