"""Residual checks of the constrained viscosity inequalities, sandwich and comparison.

Viscosity inequalities are checked through the residual of the monotone
scheme rather than by quantifying over smooth test functions:

* subsolution: ``F <= tol`` at interior nodes (boundary exempt);
* supersolution: ``F >= -tol`` at every in-domain node, boundary included,
  with the boundary residual built from the inward-only stencils.

Reports list the functions checked; they are finite certificates, not the
envelopes over whole families of stochastic semisolutions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import NodeClass, ValueFunction, _same_grid
from .hjb import DiscreteOperator, bellman_residual

PASS_FRACTION = 0.99
SURROGATE_NOTE = "viscosity inequalities checked via monotone-scheme residuals (discrete surrogate)"


@dataclass
class Violation:
    index: int
    location: tuple
    residual: float
    kind: str


@dataclass
class ViolationReport:
    check: str
    checked: int
    violations: list
    tol: float
    function: str = ""
    threshold: float = PASS_FRACTION

    @property
    def pass_fraction(self) -> float:
        return 1.0 - len(self.violations) / self.checked if self.checked else 1.0

    @property
    def passed(self) -> bool:
        return self.pass_fraction >= self.threshold

    @property
    def strict_pass(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        worst = max((abs(v.residual) for v in self.violations), default=0.0)
        return {
            "check": self.check,
            "function": self.function,
            "checked": self.checked,
            "violations": len(self.violations),
            "pass_fraction": self.pass_fraction,
            "threshold": self.threshold,
            "tol": self.tol,
            "passed": self.passed,
            "worst_violation": worst,
            "note": SURROGATE_NOTE,
        }

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            d = len(self.violations[0].location) if self.violations else 0
            w.writerow(["node"] + [f"x{i}" for i in range(d)] + ["residual", "class"])
            for v in self.violations:
                w.writerow([v.index] + [repr(float(c)) for c in v.location] + [repr(v.residual), v.kind])


def _check_grid(u: ValueFunction, op: DiscreteOperator):
    if u.grid is not op.grid:
        raise ValueError("grid mismatch: function and operator live on different grids")


def check_subsolution(u: ValueFunction, op: DiscreteOperator, tol: float) -> ViolationReport:
    _check_grid(u, op)
    res = bellman_residual(u, op).values
    nodes = np.flatnonzero(op.grid.interior_mask)
    bad = nodes[res[nodes] > tol]
    X = op.grid.coords
    viol = [Violation(int(i), tuple(X[i]), float(res[i]), "interior-sub") for i in bad]
    return ViolationReport("subsolution", int(nodes.size), viol, tol, u.label)


def check_supersolution(u: ValueFunction, op: DiscreteOperator, tol: float) -> ViolationReport:
    _check_grid(u, op)
    res = bellman_residual(u, op).values
    bad = np.flatnonzero(res < -tol)
    X = op.grid.coords
    viol = [Violation(int(i), tuple(X[i]), float(res[i]), "everywhere-super") for i in bad]
    return ViolationReport("supersolution", op.grid.n_nodes, viol, tol, u.label)


@dataclass
class OrderReport:
    """Outcome of a pointwise ordering check between grid functions."""

    check: str
    passed: bool
    margins: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)
    tol: float = 0.0
    functions: tuple = ()

    def summary(self) -> dict:
        return {
            "check": self.check,
            "passed": self.passed,
            "functions": list(self.functions),
            "tol": self.tol,
            "margins": self.margins,
            "worst_locations": self.worst,
        }


def _worst(diff, X, mask):
    idx = np.flatnonzero(mask)
    i = idx[np.argmin(diff[idx])]
    return float(diff[i]), [float(c) for c in X[i]]


def check_sandwich(u_minus: ValueFunction, v: ValueFunction, w_plus: ValueFunction, tol: float = 1e-9) -> OrderReport:
    """``u_minus <= v`` on all in-domain nodes and ``v <= w_plus`` on interior nodes."""
    _same_grid(u_minus, v)
    _same_grid(v, w_plus)
    g = v.grid
    X = g.coords
    lower_gap = v.values - u_minus.values
    upper_gap = w_plus.values - v.values
    every = np.ones(g.n_nodes, dtype=bool)
    m_lo, x_lo = _worst(lower_gap, X, every)
    m_hi, x_hi = _worst(upper_gap, X, g.interior_mask)
    return OrderReport(
        "sandwich",
        bool(m_lo >= -tol and m_hi >= -tol),
        {"lower": m_lo, "upper": m_hi},
        {"lower": x_lo, "upper": x_hi},
        tol,
        (u_minus.label, v.label, w_plus.label),
    )


def check_comparison(sub: ValueFunction, sup: ValueFunction, tol: float = 1e-9) -> OrderReport:
    """``sub <= sup + tol`` on every in-domain node; margin is ``min(sup - sub)``."""
    _same_grid(sub, sup)
    gap = sup.values - sub.values
    m, x = _worst(gap, sub.grid.coords, np.ones(sub.grid.n_nodes, dtype=bool))
    return OrderReport("comparison", bool(m >= -tol), {"min": m}, {"min": x}, tol, (sub.label, sup.label))


def boundary_limsup_extend(w: ValueFunction) -> ValueFunction:
    """Replace each boundary value by the max over adjacent interior nodes (3^d - 1 neighbourhood)."""
    g = w.grid
    out = w.values.copy()
    best = np.full(g.n_nodes, -np.inf)
    for off in np.ndindex(*(3,) * g.dim):
        off = np.asarray(off) - 1
        if not off.any():
            continue
        nb = g.neighbor(off)
        ok = nb >= 0
        ok[ok] &= g.classes[nb[ok]] == NodeClass.INTERIOR
        best[ok] = np.maximum(best[ok], w.values[nb[ok]])
    bnodes = np.flatnonzero(g.boundary_mask)
    lonely = bnodes[~np.isfinite(best[bnodes])]
    if lonely.size:
        raise ValueError(f"under-resolved: boundary node {int(lonely[0])} has no interior neighbour")
    out[bnodes] = best[bnodes]
    return ValueFunction(g, out, f"limsup({w.label})")
