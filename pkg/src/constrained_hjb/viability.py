"""Boundary viability checks and grid feedback maps.

On a C^2 boundary, viability of ``G`` at ``x`` reduces to the existence of a
control with

    sigma(x, a)^T n(x) = 0   and   -n(x).b(x, a) + 1/2 Tr(sigma sigma^T D^2 rho)(x) >= 0,

and the strong (uniqueness) conditions ask for a feedback ``psi`` with
``sigma_psi = 0`` and ``-n.b_psi > 0`` on the boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Box, Domain, GeometryError, Grid, Policy
from .problem import TIE_TOL, ControlProblem

TOL_SIGMA = 1e-8
TOL_B = 0.0
DELTA_STRICT = 1e-6


class ViabilityError(ValueError):
    pass


@dataclass
class PointRecord:
    x: np.ndarray
    control_index: int
    control: np.ndarray
    tangency_residual: float
    inward_value: float
    passed: bool
    strong: bool | None = None


@dataclass
class ViabilityReport:
    samples: list
    tol_sigma: float
    tol_b: float

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def n_pass(self) -> int:
        return sum(r.passed for r in self.samples)

    @property
    def pass_fraction(self) -> float:
        return self.n_pass / self.n if self.n else 0.0

    @property
    def n_strong(self) -> int | None:
        if not self.samples or self.samples[0].strong is None:
            return None
        return sum(bool(r.strong) for r in self.samples)

    @property
    def strong_fraction(self) -> float | None:
        k = self.n_strong
        return None if k is None else k / self.n

    @property
    def worst_tangency(self) -> float:
        return max(r.tangency_residual for r in self.samples)

    @property
    def worst_inward(self) -> float:
        return min(r.inward_value for r in self.samples)

    @property
    def all_pass(self) -> bool:
        ok = self.n_pass == self.n
        if self.n_strong is not None:
            ok = ok and self.n_strong == self.n
        return ok

    def summary(self) -> dict:
        return {
            "samples": self.n,
            "weak_pass": self.n_pass,
            "weak_pass_fraction": self.pass_fraction,
            "strong_pass": self.n_strong,
            "strong_pass_fraction": self.strong_fraction,
            "worst_tangency_residual": self.worst_tangency,
            "worst_inward_value": self.worst_inward,
            "tol_sigma": self.tol_sigma,
            "tol_b": self.tol_b,
        }

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            d = len(self.samples[0].x) if self.samples else 0
            w.writerow([f"x{i}" for i in range(d)] + ["control_index", "tangency_residual", "inward_value", "pass", "strong"])
            for r in self.samples:
                w.writerow(
                    [repr(float(v)) for v in r.x]
                    + [r.control_index, repr(r.tangency_residual), repr(r.inward_value), int(r.passed),
                       "" if r.strong is None else int(r.strong)]
                )


def _point_terms(problem: ControlProblem, x, n, D2rho):
    A = problem.control_set.points
    xs = np.broadcast_to(x, (len(A), problem.dim))
    b = np.asarray(problem.drift(xs, A), dtype=float)
    s = np.asarray(problem.diffusion(xs, A), dtype=float)
    tang = np.linalg.norm(np.einsum("cij,i->cj", s, n), axis=1)
    amat = np.einsum("cik,cjk->cij", s, s)
    inward = -(b @ n) + 0.5 * np.einsum("cij,ji->c", amat, D2rho)
    return tang, inward


def _select(tang, inward, tol_sigma):
    ok = tang <= tol_sigma
    if ok.any():
        vals = np.where(ok, inward, -np.inf)
        best = vals.max()
        return int(np.flatnonzero(vals >= best - TIE_TOL)[0])
    return int(np.argmin(tang))


def check_point_viability(
    problem: ControlProblem, domain: Domain, x, tol_sigma: float = TOL_SIGMA, tol_b: float = TOL_B
) -> PointRecord:
    """Best control at a boundary point: max inward value among tangent controls."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = domain.outward_normal(x)
    D2 = domain.hessian_distance(x)
    tang, inward = _point_terms(problem, x, n, D2)
    c = _select(tang, inward, tol_sigma)
    passed = bool(tang[c] <= tol_sigma and inward[c] >= -tol_b)
    return PointRecord(x, c, problem.control_set.points[c].copy(), float(tang[c]), float(inward[c]), passed)


def check_strong_condition(
    problem: ControlProblem,
    domain: Domain,
    psi,
    x,
    tol_sigma: float = TOL_SIGMA,
    delta_strict: float = DELTA_STRICT,
) -> bool:
    """``|sigma_psi(x)| <= tol_sigma`` (full matrix) and ``-n.b_psi(x) >= delta_strict``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    a = _feedback_control(psi, x)
    n = domain.outward_normal(x)
    s = np.asarray(problem.diffusion(x, a), dtype=float)
    b = np.asarray(problem.drift(x, a), dtype=float)
    return bool(np.linalg.norm(s) <= tol_sigma and -(n @ b) >= delta_strict)


def _feedback_control(psi, x):
    if callable(psi):
        return np.asarray(psi(x), dtype=float).reshape(-1)
    return np.asarray(psi, dtype=float).reshape(-1)


def scan_boundary(
    problem: ControlProblem,
    domain: Domain,
    n_samples: int,
    tol_sigma: float = TOL_SIGMA,
    tol_b: float = TOL_B,
    psi=None,
    delta_strict: float = DELTA_STRICT,
    margin: float | None = None,
) -> ViabilityReport:
    """Check viability at deterministic quasi-uniform boundary samples.

    If ``psi`` (a control vector or a callable ``x -> control``) is given, each
    record also carries the strong-condition verdict for that feedback.
    Box faces exclude ``margin`` (default 5% of the smallest width) near edges.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if margin is None:
        lo, hi = domain.bounding_box()
        margin = 0.05 * float(np.min(hi - lo)) if isinstance(domain, Box) else 0.0
    pts = domain.sample_boundary(n_samples, margin)
    records = []
    for x in pts:
        rec = check_point_viability(problem, domain, x, tol_sigma, tol_b)
        if psi is not None:
            rec.strong = check_strong_condition(problem, domain, psi, x, tol_sigma, delta_strict)
        records.append(rec)
    return ViabilityReport(records, tol_sigma, tol_b)


@dataclass
class FeedbackMap:
    """Grid realisation of a viable feedback ``psi``.

    ``provenance`` is ``"viability"`` for boundary nodes (control chosen by the
    boundary check at the nearest boundary point) and ``"min-cost"`` for
    interior nodes (control minimising the running cost).
    """

    policy: Policy
    provenance: list = field(default_factory=list)

    def __call__(self, x):
        return self.policy(x)


def _boundary_normals(domain: Domain, y):
    if isinstance(domain, Box):
        return domain.boundary_normals(y)
    return [domain.outward_normal(y)]


def construct_feedback(
    problem: ControlProblem, domain: Domain, grid: Grid, tol_sigma: float = TOL_SIGMA, tol_b: float = TOL_B
) -> FeedbackMap:
    """Feedback map on all in-domain nodes.

    At box edges and corners every incident face must be satisfied and the
    control maximising the worst face's inward value is chosen.
    """
    A = problem.control_set.points
    X = grid.coords
    N = grid.n_nodes
    f = np.stack([problem.running_cost(X, np.broadcast_to(a, (N, A.shape[1]))) for a in A])
    index = np.argmin(f, axis=0)
    prov = ["min-cost"] * N
    failures = []
    for node in np.flatnonzero(grid.boundary_mask):
        y = domain.boundary_point(X[node])
        normals = _boundary_normals(domain, y)
        try:
            D2 = np.zeros((grid.dim, grid.dim)) if len(normals) > 1 else domain.hessian_distance(y)
        except GeometryError:
            D2 = np.zeros((grid.dim, grid.dim))
        tang = np.zeros(len(A))
        inward = np.full(len(A), np.inf)
        for n in normals:
            t, w = _point_terms(problem, y, n, D2)
            tang = np.maximum(tang, t)
            inward = np.minimum(inward, w)
        c = _select(tang, inward, tol_sigma)
        if tang[c] <= tol_sigma and inward[c] >= -tol_b:
            index[node] = c
            prov[node] = "viability"
        else:
            failures.append((float(inward[c]), int(node)))
    if failures:
        failures.sort()
        worst = ", ".join(f"node {i} at {X[i].tolist()} (inward {v:.3g})" for v, i in failures[:5])
        raise ViabilityError(f"domain not viable under control sample; worst nodes: {worst}")
    return FeedbackMap(Policy(grid, A, index, "psi"), prov)
