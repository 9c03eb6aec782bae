"""Monotone upwind discretisation of the state-constrained HJB problem and its solvers.

For each in-domain node ``x`` and control ``a`` the generator is approximated
by a Markov chain on the grid (Kushner--Dupuis form). With ``A = sigma sigma^T``
and spacing ``h``, the unnormalised transition weights are

* ``x +- h e_i``: ``A_ii/2 - sum_{j!=i} |A_ij|/2 + h b_i^{+-}``
* ``x +- h(e_i + e_j)``: ``A_ij^+ / 2``;  ``x +- h(e_i - e_j)``: ``A_ij^- / 2``

with total ``Q``. The time step is ``dt = h^2 / max(Q, h)``, leftover mass is a
self-loop, and the discounted fixed-point form is

    u(x) = min_a  gamma (dt f(x, a) + sum_y p(y) u(y)),   gamma = 1 / (1 + beta dt).

State constraints: no stencil ever reads a node outside ``G``. When an upwind
drift neighbour lies outside, that drift component is dropped (counted in
``clipped_drift``). When a diffusion neighbour lies outside, the term is dropped
only if the control is degenerate there (``|sigma^T n| <= tol_sigma``);
otherwise the control is excluded at that node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import GeometryError, Grid, Policy, ValueFunction
from .problem import TIE_TOL, ControlProblem

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-12


class MonotonicityError(ValueError):
    pass


class AdmissibilityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Markov-chain form of ``beta u - f - L^a u = 0`` on a constrained grid.

    ``transitions[c]`` is the row-stochastic matrix for control ``c`` (self-loops
    included); arrays indexed ``[c, node]`` hold the per-pair time step,
    discount factor, running cost and admissibility.
    """

    problem: ControlProblem
    grid: Grid
    transitions: list
    dt: np.ndarray
    gamma: np.ndarray
    running_cost: np.ndarray
    admissible: np.ndarray
    clipped_drift: int = 0
    dropped_diffusion: int = 0
    monotone: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n_controls(self) -> int:
        return self.admissible.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.admissible.shape[1]

    @property
    def stage_cost(self) -> np.ndarray:
        """``gamma * dt * f``, ``+inf`` where the control is excluded."""
        return np.where(self.admissible, self.gamma * self.dt * self.running_cost, np.inf)

    @property
    def gamma_max(self) -> float:
        return float(self.gamma[self.admissible].max())

    def q_values(self, u: np.ndarray) -> np.ndarray:
        """One-step values ``gamma (dt f + P u)`` per control and node."""
        pu = np.stack([P @ u for P in self.transitions])
        return np.where(self.admissible, self.gamma * (self.dt * self.running_cost + pu), np.inf)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.q_values(u).min(axis=0)


@dataclass
class SolveResult:
    value: ValueFunction
    policy: Policy
    iterations: int
    final_residual: float
    history: list
    converged: bool
    method: str = "value"


def _offsets(d: int):
    """Stencil offsets: axis moves first, then cross moves per axis pair."""
    eye = np.eye(d, dtype=np.int64)
    axis = []
    for i in range(d):
        axis += [eye[i], -eye[i]]
    cross = []
    for i, j in combinations(range(d), 2):
        cross += [eye[i] + eye[j], -eye[i] - eye[j], eye[i] - eye[j], -eye[i] + eye[j]]
    return axis, cross


def _degenerate_at(problem, domain, x, a, tol_sigma):
    s = np.asarray(problem.diffusion(x, a), dtype=float)
    try:
        n = domain.outward_normal(x)
    except GeometryError:
        return bool(np.linalg.norm(s) <= tol_sigma)
    return bool(np.linalg.norm(s.T @ n) <= tol_sigma)


def discretize(problem: ControlProblem, grid: Grid, tol_sigma: float = 1e-8) -> DiscreteOperator:
    """Build the monotone constrained scheme on ``grid``."""
    d = grid.dim
    if problem.dim != d:
        raise ValueError(f"problem dimension {problem.dim} does not match grid dimension {d}")
    if d > 2:
        raise ValueError("the HJB solver supports d in {1, 2}")
    h = grid.h
    N = grid.n_nodes
    X = grid.coords
    A = problem.control_set.points
    C = len(A)
    axis_off, cross_off = _offsets(d)
    axis_nb = [grid.neighbor(o) for o in axis_off]
    cross_nb = [grid.neighbor(o) for o in cross_off]
    pairs = list(combinations(range(d), 2))

    transitions = []
    dt = np.empty((C, N))
    cost = np.empty((C, N))
    admissible = np.ones((C, N), dtype=bool)
    clipped = 0
    dropped = 0
    rows_all = np.arange(N)

    for c in range(C):
        a = np.broadcast_to(A[c], (N, A.shape[1]))
        b = np.asarray(problem.drift(X, a), dtype=float).reshape(N, d)
        s = np.asarray(problem.diffusion(X, a), dtype=float).reshape(N, d, -1)
        cost[c] = np.asarray(problem.running_cost(X, a), dtype=float).reshape(N)
        amat = np.einsum("nik,njk->nij", s, s)

        offdiag = np.zeros((N, d))
        for i, j in pairs:
            offdiag[:, i] += np.abs(amat[:, i, j])
            offdiag[:, j] += np.abs(amat[:, i, j])
        diag_part = 0.5 * (np.einsum("nii->ni", amat) - offdiag)  # (N, d)
        bad = diag_part < -MONOTONE_TOL * np.maximum(1.0, np.abs(amat).max(axis=(1, 2)))[:, None]
        if np.any(bad):
            node, ax = np.argwhere(bad)[0]
            other = [j for j in range(d) if j != ax]
            raise MonotonicityError(
                f"monotonicity violated at node {int(node)} (x={X[node].tolist()}), control {c}, "
                f"axis pair {(int(ax), other[0]) if other else (int(ax),)}: diffusion not diagonally dominant"
            )
        diag_part = np.maximum(diag_part, 0.0)

        # diffusion weights per offset, drift weights per axis offset
        diff_w = []
        drift_w = []
        for i in range(d):
            diff_w += [diag_part[:, i], diag_part[:, i]]
            drift_w += [h * np.maximum(b[:, i], 0.0), h * np.maximum(-b[:, i], 0.0)]
        for i, j in pairs:
            ap = 0.5 * np.maximum(amat[:, i, j], 0.0)
            am = 0.5 * np.maximum(-amat[:, i, j], 0.0)
            diff_w += [ap, ap, am, am]
        diff_w = [w.copy() for w in diff_w]
        drift_w = [w.copy() for w in drift_w]
        nbs = axis_nb + cross_nb

        # state-constraint treatment
        for k, nb in enumerate(nbs):
            out = nb < 0
            if k < len(drift_w):
                hit = out & (drift_w[k] > 0)
                clipped += int(hit.sum())
                drift_w[k][hit] = 0.0
            hit = np.flatnonzero(out & (diff_w[k] > 0))
            for node in hit:
                if not admissible[c, node]:
                    continue
                if _degenerate_at(problem, grid.domain, X[node], A[c], tol_sigma):
                    diff_w[k][node] = 0.0
                    dropped += 1
                else:
                    admissible[c, node] = False

        weights = [diff_w[k] + (drift_w[k] if k < len(drift_w) else 0.0) for k in range(len(nbs))]
        Q = np.sum(weights, axis=0)
        q_eff = np.maximum(Q, h)
        dt[c] = h * h / q_eff
        rows, cols, vals = [], [], []
        for k, nb in enumerate(nbs):
            w = weights[k]
            m = (w > 0) & (nb >= 0)
            rows.append(rows_all[m])
            cols.append(nb[m])
            vals.append(w[m] / q_eff[m])
        rows.append(rows_all)
        cols.append(rows_all)
        vals.append((q_eff - Q) / q_eff)
        P = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
        )
        P.sum_duplicates()
        transitions.append(P)
        # excluded pairs keep a self-loop so the matrices stay stochastic
        if not admissible[c].all():
            ex = ~admissible[c]
            P = P.tolil()
            for node in np.flatnonzero(ex):
                P.rows[node] = [node]
                P.data[node] = [1.0]
            transitions[-1] = P.tocsr()

    missing = ~admissible.any(axis=0)
    if np.any(missing):
        bad_nodes = np.flatnonzero(missing)[:10]
        raise AdmissibilityError(
            "boundary node has no admissible control stencil: "
            + ", ".join(f"{int(i)} at {X[i].tolist()}" for i in bad_nodes)
        )
    gamma = 1.0 / (1.0 + problem.discount * dt)
    monotone = all(P.data.min() >= 0 for P in transitions)
    return DiscreteOperator(
        problem=problem,
        grid=grid,
        transitions=transitions,
        dt=dt,
        gamma=gamma,
        running_cost=cost,
        admissible=admissible,
        clipped_drift=clipped,
        dropped_diffusion=dropped,
        monotone=monotone,
        meta={"h": h, "dt_min": float(dt[admissible].min()), "dt_max": float(dt[admissible].max())},
    )


def _greedy(q: np.ndarray) -> np.ndarray:
    best = q.min(axis=0)
    return np.argmax(q <= best + TIE_TOL, axis=0)


def extract_policy(value: ValueFunction, op: DiscreteOperator) -> Policy:
    """Greedy argmin of the one-step operator; ties go to the first listed control."""
    idx = _greedy(op.q_values(value.values))
    return Policy(op.grid, op.problem.control_set.points, idx, "greedy")


def bellman_residual(value: ValueFunction, op: DiscreteOperator) -> ValueFunction:
    """Discrete ``F(x, u, Du, D^2u)`` per node, in the sign convention of the Bellman operator.

    ``max_a [beta u - f - (P_a u - u) / dt_a]`` over controls admissible at the node.
    Nonpositive means subsolution-like, nonnegative supersolution-like.
    """
    u = value.values
    beta = op.problem.discount
    terms = np.stack(
        [beta * u - op.running_cost[c] - (P @ u - u) / op.dt[c] for c, P in enumerate(op.transitions)]
    )
    terms = np.where(op.admissible, terms, -np.inf)
    return ValueFunction(op.grid, terms.max(axis=0), "residual")


def _stop_threshold(op: DiscreteOperator, tol: float) -> float:
    g = op.gamma_max
    return tol * (1.0 - g) / g * min(1.0, 1.0 / op.problem.discount)


def value_iteration(op: DiscreteOperator, tol: float = 1e-8, max_iter: int = 1_000_000, u0=None) -> SolveResult:
    """Jacobi value iteration with contraction-aware stopping.

    Stops once the sup-norm update is below ``tol (1 - gamma_max) / gamma_max``
    (scaled by ``min(1, 1/beta)``), which bounds both the distance to the fixed
    point and the Bellman residual by ``tol``.
    """
    thresh = _stop_threshold(op, tol)
    cost = op.stage_cost
    gam = op.gamma
    Ps = op.transitions
    u = np.full(op.n_nodes, op.problem.lower_constant) if u0 is None else np.array(u0, dtype=float)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pu = np.stack([P @ u for P in Ps])
        u_new = np.min(cost + gam * pu, axis=0)
        delta = float(np.max(np.abs(u_new - u)))
        history.append(delta)
        u = u_new
        if delta <= thresh:
            converged = True
            break
    if not converged:
        logger.warning("value iteration stopped at max_iter=%d with update %.3e", max_iter, history[-1])
    value = ValueFunction(op.grid, u, "v_h")
    res = float(np.max(np.abs(bellman_residual(value, op).values)))
    return SolveResult(value, extract_policy(value, op), it, res, history, converged and res <= tol, "value")


def evaluate_policy(op: DiscreteOperator, index: np.ndarray) -> np.ndarray:
    """Exact value of a stationary policy: solve ``(I - gamma P_pi) u = gamma dt f``."""
    N = op.n_nodes
    nodes = np.arange(N)
    gam = op.gamma[index, nodes]
    rhs = gam * op.dt[index, nodes] * op.running_cost[index, nodes]
    P = _select_rows(op, index)
    M = sp.identity(N, format="csc") - sp.diags(gam) @ P
    return spla.spsolve(M.tocsc(), rhs)


def _select_rows(op: DiscreteOperator, index: np.ndarray):
    out = None
    for c, P in enumerate(op.transitions):
        mask = sp.diags((index == c).astype(float))
        part = mask @ P
        out = part if out is None else out + part
    return out


def policy_iteration(op: DiscreteOperator, tol: float = 1e-8, max_outer: int = 1000) -> SolveResult:
    """Howard policy iteration; evaluation by a direct sparse solve.

    Improvement keeps the current control when it is within ``TIE_TOL`` of the
    best, so the loop ends once the policy is stable for a full sweep.
    """
    N = op.n_nodes
    adm = op.admissible
    index = np.argmax(adm, axis=0)
    history = []
    converged = False
    it = 0
    u = None
    for it in range(1, max_outer + 1):
        u_new = evaluate_policy(op, index)
        history.append(float(np.max(np.abs(u_new - u))) if u is not None else float("inf"))
        u = u_new
        q = op.q_values(u)
        best = q.min(axis=0)
        current = q[index, np.arange(N)]
        keep = current <= best + TIE_TOL
        new_index = np.where(keep, index, _greedy(q))
        if np.array_equal(new_index, index):
            converged = True
            break
        index = new_index
    value = ValueFunction(op.grid, u, "v_h")
    res = float(np.max(np.abs(bellman_residual(value, op).values)))
    return SolveResult(value, extract_policy(value, op), it, res, history, converged and res <= tol, "policy")


def solve(problem: ControlProblem, grid: Grid, method: str = "value", tol: float = 1e-8, max_iter: int = 1_000_000):
    op = discretize(problem, grid)
    if method == "value":
        return op, value_iteration(op, tol, max_iter)
    if method == "policy":
        return op, policy_iteration(op, tol, max_iter)
    raise ValueError(f"unknown solver method {method!r}")
