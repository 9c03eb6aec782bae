"""Control problems and pointwise evaluation of the Bellman operator.

A :class:`ControlProblem` bundles the coefficients of a controlled diffusion

    dX = b(X, a) dt + sigma(X, a) dW

with a running cost ``f`` and a discount rate ``beta``. The compact control set
is represented by a finite sample, so the supremum in

    F(x, r, p, Y) = sup_a [ beta*r - f(x, a) - b(x, a).p - 1/2 Tr(sigma sigma^T Y) ]

becomes a maximum over :attr:`ControlSet.points`.

Coefficient callables must broadcast over leading axes: ``x`` has shape
``(..., d)`` and ``a`` has shape ``(..., k)``; drift returns ``(..., d)``,
diffusion ``(..., d, m)`` and running cost ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TIE_TOL = 1e-12

Coefficient = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ControlSet:
    """Finite sample of a compact control set ``A`` in R^k."""

    points: np.ndarray
    contains_zero: bool = False

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2:
            raise ValueError("control points must be a list of vectors")
        if pts.shape[0] == 0:
            raise ValueError("control set is empty")
        for i in range(len(pts)):
            for j in range(i):
                if np.array_equal(pts[i], pts[j]):
                    raise ValueError(f"duplicate control point {pts[i].tolist()}")
        if self.contains_zero and not np.any(np.all(pts == 0.0, axis=1)):
            raise ValueError("contains_zero asserted but the zero control is not sampled")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_values(cls, values, contains_zero: bool | None = None) -> "ControlSet":
        pts = np.asarray(values, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if contains_zero is None:
            contains_zero = bool(np.any(np.all(pts == 0.0, axis=1)))
        return cls(pts, contains_zero)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class ControlProblem:
    """Coefficients of an infinite-horizon discounted control problem.

    ``lipschitz_bound`` is informational only; nothing checks it.
    """

    dim: int
    drift: Coefficient
    diffusion: Coefficient
    running_cost: Coefficient
    discount: float
    control_set: ControlSet
    cost_bounds: tuple[float, float]
    lipschitz_bound: float | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.discount > 0:
            raise ValueError("discount must be strictly positive")
        lo, hi = self.cost_bounds
        if lo > hi:
            raise ValueError("cost_bounds must satisfy lower <= upper")
        if self.dim < 1:
            raise ValueError("state dimension must be at least 1")

    @property
    def f_lower(self) -> float:
        return float(self.cost_bounds[0])

    @property
    def f_upper(self) -> float:
        return float(self.cost_bounds[1])

    @property
    def lower_constant(self) -> float:
        """Largest constant stochastic subsolution, ``f_lower / beta``."""
        return self.f_lower / self.discount

    @property
    def upper_constant(self) -> float:
        """Smallest constant stochastic supersolution, ``f_upper / beta``."""
        return self.f_upper / self.discount

    def noise_dim(self) -> int:
        x = np.zeros(self.dim)
        s = np.asarray(self.diffusion(x, self.control_set.points[0]))
        if s.shape[:1] != (self.dim,) or s.ndim != 2:
            raise ValueError(f"diffusion must return a ({self.dim}, m) matrix, got shape {s.shape}")
        return s.shape[1]

    def check_cost_bounds(self, states: np.ndarray, tol: float = 1e-12) -> bool:
        """Spot-check ``f_lower <= f <= f_upper`` on sample states for every control."""
        states = np.atleast_2d(states)
        for a in self.control_set.points:
            vals = np.asarray(self.running_cost(states, np.broadcast_to(a, (len(states), len(a)))))
            if np.any(vals < self.f_lower - tol) or np.any(vals > self.f_upper + tol):
                return False
        return True


def _check_point(problem: ControlProblem, x, p=None, Y=None):
    x = np.asarray(x, dtype=float).reshape(-1)
    d = problem.dim
    if x.shape != (d,):
        raise ValueError(f"state has dimension {x.size}, problem dimension is {d}")
    if p is not None:
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.shape != (d,):
            raise ValueError(f"gradient has dimension {p.size}, problem dimension is {d}")
    if Y is not None:
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 0 and d == 1:
            Y = Y.reshape(1, 1)
        if Y.shape != (d, d):
            raise ValueError(f"Hessian has shape {Y.shape}, expected {(d, d)}")
        Y = 0.5 * (Y + Y.T)
    return x, p, Y


def generator_apply(problem: ControlProblem, a, x, p, Y) -> float:
    """Controlled generator ``b(x,a).p + 1/2 Tr(sigma sigma^T Y)``."""
    x, p, Y = _check_point(problem, x, p, Y)
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(problem.drift(x, a), dtype=float)
    s = np.asarray(problem.diffusion(x, a), dtype=float)
    return float(b @ p + 0.5 * np.trace(s @ s.T @ Y))


def _bellman_terms(problem: ControlProblem, x, r, p, Y) -> np.ndarray:
    x, p, Y = _check_point(problem, x, p, Y)
    A = problem.control_set.points
    if len(A) == 0:
        raise ValueError("control set is empty")
    xs = np.broadcast_to(x, (len(A), problem.dim))
    b = np.asarray(problem.drift(xs, A), dtype=float)
    s = np.asarray(problem.diffusion(xs, A), dtype=float)
    f = np.asarray(problem.running_cost(xs, A), dtype=float)
    a_mat = np.einsum("nij,nkj->nik", s, s)
    gen = b @ p + 0.5 * np.einsum("nij,ji->n", a_mat, Y)
    return problem.discount * float(r) - f - gen


def bellman_value(problem: ControlProblem, x, r, p, Y) -> float:
    """Bellman operator ``F(x, r, p, Y)`` as a max over the control sample."""
    return float(np.max(_bellman_terms(problem, x, r, p, Y)))


def bellman_argmax(problem: ControlProblem, x, r, p, Y) -> tuple[np.ndarray, float]:
    """Maximising control (first in list order within ``TIE_TOL``) and the value of F."""
    terms = _bellman_terms(problem, x, r, p, Y)
    best = float(np.max(terms))
    idx = int(np.flatnonzero(terms >= best - TIE_TOL)[0])
    return problem.control_set.points[idx].copy(), best
