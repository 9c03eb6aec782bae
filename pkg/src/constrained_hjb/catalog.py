"""Named problems and a small function catalog for declarative configs.

Every catalog entry returns ``(ControlProblem, Domain)``. Coefficient
functions are vectorised: ``x`` is ``(..., d)`` and ``a`` is ``(..., k)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .geometry import Ball, Box, Domain, ellipse, superellipse
from .problem import ControlProblem, ControlSet


def _sq(x):
    return np.sum(np.asarray(x) ** 2, axis=-1)


def _zeros_like_state(x, a, d):
    x = np.asarray(x, dtype=float)
    return np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(a)[:-1]) + (d,))


# -- drift catalog ---------------------------------------------------------

def drift_linear(d: int, rate: float = -1.0, gain: float = 0.0, offset=0.0):
    """``b(x, a) = rate * x + gain * a + offset`` (``a`` broadcast to R^d)."""
    offset = np.broadcast_to(np.asarray(offset, dtype=float), (d,))

    def b(x, a):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        return rate * x + gain * a + offset

    return b


def drift_zero(d: int):
    return lambda x, a: _zeros_like_state(x, a, d)


# -- diffusion catalog -----------------------------------------------------

def diffusion_zero(d: int):
    return lambda x, a: _zeros_like_state(x, a, d)[..., None] * np.zeros(d)


def diffusion_constant(d: int, scale: float = 1.0):
    eye = np.eye(d)

    def s(x, a):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(a)[:-1])
        return np.broadcast_to(scale * eye, shape + (d, d)).copy()

    return s


def diffusion_matrix(d: int, matrix):
    m = np.asarray(matrix, dtype=float)
    if m.shape[0] != d:
        raise ValueError("diffusion matrix must have d rows")

    def s(x, a):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(a)[:-1])
        return np.broadcast_to(m, shape + m.shape).copy()

    return s


def diffusion_control_scaled(d: int, scale: float = 1.0):
    """``sigma(x, a) = scale * a_0 * I``."""
    eye = np.eye(d)

    def s(x, a):
        a0 = np.asarray(a, dtype=float)[..., 0]
        shape = np.broadcast_shapes(np.shape(x)[:-1], a0.shape)
        return (scale * np.broadcast_to(a0, shape))[..., None, None] * eye

    return s


def diffusion_degenerate(d: int, scale: float = 1.0, radius: float = 1.0):
    """``sigma(x, a) = scale * a_0 * (1 - |x|^2 / R^2) * I``; vanishes on the sphere."""
    eye = np.eye(d)

    def s(x, a):
        x = np.asarray(x, dtype=float)
        a0 = np.asarray(a, dtype=float)[..., 0]
        amp = scale * a0 * (1.0 - _sq(x) / radius**2)
        return np.asarray(amp)[..., None, None] * eye

    return s


# -- cost catalog ----------------------------------------------------------

def cost_constant(c: float):
    def f(x, a):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(a)[:-1])
        return np.full(shape, float(c))

    return f


def cost_quadratic(target=0.0, weight: float = 0.0):
    """``f(x, a) = |x - target|^2 + weight * |a|^2``."""

    def f(x, a):
        return _sq(np.asarray(x) - target) + weight * _sq(a)

    return f


DRIFTS: dict[str, Callable] = {"zero": drift_zero, "linear": drift_linear}
DIFFUSIONS: dict[str, Callable] = {
    "zero": diffusion_zero,
    "constant": diffusion_constant,
    "matrix": diffusion_matrix,
    "control-scaled": diffusion_control_scaled,
    "degenerate": diffusion_degenerate,
}
COSTS: dict[str, Callable] = {"constant": cost_constant, "quadratic": cost_quadratic}


def make_domain(kind: str, **params) -> Domain:
    if kind == "box":
        return Box(np.asarray(params["lower"], float), np.asarray(params["upper"], float))
    if kind == "ball":
        return Ball(np.asarray(params.get("center", [0.0, 0.0]), float), float(params.get("radius", 1.0)))
    if kind == "ellipse":
        return ellipse(params.get("semi_axes", (1.0, 0.5)), params.get("center", (0.0, 0.0)))
    if kind == "superellipse":
        return superellipse(
            params.get("semi_axes", (1.0, 1.0)), params.get("exponent", 4.0), params.get("center", (0.0, 0.0))
        )
    raise KeyError(f"unknown domain kind {kind!r}")


def _quadratic_bounds(domain: Domain, target, weight, controls: ControlSet):
    lo, hi = domain.bounding_box()
    if isinstance(domain, Ball):
        far = np.linalg.norm(domain.center - np.asarray(target, float) * np.ones(domain.dim)) + domain.radius
        near = max(0.0, np.linalg.norm(domain.center - np.asarray(target, float) * np.ones(domain.dim)) - domain.radius)
    else:
        t = np.broadcast_to(np.asarray(target, float), lo.shape)
        far = np.linalg.norm(np.maximum(np.abs(lo - t), np.abs(hi - t)))
        near = np.linalg.norm(np.maximum(0.0, np.maximum(lo - t, t - hi)))
    a2 = np.sum(controls.points**2, axis=1)
    return near**2 + weight * float(a2.min()), far**2 + weight * float(a2.max())


# -- named problems --------------------------------------------------------

def constant_cost(c: float = 2.0, beta: float = 1.0, dim: int = 1, half_width: float = 1.0):
    """``f = c`` on a box; pure decay drift, no diffusion."""
    dom = Box(-half_width * np.ones(dim), half_width * np.ones(dim))
    prob = ControlProblem(
        dim=dim,
        drift=drift_linear(dim, rate=-1.0),
        diffusion=diffusion_zero(dim),
        running_cost=cost_constant(c),
        discount=beta,
        control_set=ControlSet.from_values([0.0]),
        cost_bounds=(float(c), float(c)),
        lipschitz_bound=1.0,
        name="constant-cost",
        params={"c": c, "beta": beta, "dim": dim, "half_width": half_width},
    )
    return prob, dom


def deterministic_decay(L: float = 1.0, beta: float = 1.0):
    """``G = [-L, L]``, ``b = -x``, ``sigma = 0``, ``f = x^2``; ``v(x) = x^2 / (beta + 2)``."""
    dom = Box(np.array([-L]), np.array([L]))
    prob = ControlProblem(
        dim=1,
        drift=drift_linear(1, rate=-1.0),
        diffusion=diffusion_zero(1),
        running_cost=cost_quadratic(),
        discount=beta,
        control_set=ControlSet.from_values([0.0]),
        cost_bounds=(0.0, L * L),
        lipschitz_bound=1.0,
        name="deterministic-decay",
        params={"L": L, "beta": beta},
    )
    return prob, dom


def degenerate_ball(beta: float = 1.0, lam: float = 0.1, controls=(0.0, 0.5, 1.0), dim: int = 2):
    """Unit ball, ``b = -x``, ``sigma = a (1 - |x|^2) I``, ``f = |x|^2 + lam a^2``."""
    cs = ControlSet.from_values(list(controls))
    if np.any(cs.points < 0) or np.any(cs.points > 1):
        raise ValueError("degenerate-ball controls must lie in [0, 1]")
    dom = Ball(np.zeros(dim), 1.0)
    prob = ControlProblem(
        dim=dim,
        drift=drift_linear(dim, rate=-1.0),
        diffusion=diffusion_degenerate(dim),
        running_cost=cost_quadratic(weight=lam),
        discount=beta,
        control_set=cs,
        cost_bounds=(0.0, 1.0 + lam * float(np.max(cs.points**2))),
        lipschitz_bound=1.0 + 2.0 * float(cs.points.max()),
        name="degenerate-ball",
        params={"beta": beta, "lam": lam, "controls": list(map(float, cs.points[:, 0])), "dim": dim},
    )
    return prob, dom


def outward_drift(beta: float = 1.0, dim: int = 2, rate: float = 1.0):
    """Unit ball with outward drift ``b = rate * x`` and no diffusion: not viable."""
    dom = Ball(np.zeros(dim), 1.0)
    prob = ControlProblem(
        dim=dim,
        drift=drift_linear(dim, rate=rate),
        diffusion=diffusion_zero(dim),
        running_cost=cost_quadratic(),
        discount=beta,
        control_set=ControlSet.from_values([0.0]),
        cost_bounds=(0.0, 1.0),
        lipschitz_bound=abs(rate),
        name="outward-drift",
        params={"beta": beta, "dim": dim, "rate": rate},
    )
    return prob, dom


def coarse_mdp(beta: float = 0.5, target: float = 0.3, lam: float = 0.1, speed: float = 0.5, vol: float = 0.4):
    """Tiny 1D problem on ``[-1, 1]``: ``b = speed*a``, ``sigma = vol (1 - x^2)``, ``A = {-1, 0, 1}``."""
    dom = Box(np.array([-1.0]), np.array([1.0]))
    cs = ControlSet.from_values([-1.0, 0.0, 1.0])

    def diffusion(x, a):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(a)[:-1])
        amp = vol * (1.0 - x[..., 0] ** 2)
        return np.broadcast_to(amp, shape)[..., None, None] * np.ones((1, 1))

    prob = ControlProblem(
        dim=1,
        drift=drift_linear(1, rate=0.0, gain=speed),
        diffusion=diffusion,
        running_cost=cost_quadratic(target=target, weight=lam),
        discount=beta,
        control_set=cs,
        cost_bounds=(0.0, (1.0 + abs(target)) ** 2 + lam),
        lipschitz_bound=max(speed, 2 * vol),
        name="coarse-mdp",
        params={"beta": beta, "target": target, "lam": lam, "speed": speed, "vol": vol},
    )
    return prob, dom


PROBLEMS: dict[str, Callable] = {
    "constant-cost": constant_cost,
    "deterministic-decay": deterministic_decay,
    "degenerate-ball": degenerate_ball,
    "outward-drift": outward_drift,
    "coarse-mdp": coarse_mdp,
}


def get_problem(name: str, **params):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown catalog problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**params)


def inline_problem(
    domain: dict,
    drift: dict,
    diffusion: dict,
    cost: dict,
    beta: float,
    controls,
    cost_bounds=None,
    name: str = "inline",
):
    """Assemble a problem from catalog selections, e.g. ``drift={"name": "linear", "rate": -1}``."""
    dom = make_domain(**domain)
    d = dom.dim
    cs = ControlSet.from_values(controls)

    def pick(table, sel, needs_dim=True):
        sel = dict(sel)
        key = sel.pop("name")
        if key not in table:
            raise KeyError(f"unknown function {key!r}; choose from {sorted(table)}")
        return table[key](d, **sel) if needs_dim else table[key](**sel)

    b = pick(DRIFTS, drift)
    s = pick(DIFFUSIONS, diffusion)
    f = pick(COSTS, cost, needs_dim=False)
    if cost_bounds is None:
        if cost["name"] == "constant":
            cost_bounds = (cost["c"], cost["c"])
        else:
            cost_bounds = _quadratic_bounds(dom, cost.get("target", 0.0), cost.get("weight", 0.0), cs)
    prob = ControlProblem(
        dim=d,
        drift=b,
        diffusion=s,
        running_cost=f,
        discount=float(beta),
        control_set=cs,
        cost_bounds=(float(cost_bounds[0]), float(cost_bounds[1])),
        name=name,
    )
    return prob, dom
