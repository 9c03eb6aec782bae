"""Constraint sets, their boundary geometry, and constrained Cartesian grids.

Three kinds of closed domain are supported:

* :class:`Box` -- axis-aligned box; boundary normals are defined on faces only.
* :class:`Ball` -- Euclidean ball with exact distance function.
* :class:`LevelSet` -- ``G = {g <= 0}`` for a smooth ``g``; the distance to the
  boundary is approximated by ``-g / |grad g|``, which is exact to first order
  in ``g`` and recovers the exact normal on the boundary itself.

All geometric queries accept points of shape ``(..., d)``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

GRADIENT_FLOOR = 1e-8


class GeometryError(ValueError):
    """Raised for undefined geometric quantities (normals at corners, degenerate level sets)."""


class NodeClass(enum.IntEnum):
    INTERIOR = 0
    BOUNDARY = 1
    OUTSIDE = 2


class Domain:
    """Closed constraint set ``G``; subclasses implement the geometry."""

    kind: str = "abstract"
    dim: int

    def signed_distance(self, x) -> np.ndarray:
        raise NotImplementedError

    def outward_normal(self, x) -> np.ndarray:
        raise NotImplementedError

    def hessian_distance(self, x) -> np.ndarray:
        raise NotImplementedError

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        """Map points to ``G``; points already in ``G`` are returned unchanged."""
        raise NotImplementedError

    def boundary_point(self, x) -> np.ndarray:
        """Nearest (or first-order nearest) point of the boundary."""
        raise NotImplementedError

    def sample_boundary(self, n: int, margin: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x, tol: float = 1e-12):
        """Classify points as ``"interior"``, ``"boundary"`` (|rho| <= tol) or ``"outside"``."""
        rho = np.asarray(self.signed_distance(x))
        labels = np.where(rho > tol, "interior", np.where(rho >= -tol, "boundary", "outside"))
        return str(labels) if labels.ndim == 0 else labels

    def inside(self, x, tol: float = 0.0) -> np.ndarray:
        return np.asarray(self.signed_distance(x)) >= -tol

    def _warn_origin(self):
        if self.signed_distance(np.zeros(self.dim)) <= 0:
            warnings.warn(f"{self.kind} domain does not contain the origin in its interior", stacklevel=3)


def _as_points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and d == 1:
        x = x.reshape(1)
    if x.shape[-1] != d:
        raise ValueError(f"points must have trailing dimension {d}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class Box(Domain):
    lower: np.ndarray
    upper: np.ndarray
    edge_tol: float = 1e-9
    kind = "box"

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        self._warn_origin()

    @property
    def dim(self) -> int:
        return self.lower.size

    def signed_distance(self, x):
        x = _as_points(x, self.dim)
        q = np.maximum(self.lower - x, x - self.upper)
        inside = np.all(q <= 0, axis=-1)
        return np.where(inside, -np.max(q, axis=-1), -np.linalg.norm(np.maximum(q, 0.0), axis=-1))

    def _face(self, x):
        x = _as_points(x, self.dim)
        if x.ndim != 1:
            raise ValueError("box normals are evaluated one point at a time")
        dist = np.stack([x - self.lower, self.upper - x], axis=-1)  # (d, 2)
        flat = dist.reshape(-1)
        order = np.argsort(flat, kind="stable")
        first = flat[order[0]]
        if self.dim > 1:
            second_axis = [k // 2 for k in order[1:] if k // 2 != order[0] // 2][0]
            second = dist[second_axis].min()
            if second - first <= self.edge_tol * max(1.0, abs(first)):
                raise GeometryError(f"normal undefined at box edge/corner {x.tolist()}")
        axis, side = divmod(int(order[0]), 2)
        return axis, side

    def outward_normal(self, x):
        axis, side = self._face(x)
        n = np.zeros(self.dim)
        n[axis] = -1.0 if side == 0 else 1.0
        return n

    def hessian_distance(self, x):
        self._face(x)
        return np.zeros((self.dim, self.dim))

    def bounding_box(self):
        return self.lower.copy(), self.upper.copy()

    def project(self, x):
        return np.clip(_as_points(x, self.dim), self.lower, self.upper)

    def boundary_point(self, x):
        x = np.array(_as_points(x, self.dim), dtype=float)
        if x.ndim != 1:
            raise ValueError("boundary_point is evaluated one point at a time")
        x = np.clip(x, self.lower, self.upper)
        dist = np.stack([x - self.lower, self.upper - x], axis=-1)
        axis, side = divmod(int(np.argmin(dist.reshape(-1))), 2)
        x[axis] = self.lower[axis] if side == 0 else self.upper[axis]
        return x

    def boundary_normals(self, y) -> list[np.ndarray]:
        """Normals of every face containing the boundary point ``y`` (several at edges/corners)."""
        y = _as_points(y, self.dim)
        scale = np.maximum(1.0, np.abs(self.upper - self.lower))
        out = []
        for i in range(self.dim):
            if abs(y[i] - self.lower[i]) <= self.edge_tol * scale[i]:
                n = np.zeros(self.dim)
                n[i] = -1.0
                out.append(n)
            if abs(y[i] - self.upper[i]) <= self.edge_tol * scale[i]:
                n = np.zeros(self.dim)
                n[i] = 1.0
                out.append(n)
        return out

    def sample_boundary(self, n, margin=0.0):
        """Quasi-uniform face samples, cycling through faces, ``margin`` away from edges."""
        d = self.dim
        faces = [(i, s) for i in range(d) for s in (0, 1)]
        counts = [len(range(k, n, len(faces))) for k in range(len(faces))]
        per_face = []
        for (axis, side), m in zip(faces, counts):
            if m == 0:
                per_face.append(np.empty((0, d)))
                continue
            if d == 1:
                u = np.zeros((m, 0))
            else:
                u = qmc.Halton(d - 1, scramble=False).random(m + 1)[1:]
            pts = np.empty((m, d))
            others = [j for j in range(d) if j != axis]
            for col, j in enumerate(others):
                lo = self.lower[j] + margin
                hi = self.upper[j] - margin
                pts[:, j] = lo + (hi - lo) * u[:, col]
            pts[:, axis] = self.lower[axis] if side == 0 else self.upper[axis]
            per_face.append(pts)
        out = np.empty((n, d))
        pos = [0] * len(faces)
        for k in range(n):
            f = k % len(faces)
            out[k] = per_face[f][pos[f]]
            pos[f] += 1
        return out


@dataclass(frozen=True)
class Ball(Domain):
    center: np.ndarray
    radius: float
    kind = "ball"

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "center", c)
        self._warn_origin()

    @property
    def dim(self) -> int:
        return self.center.size

    def signed_distance(self, x):
        x = _as_points(x, self.dim)
        return self.radius - np.linalg.norm(x - self.center, axis=-1)

    def _offset(self, x):
        x = _as_points(x, self.dim)
        r = x - self.center
        nr = np.linalg.norm(r, axis=-1)
        if np.any(nr == 0):
            raise GeometryError("normal undefined at the ball center")
        return r, nr

    def outward_normal(self, x):
        r, nr = self._offset(x)
        return r / nr[..., None]

    def hessian_distance(self, x):
        r, nr = self._offset(x)
        xh = r / nr[..., None]
        eye = np.eye(self.dim)
        return -(eye - xh[..., :, None] * xh[..., None, :]) / nr[..., None, None]

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def project(self, x):
        x = _as_points(x, self.dim)
        r = x - self.center
        nr = np.linalg.norm(r, axis=-1, keepdims=True)
        scale = np.where(nr > self.radius, self.radius / np.where(nr > 0, nr, 1.0), 1.0)
        return self.center + r * scale

    def boundary_point(self, x):
        r, nr = self._offset(x)
        return self.center + self.radius * r / nr[..., None]

    def sample_boundary(self, n, margin=0.0):
        d, c, R = self.dim, self.center, self.radius
        k = np.arange(n)
        if d == 1:
            return c + R * np.where(k % 2 == 0, 1.0, -1.0)[:, None]
        if d == 2:
            th = 2.0 * np.pi * k / n
            return c + R * np.stack([np.cos(th), np.sin(th)], axis=1)
        if d == 3:
            # Fibonacci sphere
            z = 1.0 - (2.0 * k + 1.0) / n
            phi = np.pi * (3.0 - np.sqrt(5.0)) * k
            rr = np.sqrt(1.0 - z * z)
            return c + R * np.stack([rr * np.cos(phi), rr * np.sin(phi), z], axis=1)
        u = qmc.Halton(d, scramble=False).random(n + 1)[1:]
        from scipy.special import ndtri

        g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
        return c + R * g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class LevelSet(Domain):
    """``G = {g <= 0}`` with callbacks for ``g``, its gradient and Hessian.

    ``center`` must lie in the interior and ``G`` must be star-shaped about it
    (boundary sampling and projection search along rays). ``ρ ≈ -g/|∇g|`` has
    O(g) error off the boundary; ``hessian_distance`` differentiates that
    approximation numerically, which gives the correct tangential block on
    ``∂G`` -- the only part that enters ``Tr(σσᵀD²ρ)`` when ``σᵀn = 0``.
    """

    g: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    center: np.ndarray
    name: str = "level-set"
    h_fd: float = 1e-4
    kind = "smooth"

    def __post_init__(self):
        for attr in ("lower", "upper", "center"):
            object.__setattr__(self, attr, np.atleast_1d(np.asarray(getattr(self, attr), dtype=float)))
        if self.g(self.center) >= 0:
            raise ValueError("level-set center must lie in the interior (g < 0)")
        self._warn_origin()
        bpts = self.sample_boundary(64)
        if np.any(np.linalg.norm(self.grad(bpts), axis=-1) < GRADIENT_FLOOR):
            raise GeometryError("degenerate level set: |grad g| vanishes on the boundary")

    @property
    def dim(self) -> int:
        return self.center.size

    def _grad_norm(self, x):
        gn = np.linalg.norm(self.grad(x), axis=-1)
        if np.any(gn < GRADIENT_FLOOR):
            raise GeometryError("degenerate level set: |grad g| below 1e-8")
        return gn

    def signed_distance(self, x):
        x = _as_points(x, self.dim)
        gx = np.asarray(self.g(x))
        gn = np.linalg.norm(self.grad(x), axis=-1)
        flat = gn < GRADIENT_FLOOR
        if np.any(flat & (gx >= 0)):
            raise GeometryError("degenerate level set: |grad g| below 1e-8")
        # critical points of g strictly inside G (e.g. the center) are deep interior;
        # only the sign matters there
        return -gx / np.maximum(gn, GRADIENT_FLOOR)

    def outward_normal(self, x):
        x = _as_points(x, self.dim)
        return self.grad(x) / self._grad_norm(x)[..., None]

    def hessian_distance(self, x):
        x = _as_points(x, self.dim)
        if x.ndim != 1:
            return np.stack([self.hessian_distance(p) for p in x.reshape(-1, self.dim)]).reshape(
                x.shape[:-1] + (self.dim, self.dim)
            )
        d, e = self.dim, self.h_fd
        H = np.empty((d, d))
        I = np.eye(d) * e
        for i in range(d):
            for j in range(i, d):
                val = (
                    self.signed_distance(x + I[i] + I[j])
                    - self.signed_distance(x + I[i] - I[j])
                    - self.signed_distance(x - I[i] + I[j])
                    + self.signed_distance(x - I[i] - I[j])
                ) / (4 * e * e)
                H[i, j] = H[j, i] = val
        return H

    def bounding_box(self):
        return self.lower.copy(), self.upper.copy()

    def _ray_root(self, direction):
        """Boundary point on the ray from ``center`` along ``direction`` (bisection on g)."""
        direction = direction / np.linalg.norm(direction, axis=-1, keepdims=True)
        span = np.linalg.norm(self.upper - self.lower)
        lo = np.zeros(direction.shape[:-1])
        hi = np.full(direction.shape[:-1], span)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            inside = self.g(self.center + mid[..., None] * direction) <= 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return self.center + lo[..., None] * direction

    def project(self, x):
        x = _as_points(x, self.dim)
        out = np.array(x, dtype=float, copy=True)
        bad = np.asarray(self.g(out)) > 0
        if np.any(bad):
            out[bad] = self._ray_root(out[bad] - self.center)
        return out

    def boundary_point(self, x):
        x = np.array(_as_points(x, self.dim), dtype=float)
        for _ in range(50):
            gx = np.asarray(self.g(x))
            gr = self.grad(x)
            step = gx[..., None] * gr / np.sum(gr * gr, axis=-1, keepdims=True)
            x = x - step
            if np.all(np.abs(gx) < 1e-14):
                break
        return x

    def sample_boundary(self, n, margin=0.0):
        if self.dim != 2:
            raise NotImplementedError("level-set boundary sampling is implemented for d = 2")
        th = 2.0 * np.pi * np.arange(n) / n
        return self._ray_root(np.stack([np.cos(th), np.sin(th)], axis=1))


def ellipse(semi_axes=(1.0, 0.5), center=(0.0, 0.0)) -> LevelSet:
    a = np.asarray(semi_axes, dtype=float)
    c = np.asarray(center, dtype=float)
    return superellipse(a, 2.0, c, name="ellipse")


def superellipse(semi_axes=(1.0, 1.0), exponent: float = 4.0, center=(0.0, 0.0), name="superellipse") -> LevelSet:
    """``sum |(x-c)_i / a_i|^p <= 1``; ``p >= 2`` keeps the boundary C^2."""
    a = np.asarray(semi_axes, dtype=float)
    c = np.asarray(center, dtype=float)
    p = float(exponent)
    if p < 2:
        raise ValueError("superellipse exponent must be >= 2")

    def g(x):
        z = (np.asarray(x) - c) / a
        return np.sum(np.abs(z) ** p, axis=-1) - 1.0

    def grad(x):
        z = (np.asarray(x) - c) / a
        return p * np.sign(z) * np.abs(z) ** (p - 1) / a

    def hess(x):
        z = (np.asarray(x) - c) / a
        diag = p * (p - 1) * np.abs(z) ** (p - 2) / a**2
        return diag[..., :, None] * np.eye(len(a))

    return LevelSet(g, grad, hess, c - a, c + a, c, name=name)


# Module-level aliases matching the operation names used throughout the package.
def contains(domain: Domain, x, tol: float = 1e-12):
    return domain.contains(x, tol)


def signed_distance(domain: Domain, x):
    return domain.signed_distance(x)


def outward_normal(domain: Domain, x):
    return domain.outward_normal(x)


def hessian_distance(domain: Domain, x):
    return domain.hessian_distance(x)


@dataclass(frozen=True, eq=False)
class Grid:
    """Cartesian lattice over the domain's bounding box with node classification.

    In-domain nodes (interior and boundary) are numbered in increasing flat
    lattice order (C order); grid functions store one value per in-domain node.
    """

    domain: Domain
    h: float
    lower: np.ndarray
    shape: tuple
    node_class: np.ndarray
    boundary_band: float

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.full(self.dim, self.h)

    @cached_property
    def lattice_coords(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dim, -1).T
        return self.lower + idx * self.h

    @cached_property
    def in_domain(self) -> np.ndarray:
        return np.flatnonzero(self.node_class != NodeClass.OUTSIDE)

    @cached_property
    def lattice_to_node(self) -> np.ndarray:
        out = np.full(self.node_class.size, -1, dtype=np.int64)
        out[self.in_domain] = np.arange(self.in_domain.size)
        return out

    @property
    def n_nodes(self) -> int:
        return int(self.in_domain.size)

    @cached_property
    def coords(self) -> np.ndarray:
        return self.lattice_coords[self.in_domain]

    @cached_property
    def classes(self) -> np.ndarray:
        """Class of each in-domain node."""
        return self.node_class[self.in_domain]

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return self.classes == NodeClass.INTERIOR

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        return self.classes == NodeClass.BOUNDARY

    @cached_property
    def multi_index(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.in_domain, self.shape), axis=1)

    def neighbor(self, offset) -> np.ndarray:
        """In-domain node index of ``node + offset`` for every node, ``-1`` if not in G."""
        mi = self.multi_index + np.asarray(offset, dtype=np.int64)
        ok = np.all((mi >= 0) & (mi < np.asarray(self.shape)), axis=1)
        out = np.full(self.n_nodes, -1, dtype=np.int64)
        flat = np.ravel_multi_index(tuple(mi[ok].T), self.shape)
        out[ok] = self.lattice_to_node[flat]
        return out

    @cached_property
    def _nearest_map(self) -> np.ndarray:
        tree = cKDTree(self.coords)
        _, idx = tree.query(self.lattice_coords)
        return np.asarray(idx, dtype=np.int64)

    def nearest_node(self, x) -> np.ndarray:
        """Index of the (approximately) nearest in-domain node; vectorised over points."""
        x = _as_points(x, self.dim)
        mi = np.rint((x - self.lower) / self.h).astype(np.int64)
        mi = np.clip(mi, 0, np.asarray(self.shape) - 1)
        flat = np.ravel_multi_index(tuple(np.moveaxis(mi, -1, 0)), self.shape)
        return self._nearest_map[flat]


def build_grid(domain: Domain, h: float, boundary_band: float | None = None) -> Grid:
    """Lattice of spacing ``h`` over the bounding box of ``domain``.

    Nodes with ``rho >= band`` are interior, ``0 <= rho < band`` boundary, the rest
    outside. Interior nodes with an out-of-domain axis neighbour are demoted to
    boundary so interior stencils never read outside ``G``.
    """
    if not h > 0:
        raise ValueError("grid spacing h must be positive")
    band = h if boundary_band is None else float(boundary_band)
    if band < 0:
        raise ValueError("boundary band must be nonnegative")
    lo, hi = domain.bounding_box()
    counts = np.floor((hi - lo) / h + 1e-9).astype(int) + 1
    shape = tuple(int(c) for c in counts)
    idx = np.indices(shape).reshape(len(shape), -1).T
    pts = lo + idx * h
    rho = domain.signed_distance(pts)
    eps = 1e-9 * h
    cls = np.full(rho.shape, NodeClass.OUTSIDE, dtype=np.int8)
    cls[rho >= -eps] = NodeClass.BOUNDARY
    cls[rho >= band - eps] = NodeClass.INTERIOR
    in_dom = cls != NodeClass.OUTSIDE
    grid_shape = np.asarray(shape)
    interior = np.flatnonzero(cls == NodeClass.INTERIOR)
    mi = idx[interior]
    demote = np.zeros(interior.size, dtype=bool)
    for axis in range(len(shape)):
        for step in (-1, 1):
            nb = mi.copy()
            nb[:, axis] += step
            ok = (nb[:, axis] >= 0) & (nb[:, axis] < grid_shape[axis])
            flat = np.zeros(nb.shape[0], dtype=np.int64)
            flat[ok] = np.ravel_multi_index(tuple(nb[ok].T), shape)
            demote |= ~ok | ~in_dom[flat]
    cls[interior[demote]] = NodeClass.BOUNDARY
    if not np.any(cls == NodeClass.INTERIOR):
        raise ValueError("domain under-resolved: grid has no interior nodes")
    cls.setflags(write=False)
    return Grid(domain, float(h), np.asarray(lo, dtype=float), shape, cls, band)


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """Real values on the in-domain nodes of a grid."""

    grid: Grid
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(f"expected {self.grid.n_nodes} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("value function has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: Grid, c: float, label: str = "") -> "ValueFunction":
        return cls(grid, np.full(grid.n_nodes, float(c)), label or f"const({c:g})")

    def minimum(self, other: "ValueFunction") -> "ValueFunction":
        _same_grid(self, other)
        return ValueFunction(self.grid, np.minimum(self.values, other.values), f"min({self.label},{other.label})")

    def maximum(self, other: "ValueFunction") -> "ValueFunction":
        _same_grid(self, other)
        return ValueFunction(self.grid, np.maximum(self.values, other.values), f"max({self.label},{other.label})")

    def interpolate(self, x) -> tuple[np.ndarray, int]:
        """Multilinear interpolation; cells with an out-of-domain corner fall back to nearest node.

        Returns the values and the number of fallback evaluations.
        """
        g = self.grid
        x = _as_points(x, g.dim)
        pts = x.reshape(-1, g.dim)
        s = (pts - g.lower) / g.h
        base = np.floor(s).astype(np.int64)
        base = np.clip(base, 0, np.asarray(g.shape) - 2)
        frac = s - base
        out = np.zeros(len(pts))
        ok = np.all((frac >= -1e-12) & (frac <= 1 + 1e-12), axis=1)
        for corner in np.ndindex(*(2,) * g.dim):
            c = np.asarray(corner)
            mi = base + c
            flat = np.ravel_multi_index(tuple(mi.T), g.shape)
            node = g.lattice_to_node[flat]
            ok &= node >= 0
            w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
            out += w * self.values[np.maximum(node, 0)]
        fallback = ~ok
        if np.any(fallback):
            out[fallback] = self.values[g.nearest_node(pts[fallback])]
        return out.reshape(x.shape[:-1]), int(fallback.sum())

    def __call__(self, x) -> np.ndarray:
        return self.interpolate(x)[0]


def _same_grid(a, b):
    if a.grid is not b.grid:
        raise ValueError("grid functions live on different grids")


@dataclass(frozen=True, eq=False)
class Policy:
    """Control index per in-domain node; off-grid queries use the nearest node."""

    grid: Grid
    controls: np.ndarray  # control-set points, shape (n_controls, k)
    index: np.ndarray
    label: str = ""

    def __post_init__(self):
        idx = np.asarray(self.index, dtype=np.int64)
        if idx.shape != (self.grid.n_nodes,):
            raise ValueError("policy must assign one control per in-domain node")
        if np.any(idx < 0) or np.any(idx >= len(self.controls)):
            raise ValueError("policy references a control outside the control set")
        object.__setattr__(self, "index", idx)

    @classmethod
    def constant(cls, grid: Grid, controls: np.ndarray, i: int = 0, label: str = "") -> "Policy":
        return cls(grid, np.asarray(controls), np.full(grid.n_nodes, i), label or f"const[{i}]")

    def index_at(self, x) -> np.ndarray:
        return self.index[self.grid.nearest_node(x)]

    def __call__(self, x) -> np.ndarray:
        return self.controls[self.index_at(x)]
