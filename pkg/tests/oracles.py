"""Independent reference computations used by the tests.

Nothing here imports the package's solver: the chain for the 1D coarse
problem is rebuilt from the upwind formulas and solved with dense Howard
iteration, and the decay benchmark is integrated with scipy quadrature.
"""

import numpy as np
from scipy.integrate import quad

TIE = 1e-12


def decay_value_by_quadrature(x: float, beta: float = 1.0) -> float:
    """int_0^inf e^{-beta t} (x e^{-t})^2 dt along the exact flow of dx = -x dt."""
    val, _ = quad(lambda t: np.exp(-beta * t) * (x * np.exp(-t)) ** 2, 0.0, np.inf, epsabs=1e-14, epsrel=1e-13)
    return val


def coarse_chain(h, beta=0.5, target=0.3, lam=0.1, speed=0.5, vol=0.4):
    """Dense transition data ``(x, P[c], dt[c], f[c])`` of the upwind chain on [-1, 1]."""
    n = int(round(2.0 / h)) + 1
    x = np.linspace(-1.0, 1.0, n)
    controls = [-1.0, 0.0, 1.0]
    P, DT, F = [], [], []
    for a in controls:
        b = speed * a
        s2 = (vol * (1.0 - x**2)) ** 2
        up = s2 / 2 + h * max(b, 0.0)
        down = s2 / 2 + h * max(-b, 0.0)
        up[-1] = 0.0  # no neighbour beyond x = 1 (sigma vanishes there)
        down[0] = 0.0
        q = up + down
        qe = np.maximum(q, h)
        M = np.zeros((n, n))
        for i in range(n):
            if i + 1 < n:
                M[i, i + 1] = up[i] / qe[i]
            if i > 0:
                M[i, i - 1] = down[i] / qe[i]
            M[i, i] += 1.0 - q[i] / qe[i]
        P.append(M)
        DT.append(h * h / qe)
        F.append((x - target) ** 2 + lam * a * a)
    return x, P, np.array(DT), np.array(F)


def _first_argmin(q):
    best = q.min(axis=0)
    return np.argmax(q <= best + TIE, axis=0)


def howard(P, DT, F, beta):
    n = F.shape[1]
    G = 1.0 / (1.0 + beta * DT)
    pol = np.zeros(n, dtype=int)
    for _ in range(200):
        A = np.eye(n) - np.array([G[pol[i], i] * P[pol[i]][i] for i in range(n)])
        rhs = np.array([G[pol[i], i] * DT[pol[i], i] * F[pol[i], i] for i in range(n)])
        u = np.linalg.solve(A, rhs)
        q = np.stack([G[c] * (DT[c] * F[c] + P[c] @ u) for c in range(len(P))])
        new = _first_argmin(q)
        keep = q[pol, np.arange(n)] <= q.min(axis=0) + TIE
        new = np.where(keep, pol, new)
        if np.array_equal(new, pol):
            return u, _first_argmin(q)
        pol = new
    raise RuntimeError("oracle did not converge")
