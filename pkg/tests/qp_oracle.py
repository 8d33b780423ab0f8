"""Independent solver for the soft-margin dual, used to check SMO.

min_a 0.5 a^T Q a - 1^T a  s.t.  0 <= a <= C,  y^T a = 0,  Q = (y y^T) * K.

Accelerated projected gradient with adaptive restart; projection onto the
box-and-hyperplane set is exact (piecewise-linear root in the multiplier).
The iterate then fixes the active set, and the equality-constrained problem
on the free coordinates is solved exactly and accepted if it is a KKT point.
"""

from __future__ import annotations

import numpy as np


def project(v: np.ndarray, y: np.ndarray, C: float) -> np.ndarray:
    def phi(lam):
        return np.clip(v[None, :] - lam[:, None] * y[None, :], 0.0, C) @ y

    # phi is non-increasing in lambda; its kinks are where a coordinate hits a bound
    knots = np.unique(np.concatenate([v * y, (v - C) * y]))
    vals = phi(knots)
    if vals[0] < 0 or vals[-1] > 0:
        raise ValueError("empty feasible set")
    hit = np.flatnonzero(vals == 0)
    if hit.size:
        lam = knots[hit[0]]
    else:
        j = np.flatnonzero(vals < 0)[0]
        a, b = knots[j - 1], knots[j]
        lam = a + (b - a) * vals[j - 1] / (vals[j - 1] - vals[j])
    return np.clip(v - lam * y, 0.0, C)


def solve(K: np.ndarray, y: np.ndarray, C: float, iters: int = 20_000, tol: float = 1e-13) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    Q = np.outer(y, y) * K
    L = max(np.linalg.eigvalsh(Q).max(), 1e-12)
    f = lambda a: 0.5 * a @ Q @ a - a.sum()  # noqa: E731
    x = np.zeros(len(y))
    z, t = x.copy(), 1.0
    for _ in range(iters):
        nx = project(z - (Q @ z - 1.0) / L, y, C)
        if f(nx) > f(x):  # restart momentum when it stops helping
            z, t = x.copy(), 1.0
            continue
        nt = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = nx + ((t - 1.0) / nt) * (nx - x)
        step = np.abs(nx - x).max()
        x, t = nx, nt
        if step < tol:
            break
    polished = _polish(Q, y, C, x)
    return polished if polished is not None and f(polished) <= f(x) + 1e-12 else x


def _polish(Q, y, C, a, eps=1e-6):
    lower, upper = a <= eps * C, a >= (1 - eps) * C
    free = ~(lower | upper)
    fixed = np.where(upper, C, 0.0)
    F = np.flatnonzero(free)
    m = len(F)
    A = np.zeros((m + 1, m + 1))
    A[:m, :m] = Q[np.ix_(F, F)]
    A[:m, m] = A[m, :m] = y[F]
    rhs = np.concatenate([1.0 - Q[F] @ fixed, [-(y @ fixed)]])
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    out = fixed.copy()
    out[F] = sol[:m]
    nu = sol[m]
    if np.any(out < -1e-12) or np.any(out > C + 1e-12) or abs(out @ y) > 1e-10:
        return None
    grad = Q @ out - 1.0 + nu * y
    if np.any(grad[lower] < -1e-9) or np.any(grad[upper] > 1e-9) or np.any(np.abs(grad[free]) > 1e-9):
        return None
    return np.clip(out, 0.0, C)


def objective(K, y, a) -> float:
    ay = a * y
    return float(0.5 * ay @ K @ ay - a.sum())
