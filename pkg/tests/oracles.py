"""Independent reference implementations used to cross-check the solvers.

Everything here is deliberately brute force and shares no code with the
package internals.
"""

from itertools import combinations, product

import numpy as np


def brute_force_qp(h, f, a_eq=None, b_eq=None, a_in=None, lo=None, up=None,
                   tol=1e-8):
    """Global minimum of a strictly convex QP by active-set enumeration.

    Tries every subset of inequality rows (each pinned at its lower or upper
    bound), solves the equality-constrained KKT system, and keeps the
    feasible candidate with correct multiplier signs and lowest objective.
    Only viable for small problems; returns None when no candidate passes
    (infeasible problem).
    """
    n = h.shape[0]
    m = 0 if a_in is None else a_in.shape[0]
    n_eq = 0 if a_eq is None else a_eq.shape[0]

    best_obj = np.inf
    best_x = None
    max_active = n - n_eq
    for k in range(0, max_active + 1):
        for rows in combinations(range(m), k):
            sides_options = []
            for i in rows:
                opts = []
                if lo is not None and np.isfinite(lo[i]):
                    opts.append(("lo", i))
                if up is not None and np.isfinite(up[i]):
                    opts.append(("up", i))
                sides_options.append(opts)
            for sides in product(*sides_options):
                g_rows = []
                b_rows = []
                if n_eq:
                    g_rows.append(a_eq)
                    b_rows.append(b_eq)
                for side, i in sides:
                    g_rows.append(a_in[i:i + 1])
                    b_rows.append([lo[i] if side == "lo" else up[i]])
                if g_rows:
                    g = np.vstack(g_rows)
                    b = np.concatenate([np.atleast_1d(r) for r in b_rows])
                else:
                    g = np.zeros((0, n))
                    b = np.zeros(0)
                na = g.shape[0]
                kkt = np.zeros((n + na, n + na))
                kkt[:n, :n] = h
                kkt[:n, n:] = g.T
                kkt[n:, :n] = g
                rhs = np.concatenate([-f, b])
                try:
                    sol = np.linalg.solve(kkt, rhs)
                except np.linalg.LinAlgError:
                    continue
                if not np.all(np.isfinite(sol)):
                    continue
                x = sol[:n]
                nu = sol[n + n_eq:]
                # multiplier signs: <=0 at lower bounds, >=0 at upper bounds
                sign_ok = True
                for (side, _), v in zip(sides, nu):
                    if side == "lo" and v > tol:
                        sign_ok = False
                    if side == "up" and v < -tol:
                        sign_ok = False
                if not sign_ok:
                    continue
                if a_eq is not None and np.max(np.abs(a_eq @ x - b_eq)) > tol:
                    continue
                if m:
                    ax = a_in @ x
                    if lo is not None and np.any(ax < lo - tol):
                        continue
                    if up is not None and np.any(ax > up + tol):
                        continue
                obj = 0.5 * x @ h @ x + f @ x
                if obj < best_obj - 1e-12:
                    best_obj = obj
                    best_x = x
    return best_x


def grid_search_1d(fun, lo, hi, n=600001):
    """Dense scan minimizer for scalar problems."""
    xs = np.linspace(lo, hi, n)
    vals = np.array([fun(x) for x in xs])
    return xs[int(np.argmin(vals))]


def rk4_rollout(deriv, x0, u, dt, n_steps):
    """Classic RK4 integrator used as an independent integration oracle."""
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(n_steps):
        k1 = deriv(x, u)
        k2 = deriv(x + 0.5 * dt * k1, u)
        k3 = deriv(x + 0.5 * dt * k2, u)
        k4 = deriv(x + dt * k3, u)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def bernstein_cubic(p0, p1, p2, p3, tau):
    """Direct Bernstein-polynomial evaluation of a cubic Bezier curve."""
    tau = np.asarray(tau, dtype=float)
    b0 = (1 - tau) ** 3
    b1 = 3 * (1 - tau) ** 2 * tau
    b2 = 3 * (1 - tau) * tau ** 2
    b3 = tau ** 3
    return (
        np.outer(b0, p0) + np.outer(b1, p1) + np.outer(b2, p2) + np.outer(b3, p3)
    )


def point_in_hull_2d(point, vertices, tol=1e-9):
    """Exact 2-D convex-hull membership via signed areas against hull edges."""
    pts = np.asarray(vertices, dtype=float)
    # gift-wrap the hull (tiny n, clarity over speed)
    hull = []
    start = min(range(len(pts)), key=lambda i: (pts[i][0], pts[i][1]))
    cur = start
    while True:
        hull.append(cur)
        nxt = (cur + 1) % len(pts)
        for j in range(len(pts)):
            if j == cur:
                continue
            cross = np.cross(pts[j] - pts[cur], pts[nxt] - pts[cur])
            if cross > tol or (abs(cross) <= tol and
                               np.linalg.norm(pts[j] - pts[cur]) > np.linalg.norm(pts[nxt] - pts[cur])):
                nxt = j
        cur = nxt
        if cur == start:
            break
    hull_pts = pts[hull]
    p = np.asarray(point, dtype=float)
    for i in range(len(hull_pts)):
        a = hull_pts[i]
        b = hull_pts[(i + 1) % len(hull_pts)]
        if np.cross(b - a, p - a) < -1e-7:
            return False
    return True
