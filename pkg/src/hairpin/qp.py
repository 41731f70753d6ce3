"""Convex QP and sequential-linearization machinery.

One solver sits behind two entry points: :func:`solve_qp` for a single
quadratic program and :func:`solve_sqp` for problems whose constraints need
re-linearization around the incumbent.  The QP method is first-order
splitting (ADMM) over ``l <= Ax <= u`` with diagonal equilibration, plus an
active-set polish that solves the reduced KKT system directly; a solution is
reported "optimal" only when the polished (or raw) iterate certifies both
primal and stationarity residuals below 1e-6 on the original data.

Internals are numba kernels (see ``_accel``) so the n+1 corridor problems of
the overtaking planner can run on worker threads without the GIL;
:class:`QpWorkspace` lets them share one KKT factorization when only the
linear term and bounds differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._accel import jit_kernel
from .errors import BadProblem, NoProgress

# repo-wide solver settings
CERT_TOL = 1e-6  # primal / stationarity certification threshold
MAX_ITER = 4000
ADMM_SIGMA = 1e-6
ADMM_ALPHA = 1.6
ADMM_RHO = 0.1
RHO_EQ_BOOST = 1e3
CHECK_EVERY = 25
INF = 1e30  # bounds at or beyond this magnitude are treated as infinite

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"

_STATUS_BY_CODE = {0: STATUS_OPTIMAL, 1: STATUS_MAX_ITER, 2: STATUS_INFEASIBLE}


@dataclass(frozen=True)
class QuadraticProgram:
    """min 0.5 x'Hx + f'x  s.t.  A_eq x = b_eq,  lower <= A_in x <= upper."""

    H: np.ndarray
    f: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def validate(self):
        h = self.H
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise BadProblem("H must be square")
        n = h.shape[0]
        if self.f.shape != (n,):
            raise BadProblem(f"f has shape {self.f.shape}, expected ({n},)")
        scale = max(1.0, float(np.abs(h).max()))
        if np.abs(h - h.T).max() > 1e-8 * scale:
            raise BadProblem("H is not symmetric")
        if self.A_eq is not None:
            if self.A_eq.shape[1] != n or self.b_eq.shape[0] != self.A_eq.shape[0]:
                raise BadProblem("equality constraint dimensions inconsistent")
        if self.A_in is not None:
            m = self.A_in.shape[0]
            if self.A_in.shape[1] != n or self.lower.shape[0] != m or self.upper.shape[0] != m:
                raise BadProblem("inequality constraint dimensions inconsistent")
        # PSD up to tolerance: cheap Cholesky probe, exact eigenvalue fallback
        try:
            np.linalg.cholesky(h + (1e-7 * scale) * np.eye(n))
        except np.linalg.LinAlgError:
            min_eig = float(np.linalg.eigvalsh(h)[0])
            if min_eig < -1e-8 * scale:
                raise BadProblem(f"H indefinite: min eigenvalue {min_eig:.3e}")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)

    def stacked(self):
        """Combined constraint system (A, l, u, is_eq) with equalities first."""
        blocks_a, blocks_l, blocks_u = [], [], []
        n_eq = 0
        if self.A_eq is not None and self.A_eq.shape[0]:
            blocks_a.append(self.A_eq)
            blocks_l.append(self.b_eq)
            blocks_u.append(self.b_eq)
            n_eq = self.A_eq.shape[0]
        if self.A_in is not None and self.A_in.shape[0]:
            blocks_a.append(self.A_in)
            blocks_l.append(self.lower)
            blocks_u.append(self.upper)
        if not blocks_a:
            a = np.zeros((0, self.n))
            return a, np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int8)
        a = np.ascontiguousarray(np.vstack(blocks_a), dtype=float)
        l = np.concatenate(blocks_l).astype(float)
        u = np.concatenate(blocks_u).astype(float)
        is_eq = np.zeros(a.shape[0], dtype=np.int8)
        is_eq[:n_eq] = 1
        return a, l, u, is_eq


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: str
    y: np.ndarray = field(default=None, repr=False)  # duals on stacked rows
    iterations: int = 0
    primal_residual: float = np.inf
    stationarity_residual: float = np.inf


@jit_kernel
def _tri_solve_lower(L, b, out):
    n = L.shape[0]
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= L[i, j] * out[j]
        out[i] = acc / L[i, i]


@jit_kernel
def _tri_solve_upper(L, b, out):
    # solves L.T x = b for lower-triangular L
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for j in range(i + 1, n):
            acc -= L[j, i] * out[j]
        out[i] = acc / L[i, i]


@jit_kernel
def _violation_inf(au, lu, uu, x):
    m = au.shape[0]
    rp = 0.0
    ax = au @ x
    for i in range(m):
        if not np.isfinite(ax[i]):
            return INF
        v = 0.0
        if lu[i] > -INF and ax[i] < lu[i]:
            v = lu[i] - ax[i]
        elif uu[i] < INF and ax[i] > uu[i]:
            v = ax[i] - uu[i]
        if v > rp:
            rp = v
    return rp


@jit_kernel
def _stationarity_inf(pu, qu, aut, x, y):
    grad = pu @ x + qu
    if y.shape[0] > 0:
        grad += aut @ y
    rd = 0.0
    for j in range(grad.shape[0]):
        v = abs(grad[j])
        if not np.isfinite(v):
            return INF
        if v > rd:
            rd = v
    return rd


@jit_kernel
def _polish_kkt(pu, qu, au, lu, uu, kind, delta, x_out, y_out):
    """Equality-constrained KKT solve for a given active-set guess.

    kind: 0 inactive, 1 lower-active, 2 equality, 3 upper-active.  Returns
    the number of wrong-signed multipliers (0 means clean); wrong-signed
    rows are flipped to inactive in `kind` so the caller can retry.
    """
    n = pu.shape[0]
    m = au.shape[0]
    na = 0
    for i in range(m):
        if kind[i] != 0:
            na += 1
    nk = n + na
    kkt = np.zeros((nk, nk))
    rhs = np.zeros(nk)
    for i in range(n):
        for j in range(n):
            kkt[i, j] = pu[i, j]
        kkt[i, i] += delta
        rhs[i] = -qu[i]
    rows = np.empty(na, dtype=np.int64)
    r = 0
    for i in range(m):
        if kind[i] == 0:
            continue
        rows[r] = i
        for j in range(n):
            kkt[n + r, j] = au[i, j]
            kkt[j, n + r] = au[i, j]
        kkt[n + r, n + r] = -delta
        rhs[n + r] = uu[i] if kind[i] == 3 else lu[i]
        r += 1

    sol = np.linalg.solve(kkt, rhs)
    # one refinement pass against the unregularized KKT system
    resid = rhs - kkt @ sol
    for i in range(n):
        resid[i] += delta * sol[i]
    for i in range(na):
        resid[n + i] -= delta * sol[n + i]
    sol = sol + np.linalg.solve(kkt, resid)

    for j in range(n):
        x_out[j] = sol[j]
    for i in range(m):
        y_out[i] = 0.0
    bad = 0
    for r in range(na):
        i = rows[r]
        nu = sol[n + r]
        if kind[i] == 1 and nu > 1e-7:
            kind[i] = 0
            bad += 1
        elif kind[i] == 3 and nu < -1e-7:
            kind[i] = 0
            bad += 1
        else:
            y_out[i] = nu
    return bad


@jit_kernel
def _polish(pu, qu, au, aut, lu, uu, is_eq, y_scaled, z_scaled, l_scaled,
            u_scaled, delta, x_out, y_out):
    """Active-set polish.

    Rows activate by primal proximity of the ADMM iterate to a bound or by
    a clearly signed dual (duals alone misclassify when the problem is dual
    degenerate).  Rows acting on a single variable are deduplicated so
    parallel bound/trust-region rows cannot make the KKT system singular.
    Solves the reduced system, drops wrong-signed multipliers, retries once.
    """
    n = pu.shape[0]
    m = au.shape[0]
    ymax = 1e-30
    for i in range(m):
        v = abs(y_scaled[i])
        if v > ymax:
            ymax = v
    ytol = 1e-9 * max(1.0, ymax)

    single_col = np.full(n, -1, dtype=np.int64)  # variable -> owning row
    kind = np.zeros(m, dtype=np.int8)
    for i in range(m):
        side = 0
        if is_eq[i] == 1:
            side = 2
        else:
            d_lo = z_scaled[i] - l_scaled[i] if l_scaled[i] > -INF else INF
            d_up = u_scaled[i] - z_scaled[i] if u_scaled[i] < INF else INF
            tol = 1e-4 * max(1.0, abs(z_scaled[i]))
            if y_scaled[i] < -ytol or (d_lo < tol and d_lo <= d_up):
                side = 1
            elif y_scaled[i] > ytol or d_up < tol:
                side = 3
        if side == 0:
            continue
        # dedup rows that touch exactly one variable (bounds vs trust region)
        nz_col = -1
        nz_count = 0
        for j in range(n):
            if au[i, j] != 0.0:
                nz_count += 1
                nz_col = j
                if nz_count > 1:
                    break
        if nz_count == 1:
            if single_col[nz_col] >= 0:
                continue
            single_col[nz_col] = i
        kind[i] = side

    # active-set refinement: drop wrong-signed multipliers, add violated
    # rows, re-solve; the ADMM iterate only seeds the first guess
    for _ in range(5):
        bad = _polish_kkt(pu, qu, au, lu, uu, kind, delta, x_out, y_out)
        # _polish_kkt may have dropped rows: rebuild the single-column map
        for j in range(n):
            single_col[j] = -1
        for i in range(m):
            if kind[i] == 0:
                continue
            nz_col = -1
            nz_count = 0
            for j in range(n):
                if au[i, j] != 0.0:
                    nz_count += 1
                    nz_col = j
                    if nz_count > 1:
                        break
            if nz_count == 1:
                single_col[nz_col] = i
        ax = au @ x_out
        added = 0
        for i in range(m):
            if kind[i] != 0:
                continue
            side = 0
            if lu[i] > -INF and ax[i] < lu[i] - 1e-9:
                side = 1
            elif uu[i] < INF and ax[i] > uu[i] + 1e-9:
                side = 3
            if side == 0:
                continue
            nz_col = -1
            nz_count = 0
            for j in range(n):
                if au[i, j] != 0.0:
                    nz_count += 1
                    nz_col = j
                    if nz_count > 1:
                        break
            if nz_count == 1:
                if single_col[nz_col] >= 0:
                    continue
                single_col[nz_col] = i
            kind[i] = side
            added += 1
        if bad == 0 and added == 0:
            return 1
    return 0


@jit_kernel
def _qp_core(p, q, a, a_t, l, u, is_eq, rho, chol_l,
             pu, qu, au, au_t, lu, uu, d, e, c,
             x, y, max_iter, info, x_pol, y_pol):
    """ADMM loop on the scaled problem with polish attempts.

    info out: [status, iters, prim_res, stat_res, polished]
    status: 0 certified optimal, 1 max_iter, 2 primal infeasible.
    """
    n = x.shape[0]
    m = y.shape[0]
    sigma = ADMM_SIGMA
    alpha = ADMM_ALPHA

    if m == 0:
        # unconstrained: sigma-regularized solve refined against P itself
        xt = np.empty(n)
        tmp = np.empty(n)
        rhs = np.empty(n)
        for j in range(n):
            x_pol[j] = 0.0
        for _ in range(4):
            resid = -(qu + pu @ x_pol)
            for j in range(n):
                rhs[j] = c * d[j] * resid[j]
            _tri_solve_lower(chol_l, rhs, tmp)
            _tri_solve_upper(chol_l, tmp, xt)
            for j in range(n):
                x_pol[j] = x_pol[j] + d[j] * xt[j]
        for j in range(n):
            x[j] = x_pol[j] / d[j]
        rd = _stationarity_inf(pu, qu, au_t, x_pol, y)
        info[0] = 0.0 if rd < CERT_TOL else 1.0
        info[1] = 1.0
        info[2] = 0.0
        info[3] = rd
        info[4] = 1.0
        return

    z = a @ x
    z = np.minimum(np.maximum(z, l), u)
    y_prev = y.copy()
    rhs = np.empty(n)
    tmp = np.empty(n)
    xt = np.empty(n)
    w = np.empty(m)
    x_u = np.empty(n)
    y_u = np.empty(m)
    rho_run = rho.copy()
    chol = chol_l  # replaced locally if rho adapts
    last_adapt = 0
    # polish whenever the residual scale drops or on the periodic schedule;
    # the active set usually settles long before the iterates converge
    polish_gate = 1e-3 * max(1.0, np.abs(qu).max())
    polish_every = 4 * CHECK_EVERY

    it = 0
    while it < max_iter:
        it += 1
        for j in range(n):
            rhs[j] = sigma * x[j] - q[j]
        rhs += a_t @ (rho_run * z - y)
        _tri_solve_lower(chol, rhs, tmp)
        _tri_solve_upper(chol, tmp, xt)
        zt = a @ xt
        for j in range(n):
            x[j] = alpha * xt[j] + (1.0 - alpha) * x[j]
        for i in range(m):
            w[i] = alpha * zt[i] + (1.0 - alpha) * z[i] + y[i] / rho_run[i]
            zi = w[i]
            if zi < l[i]:
                zi = l[i]
            if zi > u[i]:
                zi = u[i]
            y[i] = rho_run[i] * (w[i] - zi)
            z[i] = zi

        if it % CHECK_EVERY == 0 or it == max_iter:
            for j in range(n):
                x_u[j] = d[j] * x[j]
            for i in range(m):
                y_u[i] = e[i] * y[i] / c
            rp = _violation_inf(au, lu, uu, x_u)
            rd = _stationarity_inf(pu, qu, au_t, x_u, y_u)
            if rp < CERT_TOL and rd < CERT_TOL:
                for j in range(n):
                    x_pol[j] = x_u[j]
                for i in range(m):
                    y_pol[i] = y_u[i]
                info[0] = 0.0
                info[1] = it
                info[2] = rp
                info[3] = rd
                info[4] = 1.0
                return
            if (rp < polish_gate and rd < polish_gate) or it % polish_every == 0:
                if rp < polish_gate and rd < polish_gate:
                    polish_gate *= 1e-2
                ok = _polish(pu, qu, au, au_t, lu, uu, is_eq, y, z, l, u, 1e-9, x_pol, y_pol)
                if ok == 1:
                    prp = _violation_inf(au, lu, uu, x_pol)
                    prd = _stationarity_inf(pu, qu, au_t, x_pol, y_pol)
                    if prp < CERT_TOL and prd < CERT_TOL:
                        info[0] = 0.0
                        info[1] = it
                        info[2] = prp
                        info[3] = prd
                        info[4] = 1.0
                        return
            # primal infeasibility certificate from the dual update direction
            dy_norm = 0.0
            for i in range(m):
                v = abs(y[i] - y_prev[i])
                if v > dy_norm:
                    dy_norm = v
            if dy_norm > 1e-12:
                dy_u = np.empty(m)
                for i in range(m):
                    dy_u[i] = e[i] * (y[i] - y_prev[i]) / c
                atv = au_t @ dy_u
                aty = 0.0
                for j in range(n):
                    v = abs(atv[j])
                    if v > aty:
                        aty = v
                support = 0.0
                certifiable = True
                for i in range(m):
                    if dy_u[i] > 0.0:
                        if uu[i] >= INF:
                            certifiable = False
                            break
                        support += uu[i] * dy_u[i]
                    elif dy_u[i] < 0.0:
                        if lu[i] <= -INF:
                            certifiable = False
                            break
                        support += lu[i] * dy_u[i]
                dscale = 0.0
                for i in range(m):
                    v = abs(dy_u[i])
                    if v > dscale:
                        dscale = v
                if certifiable and dscale > 1e-12 and aty <= 1e-6 * dscale and support <= -1e-6 * dscale:
                    info[0] = 2.0
                    info[1] = it
                    info[2] = INF
                    info[3] = INF
                    info[4] = 0.0
                    return
            for i in range(m):
                y_prev[i] = y[i]
            # adaptive rho on scaled residuals; refactorize locally
            if it - last_adapt >= 2 * CHECK_EVERY and it <= max_iter - CHECK_EVERY:
                ax_s = a @ x
                num_p = 0.0
                den_p = 1e-10
                for i in range(m):
                    num_p = max(num_p, abs(ax_s[i] - z[i]))
                    den_p = max(den_p, abs(ax_s[i]), abs(z[i]))
                px = p @ x
                aty_s = a_t @ y
                num_d = 0.0
                den_d = 1e-10
                for j in range(n):
                    num_d = max(num_d, abs(px[j] + q[j] + aty_s[j]))
                    den_d = max(den_d, abs(px[j]), abs(aty_s[j]), abs(q[j]))
                ratio = np.sqrt((num_p / den_p) / max(num_d / den_d, 1e-12))
                if ratio > 5.0 or ratio < 0.2:
                    factor = min(max(ratio, 1e-2), 1e2)
                    for i in range(m):
                        rho_run[i] *= factor
                    kkt = p + a_t @ (rho_run.reshape(m, 1) * a)
                    for j in range(n):
                        kkt[j, j] += sigma
                    chol = np.linalg.cholesky(kkt)
                    last_adapt = it

    for j in range(n):
        x_u[j] = d[j] * x[j]
        x_pol[j] = x_u[j]
    for i in range(m):
        y_u[i] = e[i] * y[i] / c
        y_pol[i] = y_u[i]
    info[0] = 1.0
    info[1] = max_iter
    info[2] = _violation_inf(au, lu, uu, x_u)
    info[3] = _stationarity_inf(pu, qu, au_t, x_u, y_u)
    info[4] = 1.0


@jit_kernel
def _ruiz_kernel(p, a, iters, d, e):
    n = p.shape[0]
    m = a.shape[0]
    ps = p.copy()
    asq = a.copy()
    for _ in range(iters):
        for j in range(n):
            col = 1e-8
            for i in range(n):
                v = abs(ps[i, j])
                if v > col:
                    col = v
            for i in range(m):
                v = abs(asq[i, j])
                if v > col:
                    col = v
            if col > 1e8:
                col = 1e8
            dd = 1.0 / np.sqrt(col)
            d[j] *= dd
            for i in range(n):
                ps[i, j] *= dd
                ps[j, i] *= dd
            for i in range(m):
                asq[i, j] *= dd
        for i in range(m):
            row = 1e-8
            for j in range(n):
                v = abs(asq[i, j])
                if v > row:
                    row = v
            if row > 1e8:
                row = 1e8
            de = 1.0 / np.sqrt(row)
            e[i] *= de
            for j in range(n):
                asq[i, j] *= de


def _ruiz_equilibrate(p, a, iters=3):
    """Diagonal scaling vectors (d, e) flattening [P A'; A 0] row/col norms."""
    d = np.ones(p.shape[0])
    e = np.ones(a.shape[0])
    _ruiz_kernel(np.ascontiguousarray(p), np.ascontiguousarray(a), iters, d, e)
    return d, e


class QpWorkspace:
    """Scaled matrices and KKT factorization reusable across (f, l, u) variants.

    The overtaking planner's n+1 corridor problems share H and A; each
    corridor only changes the linear term and bound vectors, so the
    factorization is computed once per control step.  ``solve`` is
    re-entrant: per-call state lives in local arrays.
    """

    def __init__(self, H: np.ndarray, A: np.ndarray, is_eq: np.ndarray,
                 max_iter: int = MAX_ITER, f_typical=None):
        n = H.shape[0]
        m = A.shape[0]
        self.n, self.m = n, m
        self.max_iter = max_iter
        self.pu = np.ascontiguousarray(H, dtype=float)
        self.au = np.ascontiguousarray(A, dtype=float)
        self.au_t = np.ascontiguousarray(self.au.T)
        self.is_eq = np.ascontiguousarray(is_eq, dtype=np.int8)
        d, e = _ruiz_equilibrate(self.pu, self.au)
        self.d, self.e = d, e
        # cost normalization: flatten the objective's scale so duals stay O(1)
        p_scaled = d[:, None] * self.pu * d[None, :]
        cost_scale = float(np.abs(p_scaled).max(axis=0).mean()) if n else 1.0
        if f_typical is not None:
            cost_scale = max(cost_scale, float(np.abs(d * f_typical).max()))
        self.c = 1.0 / min(max(cost_scale, 1e-6), 1e6)
        self.p = np.ascontiguousarray(self.c * p_scaled)
        if m:
            self.a = np.ascontiguousarray(e[:, None] * self.au * d[None, :])
        else:
            self.a = np.zeros((0, n))
        self.a_t = np.ascontiguousarray(self.a.T)
        self.rho = np.where(self.is_eq == 1, ADMM_RHO * RHO_EQ_BOOST, ADMM_RHO).astype(float)
        kkt = self.p + ADMM_SIGMA * np.eye(n)
        if m:
            kkt = kkt + self.a.T @ (self.rho[:, None] * self.a)
        try:
            self.chol_l = np.ascontiguousarray(np.linalg.cholesky(kkt))
        except np.linalg.LinAlgError as exc:
            raise BadProblem("H indefinite beyond tolerance") from exc

    def solve(self, f, lower, upper, warm_x=None, warm_y=None):
        """Solve for one (f, lower, upper) instance; thread-safe."""
        n, m = self.n, self.m
        fu = np.ascontiguousarray(np.asarray(f, dtype=float))
        q = self.c * self.d * fu
        if m:
            lu = np.where(np.isfinite(lower), lower, -INF).astype(float)
            uu = np.where(np.isfinite(upper), upper, INF).astype(float)
            l = np.where(lu > -INF, self.e * lu, -INF)
            u = np.where(uu < INF, self.e * uu, INF)
        else:
            lu = uu = l = u = np.zeros(0)
        x = np.zeros(n) if warm_x is None else np.asarray(warm_x, dtype=float) / self.d
        y = np.zeros(m) if warm_y is None else np.asarray(warm_y, dtype=float) * self.c / np.where(self.e != 0, self.e, 1.0)
        x = np.ascontiguousarray(x)
        y = np.ascontiguousarray(y)
        info = np.zeros(5)
        x_pol = np.zeros(n)
        y_pol = np.zeros(m)
        _qp_core(self.p, q, self.a, self.a_t, l, u, self.is_eq, self.rho, self.chol_l,
                 self.pu, fu, self.au, self.au_t, lu, uu, self.d, self.e, self.c,
                 x, y, self.max_iter, info, x_pol, y_pol)
        status = _STATUS_BY_CODE[int(info[0])]
        if info[4] == 1.0:
            x_out, y_out = x_pol, y_pol
        else:
            x_out = self.d * x
            y_out = self.e * y / self.c
        return x_out, y_out, status, int(info[1]), float(info[2]), float(info[3])


def solve_qp(qp: QuadraticProgram, warm_start: Optional[np.ndarray] = None,
             max_iter: int = MAX_ITER,
             warm_dual: Optional[np.ndarray] = None) -> QpSolution:
    """Solve one QP to a KKT-certified solution or a definite status."""
    qp.validate()
    a, l, u, is_eq = qp.stacked()
    ws = QpWorkspace(qp.H, a, is_eq, max_iter=max_iter, f_typical=qp.f)
    if warm_dual is not None and warm_dual.shape[0] != a.shape[0]:
        warm_dual = None
    x, y, status, iters, rp, rd = ws.solve(qp.f, l, u, warm_x=warm_start,
                                           warm_y=warm_dual)
    return QpSolution(
        x=x, objective=qp.objective(x), status=status, y=y,
        iterations=iters, primal_residual=rp, stationarity_residual=rd,
    )


@dataclass
class SqpProblem:
    """Nonlinear program described by callbacks for the SQP loop.

    cost_model(x) -> (H, f): local quadratic cost model at x.
    linearize(x) -> (A_eq, b_eq, A_in, lower, upper): constraints linearized
    about x (any block may be None).
    trust_region: per-iterate step bound, scalar or per-coordinate array.
    """

    cost_model: Callable
    linearize: Callable
    trust_region: float | np.ndarray = 1.0


def solve_sqp(problem: SqpProblem, x0: np.ndarray, max_outer: int = 3) -> QpSolution:
    """Sequential QP: relinearize, solve, accept trust-region steps.

    Stops when the step norm drops below 1e-6 or max_outer is reached.
    Raises NoProgress when the first subproblem is infeasible even after
    adding elastic relaxation variables on the inequalities.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.shape[0]
    if max_outer <= 0:
        h, f = problem.cost_model(x)
        qp0 = QuadraticProgram(H=h, f=f)
        return QpSolution(x=x, objective=qp0.objective(x), status=STATUS_MAX_ITER)

    last = None
    y_prev = None
    for outer in range(max_outer):
        h, f = problem.cost_model(x)
        a_eq, b_eq, a_in, lo, up = problem.linearize(x)
        tr = np.broadcast_to(np.asarray(problem.trust_region, dtype=float), (n,))
        bounded = tr < 100.0  # huge trust regions add no information
        tr_rows = np.eye(n)[bounded]
        tr_lo = (x - tr)[bounded]
        tr_up = (x + tr)[bounded]
        if a_in is None or a_in.shape[0] == 0:
            a_in_full = tr_rows
            lo_full, up_full = tr_lo, tr_up
        else:
            a_in_full = np.vstack([a_in, tr_rows])
            lo_full = np.concatenate([lo, tr_lo])
            up_full = np.concatenate([up, tr_up])
        qp = QuadraticProgram(H=h, f=f, A_eq=a_eq, b_eq=b_eq,
                              A_in=a_in_full, lower=lo_full, upper=up_full)
        sol = solve_qp(qp, warm_start=x, warm_dual=y_prev)
        if sol.status != STATUS_OPTIMAL:
            if outer == 0:
                sol = _solve_elastic(qp, x)
                if sol.status != STATUS_OPTIMAL:
                    raise NoProgress("first SQP subproblem infeasible even with relaxation")
            else:
                break
        step = float(np.max(np.abs(sol.x - x)))
        x = sol.x
        y_prev = sol.y
        last = sol
        if step < 1e-6:
            break
    if last is None:  # pragma: no cover - defensive
        raise NoProgress("SQP made no iterations")
    return last


def _solve_elastic(qp: QuadraticProgram, x0: np.ndarray) -> QpSolution:
    """Retry with elastic slacks s >= 0 widening every inequality."""
    n = qp.n
    m = qp.A_in.shape[0] if qp.A_in is not None else 0
    if m == 0:
        return solve_qp(qp, warm_start=x0)
    w = 1e3 * max(1.0, float(np.abs(qp.H).max()))
    h = np.zeros((n + m, n + m))
    h[:n, :n] = qp.H
    h[n:, n:] = 2.0 * w * np.eye(m)
    f = np.concatenate([qp.f, np.zeros(m)])
    a_eq = b_eq = None
    if qp.A_eq is not None and qp.A_eq.shape[0]:
        a_eq = np.hstack([qp.A_eq, np.zeros((qp.A_eq.shape[0], m))])
        b_eq = qp.b_eq
    eye_m = np.eye(m)
    a_in = np.vstack([
        np.hstack([qp.A_in, -eye_m]),          # A x - s <= up
        np.hstack([qp.A_in, eye_m]),           # A x + s >= lo
        np.hstack([np.zeros((m, n)), eye_m]),  # s >= 0
    ])
    lo = np.concatenate([np.full(m, -np.inf), qp.lower, np.zeros(m)])
    up = np.concatenate([qp.upper, np.full(m, np.inf), np.full(m, np.inf)])
    inner = QuadraticProgram(H=h, f=f, A_eq=a_eq, b_eq=b_eq, A_in=a_in, lower=lo, upper=up)
    warm = np.concatenate([np.asarray(x0, dtype=float), np.zeros(m)])
    sol = solve_qp(inner, warm_start=warm)
    return QpSolution(
        x=sol.x[:n], objective=sol.objective, status=sol.status, y=sol.y,
        iterations=sol.iterations, primal_residual=sol.primal_residual,
        stationarity_residual=sol.stationarity_residual,
    )
