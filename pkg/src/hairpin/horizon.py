"""Shared assembly helpers for MPC-style QPs over a horizon.

Decision vector layout: ``z = [x_0 .. x_N, u_0 .. u_{N-1}, extras]`` with
NX=6 states and NU=2 inputs per step.  All planner and controller problems
are built in an ego-local frame where the current s_c is 0 and every other
longitudinal coordinate is a wrap-aware difference, so the lap seam never
appears inside a QP.
"""

from __future__ import annotations

import numpy as np

from .dynamics import NX, NU, IVX, IEY, AffineTIModel, AffineTVModel


class HorizonLayout:
    """Index bookkeeping for the stacked decision vector."""

    def __init__(self, n_steps: int, n_extra: int = 0):
        self.N = n_steps
        self.n_extra = n_extra
        self.nx_total = (n_steps + 1) * NX
        self.nu_total = n_steps * NU
        self.nz = self.nx_total + self.nu_total + n_extra

    def x(self, k: int) -> slice:
        return slice(k * NX, (k + 1) * NX)

    def u(self, k: int) -> slice:
        off = self.nx_total
        return slice(off + k * NU, off + (k + 1) * NU)

    def extra(self) -> slice:
        return slice(self.nx_total + self.nu_total, self.nz)

    def states_of(self, z: np.ndarray) -> np.ndarray:
        return z[: self.nx_total].reshape(self.N + 1, NX)

    def inputs_of(self, z: np.ndarray) -> np.ndarray:
        return z[self.nx_total:self.nx_total + self.nu_total].reshape(self.N, NU)


def dynamics_equalities(layout: HorizonLayout, model, x0: np.ndarray):
    """Rows for x_0 = x0 and x_{k+1} = A_k x_k + B_k u_k (+ C_k)."""
    n_rows = (layout.N + 1) * NX
    a = np.zeros((n_rows, layout.nz))
    b = np.zeros(n_rows)
    a[0:NX, layout.x(0)] = np.eye(NX)
    b[0:NX] = x0
    time_varying = isinstance(model, AffineTVModel)
    for k in range(layout.N):
        rows = slice((k + 1) * NX, (k + 2) * NX)
        if time_varying:
            ak, bk, ck = model.A[k], model.B[k], model.C[k]
        else:
            ak, bk, ck = model.A, model.B, None
        a[rows, layout.x(k + 1)] = np.eye(NX)
        a[rows, layout.x(k)] = -ak
        a[rows, layout.u(k)] = -bk
        if ck is not None:
            b[rows] = ck
    return a, b


def selector_rows(layout: HorizonLayout, state_idx: int, steps) -> np.ndarray:
    """One row per step picking a single state component."""
    rows = np.zeros((len(steps), layout.nz))
    for r, k in enumerate(steps):
        rows[r, k * NX + state_idx] = 1.0
    return rows


def input_rows(layout: HorizonLayout) -> np.ndarray:
    rows = np.zeros((layout.nu_total, layout.nz))
    rows[:, layout.nx_total:layout.nx_total + layout.nu_total] = np.eye(layout.nu_total)
    return rows


def add_tracking_cost(h, f, layout: HorizonLayout, q_diag, refs, steps):
    """Add sum_k (x_k - r_k)' Q (x_k - r_k) for the given steps."""
    q2 = 2.0 * np.asarray(q_diag, dtype=float)
    for r, k in enumerate(steps):
        sl = layout.x(k)
        idx = np.arange(sl.start, sl.stop)
        h[idx, idx] += q2
        f[sl] += -q2 * np.asarray(refs[r], dtype=float)


def add_input_cost(h, layout: HorizonLayout, r_diag):
    r2 = 2.0 * np.asarray(r_diag, dtype=float)
    for k in range(layout.N):
        sl = layout.u(k)
        idx = np.arange(sl.start, sl.stop)
        h[idx, idx] += r2


def add_rate_cost(h, layout: HorizonLayout, r1_diag, r2_diag):
    """Add state and input rate costs ||x_k - x_{k-1}||_R1, ||u_k - u_{k-1}||_R2."""
    r1 = np.asarray(r1_diag, dtype=float)
    r2 = np.asarray(r2_diag, dtype=float)
    if np.any(r1 != 0.0):
        for k in range(1, layout.N + 1):
            ia = np.arange(layout.x(k).start, layout.x(k).stop)
            ib = np.arange(layout.x(k - 1).start, layout.x(k - 1).stop)
            h[ia, ia] += 2.0 * r1
            h[ib, ib] += 2.0 * r1
            h[ia, ib] += -2.0 * r1
            h[ib, ia] += -2.0 * r1
    if np.any(r2 != 0.0):
        for k in range(1, layout.N):
            ia = np.arange(layout.u(k).start, layout.u(k).stop)
            ib = np.arange(layout.u(k - 1).start, layout.u(k - 1).stop)
            h[ia, ia] += 2.0 * r2
            h[ib, ib] += 2.0 * r2
            h[ia, ib] += -2.0 * r2
            h[ib, ia] += -2.0 * r2


def curvature_ey_limits(track, s_abs, ey_bound: float, min_denom: float = 0.55,
                        lookahead: float = 2.0):
    """Per-station lateral bounds shrunk on the inside of tight curves.

    Keeps 1 - kappa*e_y >= min_denom so planned lines never approach the
    curvature center, where the Frenet progress rate blows up and the
    effective corner radius collapses.  Each station takes the tightest
    limit within `lookahead` meters ahead, so plans cannot pre-position on
    the inside just before a curve begins.
    """
    s_abs = np.atleast_1d(np.asarray(s_abs, dtype=float))
    lo = np.full(s_abs.shape[0], -ey_bound)
    hi = np.full(s_abs.shape[0], ey_bound)
    probes = np.linspace(0.0, lookahead, 6)
    for i, s in enumerate(s_abs):
        for ds in probes:
            kappa = track.curvature_at(float(s) + float(ds))
            if kappa > 1e-9:
                hi[i] = min(hi[i], (1.0 - min_denom) / kappa)
            elif kappa < -1e-9:
                lo[i] = max(lo[i], -(1.0 - min_denom) / (-kappa))
    return lo, hi


def relax_bounds_for_state(lo: np.ndarray, hi: np.ndarray, x0_val: float,
                           rate: float, dt: float):
    """Open per-step bounds just enough that an out-of-bound current state
    has a feasible re-entry ramp; in-bound states are unaffected."""
    ks = np.arange(1, lo.shape[0] + 1)
    np.maximum(hi, x0_val - rate * dt * ks, out=hi)
    np.minimum(lo, x0_val + rate * dt * ks, out=lo)


def normalize_cost(h: np.ndarray, f: np.ndarray) -> float:
    """Scale (h, f) in place to O(1); the argmin is unchanged.

    Keeps the solver's absolute residual tolerances meaningful regardless
    of the caller's weight magnitudes.  Returns the factor so callers can
    restore reported objective values.
    """
    scale = max(float(np.abs(h).max()) / 2.0, float(np.abs(f).max()) / 100.0, 1e-8)
    h /= scale
    f /= scale
    return scale


def state_bound_rows(layout: HorizonLayout, vx_bounds, ey_bound, epsi_bound=None):
    """Bound rows on v_x, optionally e_psi, and e_y for steps 1..N.

    Returns (rows, lower, upper, ey_row_offset); the e_y rows sit last so
    corridor constraints can tighten their bounds in place.
    """
    from .dynamics import IEPSI

    steps = list(range(1, layout.N + 1))
    blocks = [selector_rows(layout, IVX, steps)]
    lo = [np.full(layout.N, vx_bounds[0])]
    up = [np.full(layout.N, vx_bounds[1])]
    if epsi_bound is not None:
        blocks.append(selector_rows(layout, IEPSI, steps))
        lo.append(np.full(layout.N, -epsi_bound))
        up.append(np.full(layout.N, epsi_bound))
    blocks.append(selector_rows(layout, IEY, steps))
    lo.append(np.full(layout.N, -ey_bound))
    up.append(np.full(layout.N, ey_bound))
    rows = np.vstack(blocks)
    ey_row0 = rows.shape[0] - layout.N
    return rows, np.concatenate(lo), np.concatenate(up), ey_row0
