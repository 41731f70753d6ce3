"""Tracking MPC with relaxed discrete-time control barrier constraints.

Follows the selected planner trajectory under the time-varying affine model
while enforcing, for every tracked opponent and horizon step,

    h(x_{k+1}) >= gamma * omega_k * h(x_k),      0 <= omega_k <= 1,

with h the squared planar gap minus the vehicle footprint.  h is quadratic
in the state, so each SQP pass linearizes it about the incumbent trajectory
(convexity makes the linearized left side an underestimate, i.e. the safe
side).  After the fixed SQP iterations the true barrier residuals are
evaluated on the open loop; extra relinearized passes run until every
residual clears -1e-6, otherwise the solve is rejected and the caller falls
back to emergency braking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import NX, NU, ISC, IEY, AffineTVModel
from .errors import NoProgress, PlannerInfeasible
from .horizon import (
    HorizonLayout, curvature_ey_limits, dynamics_equalities, input_rows,
    normalize_cost, relax_bounds_for_state, state_bound_rows,
)
from .overtake import OpponentState
from .qp import SqpProblem, solve_sqp, STATUS_OPTIMAL


@dataclass
class CbfParams:
    gamma_cbf: float = 0.4     # barrier decay rate, in [0, 1)
    p_omega: float = 500.0     # relaxation penalty weight
    horizon: int = 10

    def __post_init__(self):
        if not 0.0 <= self.gamma_cbf < 1.0:
            raise ValueError("gamma_cbf must be in [0, 1)")
        if self.p_omega <= 0.0:
            raise ValueError("p_omega must be positive")


@dataclass
class ControllerConfig:
    cbf: CbfParams = field(default_factory=CbfParams)
    q_track: tuple = (4.0, 0.1, 0.2, 3.0, 2.0, 14.0)  # stage tracking weights
    r_input: tuple = (0.05, 0.2)                     # stage input weights
    sqp_iters: int = 3
    max_extra_iters: int = 3   # relinearizations to clear barrier residuals
    trust_region: tuple = (1.0, 1.0, 3.0, 0.8, 0.4, 0.4)  # per-state step bound
    trust_region_input: tuple = (4.0, 1.0)
    obstacle_range_factor: float = 2.0  # opponents tracked within this x range
    slack_penalty: float = 1e4  # exact linear penalty on CBF row slack


def barrier_value(ego, opp: OpponentState, track_length: float) -> float:
    """(ds)^2 + (de_y)^2 - l^2 - d^2 with wrap-aware longitudinal gap."""
    ego = np.asarray(ego, dtype=float)
    half = 0.5 * track_length
    ds = (opp.s_c - ego[ISC] + half) % track_length - half
    de = opp.e_y - ego[IEY]
    return float(ds * ds + de * de - opp.length ** 2 - opp.width ** 2)


@dataclass
class ControlSolution:
    u: np.ndarray                 # first input of the horizon
    states: np.ndarray            # (N+1, 6) open loop, ego-local s
    inputs: np.ndarray            # (N, 2)
    omegas: np.ndarray            # (N,)
    h_values: np.ndarray          # (n_opp, N+1) barrier values on the open loop
    min_cbf_residual: float       # min over (opp, k) of h_{k+1} - gamma*w_k*h_k
    status: str
    sqp_passes: int = 0


def _pad_reference(reference_states, reference_inputs, n_steps):
    """Hold the last state/input so the reference covers n_steps+1 points."""
    rs = np.asarray(reference_states, dtype=float)
    ri = np.asarray(reference_inputs, dtype=float)
    while rs.shape[0] < n_steps + 1:
        rs = np.vstack([rs, rs[-1]])
    if ri.shape[0] < n_steps:
        pad = np.zeros((n_steps - ri.shape[0], NU))
        ri = np.vstack([ri, pad]) if ri.size else pad
    return rs[: n_steps + 1], ri[:n_steps]


def _barrier_local(x, opp_s, opp_e, length, width):
    ds = x[ISC] - opp_s
    de = x[IEY] - opp_e
    return ds * ds + de * de - length ** 2 - width ** 2


def solve_tracking_mpc(x_t_local, reference: "PlannedTrajectory | tuple",
                       opponents_local: Sequence[OpponentState],
                       model: AffineTVModel, config: ControllerConfig,
                       track, params, warm_start=None) -> ControlSolution:
    """Track a planner trajectory under relaxed CBF obstacle constraints.

    Everything is ego-local: x_t_local has s_c = 0, opponents carry
    wrap-aware signed gaps and propagate at constant speed, dt equal to the
    control period baked into the model.  Raises PlannerInfeasible when no
    certified solution exists.
    """
    cbf = config.cbf
    n = cbf.horizon
    dt = 0.1  # shared control discretization
    x0 = np.asarray(x_t_local, dtype=float)

    if hasattr(reference, "states"):
        ref_states, ref_inputs = reference.states, reference.inputs
    else:
        ref_states, ref_inputs = reference
    ref_states, ref_inputs = _pad_reference(ref_states, ref_inputs, n)

    # extras: n omega relaxations, then n CBF slack variables (exact linear
    # penalty keeps every subproblem feasible while omega stays in [0, 1])
    layout = HorizonLayout(n, n_extra=2 * n)
    nz = layout.nz
    omega_off = layout.extra().start
    slack_off = omega_off + n

    q2 = 2.0 * np.asarray(config.q_track, dtype=float)
    r2 = 2.0 * np.asarray(config.r_input, dtype=float)
    h_cost = np.zeros((nz, nz))
    f_cost = np.zeros(nz)
    for k in range(1, n):  # k=0 is pinned to x_t
        idx = np.arange(layout.x(k).start, layout.x(k).stop)
        h_cost[idx, idx] += q2
        f_cost[layout.x(k)] += -q2 * ref_states[k]
    for k in range(n):
        idx = np.arange(layout.u(k).start, layout.u(k).stop)
        h_cost[idx, idx] += r2
    om_idx = np.arange(omega_off, omega_off + n)
    h_cost[om_idx, om_idx] += 2.0 * cbf.p_omega
    f_cost[om_idx] += -2.0 * cbf.p_omega  # from p_w (1 - w)^2
    sl_idx = np.arange(slack_off, slack_off + n)
    f_cost[sl_idx] += config.slack_penalty
    # mild curvature keeps the slack block strictly convex (dual degeneracy
    # of a pure linear penalty slows the splitting solver badly)
    h_cost[sl_idx, sl_idx] += 0.02 * config.slack_penalty
    normalize_cost(h_cost, f_cost)

    a_dyn, b_dyn = dynamics_equalities(layout, model, x0)

    ey_bound = track.half_width - 0.5 * params.width
    sb_rows, sb_lo, sb_up, ey_row0 = state_bound_rows(layout, (0.0, params.vx_max), ey_bound)
    s_ref_abs = getattr(reference, "s_ref", 0.0)
    stations = s_ref_abs + ref_states[1:, ISC]
    ey_lo_k, ey_hi_k = curvature_ey_limits(track, stations, ey_bound)
    sb_lo[ey_row0:ey_row0 + n] = np.maximum(sb_lo[ey_row0:ey_row0 + n], ey_lo_k)
    sb_up[ey_row0:ey_row0 + n] = np.minimum(sb_up[ey_row0:ey_row0 + n], ey_hi_k)
    relax_bounds_for_state(sb_lo[ey_row0:ey_row0 + n], sb_up[ey_row0:ey_row0 + n],
                           x0[IEY], 0.5, dt)
    u_rows = input_rows(layout)
    u_lo = np.tile(params.input_lower, n)
    u_up = np.tile(params.input_upper, n)
    om_rows = np.zeros((2 * n, nz))
    om_rows[:, omega_off:] = np.eye(2 * n)
    base_rows = np.vstack([sb_rows, u_rows, om_rows])
    base_lo = np.concatenate([sb_lo, u_lo, np.zeros(2 * n)])
    base_up = np.concatenate([sb_up, u_up, np.ones(n), np.full(n, np.inf)])

    opps = list(opponents_local)
    # opponent positions per horizon step (constant speed)
    opp_s = np.array([[o.s_c + o.v_x * dt * k for k in range(n + 1)] for o in opps])

    def cost_model(z):
        return h_cost, f_cost

    def linearize(z):
        if not opps:
            return a_dyn, b_dyn, base_rows, base_lo, base_up
        states = layout.states_of(z)
        rows = []
        lows = []
        for io, o in enumerate(opps):
            for k in range(n):
                h_next_hat = _barrier_local(states[k + 1], opp_s[io, k + 1], o.e_y,
                                            o.length, o.width)
                h_k_hat = _barrier_local(states[k], opp_s[io, k], o.e_y,
                                         o.length, o.width)
                # gradient of h wrt x_{k+1} at the incumbent
                gs = 2.0 * (states[k + 1, ISC] - opp_s[io, k + 1])
                ge = 2.0 * (states[k + 1, IEY] - o.e_y)
                if abs(gs) + abs(ge) < 1e-6:
                    # incumbent sits on the barrier's stationary point; give
                    # the linearization a lateral escape direction
                    side = 1.0 if (ref_states[k + 1, IEY] - o.e_y) >= 0.0 else -1.0
                    ge = 2e-3 * side
                row = np.zeros(nz)
                row[layout.x(k + 1).start + ISC] = gs
                row[layout.x(k + 1).start + IEY] = ge
                # omega enters linearly: h_lin(x_{k+1}) - gamma*h_k_hat*w_k >= const
                row[omega_off + k] = -cbf.gamma_cbf * h_k_hat
                row[slack_off + k] = 1.0
                const = h_next_hat - gs * states[k + 1, ISC] - ge * states[k + 1, IEY]
                rows.append(row)
                lows.append(-const)
        a_cbf = np.array(rows)
        lo_cbf = np.array(lows)
        up_cbf = np.full(len(rows), np.inf)
        return (
            a_dyn, b_dyn,
            np.vstack([base_rows, a_cbf]),
            np.concatenate([base_lo, lo_cbf]),
            np.concatenate([base_up, up_cbf]),
        )

    tr = np.concatenate([
        np.full(NX, 1e3),  # x_0 is pinned by the initial-state equality
        np.tile(np.asarray(config.trust_region, dtype=float), n),
        np.tile(np.asarray(config.trust_region_input, dtype=float), n),
        np.full(2 * n, 1e3),  # omega and slack have hard bounds already
    ])
    problem = SqpProblem(cost_model=cost_model, linearize=linearize, trust_region=tr)

    if warm_start is not None:
        z0 = np.asarray(warm_start, dtype=float).copy()
    else:
        z0 = np.zeros(nz)
        z0[: layout.nx_total] = ref_states.reshape(-1)
        z0[layout.x(0)] = x0
        z0[layout.nx_total:layout.nx_total + layout.nu_total] = ref_inputs.reshape(-1)
        z0[om_idx] = 1.0

    try:
        sol = solve_sqp(problem, z0, max_outer=config.sqp_iters)
    except NoProgress as exc:
        raise PlannerInfeasible(f"tracking MPC subproblem infeasible: {exc}") from exc
    passes = config.sqp_iters

    def residuals(z):
        states = layout.states_of(z)
        omegas = z[om_idx]
        h_vals = np.zeros((max(len(opps), 1), n + 1))
        worst = np.inf
        for io, o in enumerate(opps):
            for k in range(n + 1):
                h_vals[io, k] = _barrier_local(states[k], opp_s[io, k], o.e_y,
                                               o.length, o.width)
            for k in range(n):
                r = h_vals[io, k + 1] - cbf.gamma_cbf * omegas[k] * h_vals[io, k]
                worst = min(worst, r)
        return h_vals, worst

    h_vals, worst = residuals(sol.x)
    extra = 0
    while opps and worst < -1e-6 and extra < config.max_extra_iters:
        try:
            sol = solve_sqp(problem, sol.x, max_outer=1)
        except NoProgress as exc:
            raise PlannerInfeasible(f"tracking MPC relinearization failed: {exc}") from exc
        h_vals, worst = residuals(sol.x)
        extra += 1
        passes += 1

    omegas = sol.x[om_idx]
    om_ok = np.all(omegas >= -1e-8) and np.all(omegas <= 1.0 + 1e-8)
    if sol.status != STATUS_OPTIMAL or (opps and worst < -1e-6) or not om_ok:
        raise PlannerInfeasible(
            f"tracking MPC not certified (status {sol.status}, min residual {worst:.2e})"
        )

    states = layout.states_of(sol.x).copy()
    inputs = layout.inputs_of(sol.x).copy()
    return ControlSolution(
        u=inputs[0].copy(),
        states=states,
        inputs=inputs,
        omegas=sol.x[om_idx].copy(),
        h_values=h_vals,
        min_cbf_residual=float(worst) if opps else np.inf,
        status=sol.status,
        sqp_passes=passes,
    )


def emergency_input(params) -> np.ndarray:
    """Max braking, zero steering; applied when the tracking MPC fails."""
    return np.array([params.a_min, 0.0])
