"""Homotopic overtaking planner.

When opponents are inside the overtaking range, the drivable band splits
into n+1 corridors (above the topmost car, below the lowest, and between
each adjacent pair).  Each corridor gets a cubic Bezier reference bending
through its lateral midpoint and its own trajectory QP; all QPs share one
Hessian, constraint matrix and KKT factorization (only linear terms and
bounds differ), so the candidates can be solved on worker threads and the
per-candidate marginal cost stays flat as opponents are added.  The best
candidate minimizes a progress-plus-clearance score with a penalty for
switching corridors between steps.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import NX, NU, IVX, ISC, IEY, IEPSI, AffineTIModel
from .errors import NoCandidate, NoCorridor, PlannerInfeasible
from .horizon import (
    HorizonLayout, add_input_cost, add_rate_cost, add_tracking_cost,
    curvature_ey_limits, dynamics_equalities, input_rows, normalize_cost,
    relax_bounds_for_state, state_bound_rows,
)
from .lmpc import PlannedTrajectory
from .qp import QuadraticProgram, QpWorkspace, STATUS_OPTIMAL


@dataclass
class SelectionParams:
    """Knobs of the range test (overtake trigger) and candidate selection."""

    epsilon: float = 1.0        # safety-margin factor on vehicle length
    gamma_pred: float = 2.0     # prediction factor on closing speed [s]
    k_s: float = 50.0           # progress weight in the selection score
    switch_penalty: float = 10.0  # cost of changing corridor between steps
    margin: float = 0.45        # lateral clearance [m]; keeps passes outside
                                # the barrier radius sqrt(l^2 + d^2) ~ 0.45
    sum_all_opponents: bool = True  # score clearance against all cars in range


@dataclass
class OvertakeConfig:
    horizon: int = 12
    dt: float = 0.1
    selection: SelectionParams = field(default_factory=SelectionParams)
    k_d: float = 50.0                      # terminal progress reward
    q1_ey: float = 8.0                     # Bezier reference tracking
    q2: tuple = (2.0, 0.0, 0.0, 0.0, 0.0, 2.0)  # time-optimal trajectory tracking
    rate_state: tuple = (0.05, 0.05, 0.02, 0.5, 0.0, 0.5)
    rate_input: tuple = (0.5, 2.0)
    input_reg: tuple = (0.01, 0.05)
    lookahead_lengths: float = 2.0         # extra Bezier lookahead, in car lengths
    speed_headroom: float = 0.5            # v_x cap above the lap reference
    epsi_bound: float = 0.6
    ey_margin: float = 0.1                 # planner margin inside the hard bound


@dataclass(frozen=True)
class OpponentState:
    """Surrounding vehicle snapshot (constant speed, fixed lateral offset)."""

    s_c: float
    e_y: float
    v_x: float
    length: float = 0.4
    width: float = 0.2


def in_overtake_range(ego, opp: OpponentState, p: SelectionParams,
                      track_length: float) -> bool:
    """Range-of-overtaking test on the wrap-aware signed gap."""
    ego = np.asarray(ego, dtype=float)
    half = 0.5 * track_length
    ds = (opp.s_c - ego[ISC] + half) % track_length - half
    ub = p.epsilon * opp.length + p.gamma_pred * abs(ego[IVX] - opp.v_x)
    return -p.epsilon * opp.length <= ds <= ub


@dataclass(frozen=True)
class Corridor:
    """One homotopy class: which opponents stay above/below the ego.

    Bounds constrain the ego center's e_y; entities record the bounding
    opponents (indices into the planner's opponent list) or the track edge.
    """

    index: int                 # 1 = above the topmost vehicle
    lo: float                  # static lower bound on e_y
    hi: float                  # static upper bound on e_y
    above: tuple = ()          # opponents the ego passes below
    below: tuple = ()          # opponents the ego passes above

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)


def enumerate_corridors(ego, opponents: Sequence[OpponentState], track,
                        margin: float, ego_width: float = 0.2):
    """The n+1 lateral corridors around n in-range opponents.

    Center bounds already subtract half a car width plus the clearance
    margin from each bounding vehicle, so a corridor narrower than a car
    plus two margins collapses to an empty interval and is dropped.
    Raises NoCorridor when nothing survives.
    """
    hw = track.half_width
    track_bound = hw - 0.5 * ego_width
    if not opponents:
        return [Corridor(index=1, lo=-track_bound, hi=track_bound)]
    order = sorted(range(len(opponents)), key=lambda i: -opponents[i].e_y)
    n = len(order)
    corridors = []
    for j in range(1, n + 2):
        above = tuple(order[: j - 1])
        below = tuple(order[j - 1:])
        hi = track_bound
        for i in above:
            o = opponents[i]
            hi = min(hi, o.e_y - (0.5 * o.width + margin))
        lo = -track_bound
        for i in below:
            o = opponents[i]
            lo = max(lo, o.e_y + (0.5 * o.width + margin))
        if hi - lo < 0.02:
            continue
        corridors.append(Corridor(index=j, lo=lo, hi=hi, above=above, below=below))
    if not corridors:
        raise NoCorridor(f"all {n + 1} corridors are infeasible")
    return corridors


@dataclass(frozen=True)
class BezierReference:
    """Cubic Bezier in the (s, e_y) plane, ego-local s.

    Control s-stations are equally spaced, so s(tau) is linear and the
    lateral value at a given s comes from one de Casteljau evaluation.
    """

    points: np.ndarray  # (4, 2) control points, columns (s, e_y)

    def lateral_at(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        s0 = self.points[0, 0]
        span = self.points[3, 0] - s0
        tau = np.clip((s - s0) / max(span, 1e-9), 0.0, 1.0)
        e = self.points[:, 1]
        out = np.empty_like(tau)
        for i, t in enumerate(tau):
            # de Casteljau on the lateral coordinates
            a = e.copy()
            for level in range(3):
                a = (1 - t) * a[:-1] + t * a[1:]
            out[i] = a[0]
        return out

    def point_at(self, tau: float) -> np.ndarray:
        pts = self.points.copy()
        for level in range(3):
            pts = (1 - tau) * pts[:-1] + tau * pts[1:]
        return pts[0]


def build_bezier_reference(corridor: Corridor, ego, lap_ref,
                           config: OvertakeConfig,
                           vehicle_length: float = 0.4) -> BezierReference:
    """Control points: ego position, two midpoints at the corridor's lateral
    center (1/3 and 2/3 of the span), endpoint on the time-optimal
    trajectory one horizon ahead."""
    ego = np.asarray(ego, dtype=float)
    lookahead = max(
        ego[IVX] * config.horizon * config.dt + config.lookahead_lengths * vehicle_length,
        4.0 * vehicle_length,
    )
    e_end = float(lap_ref.state_local_at(lookahead)[IEY]) if lap_ref is not None else corridor.midpoint
    mid = corridor.midpoint
    pts = np.array([
        [0.0, ego[IEY]],
        [lookahead / 3.0, mid],
        [2.0 * lookahead / 3.0, mid],
        [lookahead, e_end],
    ])
    return BezierReference(points=pts)


class CorridorProblem:
    """Shared QP template for one planning step; per-corridor solves vary
    only the linear term and the e_y bound rows."""

    def __init__(self, model: AffineTIModel, x_t_local, opponents_local,
                 lap_ref, track, params, config: OvertakeConfig,
                 s_ref_abs: float = 0.0):
        self.s_ref_abs = s_ref_abs
        self.config = config
        self.track = track
        self.params = params
        self.model = model
        self.opponents = opponents_local
        self.lap_ref = lap_ref
        n = config.horizon
        self.layout = HorizonLayout(n)
        layout = self.layout
        nz = layout.nz

        self.x0 = np.asarray(x_t_local, dtype=float)
        # constant-speed progress guesses s_k = v * k * dt (ego-local frame)
        self.s_guess = self.x0[IVX] * config.dt * np.arange(n + 1)

        h = np.zeros((nz, nz))
        f = np.zeros(nz)
        add_rate_cost(h, layout, config.rate_state, config.rate_input)
        add_input_cost(h, layout, config.input_reg)
        steps = list(range(1, n))
        q1 = np.zeros(NX)
        q1[IEY] = config.q1_ey
        # Bezier tracking: quadratic part shared, linear parts per corridor
        for k in steps:
            idx = np.arange(layout.x(k).start, layout.x(k).stop)
            h[idx, idx] += 2.0 * q1
        # time-optimal trajectory tracking is identical for every corridor
        if lap_ref is not None:
            refs = [lap_ref.state_local_at(self.s_guess[k]) for k in steps]
            add_tracking_cost(h, f, layout, config.q2, refs, steps)
        f[layout.x(n).start + ISC] -= config.k_d
        self.cost_scale = normalize_cost(h, f)
        self.h = h
        self.f_base = f
        self.q1 = q1 / self.cost_scale
        self.steps = steps

        a_eq, b_eq = dynamics_equalities(layout, model, self.x0)
        ey_bound = track.half_width - 0.5 * params.width - config.ey_margin
        sb_rows, sb_lo, sb_up, ey_row0 = state_bound_rows(
            layout, (0.0, params.vx_max), ey_bound, epsi_bound=config.epsi_bound)
        if lap_ref is not None:
            v_t = self.x0[IVX]
            ks = np.arange(1, n + 1)
            ref_v = np.array([lap_ref.state_local_at(s)[IVX] for s in self.s_guess[1:]])
            caps = ref_v + config.speed_headroom
            brake_floor = v_t + ks * config.dt * params.a_min + 0.05
            caps = np.minimum(np.maximum(np.maximum(caps, brake_floor), 0.6),
                              params.vx_max)
            sb_up[:n] = caps
        ey_lo_k, ey_hi_k = curvature_ey_limits(track, self.s_ref_abs + self.s_guess[1:],
                                                ey_bound)
        sb_lo[ey_row0:ey_row0 + n] = np.maximum(sb_lo[ey_row0:ey_row0 + n], ey_lo_k)
        sb_up[ey_row0:ey_row0 + n] = np.minimum(sb_up[ey_row0:ey_row0 + n], ey_hi_k)
        relax_bounds_for_state(sb_lo[ey_row0:ey_row0 + n], sb_up[ey_row0:ey_row0 + n],
                               self.x0[IEY], 0.5, config.dt)
        relax_bounds_for_state(sb_lo[n:2 * n], sb_up[n:2 * n], self.x0[IEPSI],
                               1.2, config.dt)
        u_rows = input_rows(layout)
        u_lo = np.tile(params.input_lower, n)
        u_up = np.tile(params.input_upper, n)

        a_all = np.vstack([a_eq, sb_rows, u_rows])
        self.l_base = np.concatenate([b_eq, sb_lo, u_lo])
        self.u_base = np.concatenate([b_eq, sb_up, u_up])
        is_eq = np.zeros(a_all.shape[0], dtype=np.int8)
        is_eq[: a_eq.shape[0]] = 1
        self.ey_row0 = a_eq.shape[0] + ey_row0
        # an uncertified corridor is excluded either way, so cap the budget
        self.workspace = QpWorkspace(h, a_all, is_eq, f_typical=self.f_base,
                                     max_iter=600)
        self.ey_bound = ey_bound

    def overlap_steps(self, opp: OpponentState):
        """Steps where the ego's progress guess overlaps the opponent."""
        n = self.config.horizon
        dt = self.config.dt
        ks = np.arange(1, n + 1)
        opp_s = opp.s_c + opp.v_x * dt * ks
        gap = np.abs(self.s_guess[1:] - opp_s)
        return ks[gap < opp.length + self.config.selection.margin]

    def corridor_bounds(self, corridor: Corridor):
        """Per-step e_y bounds: track limits, tightened at overlap steps."""
        n = self.config.horizon
        lo = np.full(n, -self.ey_bound)
        hi = np.full(n, self.ey_bound)
        off = self.config.selection.margin
        for i in corridor.above:
            o = self.opponents[i]
            for k in self.overlap_steps(o):
                hi[k - 1] = min(hi[k - 1], o.e_y - (0.5 * o.width + off))
        for i in corridor.below:
            o = self.opponents[i]
            for k in self.overlap_steps(o):
                lo[k - 1] = max(lo[k - 1], o.e_y + (0.5 * o.width + off))
        return lo, hi

    def solve_corridor(self, corridor: Corridor, ref: BezierReference,
                       warm_start=None, s_ref: float = 0.0) -> PlannedTrajectory:
        """One candidate trajectory; raises PlannerInfeasible when the QP has
        no solution inside the corridor."""
        layout = self.layout
        f = self.f_base.copy()
        e_ref = ref.lateral_at(self.s_guess[self.steps])
        for e_k, k in zip(e_ref, self.steps):
            f[layout.x(k).start + IEY] += -2.0 * self.q1[IEY] * e_k
        lo_k, hi_k = self.corridor_bounds(corridor)
        # cheap reachability screen: the lateral box must be attainable at
        # a plausible slew rate, else skip the doomed solve
        ey0 = self.x0[IEY]
        for k in range(self.config.horizon):
            gap = max(lo_k[k] - ey0, ey0 - hi_k[k], 0.0)
            if gap > 0.85 * self.config.dt * (k + 1) + 0.02:
                raise PlannerInfeasible(
                    f"corridor {corridor.index} lateral box unreachable at step {k + 1}")
        l = self.l_base.copy()
        u = self.u_base.copy()
        rows = slice(self.ey_row0, self.ey_row0 + self.config.horizon)
        l[rows] = np.maximum(l[rows], lo_k)
        u[rows] = np.minimum(u[rows], hi_k)
        x_sol, _, status, *_ = self.workspace.solve(f, l, u, warm_x=warm_start)
        if status != STATUS_OPTIMAL:
            raise PlannerInfeasible(f"corridor {corridor.index} QP status {status}")
        return PlannedTrajectory(
            states=layout.states_of(x_sol).copy(),
            inputs=layout.inputs_of(x_sol).copy(),
            source="overtake",
            cost=self.cost_scale * float(0.5 * x_sol @ self.h @ x_sol + f @ x_sol),
            s_ref=s_ref,
            corridor_index=corridor.index,
        )


def optimize_corridor_trajectory(corridor: Corridor, ref: BezierReference,
                                 lap_ref, x_t_local, opponents_local,
                                 model: AffineTIModel, track, params,
                                 config: OvertakeConfig,
                                 warm_start=None, s_ref: float = 0.0) -> PlannedTrajectory:
    """Single-corridor entry point (one shared template, one solve)."""
    prob = CorridorProblem(model, x_t_local, opponents_local, lap_ref,
                           track, params, config, s_ref_abs=s_ref)
    return prob.solve_corridor(corridor, ref, warm_start=warm_start, s_ref=s_ref)


def selection_score(traj: PlannedTrajectory, opponents_local, p: SelectionParams,
                    dt: float, prev_index: Optional[int]) -> float:
    """Eq-style score: big progress, big clearance, sticky corridor choice."""
    states = traj.states
    n = states.shape[0] - 1
    score = -p.k_s * (states[n, ISC] - states[0, ISC])
    opps = opponents_local
    if not p.sum_all_opponents and opps:
        gaps = [abs(o.s_c) for o in opps]
        opps = [opps[int(np.argmin(gaps))]]
    for o in opps:
        ks = np.arange(1, n + 1)
        ds = states[1:, ISC] - (o.s_c + o.v_x * dt * ks)
        de = states[1:, IEY] - o.e_y
        score -= float(np.sum(ds ** 2 + de ** 2 - o.length ** 2 - o.width ** 2))
    if prev_index is not None and traj.corridor_index != prev_index:
        score += p.switch_penalty
    return score


def select_best(candidates, prev_index, opponents_local, p: SelectionParams,
                dt: float) -> PlannedTrajectory:
    """Minimum-score candidate; ties keep the previous corridor, then the
    lowest index."""
    if not candidates:
        raise NoCandidate("no feasible corridor candidates")
    scored = [
        (selection_score(traj, opponents_local, p, dt, prev_index), traj)
        for traj in candidates
    ]
    best_score = min(s for s, _ in scored)
    tied = [t for s, t in scored if s <= best_score + 1e-12]
    if prev_index is not None:
        for t in tied:
            if t.corridor_index == prev_index:
                return t
    return min(tied, key=lambda t: t.corridor_index)


def plan_overtake(x_t_local, opponents_local, model, lap_ref, track, params,
                  config: OvertakeConfig, prev_index=None, warm_starts=None,
                  executor: Optional[ThreadPoolExecutor] = None,
                  s_ref: float = 0.0):
    """Full overtake planning step: corridors, references, parallel solves,
    selection.  Returns (trajectory, debug dict)."""
    corridors = enumerate_corridors(
        np.asarray(x_t_local, dtype=float), opponents_local, track,
        config.selection.margin, ego_width=params.width,
    )
    prob = CorridorProblem(model, x_t_local, opponents_local, lap_ref,
                           track, params, config, s_ref_abs=s_ref)
    refs = [
        build_bezier_reference(c, x_t_local, lap_ref, config, params.length)
        for c in corridors
    ]
    warm_starts = warm_starts or {}

    def run(i):
        c = corridors[i]
        try:
            return prob.solve_corridor(c, refs[i], warm_start=warm_starts.get(c.index),
                                       s_ref=s_ref)
        except PlannerInfeasible:
            return None

    if executor is not None and len(corridors) > 1:
        results = list(executor.map(run, range(len(corridors))))
    else:
        results = [run(i) for i in range(len(corridors))]

    candidates = [r for r in results if r is not None]
    debug = {
        "corridors": [
            {"index": c.index, "lo": c.lo, "hi": c.hi,
             "control_points": refs[i].points.tolist(),
             "status": "optimal" if results[i] is not None else "infeasible",
             "score": None}
            for i, c in enumerate(corridors)
        ],
        "selected": None,
    }
    if not candidates:
        raise NoCandidate("every corridor QP was infeasible")
    for i, c in enumerate(corridors):
        if results[i] is not None:
            debug["corridors"][i]["score"] = selection_score(
                results[i], opponents_local, config.selection, config.dt, prev_index)
    best = select_best(candidates, prev_index, opponents_local,
                       config.selection, config.dt)
    debug["selected"] = best.corridor_index
    return best, debug
