"""Learning-based MPC trajectory planner.

Stores closed-loop laps with per-point cost-to-go (steps remaining to the
finish line), builds a convex-hull terminal set from the most recent k laps,
and solves a minimum-time MPC whose terminal cost is the convex combination
of stored costs-to-go.  Used whenever no opponent is inside overtaking
range.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import NX, ISC, IEY, IEPSI, IVX
from .errors import IncompleteLap, InsufficientData, PlannerInfeasible
from .horizon import (
    HorizonLayout, add_input_cost, add_rate_cost, add_tracking_cost,
    curvature_ey_limits, dynamics_equalities, input_rows, normalize_cost,
    relax_bounds_for_state, state_bound_rows,
)
from .qp import QuadraticProgram, QpWorkspace, STATUS_OPTIMAL


@dataclass
class LmpcConfig:
    horizon: int = 12
    k_laps: int = 2              # safe-set ring size
    neighbors_per_lap: int = 8
    terminal_weight: float = 1.0  # weight on sum(lambda_i * cost_to_go_i)
    progress_weight: float = 0.5  # reward per meter of terminal progress
    speed_headroom: float = 0.2  # allowed v_x above the fastest stored neighbor
    vx_learn_cap: float = 3.0    # model-validity ceiling for learned speed
    offline_slowdown: float = 1.2  # speed shed per meter off the stored line
    epsi_bound: float = 0.5
    ey_margin: float = 0.22     # planner margin inside the hard lateral bound
    hull_slack_weight: float = 3000.0  # soft terminal-hull penalty (rarely active)
    rate_state: tuple = (0.05, 0.05, 0.02, 0.1, 0.0, 0.1)
    rate_input: tuple = (0.5, 3.0)
    input_reg: tuple = (0.01, 0.1)
    ref_weights: tuple = (0.1, 0.0, 0.0, 0.3, 0.0, 1.2)  # soft pull to the best lap
    neighbor_weights: tuple = (1.0, 1.0)  # distance weights on (s_c, e_y)


@dataclass(frozen=True)
class SafeSetLap:
    """One recorded lap: time-ordered states, inputs, and cost-to-go."""

    states: np.ndarray       # (T+1, 6)
    inputs: np.ndarray       # (T, 2)
    cost_to_go: np.ndarray   # (T+1,) ints, strictly decreasing to 0

    def __post_init__(self):
        t = self.inputs.shape[0]
        if self.states.shape[0] != t + 1 or self.cost_to_go.shape[0] != t + 1:
            raise ValueError("lap arrays have inconsistent lengths")
        if self.cost_to_go[-1] != 0 or np.any(np.diff(self.cost_to_go) != -1):
            raise ValueError("cost_to_go must decrease by 1 per step and end at 0")

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]


class SafeSet:
    """Ring buffer of the most recent k laps.

    Each lap may carry an extension: the opening steps of the lap that
    followed it, with cost-to-go continuing below zero.  Near the finish
    line the terminal set then contains "keep racing into the next lap"
    states with real driven dynamics instead of a dead end.
    """

    def __init__(self, k_laps: int = 2):
        self.k_laps = k_laps
        self.laps: deque = deque(maxlen=k_laps)
        self.extensions: deque = deque(maxlen=k_laps)

    def __len__(self) -> int:
        return len(self.laps)

    def add(self, lap: SafeSetLap, extension=None):
        self.laps.append(lap)
        self.extensions.append(extension)

    def extend_lap(self, lap: SafeSetLap, successor_states: np.ndarray,
                   n_points: int = 20):
        """Attach the successor lap's opening states to a stored lap."""
        for i, stored in enumerate(self.laps):
            if stored is lap:
                ext_states = np.asarray(successor_states, dtype=float)[1:n_points + 1]
                ext_ctg = -np.arange(1, ext_states.shape[0] + 1)
                self.extensions[i] = (ext_states, ext_ctg)
                return
        raise ValueError("lap not present in the safe set")


def record_lap(safe_set: SafeSet, closed_loop_states, closed_loop_inputs,
               track_length: float) -> SafeSetLap:
    """Turn one closed-loop lap into a SafeSetLap and append it.

    The trajectory must cross the finish line (s_c wraps) exactly once.
    """
    states = np.asarray(closed_loop_states, dtype=float)
    inputs = np.asarray(closed_loop_inputs, dtype=float)
    s = states[:, ISC]
    wraps = int(np.sum(np.diff(s) < -0.5 * track_length))
    if wraps == 0:
        raise IncompleteLap("trajectory never crosses the finish line")
    if wraps > 1:
        raise IncompleteLap(f"trajectory crosses the finish line {wraps} times")
    t = inputs.shape[0]
    lap = SafeSetLap(
        states=states,
        inputs=inputs,
        cost_to_go=np.arange(t, -1, -1),
    )
    safe_set.add(lap)
    return lap


def select_neighbors(safe_set: SafeSet, x, k: int, track_length: float,
                     weights=(1.0, 1.0), ego_s=None):
    """K nearest stored states per lap by weighted (s_c, e_y) distance.

    s_c is compared modulo the lap length.  Returns a list of
    (state, cost_to_go, lap_steps, is_extension) tuples, nearest first
    within each lap.  A lap's final point is skipped: its wrapped position
    aliases the lap start while carrying end-of-lap cost.  Extension points
    (successor-lap continuations with negative cost-to-go) only compete
    when they lie beyond the ego's upcoming finish line, which is where
    their clock is meaningful.
    """
    if len(safe_set) == 0:
        raise InsufficientData("safe set is empty")
    x = np.asarray(x, dtype=float)
    if ego_s is None:
        ego_s = float(x[ISC])
    w_s, w_e = weights
    half = 0.5 * track_length
    out = []
    for lap, ext in zip(safe_set.laps, safe_set.extensions):
        n_pts = lap.states.shape[0] - 1
        if n_pts < k:
            raise InsufficientData(f"lap has {n_pts} usable points, need {k}")
        pool_states = lap.states[:n_pts]
        pool_ctg = lap.cost_to_go[:n_pts]
        pool_ext = np.zeros(n_pts, dtype=bool)
        if ext is not None:
            ext_states, ext_ctg = ext
            loc = (ext_states[:, ISC] - ego_s + half) % track_length - half
            beyond = (ego_s + loc) >= track_length
            if np.any(beyond):
                pool_states = np.vstack([pool_states, ext_states[beyond]])
                pool_ctg = np.concatenate([pool_ctg, ext_ctg[beyond]])
                pool_ext = np.concatenate([pool_ext, np.ones(int(beyond.sum()), dtype=bool)])
        ds = (pool_states[:, ISC] - x[ISC] + half) % track_length - half
        de = pool_states[:, IEY] - x[IEY]
        d2 = (w_s * ds) ** 2 + (w_e * de) ** 2
        order = np.argsort(d2, kind="stable")[:k]
        for i in order:
            out.append((pool_states[i], int(pool_ctg[i]), lap.n_steps, bool(pool_ext[i])))
    return out


@dataclass
class PlannedTrajectory:
    """Open-loop plan in the ego-local frame: states[0, s_c] == 0.

    s_ref is the absolute (wrapped) s_c the local frame is anchored at;
    absolute_states() converts back for logging and rendering.
    """

    states: np.ndarray   # (N+1, 6), ego-local s_c
    inputs: np.ndarray   # (N, 2)
    source: str          # "lmpc" or "overtake"
    cost: float
    s_ref: float = 0.0
    lambdas: Optional[np.ndarray] = field(default=None, repr=False)
    corridor_index: Optional[int] = None

    def absolute_states(self, track_length: float) -> np.ndarray:
        out = self.states.copy()
        out[:, ISC] = (self.states[:, ISC] + self.s_ref) % track_length
        return out


class LapReference:
    """Interpolating view of one stored lap, queried by arclength.

    The lap's s grid is unwrapped to a strictly increasing axis and tiled
    one lap to each side, so queries near the seam interpolate cleanly.
    """

    def __init__(self, lap: SafeSetLap, track_length: float):
        self.track_length = track_length
        s = lap.states[:, ISC]
        ds = np.diff(s)
        ds = np.where(ds < -0.5 * track_length, ds + track_length, ds)
        s_unwrapped = np.concatenate([[s[0]], s[0] + np.cumsum(ds)])
        self._grid = np.concatenate([
            s_unwrapped - track_length, s_unwrapped, s_unwrapped + track_length,
        ])
        self._vals = np.vstack([lap.states] * 3)
        self._s0 = s_unwrapped[0]

    def state_at_abs(self, s_abs: float) -> np.ndarray:
        """Interpolated lap state at an absolute arclength (wrap-aware)."""
        span = self.track_length
        q = self._s0 + ((s_abs - self._s0) % span)
        out = np.empty(NX)
        for j in range(NX):
            out[j] = np.interp(q, self._grid, self._vals[:, j])
        out[ISC] = s_abs % span
        return out

    def progress_over(self, s_abs: float, n_steps: int) -> float:
        """Distance the stored lap covers in n_steps starting at s_abs."""
        span = self.track_length
        q = self._s0 + ((s_abs - self._s0) % span)
        n_pts = self._vals.shape[0] // 3
        idx = np.interp(q, self._grid, np.arange(self._grid.shape[0], dtype=float))
        j0 = idx
        j1 = min(idx + n_steps, self._grid.shape[0] - 1)
        s0 = np.interp(j0, np.arange(self._grid.shape[0]), self._grid)
        s1 = np.interp(j1, np.arange(self._grid.shape[0]), self._grid)
        del n_pts
        return float(s1 - s0)


def terminal_anchor_for(lap_ref: LapReference, x_t, n_steps: int, dt: float,
                        a_max: float) -> np.ndarray:
    """Terminal-set anchor: where the best lap gets in n_steps, clamped to
    what the ego can reach by accelerating flat out."""
    x_t = np.asarray(x_t, dtype=float)
    horizon_t = n_steps * dt
    best = lap_ref.progress_over(x_t[ISC], n_steps)
    reach = x_t[IVX] * horizon_t + 0.45 * a_max * horizon_t ** 2
    dist = max(min(best, reach), 0.3)
    return lap_ref.state_at_abs(x_t[ISC] + dist)


class LocalLapView:
    """Lap reference re-expressed in an ego-local frame (s_t maps to 0)."""

    def __init__(self, ref: LapReference, s_t: float):
        self.ref = ref
        self.s_t = s_t

    def state_local_at(self, ds: float) -> np.ndarray:
        out = self.ref.state_at_abs(self.s_t + ds)
        out[ISC] = ds
        return out


def solve_lmpc(x_t, safe_set: SafeSet, model, *, track, params,
               config: LmpcConfig, terminal_anchor=None,
               lap_view=None, warm_start=None) -> PlannedTrajectory:
    """Minimum-time MPC over the safe set's convex-hull terminal constraint.

    The QP runs in an ego-local frame (current s_c mapped to 0).  Terminal
    multipliers lambda are simplex-constrained; the terminal cost is the
    convex combination of stored costs-to-go, with laps already past the
    finish line credited one full lap.  lap_view, when given, supplies the
    fastest stored lap: its speed caps the plan (plus headroom and a
    braking-feasible ramp) and its line softly anchors the stage cost, so
    the planner never outruns its data.
    """
    x_t = np.asarray(x_t, dtype=float)
    s_t = x_t[ISC]
    length = track.length
    n = config.horizon

    anchor = x_t if terminal_anchor is None else np.asarray(terminal_anchor, dtype=float)
    neighbors = select_neighbors(
        safe_set, anchor, config.neighbors_per_lap, length,
        weights=config.neighbor_weights, ego_s=s_t,
    )
    n_lam = len(neighbors)

    # localize: ego at s = 0, neighbors by wrap-aware difference
    half = 0.5 * length
    nb_states = np.array([nb[0] for nb in neighbors], dtype=float)
    nb_local = nb_states.copy()
    nb_local[:, ISC] = (nb_states[:, ISC] - s_t + half) % length - half
    ctg = np.array([nb[1] for nb in neighbors], dtype=float)
    lap_steps = np.array([nb[2] for nb in neighbors], dtype=float)
    is_ext = np.array([nb[3] for nb in neighbors], dtype=bool)
    # points past the ego's upcoming finish get one lap of credit;
    # extension points already carry their negative continued clock
    crossed = (s_t + nb_local[:, ISC]) >= length
    ctg_eff = np.where(is_ext, ctg, ctg - crossed * lap_steps)

    x0_local = x_t.copy()
    x0_local[ISC] = 0.0

    # extras: lambda multipliers plus a soft-hull slack keeping the terminal
    # constraint feasible from disturbed states
    layout = HorizonLayout(n, n_extra=n_lam + NX)
    nz = layout.nz
    lam_idx = np.arange(layout.extra().start, layout.extra().start + n_lam)
    slack_idx = np.arange(layout.extra().start + n_lam, nz)
    h = np.zeros((nz, nz))
    f = np.zeros(nz)

    add_rate_cost(h, layout, config.rate_state, config.rate_input)
    add_input_cost(h, layout, config.input_reg)
    # tiny curvature on lambda keeps the QP strictly convex in every direction
    h[lam_idx, lam_idx] += 1e-6
    h[slack_idx, slack_idx] += 2.0 * config.hull_slack_weight
    f[layout.x(n).start + ISC] -= config.progress_weight
    f[lam_idx] += config.terminal_weight * ctg_eff

    v_t = x_t[IVX]
    dt = 0.1
    ks = np.arange(1, n + 1)
    s_guess = max(v_t, 0.5) * dt * ks
    if lap_view is not None:
        steps = list(range(1, n))
        refs = [lap_view.state_local_at(s_guess[k - 1]) for k in steps]
        add_tracking_cost(h, f, layout, config.ref_weights, refs, steps)

    a_dyn, b_dyn = dynamics_equalities(layout, model, x0_local)
    # terminal hull: x_N = sum(lambda_i * x_i) + slack, sum(lambda) = 1
    a_hull = np.zeros((NX + 1, nz))
    a_hull[:NX, layout.x(n)] = np.eye(NX)
    a_hull[:NX, lam_idx] = -nb_local.T
    a_hull[:NX, slack_idx] = -np.eye(NX)
    a_hull[NX, lam_idx] = 1.0
    b_hull = np.zeros(NX + 1)
    b_hull[NX] = 1.0
    a_eq = np.vstack([a_dyn, a_hull])
    b_eq = np.concatenate([b_dyn, b_hull])

    ey_bound = track.half_width - 0.5 * params.width - config.ey_margin
    sb_rows, sb_lo, sb_up, _ = state_bound_rows(
        layout, (0.0, params.vx_max), ey_bound, epsi_bound=config.epsi_bound)
    # the plan may only outrun the stored data by a headroom margin, so the
    # regression stays valid and speed grows lap over lap; a braking-rate
    # ramp keeps the cap feasible when the current speed already exceeds it
    if lap_view is not None:
        data_v = np.array([float(lap_view.state_local_at(s)[IVX]) for s in s_guess])
        # far off the stored line the model is extrapolating: shed speed
        off_line = abs(x_t[IEY] - float(lap_view.state_local_at(0.0)[IEY]))
        data_v = data_v - config.offline_slowdown * off_line
    else:
        data_v = np.full(n, float(nb_states[:, IVX].max()))
    caps = np.minimum(data_v + config.speed_headroom, config.vx_learn_cap)
    brake_floor = v_t + ks * dt * params.a_min + 0.05
    caps = np.minimum(np.maximum(np.maximum(caps, brake_floor), 0.6), params.vx_max)
    sb_up[:n] = caps
    ey_lo_k, ey_hi_k = curvature_ey_limits(track, s_t + s_guess, ey_bound)
    sb_lo[-n:] = np.maximum(sb_lo[-n:], ey_lo_k)
    sb_up[-n:] = np.minimum(sb_up[-n:], ey_hi_k)
    relax_bounds_for_state(sb_lo[-n:], sb_up[-n:], x_t[IEY], 0.5, dt)
    relax_bounds_for_state(sb_lo[n:2 * n], sb_up[n:2 * n], x_t[IEPSI], 1.2, dt)

    u_rows = input_rows(layout)
    u_lo = np.tile(params.input_lower, n)
    u_up = np.tile(params.input_upper, n)
    lam_rows = np.zeros((n_lam, nz))
    lam_rows[:, lam_idx] = np.eye(n_lam)
    a_in = np.vstack([sb_rows, u_rows, lam_rows])
    lo = np.concatenate([sb_lo, u_lo, np.zeros(n_lam)])
    up = np.concatenate([sb_up, u_up, np.ones(n_lam)])

    cost_scale = normalize_cost(h, f)
    qp = QuadraticProgram(H=h, f=f, A_eq=a_eq, b_eq=b_eq, A_in=a_in, lower=lo, upper=up)
    qp.validate()
    a_all, l_all, u_all, is_eq = qp.stacked()
    ws = QpWorkspace(h, a_all, is_eq, f_typical=f)
    x_sol, _, status, *_ = ws.solve(f, l_all, u_all, warm_x=warm_start)
    if status != STATUS_OPTIMAL:
        raise PlannerInfeasible(f"LMPC QP status {status}")

    return PlannedTrajectory(
        states=layout.states_of(x_sol).copy(),
        inputs=layout.inputs_of(x_sol).copy(),
        source="lmpc",
        cost=cost_scale * qp.objective(x_sol),
        s_ref=s_t,
        lambdas=x_sol[lam_idx].copy(),
    )


@dataclass
class LearnedData:
    """Learning output persisted between `learn` and `race` runs."""

    laps: list            # all recorded SafeSetLap, oldest first
    lap_times: list       # seconds per lap
    dt_control: float
    meta: dict = field(default_factory=dict)

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.lap_times))

    @property
    def best_lap(self) -> SafeSetLap:
        return self.laps[self.best_index]

    def safe_set(self, k_laps: int = 2) -> SafeSet:
        ss = SafeSet(k_laps)
        start = max(0, len(self.laps) - k_laps)
        for i in range(start, len(self.laps)):
            ss.add(self.laps[i])
            successor = self.laps[i + 1] if i + 1 < len(self.laps) else self.laps[i]
            ss.extend_lap(self.laps[i], successor.states)
        return ss

    def save(self, path):
        arrays = {}
        for i, lap in enumerate(self.laps):
            arrays[f"lap{i}_states"] = lap.states
            arrays[f"lap{i}_inputs"] = lap.inputs
            arrays[f"lap{i}_ctg"] = lap.cost_to_go
        header = {
            "n_laps": len(self.laps),
            "lap_times": list(map(float, self.lap_times)),
            "dt_control": self.dt_control,
            "meta": self.meta,
        }
        arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "LearnedData":
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            laps = []
            for i in range(header["n_laps"]):
                laps.append(SafeSetLap(
                    states=data[f"lap{i}_states"],
                    inputs=data[f"lap{i}_inputs"],
                    cost_to_go=data[f"lap{i}_ctg"],
                ))
        return cls(
            laps=laps,
            lap_times=header["lap_times"],
            dt_control=header["dt_control"],
            meta=header.get("meta", {}),
        )
