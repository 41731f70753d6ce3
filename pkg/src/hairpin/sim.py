"""Deterministic racing world: mode switching, opponents, noise, metrics.

One control step is: test every opponent against the overtaking range; plan
with the learning MPC when nobody is in range, otherwise run the corridor
pipeline and track the selected candidate with the CBF controller; apply
the input (plus input noise), integrate 100 Euler substeps at 1 kHz, add
per-period state noise, and advance the opponents along their fixed
lateral offsets.  Identical (seed, config) pairs produce byte-identical
logs; wall-clock timings go to a separate sidecar so the primary log stays
reproducible.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import controller as ctl
from . import dynamics as dyn
from . import lmpc as lm
from . import overtake as ovt
from .config import AppConfig
from .dynamics import NX, NU, ISC, IEY, IVX
from .errors import (
    BadSpec, EpisodeAbort, InsufficientData, NoCandidate, NoCorridor,
    NoProgress, PlannerInfeasible, RankDeficient,
)
from .track import Track

LOG_SCHEMA_VERSION = 1


@dataclass
class ScenarioSpec:
    """Randomization ranges for opponents."""

    n_opponents: int = 1
    s_range: tuple = (10.0, 30.0)      # spawn window along the center line [m]
    speed_range: tuple = (0.0, 0.4)    # constant opponent speeds [m/s]

    def validate(self):
        if self.n_opponents < 0:
            raise BadSpec("opponent count must be non-negative")
        if self.s_range[1] < self.s_range[0]:
            raise BadSpec(f"empty spawn range {self.s_range}")
        if self.speed_range[1] < self.speed_range[0] or self.speed_range[0] < 0:
            raise BadSpec(f"invalid speed range {self.speed_range}")


@dataclass
class Scenario:
    seed: int
    opponents: list                    # OpponentState at t=0
    ego_start: np.ndarray
    lap_budget: int = 1


def generate_scenario(seed: int, spec: ScenarioSpec, config: AppConfig,
                      lap_budget: int = 1) -> Scenario:
    """Seeded draw of opponent spawn positions, lateral offsets, and speeds."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA11CE]))
    track = config.track
    params = config.vehicle
    margin = config.overtake.selection.margin
    ey_lim = track.half_width - 0.5 * params.width - margin
    opponents = []
    for _ in range(spec.n_opponents):
        s0 = float(rng.uniform(*spec.s_range)) % track.length
        e_y = float(rng.uniform(-ey_lim, ey_lim))
        v = float(rng.uniform(*spec.speed_range))
        opponents.append(ovt.OpponentState(
            s_c=s0, e_y=e_y, v_x=v, length=params.length, width=params.width,
        ))
    ego_start = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    return Scenario(seed=int(seed), opponents=opponents, ego_start=ego_start,
                    lap_budget=lap_budget)


@dataclass
class OvertakeEvent:
    opponent: int
    t_enter: float
    t_pass: Optional[float] = None

    @property
    def duration(self) -> Optional[float]:
        if self.t_pass is None:
            return None
        return self.t_pass - self.t_enter


@dataclass
class Metrics:
    success: bool
    aborted: bool
    abort_reason: str
    laps_completed: int
    lap_times: list
    events: list                  # OvertakeEvent per opponent
    success_per_opponent: list
    min_barrier: float
    planner_ms_mean: float
    planner_ms_max: float
    controller_ms_mean: float
    step_ms_mean: float
    overtake_steps: int
    seed: int
    config_hash: str

    def overtake_times(self):
        return [e.duration for e in self.events if e.duration is not None]

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "laps_completed": self.laps_completed,
            "lap_times": self.lap_times,
            "overtakes": [
                {"opponent": e.opponent, "t_enter": e.t_enter,
                 "t_pass": e.t_pass, "duration": e.duration}
                for e in self.events
            ],
            "success_per_opponent": self.success_per_opponent,
            "min_barrier": self.min_barrier,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "timing": {
                "planner_ms_mean": self.planner_ms_mean,
                "planner_ms_max": self.planner_ms_max,
                "controller_ms_mean": self.controller_ms_mean,
                "step_ms_mean": self.step_ms_mean,
            },
        }


def _shift_plan(plan: lm.PlannedTrajectory, new_s_ref: float,
                track_length: float) -> lm.PlannedTrajectory:
    """Advance a plan one step and re-anchor it to the new ego frame."""
    half = 0.5 * track_length
    ds = (new_s_ref - plan.s_ref + half) % track_length - half
    states = np.vstack([plan.states[1:], plan.states[-1]])
    states = states.copy()
    states[:, ISC] -= ds
    inputs = np.vstack([plan.inputs[1:], plan.inputs[-1]]) if plan.inputs.shape[0] > 1 \
        else plan.inputs.copy()
    return lm.PlannedTrajectory(
        states=states, inputs=inputs, source=plan.source, cost=plan.cost,
        s_ref=new_s_ref, corridor_index=plan.corridor_index,
    )


class RaceWorld:
    """Single-episode simulation state; stepped by the authoritative loop."""

    def __init__(self, config: AppConfig, learned: lm.LearnedData,
                 scenario: Scenario, noise_on: bool = True,
                 collect_debug: bool = False,
                 executor: Optional[ThreadPoolExecutor] = None):
        self.cfg = config
        self.track = config.track
        self.params = config.vehicle
        self.scenario = scenario
        self.noise_on = noise_on
        self.collect_debug = collect_debug
        self.executor = executor

        seq = np.random.SeedSequence([int(scenario.seed), 0x5EED])
        kids = seq.spawn(2)
        self.rng_input = np.random.default_rng(kids[0])
        self.rng_state = np.random.default_rng(kids[1])

        self.learned = learned
        self.safe_set = learned.safe_set(config.lmpc.k_laps)
        self.lap_ref = lm.LapReference(learned.best_lap, self.track.length)
        self.dataset = build_regression_dataset(config, learned)

        self.x = scenario.ego_start.copy()
        self.ego_progress = 0.0
        self.opp_s = np.array([o.s_c for o in scenario.opponents])
        self.opp_ey = np.array([o.e_y for o in scenario.opponents])
        self.opp_v = np.array([o.v_x for o in scenario.opponents])
        self.opp_progress = np.zeros(len(scenario.opponents))

        self.t = 0.0
        self.step_idx = 0
        self.prev_plan: Optional[lm.PlannedTrajectory] = None
        self.prev_corridor: Optional[int] = None
        self.warm_corridors = {}
        self.warm_controller = None

        self.hold_streak = 0
        self.aborted = False
        self.abort_reason = ""
        self.min_barrier = np.inf
        self.lap_times = []
        self._lap_start_step = 0
        self.events = {}
        self.rows = []
        self.timing_rows = []
        self.debug_rows = []

        self._state_noise_scale = np.array([
            self.params.vx_max, 4.0, 12.0, 3.0, self.track.length,
            2.0 * self.track.half_width,
        ])

    # -- helpers -----------------------------------------------------------

    def _opponents(self):
        return [
            ovt.OpponentState(s_c=float(s), e_y=float(e), v_x=float(v),
                              length=self.params.length, width=self.params.width)
            for s, e, v in zip(self.opp_s, self.opp_ey, self.opp_v)
        ]

    def _local_opponents(self, indices):
        s_t = self.x[ISC]
        out = []
        for i in indices:
            ds = self.track.wrap_diff(self.opp_s[i], s_t)
            out.append(ovt.OpponentState(
                s_c=float(ds), e_y=float(self.opp_ey[i]), v_x=float(self.opp_v[i]),
                length=self.params.length, width=self.params.width,
            ))
        return out

    def _x_local(self):
        x = self.x.copy()
        x[ISC] = 0.0
        return x

    def _plan_lmpc(self):
        s_t = self.x[ISC]
        anchors = None
        if self.prev_plan is not None and self.prev_plan.source == "lmpc":
            shifted = _shift_plan(self.prev_plan, s_t, self.track.length)
            anchors = shifted.states[: self.cfg.lmpc.horizon]
        model = dyn.linearize_time_varying(
            self.dataset, self._x_local(), self.cfg.lmpc.horizon,
            anchors=anchors, k_nn=self.cfg.regression.k_nn, frame_s=s_t,
        )
        anchor = lm.terminal_anchor_for(self.lap_ref, self.x, self.cfg.lmpc.horizon,
                                        self.cfg.sim.dt_control, self.params.a_max)
        plan = lm.solve_lmpc(
            self.x, self.safe_set, model, track=self.track, params=self.params,
            config=self.cfg.lmpc, terminal_anchor=anchor,
            lap_view=lm.LocalLapView(self.lap_ref, s_t),
        )
        return plan, plan.inputs[0]

    def _plan_overtake(self, in_range):
        s_t = self.x[ISC]
        opps_local = self._local_opponents(in_range)
        samples = self.dataset.neighbors(self.x, self.cfg.regression.ti_neighbors)
        model_ti = dyn.linearize_time_invariant(
            samples, self.x, frame_s=s_t, track_length=self.track.length,
        )
        lap_view = lm.LocalLapView(self.lap_ref, s_t)
        warm = {}
        for idx, traj in self.warm_corridors.items():
            shifted = _shift_plan(traj, s_t, self.track.length)
            warm[idx] = np.concatenate([
                shifted.states.reshape(-1), shifted.inputs.reshape(-1),
            ])
        best, debug = ovt.plan_overtake(
            self._x_local(), opps_local, model_ti, lap_view, self.track,
            self.params, self.cfg.overtake, prev_index=self.prev_corridor,
            warm_starts=warm, executor=self.executor, s_ref=s_t,
        )
        return best, debug

    def _track_plan(self, plan, in_range):
        s_t = self.x[ISC]
        if in_range:
            # opponents the controller certifies against: twice the range
            wide = ovt.SelectionParams(
                epsilon=self.cfg.overtake.selection.epsilon * self.cfg.controller.obstacle_range_factor,
                gamma_pred=self.cfg.overtake.selection.gamma_pred * self.cfg.controller.obstacle_range_factor,
            )
            opponents = self._opponents()
            tracked = [i for i in range(len(self.opp_s))
                       if ovt.in_overtake_range(self.x, opponents[i], wide,
                                                self.track.length)]
        else:
            tracked = []
        opps_local = self._local_opponents(tracked)
        n_c = self.cfg.controller.cbf.horizon
        model = dyn.linearize_time_varying(
            self.dataset, self._x_local(), n_c,
            anchors=plan.states[:n_c], k_nn=self.cfg.regression.k_nn, frame_s=s_t,
        )
        sol = ctl.solve_tracking_mpc(
            self._x_local(), plan, opps_local, model, self.cfg.controller,
            self.track, self.params, warm_start=self.warm_controller,
        )
        self.warm_controller = None  # re-seeded from the plan each step
        return sol

    # -- one control period -------------------------------------------------

    def step(self):
        cfg = self.cfg
        t_step0 = time.perf_counter()
        opponents = self._opponents()
        in_range = [
            i for i, o in enumerate(opponents)
            if ovt.in_overtake_range(self.x, o, cfg.overtake.selection, self.track.length)
        ]
        mode = "overtake" if in_range else "lmpc"
        planner_status = "ok"
        controller_status = "-"
        corridor = -1
        plan = None
        u_cmd = None

        t_plan0 = time.perf_counter()
        if mode == "lmpc":
            try:
                plan, _ = self._plan_lmpc()
            except (PlannerInfeasible, InsufficientData, RankDeficient) as exc:
                planner_status = type(exc).__name__
            plan_ms = (time.perf_counter() - t_plan0) * 1e3
            if plan is None:
                self.hold_streak += 1
                if self.prev_plan is not None and self.hold_streak <= 1:
                    plan = _shift_plan(self.prev_plan, self.x[ISC], self.track.length)
                    planner_status += "+hold"
            else:
                self.hold_streak = 0
            t_ctl0 = time.perf_counter()
            if plan is not None:
                try:
                    sol = self._track_plan(plan, [])
                    u_cmd = sol.u
                    controller_status = "ok"
                except (PlannerInfeasible, InsufficientData, RankDeficient) as exc:
                    controller_status = type(exc).__name__
                    u_cmd = plan.inputs[0]  # fall back to the open-loop plan
            if u_cmd is None:
                # persistent planner failure: limp back to the center line
                u_cmd = _pd_input(self.x, self.track, self.params,
                                  min(self.cfg.sim.cruise_speed, max(self.x[IVX], 0.5)))
                planner_status += "+recovery"
            ctl_ms = (time.perf_counter() - t_ctl0) * 1e3
            self.warm_corridors = {}
            self.prev_corridor = None
        else:
            debug = None
            try:
                plan, debug = self._plan_overtake(in_range)
                corridor = plan.corridor_index
            except (NoCorridor, NoCandidate, PlannerInfeasible,
                    InsufficientData, RankDeficient) as exc:
                planner_status = type(exc).__name__
            plan_ms = (time.perf_counter() - t_plan0) * 1e3
            if plan is None:
                self.hold_streak += 1
                if self.prev_plan is not None and self.hold_streak <= 1:
                    plan = _shift_plan(self.prev_plan, self.x[ISC], self.track.length)
                    planner_status += "+hold"
            else:
                self.hold_streak = 0
            t_ctl0 = time.perf_counter()
            if plan is not None:
                try:
                    sol = self._track_plan(plan, in_range)
                    u_cmd = sol.u
                    controller_status = "ok"
                except (PlannerInfeasible, InsufficientData, RankDeficient,
                        NoProgress) as exc:
                    controller_status = type(exc).__name__
            if u_cmd is None:
                # with opponents near, braking is the only safe default
                u_cmd = ctl.emergency_input(self.params)
                controller_status += "+emergency"
            ctl_ms = (time.perf_counter() - t_ctl0) * 1e3
            if debug is not None:
                self.prev_corridor = corridor
                if self.collect_debug:
                    self._record_debug(debug, plan)

        if plan is not None:
            self.prev_plan = plan
            if mode == "overtake" and plan.corridor_index is not None:
                self.warm_corridors = {plan.corridor_index: plan}

        # edge reflex: near the boundary and still moving outward, brake and
        # steer back regardless of what the planners asked for
        u_cmd = _edge_reflex(self.x, u_cmd, self.track, self.params)
        # actuate: input noise, 1 kHz integration, state noise
        u_cmd = np.clip(u_cmd, self.params.input_lower, self.params.input_upper)
        u_applied = u_cmd.copy()
        if self.noise_on:
            amp = cfg.sim.noise_input_frac * np.array([self.params.a_max, self.params.delta_max])
            u_applied = u_cmd + self.rng_input.uniform(-1.0, 1.0, NU) * amp
            u_applied = np.clip(u_applied, self.params.input_lower, self.params.input_upper)
        x_old = self.x.copy()
        x_new = dyn.simulate_substeps(
            self.x, u_applied, self.params, self.track,
            cfg.sim.dt_sim, cfg.sim.n_substeps,
        )
        if self.noise_on:
            amp = cfg.sim.noise_state_frac * self._state_noise_scale
            x_new = x_new + self.rng_state.uniform(-1.0, 1.0, NX) * amp
            x_new[ISC] = x_new[ISC] % self.track.length
        if x_new[IVX] < 0.0:
            x_new[IVX] = 0.0
        self.x = x_new
        self.ego_progress += self.track.wrap_diff(x_new[ISC], x_old[ISC])
        self.opp_s = (self.opp_s + self.opp_v * cfg.sim.dt_control) % self.track.length
        self.opp_progress += self.opp_v * cfg.sim.dt_control
        self.t += cfg.sim.dt_control
        self.step_idx += 1

        # bookkeeping: barrier, lap counting, overtake events
        min_h = np.inf
        for o in self._opponents():
            min_h = min(min_h, ctl.barrier_value(self.x, o, self.track.length))
        self.min_barrier = min(self.min_barrier, min_h)

        laps_done = int(self.ego_progress // self.track.length)
        if laps_done > len(self.lap_times):
            self.lap_times.append((self.step_idx - self._lap_start_step) * cfg.sim.dt_control)
            self._lap_start_step = self.step_idx

        for i in in_range:
            if i not in self.events:
                self.events[i] = OvertakeEvent(opponent=i, t_enter=self.t - cfg.sim.dt_control)
        for i, ev in self.events.items():
            if ev.t_pass is None and self._lead(i) > self.params.length:
                ev.t_pass = self.t

        row = self._record_row(mode, corridor, len(in_range), u_cmd, u_applied,
                               min_h, planner_status, controller_status)
        step_ms = (time.perf_counter() - t_step0) * 1e3
        self.timing_rows.append((self.step_idx - 1, mode, round(plan_ms, 3),
                                 round(ctl_ms, 3), round(step_ms, 3)))

        if abs(self.x[IEY]) > self.track.half_width:
            self.aborted = True
            self.abort_reason = "off_track"
            raise EpisodeAbort("ego left the track")
        if min_h <= 0.0:
            self.aborted = True
            self.abort_reason = "collision"
            raise EpisodeAbort("pairwise barrier non-positive")
        return row

    def _lead(self, i) -> float:
        ego_abs = self.scenario.ego_start[ISC] + self.ego_progress
        opp_abs = self.scenario.opponents[i].s_c + self.opp_progress[i]
        return ego_abs - opp_abs

    def _record_row(self, mode, corridor, n_in_range, u_cmd, u_applied, min_h,
                    planner_status, controller_status):
        row = {
            "step": self.step_idx - 1,
            "t": round(self.t - self.cfg.sim.dt_control, 6),
            "mode": mode,
            "corridor": corridor,
            "n_in_range": n_in_range,
            "vx": self.x[0], "vy": self.x[1], "wz": self.x[2],
            "epsi": self.x[3], "sc": self.x[4], "ey": self.x[5],
            "a_cmd": u_cmd[0], "delta_cmd": u_cmd[1],
            "a_applied": u_applied[0], "delta_applied": u_applied[1],
            "min_h": min_h if np.isfinite(min_h) else "",
            "lap": len(self.lap_times),
            "progress": self.ego_progress,
            "planner_status": planner_status,
            "controller_status": controller_status,
        }
        for i in range(len(self.opp_s)):
            row[f"opp{i}_s"] = self.opp_s[i]
            row[f"opp{i}_ey"] = self.opp_ey[i]
            row[f"opp{i}_v"] = self.opp_v[i]
        self.rows.append(row)
        return row

    def _record_debug(self, debug, plan):
        rec = {
            "step": self.step_idx,
            "corridors": debug["corridors"],
            "selected": debug["selected"],
        }
        if plan is not None:
            states = plan.absolute_states(self.track.length)
            rec["trajectory"] = [
                [float(s), float(e)] for s, e in zip(states[:, ISC], states[:, IEY])
            ]
        self.debug_rows.append(rec)


def build_regression_dataset(config: AppConfig, learned: lm.LearnedData) -> dyn.RegressionDataset:
    """Probe rollouts plus every recorded lap, capped to the newest transitions."""
    track, params = config.track, config.vehicle
    rng = np.random.default_rng(np.random.SeedSequence([0xD47A, 7]))
    data = dyn.probe_transitions(
        track, params, rng,
        n_anchors=config.regression.probe_anchors,
        per_anchor=config.regression.probe_rollouts,
        dt_control=config.sim.dt_control,
        n_substeps=config.sim.n_substeps,
    )
    for lap in learned.laps:
        data.add_transitions(lap.states, lap.inputs)
    cap = config.regression.max_transitions
    if len(data) > cap:
        xs, us, xn = data.arrays()
        p = data.probe_count
        trimmed = dyn.RegressionDataset(track.length, data.state_weights)
        for i in range(p):
            trimmed.add_transition(xs[i], us[i], xn[i])
        trimmed.probe_count = p
        for i in range(max(len(data) - (cap - p), p), len(data)):
            trimmed.add_transition(xs[i], us[i], xn[i])
        return trimmed
    return data


def run_episode(scenario: Scenario, config: AppConfig, learned: lm.LearnedData,
                noise_on: bool = True, collect_debug: bool = False,
                n_workers: Optional[int] = None):
    """Run one seeded episode to the lap budget or an abort.

    Returns (world, metrics); the world holds the full log rows.
    """
    if n_workers is None:
        n_workers = int(os.environ.get("HAIRPIN_WORKERS", min(4, os.cpu_count() or 1)))
    executor = ThreadPoolExecutor(max_workers=max(n_workers, 1)) if n_workers > 0 else None
    world = RaceWorld(config, learned, scenario, noise_on=noise_on,
                      collect_debug=collect_debug, executor=executor)
    max_steps = int(scenario.lap_budget * config.sim.max_seconds_per_lap
                    / config.sim.dt_control)
    try:
        while len(world.lap_times) < scenario.lap_budget and world.step_idx < max_steps:
            world.step()
    except EpisodeAbort:
        pass
    finally:
        if executor is not None:
            executor.shutdown(wait=False)
    return world, compute_metrics(world, config)


def compute_metrics(world: RaceWorld, config: AppConfig) -> Metrics:
    events = [world.events[k] for k in sorted(world.events)]
    n_opp = len(world.opp_s)
    success_per = [world._lead(i) > config.vehicle.length for i in range(n_opp)]
    success = (not world.aborted) and all(success_per) if n_opp else not world.aborted
    plan_ms = [r[2] for r in world.timing_rows]
    ctl_ms = [r[3] for r in world.timing_rows if r[1] == "overtake"]
    step_ms = [r[4] for r in world.timing_rows]
    ovt_plan_ms = [r[2] for r in world.timing_rows if r[1] == "overtake"]
    return Metrics(
        success=bool(success),
        aborted=world.aborted,
        abort_reason=world.abort_reason,
        laps_completed=len(world.lap_times),
        lap_times=list(world.lap_times),
        events=events,
        success_per_opponent=[bool(s) for s in success_per],
        min_barrier=float(world.min_barrier) if np.isfinite(world.min_barrier) else float("inf"),
        planner_ms_mean=float(np.mean(ovt_plan_ms)) if ovt_plan_ms else 0.0,
        planner_ms_max=float(np.max(ovt_plan_ms)) if ovt_plan_ms else 0.0,
        controller_ms_mean=float(np.mean(ctl_ms)) if ctl_ms else 0.0,
        step_ms_mean=float(np.mean(step_ms)) if step_ms else 0.0,
        overtake_steps=len(ovt_plan_ms),
        seed=world.scenario.seed,
        config_hash=config.config_hash(),
    )


# -- log files ---------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_episode_csv(path, world: RaceWorld, config: AppConfig, scenario: Scenario):
    """Primary log: one row per control step, deterministic bytes.

    The first line is a comment header embedding the schema version, seeds,
    track geometry and vehicle parameters, so downstream tools need no other
    files.
    """
    from dataclasses import asdict

    header = {
        "schema_version": LOG_SCHEMA_VERSION,
        "seed": scenario.seed,
        "config_hash": config.config_hash(),
        "dt": config.sim.dt_control,
        "n_opponents": len(scenario.opponents),
        "track": config.track.to_config(),
        "vehicle": asdict(config.vehicle),
        "scenario": {
            "lap_budget": scenario.lap_budget,
            "opponents": [
                {"s": o.s_c, "ey": o.e_y, "v": o.v_x} for o in scenario.opponents
            ],
        },
    }
    rows = world.rows
    fields = list(rows[0].keys()) if rows else []
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("# hairpin-episode-log " + json.dumps(header, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in fields])


def write_timing_csv(path, world: RaceWorld):
    """Sidecar with wall-clock solve times (not reproducible across runs)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mode", "planner_ms", "controller_ms", "step_ms"])
        for row in world.timing_rows:
            writer.writerow(row)


def write_summary_json(path, metrics: Metrics):
    with open(path, "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_debug_jsonl(path, world: RaceWorld):
    with open(path, "w") as fh:
        for rec in world.debug_rows:
            fh.write(json.dumps(rec) + "\n")


def read_episode_csv(path):
    """Parse a primary log back into (header, rows)."""
    with open(path) as fh:
        first = fh.readline()
        prefix = "# hairpin-episode-log "
        if not first.startswith(prefix):
            raise ValueError("not a hairpin episode log")
        header = json.loads(first[len(prefix):])
        reader = csv.DictReader(fh)
        rows = list(reader)
    return header, rows


# -- learning loop ------------------------------------------------------------


def run_learn(config: AppConfig, seed: int = 0, bootstrap_laps: Optional[int] = None,
              lmpc_laps: Optional[int] = None, noise_on: bool = False,
              verbose: bool = False) -> lm.LearnedData:
    """Offline data collection: bootstrap laps then learning laps.

    The bootstrap controller is the tracking MPC following the center line
    at the configured cruise speed, with its model regressed from seeded
    probing rollouts.  Each completed lap joins the safe set and the
    regression history; lap times are non-increasing in the noise-free run.
    """
    track, params = config.track, config.vehicle
    sim = config.sim
    n_boot = sim.bootstrap_laps if bootstrap_laps is None else bootstrap_laps
    n_learn = sim.lmpc_laps if lmpc_laps is None else lmpc_laps

    rng_probe = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB007]))
    dataset = dyn.probe_transitions(
        track, params, rng_probe,
        n_anchors=config.regression.probe_anchors,
        per_anchor=config.regression.probe_rollouts,
        dt_control=sim.dt_control, n_substeps=sim.n_substeps,
    )
    rng_input = np.random.default_rng(np.random.SeedSequence([int(seed), 0x17]))
    rng_state = np.random.default_rng(np.random.SeedSequence([int(seed), 0x18]))
    noise_scale = np.array([params.vx_max, 4.0, 12.0, 3.0, track.length,
                            2.0 * track.half_width])

    safe_set = lm.SafeSet(config.lmpc.k_laps)
    laps = []
    lap_times = []
    lap_ref = None
    # pre-roll one full lap plus a short run-up: lap 1's clock then starts
    # from the bootstrap controller's steady limit cycle
    x = np.array([max(sim.cruise_speed, 0.5), 0.0, 0.0, 0.0,
                  track.length - 4.0, 0.0])
    preroll = 0.0
    target = track.length + 4.0
    budget = int((target / max(sim.cruise_speed, 0.5) + 15.0) / sim.dt_control)
    for _ in range(budget):
        u = np.clip(_bootstrap_input(x, dataset, config, prev_ref=None),
                    params.input_lower, params.input_upper)
        x_old = x.copy()
        x = dyn.simulate_substeps(x, u, params, track, sim.dt_sim, sim.n_substeps)
        # pre-roll transitions feed the model so lap 1 tracks as well as lap 2
        dataset.add_transition(x_old, u, x)
        preroll += track.wrap_diff(x[ISC], x_old[ISC])
        if preroll >= target:
            break
    progress = 0.0
    states_buf = [x.copy()]
    inputs_buf = []
    prev_plan = None
    hold_streak = 0

    max_steps_per_lap = int(sim.max_seconds_per_lap / sim.dt_control)
    total_laps = n_boot + n_learn
    lap_no = 0
    steps_this_lap = 0

    while lap_no < total_laps:
        s_t = x[ISC]
        if lap_no < n_boot or len(safe_set) == 0:
            u = _bootstrap_input(x, dataset, config, prev_ref=None)
        else:
            try:
                anchors = None
                if prev_plan is not None:
                    shifted = _shift_plan(prev_plan, s_t, track.length)
                    anchors = shifted.states[: config.lmpc.horizon]
                x_local = x.copy(); x_local[ISC] = 0.0
                model = dyn.linearize_time_varying(
                    dataset, x_local, config.lmpc.horizon,
                    anchors=anchors, k_nn=config.regression.k_nn, frame_s=s_t,
                )
                anchor = lm.terminal_anchor_for(lap_ref, x, config.lmpc.horizon,
                                                sim.dt_control, params.a_max)
                plan = lm.solve_lmpc(
                    x, safe_set, model, track=track, params=params,
                    config=config.lmpc, terminal_anchor=anchor,
                    lap_view=lm.LocalLapView(lap_ref, s_t),
                )
                prev_plan = plan
                try:
                    n_c = config.controller.cbf.horizon
                    model_c = dyn.linearize_time_varying(
                        dataset, x_local, n_c, anchors=plan.states[:n_c],
                        k_nn=config.regression.k_nn, frame_s=s_t,
                    )
                    sol = ctl.solve_tracking_mpc(
                        x_local, plan, [], model_c, config.controller, track, params,
                    )
                    u = sol.u
                except (PlannerInfeasible, InsufficientData, RankDeficient):
                    u = plan.inputs[0]
            except (PlannerInfeasible, InsufficientData, RankDeficient):
                hold_streak += 1
                if prev_plan is not None and hold_streak <= 1:
                    prev_plan = _shift_plan(prev_plan, s_t, track.length)
                    u = prev_plan.inputs[0]
                else:
                    u = _pd_input(x, track, params,
                                  min(sim.cruise_speed, max(x[IVX], 0.5)))
            else:
                hold_streak = 0

        u = _edge_reflex(x, u, track, params)
        u = np.clip(u, params.input_lower, params.input_upper)
        u_applied = u.copy()
        if noise_on:
            amp = sim.noise_input_frac * np.array([params.a_max, params.delta_max])
            u_applied = np.clip(u + rng_input.uniform(-1, 1, NU) * amp,
                                params.input_lower, params.input_upper)
        x_old = x.copy()
        x = dyn.simulate_substeps(x, u_applied, params, track, sim.dt_sim, sim.n_substeps)
        if noise_on:
            x = x + rng_state.uniform(-1, 1, NX) * (sim.noise_state_frac * noise_scale)
            x[ISC] = x[ISC] % track.length
        if x[IVX] < 0.0:
            x[IVX] = 0.0
        progress += track.wrap_diff(x[ISC], x_old[ISC])
        states_buf.append(x.copy())
        inputs_buf.append(u_applied.copy())
        steps_this_lap += 1

        if abs(x[IEY]) > track.half_width:
            err = EpisodeAbort(f"learning run left the track on lap {lap_no + 1}")
            err.trajectory = np.array(states_buf)
            err.inputs = np.array(inputs_buf)
            raise err
        if steps_this_lap > max_steps_per_lap:
            err = EpisodeAbort(f"lap {lap_no + 1} exceeded the time cap")
            err.trajectory = np.array(states_buf)
            err.inputs = np.array(inputs_buf)
            raise err

        if progress >= (lap_no + 1) * track.length:
            lap_states = np.array(states_buf)
            lap_inputs = np.array(inputs_buf)
            lap = lm.record_lap(safe_set, lap_states, lap_inputs, track.length)
            laps.append(lap)
            # stitch: the new lap's opening extends its predecessor; the new
            # lap gets its own start as a stand-in until a successor exists
            safe_set.extend_lap(lap, lap_states)
            if len(laps) >= 2:
                try:
                    safe_set.extend_lap(laps[-2], lap_states)
                except ValueError:
                    pass
            lap_times.append(steps_this_lap * sim.dt_control)
            dataset.add_transitions(lap_states, lap_inputs)
            if lap_ref is None or lap_times[-1] <= min(lap_times[:-1], default=np.inf):
                lap_ref = lm.LapReference(lap, track.length)
            if verbose:
                kind = "bootstrap" if lap_no < n_boot else "lmpc"
                print(f"lap {lap_no + 1:2d} [{kind}]  {lap_times[-1]:6.1f} s")
            states_buf = [x.copy()]
            inputs_buf = []
            steps_this_lap = 0
            lap_no += 1
            prev_plan = None

    return lm.LearnedData(
        laps=laps, lap_times=lap_times, dt_control=sim.dt_control,
        meta={"seed": int(seed), "bootstrap_laps": n_boot, "lmpc_laps": n_learn,
              "config_hash": config.config_hash()},
    )


def _bootstrap_input(x, dataset, config: AppConfig, prev_ref=None) -> np.ndarray:
    """Center-line tracking MPC step used for the first laps.

    Falls back to a PD law on (e_y, e_psi) with curvature feedforward when
    the MPC cannot certify a solution, so the learning loop never dies.
    """
    track, params, sim = config.track, config.vehicle, config.sim
    n_c = config.controller.cbf.horizon
    v_c = sim.cruise_speed
    s_t = x[ISC]
    x_local = x.copy(); x_local[ISC] = 0.0
    ref_states = np.zeros((n_c + 1, NX))
    ref_states[:, IVX] = v_c
    ref_states[:, ISC] = v_c * sim.dt_control * np.arange(n_c + 1)
    for k in range(n_c + 1):
        kappa = track.curvature_at(s_t + ref_states[k, ISC])
        ref_states[k, 2] = kappa * v_c  # w_z feedforward through curves
    ref_inputs = np.zeros((n_c, NU))
    try:
        model = dyn.linearize_time_varying(
            dataset, x_local, n_c, anchors=ref_states[:n_c],
            k_nn=config.regression.k_nn, frame_s=s_t,
        )
        sol = ctl.solve_tracking_mpc(
            x_local, (ref_states, ref_inputs), [], model, config.controller,
            track, params,
        )
        return sol.u
    except (PlannerInfeasible, InsufficientData, RankDeficient, NoProgress):
        return _pd_input(x, track, params, v_c)


def _edge_reflex(x, u_cmd, track, params) -> np.ndarray:
    """Stability override near the track edge.

    When the car is outside 80% of the drivable band and its lateral rate
    still points outward, planner/controller commands are replaced by hard
    braking plus corrective steering toward the center line.
    """
    edge = 0.8 * track.half_width
    ey = x[IEY]
    if abs(ey) <= edge:
        return u_cmd
    epsi = x[3]
    ey_dot = x[IVX] * np.sin(epsi) + x[1] * np.cos(epsi)
    if ey * ey_dot <= 0.0:
        return u_cmd
    kappa = track.curvature_at(x[ISC])
    wheelbase = params.lf + params.lr
    delta = np.arctan(wheelbase * kappa) - 0.8 * ey - 1.2 * epsi
    return np.array([params.a_min * 0.75,
                     np.clip(delta, params.delta_min, params.delta_max)])


def _pd_input(x, track, params, v_ref) -> np.ndarray:
    """Last-resort center-line PD: stable at cruise speeds on this track."""
    kappa = track.curvature_at(x[ISC])
    wheelbase = params.lf + params.lr
    delta = np.arctan(wheelbase * kappa) - 0.6 * x[IEY] - 1.0 * x[3]
    a = 1.5 * (v_ref - x[IVX])
    return np.array([np.clip(a, params.a_min, params.a_max),
                     np.clip(delta, params.delta_min, params.delta_max)])
