"""Dynamic bicycle model with decoupled Pacejka tires in Frenet coordinates.

State ``x = [v_x, v_y, w_z, e_psi, s_c, e_y]``, input ``u = [a, delta]``.
The continuous model is integrated with forward Euler at 1 kHz; planners and
the tracking controller consume affine models regressed from simulated data
(a single time-invariant fit for the planner, a per-step time-varying fit
for the controller).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._accel import jit_kernel
from .errors import InsufficientData, RankDeficient, SingularGeometry
from .track import Track

NX = 6  # state dimension
NU = 2  # input dimension

# state vector indices
IVX, IVY, IWZ, IEPSI, ISC, IEY = range(6)

GEOMETRY_EPS = 1e-9  # |1 - kappa*e_y| below this is singular
COND_LIMIT = 1e12  # regression matrices above this are rank deficient


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters and operating bounds of one car.

    Units: SI throughout (kg, m, s, N, rad).
    """

    mass: float = 1.98
    inertia_z: float = 0.024
    lf: float = 0.125  # CG to front axle
    lr: float = 0.125  # CG to rear axle
    length: float = 0.4
    width: float = 0.2
    tire_bf: float = 6.0  # Pacejka B, C, D per axle
    tire_cf: float = 1.6
    tire_df: float = 8.7
    tire_br: float = 6.0
    tire_cr: float = 1.6
    tire_dr: float = 9.2
    drag_coeff: float = 0.1  # aero drag force = drag_coeff * v_x * |v_x|
    vx_min_slip: float = 0.05  # low-speed clamp inside slip-angle atan
    a_min: float = -2.0
    a_max: float = 2.0
    delta_min: float = -0.5
    delta_max: float = 0.5
    vx_max: float = 5.0

    def __post_init__(self):
        if self.lf + self.lr >= self.length:
            raise ValueError("axle distances must satisfy lf + lr < length")
        for name in ("mass", "inertia_z", "lf", "lr", "length", "width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.mass, self.inertia_z, self.lf, self.lr,
                self.tire_bf, self.tire_cf, self.tire_df,
                self.tire_br, self.tire_cr, self.tire_dr,
                self.drag_coeff, self.vx_min_slip,
            ]
        )

    @property
    def input_lower(self) -> np.ndarray:
        return np.array([self.a_min, self.delta_min])

    @property
    def input_upper(self) -> np.ndarray:
        return np.array([self.a_max, self.delta_max])

    @classmethod
    def from_config(cls, config: dict) -> "VehicleParams":
        return cls(**config)

    @classmethod
    def from_file(cls, path) -> "VehicleParams":
        with open(path) as fh:
            return cls.from_config(json.load(fh))


def lateral_tire_force(alpha: float, b: float, c: float, d: float) -> float:
    """Pacejka magic formula F_y = D*sin(C*atan(B*alpha))."""
    return d * math.sin(c * math.atan(b * alpha))


@jit_kernel
def _derivative_kernel(x, u, p, kappa, out):
    """Frenet bicycle model xdot; returns 0 on success, 1 on singular geometry."""
    m, iz, lf, lr = p[0], p[1], p[2], p[3]
    bf, cf, df = p[4], p[5], p[6]
    br, cr, dr = p[7], p[8], p[9]
    drag, vx_min = p[10], p[11]

    vx, vy, wz, epsi, ey = x[0], x[1], x[2], x[3], x[5]
    a, delta = u[0], u[1]

    denom = 1.0 - kappa * ey
    if abs(denom) < GEOMETRY_EPS:
        return 1

    vx_s = vx if vx > vx_min else vx_min
    alpha_f = delta - math.atan((vy + lf * wz) / vx_s)
    alpha_r = -math.atan((vy - lr * wz) / vx_s)
    fyf = df * math.sin(cf * math.atan(bf * alpha_f))
    fyr = dr * math.sin(cr * math.atan(br * alpha_r))

    s_dot = (vx * math.cos(epsi) - vy * math.sin(epsi)) / denom
    out[0] = a + vy * wz - fyf * math.sin(delta) / m - drag * vx * abs(vx) / m
    out[1] = (fyf * math.cos(delta) + fyr) / m - vx * wz
    out[2] = (lf * fyf * math.cos(delta) - lr * fyr) / iz
    out[3] = wz - kappa * s_dot
    out[4] = s_dot
    out[5] = vx * math.sin(epsi) + vy * math.cos(epsi)
    return 0


@jit_kernel
def _rollout_kernel(x0, u, p, cum_s, seg_kappa, track_len, dt, n_steps, out):
    """n_steps forward-Euler substeps with per-substep curvature lookup.

    Returns 0 on success, 1 when the geometry turns singular.
    """
    x = x0.copy()
    xdot = np.empty(NX)
    n_seg = seg_kappa.shape[0]
    for _ in range(n_steps):
        s = x[ISC] % track_len
        idx = np.searchsorted(cum_s, s, side="right") - 1
        if idx < 0:
            idx = 0
        elif idx >= n_seg:
            idx = n_seg - 1
        kappa = seg_kappa[idx]
        status = _derivative_kernel(x, u, p, kappa, xdot)
        if status != 0:
            return 1
        for j in range(NX):
            x[j] += dt * xdot[j]
    x[ISC] = x[ISC] % track_len
    out[:] = x
    return 0


def derivative(state, inp, params: VehicleParams, kappa: float) -> np.ndarray:
    """Continuous-time state derivative at one operating point."""
    x = np.asarray(state, dtype=float)
    u = np.asarray(inp, dtype=float)
    out = np.empty(NX)
    status = _derivative_kernel(x, u, params.as_array(), float(kappa), out)
    if status != 0:
        raise SingularGeometry(
            f"1 - kappa*e_y vanished (kappa={kappa}, e_y={x[IEY]})"
        )
    return out


def simulate_step(state, inp, params: VehicleParams, track: Track, dt_sim: float = 0.001):
    """One forward-Euler substep; wraps s_c at the lap length."""
    return simulate_substeps(state, inp, params, track, dt_sim, 1)


def simulate_substeps(state, inp, params: VehicleParams, track: Track,
                      dt_sim: float, n_steps: int) -> np.ndarray:
    """n_steps Euler substeps under a zero-order-hold input."""
    x = np.ascontiguousarray(state, dtype=float)
    u = np.ascontiguousarray(inp, dtype=float)
    out = np.empty(NX)
    status = _rollout_kernel(
        x, u, params.as_array(), track.cum_s, track.kappa,
        track.length, dt_sim, n_steps, out,
    )
    if status != 0:
        raise SingularGeometry("rollout reached the curvature center")
    return out


@dataclass(frozen=True)
class AffineTIModel:
    """x_{t+1} = A x_t + B u_t fitted around xbar (control-period map)."""

    A: np.ndarray
    B: np.ndarray
    xbar: np.ndarray

    def predict(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float)


@dataclass(frozen=True)
class AffineTVModel:
    """Per-step affine models x_{t+1} = A_k x_t + B_k u_t + C_k over a horizon."""

    A: np.ndarray  # (N, 6, 6)
    B: np.ndarray  # (N, 6, 2)
    C: np.ndarray  # (N, 6)
    anchors: np.ndarray  # (N, 6) local equilibrium points

    def __len__(self) -> int:
        return self.A.shape[0]

    def predict(self, k: int, x, u) -> np.ndarray:
        return self.A[k] @ np.asarray(x, float) + self.B[k] @ np.asarray(u, float) + self.C[k]


def _stack_samples(samples):
    """Accept a list of (x, u, x_next) triples or a pre-stacked 3-tuple of arrays."""
    if isinstance(samples, tuple) and len(samples) == 3 and hasattr(samples[0], "ndim"):
        xs, us, xn = samples
        return (
            np.asarray(xs, dtype=float),
            np.asarray(us, dtype=float),
            np.asarray(xn, dtype=float),
        )
    xs = np.array([np.asarray(s[0], dtype=float) for s in samples])
    us = np.array([np.asarray(s[1], dtype=float) for s in samples])
    xn = np.array([np.asarray(s[2], dtype=float) for s in samples])
    return xs, us, xn


def linearize_time_invariant(samples, xbar, frame_s=None, track_length=None) -> AffineTIModel:
    """Least-squares fit of a linear one-step model from nearby samples.

    With frame_s set, sample arclengths are re-expressed wrap-aware
    relative to that origin before fitting (the planners run in an
    ego-local frame).  Raises RankDeficient when fewer than NX+NU samples
    are given or the regression matrix is numerically singular.
    """
    xs, us, xn = _stack_samples(samples)
    n = xs.shape[0]
    if n < NX + NU:
        raise RankDeficient(f"need at least {NX + NU} samples, got {n}")
    xbar = np.asarray(xbar, dtype=float).copy()
    if frame_s is not None:
        half = 0.5 * track_length
        xs = xs.copy()
        xn = xn.copy()
        xs[:, ISC] = (xs[:, ISC] - frame_s + half) % track_length - half
        xn[:, ISC] = (xn[:, ISC] - frame_s + half) % track_length - half
        xbar[ISC] = (xbar[ISC] - frame_s + half) % track_length - half
    m = np.hstack([xs, us])
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise RankDeficient(f"regression matrix condition {cond:.2e} exceeds {COND_LIMIT:.0e}")
    theta, *_ = np.linalg.lstsq(m, xn, rcond=None)
    return AffineTIModel(
        A=np.ascontiguousarray(theta[:NX].T),
        B=np.ascontiguousarray(theta[NX:].T),
        xbar=xbar,
    )


def _fit_affine(xs, us, xn):
    m = np.hstack([xs, us, np.ones((xs.shape[0], 1))])
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise RankDeficient(f"regression matrix condition {cond:.2e} exceeds {COND_LIMIT:.0e}")
    theta, *_ = np.linalg.lstsq(m, xn, rcond=None)
    return theta[:NX].T, theta[NX:NX + NU].T, theta[NX + NU]


@jit_kernel
def _knn_kernel(xs, anchor, weights, track_len, k, out_idx):
    """Indices of the k nearest states under weighted distance, wrap-aware in s."""
    n = xs.shape[0]
    d2 = np.empty(n)
    half = 0.5 * track_len
    for i in range(n):
        acc = 0.0
        for j in range(NX):
            if j == ISC:
                diff = (xs[i, j] - anchor[j] + half) % track_len - half
            else:
                diff = xs[i, j] - anchor[j]
            w = weights[j] * diff
            acc += w * w
        d2[i] = acc
    # deterministic k-smallest selection (ties keep the lower index)
    for sel in range(k):
        best = -1
        best_val = np.inf
        for i in range(n):
            if d2[i] < best_val:
                best_val = d2[i]
                best = i
        out_idx[sel] = best
        d2[best] = np.inf


class RegressionDataset:
    """Stored closed-loop transitions used for local model fits.

    Holds (x, u, x_next) triples; s_c is stored wrapped and compared
    wrap-aware during neighbor search.
    """

    def __init__(self, track_length: float, state_weights: Sequence[float]):
        self.track_length = float(track_length)
        self.state_weights = np.asarray(state_weights, dtype=float)
        self.probe_count = 0  # rows [0, probe_count) are excitation rollouts
        self._xs: list = []
        self._us: list = []
        self._xn: list = []
        self._dirty = True
        self._axs = self._aus = self._axn = None

    def __len__(self) -> int:
        return len(self._xs)

    def add_transition(self, x, u, x_next):
        self._xs.append(np.asarray(x, dtype=float))
        self._us.append(np.asarray(u, dtype=float))
        self._xn.append(np.asarray(x_next, dtype=float))
        self._dirty = True

    def add_transitions(self, states: np.ndarray, inputs: np.ndarray):
        """Append consecutive (x_t, u_t, x_{t+1}) pairs from one trajectory."""
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        for t in range(len(inputs)):
            self._xs.append(states[t])
            self._us.append(inputs[t])
            self._xn.append(states[t + 1])
        self._dirty = True

    def arrays(self):
        if self._dirty:
            self._axs = np.ascontiguousarray(np.array(self._xs))
            self._aus = np.ascontiguousarray(np.array(self._us))
            self._axn = np.ascontiguousarray(np.array(self._xn))
            self._dirty = False
        return self._axs, self._aus, self._axn

    def neighbors(self, anchor, k: int):
        """k nearest transitions to anchor; returns (xs, us, xn) slices.

        When the dataset mixes excitation (probe) rollouts with smooth
        closed-loop laps, half of the neighbors come from each pool:
        consecutive lap points are nearly collinear and would otherwise
        starve the local fits of input excitation.
        """
        if len(self) < k:
            raise InsufficientData(f"dataset has {len(self)} transitions, need {k}")
        xs, us, xn = self.arrays()
        anchor = np.ascontiguousarray(anchor, dtype=float)
        p = self.probe_count
        n_cl = len(self) - p
        if 0 < p < len(self) and n_cl >= (k - k // 2):
            k_probe = min(k // 2, p)
            k_cl = k - k_probe
            idx_p = np.empty(k_probe, dtype=np.int64)
            _knn_kernel(xs[:p], anchor, self.state_weights, self.track_length,
                        k_probe, idx_p)
            idx_c = np.empty(k_cl, dtype=np.int64)
            _knn_kernel(xs[p:], anchor, self.state_weights, self.track_length,
                        k_cl, idx_c)
            idx = np.concatenate([idx_p, idx_c + p])
        else:
            idx = np.empty(k, dtype=np.int64)
            _knn_kernel(xs, anchor, self.state_weights, self.track_length, k, idx)
        return xs[idx], us[idx], xn[idx]


def linearize_time_varying(history: RegressionDataset, anchor, horizon: int,
                           anchors=None, k_nn: int = 16,
                           frame_s=None) -> AffineTVModel:
    """Affine time-varying model along a horizon from nearest stored data.

    Each step fits x_{t+1} = A_k x_t + B_k u_t + C_k on the k_nn nearest
    transitions around the step's anchor.  When no anchor trajectory is
    supplied the anchor is propagated through the fitted models using the
    neighbors' mean input.  The affine offsets are expressed with s
    relative to frame_s (absolute when frame_s is None); anchors are given
    in the same frame the caller wants the model in.
    """
    if len(history) == 0:
        raise InsufficientData("empty history")
    if len(history) < k_nn:
        raise InsufficientData(f"history has {len(history)} transitions, need {k_nn}")

    a_out = np.empty((horizon, NX, NX))
    b_out = np.empty((horizon, NX, NU))
    c_out = np.empty((horizon, NX))
    anchor_out = np.empty((horizon, NX))
    length = history.track_length
    half = 0.5 * length
    e_s = np.eye(NX)[:, ISC]

    x_hat = np.asarray(anchor, dtype=float).copy()
    for k in range(horizon):
        if anchors is not None:
            x_hat = np.asarray(anchors[k], dtype=float)
        anchor_out[k] = x_hat
        query = x_hat.copy()
        if frame_s is not None:
            # anchor arrives frame-local; neighbor search wants wrapped s
            query[ISC] = (x_hat[ISC] + frame_s) % length
        xs, us, xn = history.neighbors(query, k_nn)
        # fit in anchor-relative s so the lap seam never splits a fit
        s0 = query[ISC]
        xs_rel = xs.copy()
        xn_rel = xn.copy()
        xs_rel[:, ISC] = (xs[:, ISC] - s0 + half) % length - half
        xn_rel[:, ISC] = (xn[:, ISC] - s0 + half) % length - half
        a_k, b_k, c_k = _fit_affine(xs_rel, us, xn_rel)
        # shift the affine offset into the requested frame
        if frame_s is None:
            shift = s0
        else:
            shift = (s0 - frame_s + half) % length - half
        c_out[k] = c_k + shift * (e_s - a_k[:, ISC])
        a_out[k], b_out[k] = a_k, b_k
        if anchors is None:
            u_bar = us.mean(axis=0)
            x_hat = a_out[k] @ x_hat + b_out[k] @ u_bar + c_out[k]

    return AffineTVModel(A=a_out, B=b_out, C=c_out, anchors=anchor_out)


def probe_transitions(track: Track, params: VehicleParams, rng: np.random.Generator,
                      n_anchors: int = 200, per_anchor: int = 5,
                      speed_range=(0.4, 3.6), dt_control: float = 0.1,
                      n_substeps: int = 100) -> RegressionDataset:
    """Offline identification data: short rollouts from perturbed on-track states.

    Seeds the regression history before any closed-loop laps exist and
    keeps the local fits excited once smooth laps dominate the data.  The
    perturbation ranges deliberately cover aggressive cornering states
    (large heading error, yaw rate, and steering) so closed-loop
    excursions never leave the identified envelope.
    """
    weights = default_state_weights(track, params)
    data = RegressionDataset(track.length, weights)
    for _ in range(n_anchors):
        s = rng.uniform(0.0, track.length)
        v = rng.uniform(*speed_range)
        x = np.array([
            v,
            rng.uniform(-0.25, 0.25),
            rng.uniform(-2.0, 2.0),
            rng.uniform(-0.45, 0.45),
            s,
            rng.uniform(-0.92, 0.92),
        ])
        for _ in range(per_anchor):
            u = np.array([
                rng.uniform(0.8 * params.a_min, 0.8 * params.a_max),
                rng.uniform(0.9 * params.delta_min, 0.9 * params.delta_max),
            ])
            x_next = simulate_substeps(x, u, params, track, dt_control / n_substeps, n_substeps)
            data.add_transition(x, u, x_next)
            x = x_next
            if abs(x[IEY]) > track.half_width - 0.6 * params.width or x[IVX] < 0.2:
                break
    data.probe_count = len(data)
    return data


def default_state_weights(track: Track, params: VehicleParams) -> np.ndarray:
    """Inverse state-range weights for neighbor distances."""
    return np.array([
        1.0 / params.vx_max,
        1.0 / 4.0,   # v_y range
        1.0 / 12.0,  # w_z range
        1.0 / 3.0,   # e_psi range
        1.0 / track.length,
        1.0 / (2.0 * track.half_width),
    ])
