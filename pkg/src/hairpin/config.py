"""Configuration loading: track, vehicle, and planner/controller parameter files.

Shipped defaults live in ``hairpin/configs``; CLI flags override file values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

from .controller import CbfParams, ControllerConfig
from .dynamics import VehicleParams
from .lmpc import LmpcConfig
from .overtake import OvertakeConfig, SelectionParams
from .track import Track


@dataclass
class RegressionConfig:
    k_nn: int = 16           # neighbors per time-varying fit
    ti_neighbors: int = 48   # neighbors for the planner's invariant fit
    max_transitions: int = 8000
    probe_anchors: int = 200
    probe_rollouts: int = 5


@dataclass
class SimConfig:
    dt_control: float = 0.1
    dt_sim: float = 0.001
    noise_input_frac: float = 0.01   # of the input bound magnitude
    noise_state_frac: float = 0.001  # of the state scale per control period
    lap_budget: int = 2
    max_seconds_per_lap: float = 120.0
    bootstrap_laps: int = 2
    lmpc_laps: int = 8
    cruise_speed: float = 1.3

    def __post_init__(self):
        n_sub = self.dt_control / self.dt_sim
        if abs(n_sub - round(n_sub)) > 1e-9:
            raise ValueError("dt_sim must divide dt_control exactly")

    @property
    def n_substeps(self) -> int:
        return int(round(self.dt_control / self.dt_sim))


@dataclass
class AppConfig:
    track: Track
    vehicle: VehicleParams
    lmpc: LmpcConfig
    overtake: OvertakeConfig
    controller: ControllerConfig
    regression: RegressionConfig
    sim: SimConfig
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        payload = {
            "track": self.track.to_config(),
            "vehicle": asdict(self.vehicle),
            "params": self.raw,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_path(name: str) -> Path:
    return Path(str(resources.files("hairpin.configs").joinpath(name)))


def _build_params(raw: dict) -> dict:
    sel_raw = dict(raw.get("selection", {}))
    overtake_raw = dict(raw.get("overtake", {}))
    controller_raw = dict(raw.get("controller", {}))
    cbf_raw = dict(controller_raw.pop("cbf", {}))
    out = {
        "lmpc": LmpcConfig(**{k: _tupled(v) for k, v in raw.get("lmpc", {}).items()}),
        "overtake": OvertakeConfig(
            selection=SelectionParams(**sel_raw),
            **{k: _tupled(v) for k, v in overtake_raw.items()},
        ),
        "controller": ControllerConfig(
            cbf=CbfParams(**cbf_raw),
            **{k: _tupled(v) for k, v in controller_raw.items()},
        ),
        "regression": RegressionConfig(**raw.get("regression", {})),
        "sim": SimConfig(**raw.get("sim", {})),
    }
    return out


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def load_config(track_path=None, vehicle_path=None, params_path=None) -> AppConfig:
    """Build the full configuration from the three files (defaults when None)."""
    track_path = track_path or default_path("track_default.json")
    vehicle_path = vehicle_path or default_path("vehicle_default.json")
    params_path = params_path or default_path("planner_default.json")
    track = Track.from_file(track_path)
    vehicle = VehicleParams.from_file(vehicle_path)
    with open(params_path) as fh:
        raw = json.load(fh)
    parts = _build_params(raw)
    return AppConfig(track=track, vehicle=vehicle, raw=raw, **parts)
