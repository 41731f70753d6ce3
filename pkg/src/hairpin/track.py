"""Closed race track built from straight and arc segments.

The center line is a tangent-continuous chain of straights and circular
arcs that closes on itself.  Positions along it are expressed in Frenet
coordinates: arclength progress ``s_c`` (wrapped at the lap length) and
signed lateral offset ``e_y`` (positive to the left of the driving
direction).  Curvature is piecewise constant: 0 on straights, ``+1/R`` on
left arcs, ``-1/R`` on right arcs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import OffTrack

CLOSURE_TOL = 1e-6  # meters / radians for the loop-closure check
PROJECTION_TIE_TOL = 1e-9  # distances closer than this count as a tie


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


class GlobalPose(NamedTuple):
    x: float
    y: float
    psi: float


class FrenetPosition(NamedTuple):
    s_c: float
    e_y: float
    e_psi: float


@dataclass(frozen=True)
class TrackSegment:
    """One piece of the center line.

    kind "straight" uses ``length`` [m]; kind "arc" uses ``radius`` [m]
    and signed ``sweep`` [rad] (positive sweep turns left).
    """

    kind: str
    length: float = 0.0
    radius: float = 0.0
    sweep: float = 0.0

    def __post_init__(self):
        if self.kind == "straight":
            if self.length <= 0.0:
                raise ValueError("straight segment needs length > 0")
        elif self.kind == "arc":
            if self.radius <= 0.0:
                raise ValueError("arc segment needs radius > 0")
            if self.sweep == 0.0:
                raise ValueError("arc segment needs nonzero sweep")
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")

    @property
    def arclength(self) -> float:
        if self.kind == "straight":
            return self.length
        return abs(self.sweep) * self.radius

    @property
    def curvature(self) -> float:
        if self.kind == "straight":
            return 0.0
        return math.copysign(1.0 / self.radius, self.sweep)


class Track:
    """Immutable closed track; safe for concurrent reads.

    Attributes
    ----------
    segments : tuple of TrackSegment
    half_width : float
        Center line to boundary distance [m].
    length : float
        Total lap length L [m].
    cum_s : ndarray (n+1,)
        Cumulative arclength at segment starts; cum_s[-1] == length.
    kappa : ndarray (n,)
        Signed curvature per segment.
    """

    def __init__(self, segments: Sequence[TrackSegment], half_width: float):
        if half_width <= 0.0:
            raise ValueError("half_width must be positive")
        if not segments:
            raise ValueError("track needs at least one segment")
        self.segments = tuple(segments)
        self.half_width = float(half_width)

        n = len(self.segments)
        self.cum_s = np.zeros(n + 1)
        self.kappa = np.zeros(n)
        # pose of each segment start: x, y, heading
        self._start_x = np.zeros(n)
        self._start_y = np.zeros(n)
        self._start_psi = np.zeros(n)

        x, y, psi = 0.0, 0.0, 0.0
        for i, seg in enumerate(self.segments):
            self._start_x[i] = x
            self._start_y[i] = y
            self._start_psi[i] = psi
            self.cum_s[i + 1] = self.cum_s[i] + seg.arclength
            self.kappa[i] = seg.curvature
            x, y, psi = _advance_pose(x, y, psi, seg)

        self.length = float(self.cum_s[-1])
        gap = math.hypot(x, y)
        dpsi = abs(wrap_angle(psi))
        if gap > CLOSURE_TOL or dpsi > CLOSURE_TOL:
            raise ValueError(
                f"segments do not close: position gap {gap:.3e} m, "
                f"heading gap {dpsi:.3e} rad"
            )

    # -- basic queries ----------------------------------------------------

    def wrap_s(self, s: float) -> float:
        """Wrap arclength into [0, L)."""
        return s % self.length

    def wrap_diff(self, a: float, b: float) -> float:
        """Signed wrap-aware difference a - b in [-L/2, L/2)."""
        half = 0.5 * self.length
        return (a - b + half) % self.length - half

    def segment_index(self, s: float) -> int:
        s = self.wrap_s(s)
        idx = int(np.searchsorted(self.cum_s, s, side="right")) - 1
        return min(max(idx, 0), len(self.segments) - 1)

    def curvature_at(self, s: float) -> float:
        """Signed center-line curvature at wrapped s [1/m]."""
        return float(self.kappa[self.segment_index(s)])

    def arc_fraction(self) -> float:
        """Fraction of the lap length made of arcs."""
        arc = sum(seg.arclength for seg in self.segments if seg.kind == "arc")
        return arc / self.length

    # -- Frenet <-> global -------------------------------------------------

    def centerline_pose(self, s: float) -> GlobalPose:
        s = self.wrap_s(s)
        i = self.segment_index(s)
        u = s - self.cum_s[i]
        return _segment_pose(
            self._start_x[i], self._start_y[i], self._start_psi[i],
            self.segments[i], u,
        )

    def frenet_to_global(self, p: FrenetPosition) -> GlobalPose:
        """Offset p.e_y along the left normal of the center line at p.s_c."""
        if abs(p.e_y) > self.half_width + PROJECTION_TIE_TOL:
            raise OffTrack(f"|e_y|={abs(p.e_y):.3f} exceeds half width {self.half_width}")
        cx, cy, cpsi = self.centerline_pose(p.s_c)
        x = cx - p.e_y * math.sin(cpsi)
        y = cy + p.e_y * math.cos(cpsi)
        return GlobalPose(x, y, wrap_angle(cpsi + p.e_psi))

    def global_to_frenet(self, g: GlobalPose) -> FrenetPosition:
        """Nearest-point projection onto the center line.

        Ties between segments (corner bisectors) resolve to the smaller s_c.
        """
        best_dist = math.inf
        best_s = 0.0
        best_ey = 0.0
        for i, seg in enumerate(self.segments):
            cand = _project_on_segment(
                self._start_x[i], self._start_y[i], self._start_psi[i],
                seg, g.x, g.y,
            )
            if cand is None:
                continue
            u, e_y, dist = cand
            s = self.cum_s[i] + u
            if dist < best_dist - PROJECTION_TIE_TOL or (
                dist < best_dist + PROJECTION_TIE_TOL and s < best_s
            ):
                best_dist = dist
                best_s = s
                best_ey = e_y
        if best_dist > self.half_width + PROJECTION_TIE_TOL:
            raise OffTrack(
                f"point ({g.x:.3f}, {g.y:.3f}) is {best_dist:.3f} m from the "
                f"center line (half width {self.half_width})"
            )
        best_s = self.wrap_s(best_s)
        cpsi = self.centerline_pose(best_s).psi
        return FrenetPosition(best_s, best_ey, wrap_angle(g.psi - cpsi))

    # -- serialization -----------------------------------------------------

    def to_config(self) -> dict:
        segs = []
        for seg in self.segments:
            if seg.kind == "straight":
                segs.append({"kind": "straight", "length": seg.length})
            else:
                segs.append({"kind": "arc", "radius": seg.radius, "sweep": seg.sweep})
        return {"half_width": self.half_width, "segments": segs}

    @classmethod
    def from_config(cls, config: dict) -> "Track":
        segments = []
        for rec in config["segments"]:
            if rec["kind"] == "straight":
                segments.append(TrackSegment("straight", length=float(rec["length"])))
            else:
                segments.append(
                    TrackSegment("arc", radius=float(rec["radius"]), sweep=float(rec["sweep"]))
                )
        return cls(segments, float(config["half_width"]))

    @classmethod
    def from_file(cls, path) -> "Track":
        with open(path) as fh:
            return cls.from_config(json.load(fh))


def _advance_pose(x: float, y: float, psi: float, seg: TrackSegment):
    """Pose at the end of a segment entered at (x, y, psi)."""
    p = _segment_pose(x, y, psi, seg, seg.arclength)
    return p.x, p.y, p.psi


def _segment_pose(x0: float, y0: float, psi0: float, seg: TrackSegment, u: float) -> GlobalPose:
    """Center-line pose u meters into a segment entered at (x0, y0, psi0)."""
    if seg.kind == "straight":
        return GlobalPose(
            x0 + u * math.cos(psi0), y0 + u * math.sin(psi0), psi0
        )
    sign = 1.0 if seg.sweep > 0 else -1.0
    r = seg.radius
    # arc center sits one radius along the (left or right) normal
    cx = x0 - sign * r * math.sin(psi0)
    cy = y0 + sign * r * math.cos(psi0)
    psi = psi0 + sign * u / r
    px = cx + sign * r * math.sin(psi)
    py = cy - sign * r * math.cos(psi)
    return GlobalPose(px, py, wrap_angle(psi))


def _project_on_segment(x0, y0, psi0, seg: TrackSegment, px, py):
    """Project (px, py) onto one segment's interior.

    Returns (u, e_y, distance) or None when the foot of the projection
    falls outside the segment's parameter range.
    """
    if seg.kind == "straight":
        tx, ty = math.cos(psi0), math.sin(psi0)
        u = (px - x0) * tx + (py - y0) * ty
        if u < -PROJECTION_TIE_TOL or u > seg.length + PROJECTION_TIE_TOL:
            return None
        u = min(max(u, 0.0), seg.length)
        e_y = -(px - x0) * ty + (py - y0) * tx
        return u, e_y, abs(e_y)

    sign = 1.0 if seg.sweep > 0 else -1.0
    r = seg.radius
    cx = x0 - sign * r * math.sin(psi0)
    cy = y0 + sign * r * math.cos(psi0)
    vx, vy = px - cx, py - cy
    dist_c = math.hypot(vx, vy)
    if dist_c < PROJECTION_TIE_TOL:
        return None  # at the arc center: projection undefined on this segment
    # heading of the center-line point whose radial direction passes the query
    psi_hit = math.atan2(vy, vx) + sign * 0.5 * math.pi
    du = sign * (psi_hit - psi0)
    du = du % (2.0 * math.pi)
    span = abs(seg.sweep)
    if du > span + PROJECTION_TIE_TOL / r:
        # also accept points that wrap numerically just below 2*pi
        if du < 2.0 * math.pi - PROJECTION_TIE_TOL / r:
            return None
        du = 0.0
    u = min(du, span) * r
    e_y = sign * (r - dist_c)
    return u, e_y, abs(e_y)
