"""Environment model: routes, vehicles, occluders, timing and measurement.

All distances are meters along a route centerline unless a 2D point is
explicitly asked for; speeds are m/s, accelerations m/s^2, times seconds.
Types are value objects: build them once, never mutate. Simulation advances
by constructing new instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class ValidationError(ValueError):
    """A scenario or domain object violates an invariant."""


@dataclass(frozen=True)
class Gaussian1D:
    """Scalar Gaussian, used for positions (m), speeds (m/s) and stop distances."""

    mean: float
    std: float = 0.0

    def __post_init__(self):
        if self.std < 0:
            raise ValidationError(f"negative std {self.std}")


@dataclass(frozen=True)
class DriverParams:
    """Longitudinal driver model parameters.

    a_cft and a_dec are magnitudes (positive); a_dec is the full-braking
    capability, a_cft the comfortable one.
    """

    a_acc: float = 1.5
    a_cft: float = 2.0
    a_dec: float = 8.0
    s_min: float = 2.0
    headway: float = 1.5
    v_des: float = 13.89
    politeness: float = 0.0

    def __post_init__(self):
        if self.a_acc <= 0 or self.a_cft <= 0 or self.a_dec <= 0:
            raise ValidationError("acceleration parameters must be positive")
        if self.a_cft > self.a_dec:
            raise ValidationError(
                f"comfortable deceleration {self.a_cft} exceeds full braking {self.a_dec}"
            )
        if self.s_min <= 0 or self.headway <= 0:
            raise ValidationError("s_min and headway must be positive")
        if self.v_des < 0:
            raise ValidationError("v_des must be non-negative")
        if not 0.0 <= self.politeness < 1.0:
            raise ValidationError(f"politeness {self.politeness} outside [0, 1)")


# Rule tags a route stretch can carry.
STOP_SIGN = "STOP_SIGN"
YIELD = "YIELD"
PRIORITY_ROAD = "PRIORITY_ROAD"
SPEED_LIMIT = "SPEED_LIMIT"
_KNOWN_TAGS = {STOP_SIGN, YIELD, PRIORITY_ROAD, SPEED_LIMIT}


@dataclass(frozen=True)
class RuleTag:
    begin: float
    end: float
    tag: str
    value: float | None = None  # only for SPEED_LIMIT

    def covers(self, arc: float) -> bool:
        return self.begin <= arc <= self.end


class RouteGeometry:
    """Arc-length parameterized polyline path with a speed limit and rule tags.

    The centerline is interpolated linearly between vertices; arc length is
    the running sum of segment lengths starting at 0.
    """

    def __init__(self, route_id: str, centerline, speed_limit: float, tags=()):
        pts = np.asarray(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValidationError(f"route '{route_id}': centerline needs >= 2 2D points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ValidationError(f"route '{route_id}': repeated centerline points")
        if speed_limit < 0:
            raise ValidationError(f"route '{route_id}': speed_limit must be non-negative")
        self.id = route_id
        self.centerline = pts
        self.cumulative_arclength = np.concatenate([[0.0], np.cumsum(seg)])
        self.speed_limit = float(speed_limit)
        self.tags = tuple(tags)
        for t in self.tags:
            if t.tag not in _KNOWN_TAGS:
                raise ValidationError(f"route '{route_id}': unknown tag {t.tag!r}")

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def point_at(self, arc: float) -> np.ndarray:
        """Centerline point at the given arc length (clamped to the route)."""
        s = min(max(arc, 0.0), self.length)
        i = int(np.searchsorted(self.cumulative_arclength, s, side="right")) - 1
        i = min(max(i, 0), len(self.centerline) - 2)
        s0, s1 = self.cumulative_arclength[i], self.cumulative_arclength[i + 1]
        t = (s - s0) / (s1 - s0)
        return (1 - t) * self.centerline[i] + t * self.centerline[i + 1]

    def tangent_at(self, arc: float) -> np.ndarray:
        """Unit direction of travel at the given arc length."""
        s = min(max(arc, 0.0), self.length)
        i = int(np.searchsorted(self.cumulative_arclength, s, side="right")) - 1
        i = min(max(i, 0), len(self.centerline) - 2)
        d = self.centerline[i + 1] - self.centerline[i]
        return d / np.linalg.norm(d)

    def tagged(self, tag: str, arc: float) -> bool:
        return any(t.tag == tag and t.covers(arc) for t in self.tags)

    def __repr__(self):
        return f"RouteGeometry({self.id!r}, length={self.length:.1f})"


def project_to_route(point, route: RouteGeometry) -> tuple[float, float]:
    """Project a 2D point onto a route centerline.

    Returns (arc, lateral_offset) of the closest centerline point; the offset
    is signed, positive to the left of the travel direction. Points beyond
    the ends clamp to arc 0 or the route length.
    """
    p = np.asarray(point, dtype=float)
    pts = route.centerline
    a = pts[:-1]
    b = pts[1:]
    ab = b - a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / seg_len2, 0.0, 1.0)
    foot = a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", p - foot, p - foot)
    i = int(np.argmin(d2))
    seg_len = math.sqrt(seg_len2[i])
    arc = float(route.cumulative_arclength[i] + t[i] * seg_len)
    tangent = ab[i] / seg_len
    rel = p - foot[i]
    lateral = float(tangent[0] * rel[1] - tangent[1] * rel[0])
    return arc, lateral


def _polygon_area2(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class OccluderPolygon:
    """Convex polygon blocking line of sight, stored counter-clockwise.

    Clockwise input is re-wound; degenerate or non-convex input is rejected.
    """

    def __init__(self, vertices):
        pts = np.asarray(vertices, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ValidationError("occluder needs >= 3 2D vertices")
        area2 = _polygon_area2(pts)
        if abs(area2) < 1e-9:
            raise ValidationError("degenerate occluder (zero area)")
        if area2 < 0:
            pts = pts[::-1].copy()
        edges = np.roll(pts, -1, axis=0) - pts
        cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(cross < -1e-12):
            raise ValidationError("non-convex occluder")
        self.vertices = pts

    @property
    def area(self) -> float:
        return 0.5 * _polygon_area2(self.vertices)

    def __repr__(self):
        return f"OccluderPolygon({len(self.vertices)} vertices, area={self.area:.1f})"


@dataclass(frozen=True)
class TimingModel:
    """Replanning timing: sampling interval, pinning depth and update periods.

    t_d = n_pin * h is the planner dead time; a new plan cannot change motion
    earlier than one dead time after it was started, and the current plan must
    stay safe on its own until t_safe = t0 + 2 * t_d.
    """

    h: float = 0.25
    n_pin: int = 3
    t0: float = 0.0
    env_period: float = 0.5
    plan_period: float = 0.75
    t_p: float = 0.0

    def __post_init__(self):
        if self.h <= 0:
            raise ValidationError("sampling interval h must be positive")
        if self.n_pin < 1:
            raise ValidationError("n_pin must be >= 1")
        if self.t_p < 0:
            raise ValidationError("t_p must be >= 0")
        if self.env_period <= 0 or self.plan_period <= 0:
            raise ValidationError("update periods must be positive")
        if self.plan_period > self.t_d + 1e-9:
            raise ValidationError(
                f"plan_period {self.plan_period} exceeds dead time {self.t_d}; "
                "pinned points would run out before the next plan"
            )
        for name in ("env_period", "plan_period"):
            v = getattr(self, name)
            if abs(v / self.h - round(v / self.h)) > 1e-9:
                raise ValidationError(f"{name} must be an integer multiple of h")

    @property
    def t_d(self) -> float:
        return self.n_pin * self.h

    @property
    def t_pin(self) -> float:
        return self.t0 + self.n_pin * self.h

    @property
    def t_safe(self) -> float:
        return self.t0 + 2.0 * self.t_d


@dataclass(frozen=True)
class VehicleState:
    """Longitudinal state of one vehicle on a route.

    arc_pos is the arc-length position of the vehicle reference point (its
    geometric center); position and speed are uncorrelated Gaussians.
    """

    route_id: str
    arc_pos: Gaussian1D
    speed: Gaussian1D
    length: float = 4.5
    width: float = 1.8
    vehicle_id: str = ""

    def __post_init__(self):
        if self.speed.mean < 0:
            raise ValidationError(f"vehicle {self.vehicle_id or '?'}: negative speed")
        if self.length <= 0 or self.width <= 0:
            raise ValidationError("vehicle dimensions must be positive")

    @property
    def front(self) -> float:
        return self.arc_pos.mean + 0.5 * self.length

    @property
    def rear(self) -> float:
        return self.arc_pos.mean - 0.5 * self.length


@dataclass
class WorldState:
    """Everything the simulator knows: ground truth plus sensing parameters."""

    ego: VehicleState
    ego_params: DriverParams
    others: list[tuple[VehicleState, DriverParams]]
    occluders: list[OccluderPolygon]
    routes: list[RouteGeometry]
    sensor_range: float
    timing: TimingModel
    sigma_meas_pos: float = 0.0
    sigma_meas_speed: float = 0.0
    clock: float = 0.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = {r.id for r in self.routes}
        if len(ids) != len(self.routes):
            raise ValidationError("duplicate route ids")
        for veh in [self.ego] + [v for v, _ in self.others]:
            if veh.route_id not in ids:
                raise ValidationError(
                    f"vehicle {veh.vehicle_id or '?'} references unknown route '{veh.route_id}'"
                )
            route = self.route(veh.route_id)
            if not -1e-9 <= veh.arc_pos.mean <= route.length + 1e-9:
                raise ValidationError(
                    f"vehicle {veh.vehicle_id or '?'} at arc {veh.arc_pos.mean} "
                    f"outside route '{veh.route_id}' [0, {route.length}]"
                )
        if self.sensor_range < 0:
            raise ValidationError("sensor_range must be >= 0")
        if self.sigma_meas_pos < 0 or self.sigma_meas_speed < 0:
            raise ValidationError("measurement sigmas must be >= 0")

    def route(self, route_id: str) -> RouteGeometry:
        for r in self.routes:
            if r.id == route_id:
                return r
        raise KeyError(route_id)

    def vehicle_point(self, veh: VehicleState) -> np.ndarray:
        return self.route(veh.route_id).point_at(veh.arc_pos.mean)


def measure(world: WorldState, seed: int) -> WorldState:
    """Produce the perceived world: noisy, visibility- and range-filtered.

    Each visible other vehicle gets independent zero-mean Gaussian noise on
    position and speed mean, and its std fields set to the sensor sigmas.
    Vehicles beyond sensor range or behind an occluder are dropped entirely;
    a vehicle counts as visible when any of its rear, center or front points
    can be seen, so a vehicle whose tail reaches into the certified-free
    range is never missed. The ego state passes through unchanged
    (localization uncertainty is a constant carried in its std fields).
    Deterministic for a fixed seed.
    """
    from .visibility import is_point_visible

    rng = np.random.default_rng(seed)
    eye = world.vehicle_point(world.ego)
    seen = []
    for veh, params in world.others:
        draw_pos = rng.normal(0.0, 1.0)
        draw_speed = rng.normal(0.0, 1.0)
        route = world.route(veh.route_id)
        probes = (route.point_at(veh.rear), world.vehicle_point(veh),
                  route.point_at(veh.front))
        if not any(is_point_visible(eye, p, world.occluders, world.sensor_range)
                   for p in probes):
            continue
        arc = veh.arc_pos.mean + world.sigma_meas_pos * draw_pos
        spd = max(0.0, veh.speed.mean + world.sigma_meas_speed * draw_speed)
        arc = min(max(arc, 0.0), route.length)
        meas = replace(
            veh,
            arc_pos=Gaussian1D(arc, world.sigma_meas_pos),
            speed=Gaussian1D(spd, world.sigma_meas_speed),
        )
        seen.append((meas, params))
    return replace(world, others=seen)
