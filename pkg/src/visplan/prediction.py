"""Longitudinal behavior prediction and interaction checks.

Other vehicles are predicted with the Intelligent Driver Model. Where
visibility ends, a hypothetical worst-case vehicle is assumed at the line of
sight, traveling at the route speed limit. Gap acceptance and compliance
checks roll the conflict forward and ask how hard the other driver would have
to brake for the ego.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import DriverParams, VehicleState, WorldState
from .visibility import VisibilityResult

DEFAULT_DT = 0.05
DEFAULT_HORIZON = 10.0

FREE_ROAD = math.inf


def idm_acceleration(v: float, gap: float, v_rel: float, params: DriverParams,
                     clamp: bool = True) -> float:
    """IDM acceleration for speed v and a lead at bumper gap with relative speed v_rel.

    gap is the non-Euclidean bumper-to-bumper distance (math.inf for a free
    road); v_rel is own speed minus lead speed. The returned value is clamped
    to [-a_dec, a_acc] unless clamp is False (compliance checks compare the
    raw demand against comfort limits).
    """
    if gap <= 0:
        raise ValueError(f"vehicle overlap: gap {gap} <= 0")
    free = 1.0 - (v / params.v_des) ** 4 if params.v_des > 0 else -math.inf
    if math.isinf(gap):
        interaction = 0.0
    else:
        s_des = params.s_min + v * params.headway
        interaction = (s_des / gap + v * v_rel /
                       (2.0 * gap * math.sqrt(params.a_acc * params.a_cft))) ** 2
    a = params.a_acc * (free - interaction)
    if clamp:
        a = min(max(a, -params.a_dec), params.a_acc)
    return a


def simulate_idm(state, lead_provider, params: DriverParams,
                 horizon: float = DEFAULT_HORIZON, dt: float = DEFAULT_DT):
    """Explicit-Euler IDM rollout from (arc, v).

    lead_provider(t) returns the lead's (arc, v) or None for a free road; the
    arcs it returns must already be bumper-aligned with the own arc (the gap
    is their plain difference). Speed is floored at zero, so the arc is
    non-decreasing. Returns a list of (t, arc, v, a) samples.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    arc, v = float(state[0]), float(state[1])
    out = []
    steps = int(round(horizon / dt))
    t = 0.0
    for _ in range(steps + 1):
        lead = lead_provider(t)
        if lead is None:
            gap, v_rel = FREE_ROAD, 0.0
        else:
            gap, v_rel = lead[0] - arc, v - lead[1]
        a = idm_acceleration(v, gap, v_rel, params)
        out.append((t, arc, v, a))
        arc += v * dt
        v = max(0.0, v + a * dt)
        t += dt
    return out


@dataclass(frozen=True)
class HypotheticalVehicle:
    """Worst-case vehicle assumed at the edge of the visible region.

    It sits at the farthest contiguously visible upstream point of the
    crossing route and travels at that route's speed limit; s_full_h is its
    full-braking distance.
    """

    route_id: str
    arc: float
    speed: float
    s_full_h: float


def make_hypothetical(world: WorldState, merge, vis: VisibilityResult,
                      params: DriverParams | None = None) -> HypotheticalVehicle:
    """Place the hypothetical vehicle at the line of sight on the merge route."""
    route = world.route(merge.other_route_id)
    s_vis_cross = vis.s_vis_cross.get(merge.other_route_id, 0.0)
    a_dec = (params or DriverParams()).a_dec
    v_h = route.speed_limit
    return HypotheticalVehicle(
        route_id=route.id,
        arc=merge.other_arc - s_vis_cross,
        speed=v_h,
        s_full_h=v_h ** 2 / (2.0 * a_dec),
    )


def hypothetical_params(world: WorldState, route_id: str) -> DriverParams:
    """Driver parameters assumed for the hypothetical vehicle on a route."""
    route = world.route(route_id)
    base = world.config.get("hypothetical", {})
    return DriverParams(
        a_acc=base.get("a_acc", 1.5),
        a_cft=base.get("a_cft", 2.0),
        a_dec=base.get("a_dec", 8.0),
        s_min=base.get("s_min", 2.0),
        headway=base.get("headway", 1.5),
        v_des=route.speed_limit,
    )


def _mio_position(mio) -> tuple[float, float, float]:
    """(arc, speed, front offset) for a detected vehicle or a hypothetical."""
    if isinstance(mio, HypotheticalVehicle):
        return mio.arc, mio.speed, 0.0
    return mio.arc_pos.mean, mio.speed.mean, 0.5 * mio.length


def _required_braking_ok(ego: VehicleState, mio, merge, params_o: DriverParams,
                         decel_limit: float, horizon: float, dt: float) -> bool:
    """Roll the merge conflict forward; False if the other driver would have
    to brake harder than decel_limit at any point.

    The ego is predicted at constant speed. While its rear has not cleared
    the merge, the other vehicle sees the ego's merge projection as a virtual
    lead (gap = own distance to merge minus the ego rear's distance to
    merge). The raw, unclamped IDM demand is compared against the limit.
    """
    arc_o, v_o, front_offset = _mio_position(mio)
    ego_arc = ego.arc_pos.mean
    v_e = ego.speed.mean
    steps = int(round(horizon / dt))
    t = 0.0
    for _ in range(steps + 1):
        mio_front = arc_o + front_offset
        if mio_front >= merge.other_arc:
            return True  # conflict zone passed before the ego was in the way
        ego_pos = ego_arc + v_e * t
        if ego_pos > merge.ego_arc + ego.length:
            return True  # ego rear has cleared the merge
        ego_rear_dist = merge.ego_arc - (ego_pos - 0.5 * ego.length)
        gap = (merge.other_arc - mio_front) - ego_rear_dist
        if gap <= 0:
            return False
        a_raw = idm_acceleration(v_o, gap, v_o - v_e, params_o, clamp=False)
        if a_raw < -decel_limit:
            return False
        a = min(max(a_raw, -params_o.a_dec), params_o.a_acc)
        arc_o += v_o * dt
        v_o = max(0.0, v_o + a * dt)
        t += dt
    return True


def gap_acceptance(ego: VehicleState, mio, merge, params_o: DriverParams,
                   gamma_e: float, horizon: float = DEFAULT_HORIZON,
                   dt: float = DEFAULT_DT) -> bool:
    """Whether the ego may enter the merge without forcing the other vehicle
    to brake beyond (1 - gamma_e) of its comfortable deceleration."""
    if not 0.0 <= gamma_e < 1.0:
        raise ValueError(f"politeness {gamma_e} outside [0, 1)")
    limit = (1.0 - gamma_e) * params_o.a_cft
    return _required_braking_ok(ego, mio, merge, params_o, limit, horizon, dt)


def deceleration_compliant(mio: VehicleState, ego: VehicleState, merge,
                           params_o: DriverParams, horizon: float = DEFAULT_HORIZON,
                           dt: float = DEFAULT_DT) -> bool:
    """Whether a detected crossing vehicle can still yield to the ego with no
    more than its comfortable deceleration; False flags it as uncompliant."""
    return _required_braking_ok(ego, mio, merge, params_o, params_o.a_cft, horizon, dt)


def visibility_compliant(vis_cross: float, hyp: HypotheticalVehicle, t_d: float) -> bool:
    """Whether the visible stretch of the crossing route is long enough that a
    hidden vehicle at the speed limit could still stop during two dead times."""
    if t_d <= 0:
        raise ValueError("t_d must be positive")
    return vis_cross > hyp.s_full_h + 2.0 * t_d * hyp.speed
