"""Scene understanding: preview points, merge detection and mode arbitration.

The driving corridor is probed with equidistant preview points along the ego
centerline (reaching only as far as the visible range, so detection improves
with sensor range). Points that also lie on another route mark a merge; road
rule tags and right-before-left decide who yields there.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .model import (PRIORITY_ROAD, STOP_SIGN, DriverParams, RouteGeometry,
                    ValidationError, VehicleState, WorldState, project_to_route)
from .visibility import VisibilityResult

DEFAULT_LATERAL_TOL = 1.0
DEFAULT_PREVIEW_SPACING = 2.0


class Action(enum.Enum):
    RIGHT_OF_WAY = "RIGHT_OF_WAY"
    GIVE_WAY = "GIVE_WAY"
    STOP_THEN_GO = "STOP_THEN_GO"


class ModeKind(enum.Enum):
    FREE_DRIVE = "FREE_DRIVE"
    FOLLOW_DRIVE = "FOLLOW_DRIVE"
    INTERSECTION_GIVE_WAY = "INTERSECTION_GIVE_WAY"
    INTERSECTION_RIGHT_OF_WAY = "INTERSECTION_RIGHT_OF_WAY"


@dataclass(frozen=True)
class MergePoint:
    """Crossing of the ego route with another route."""

    ego_arc: float
    other_route_id: str
    other_arc: float
    action: Action

    @property
    def key(self) -> str:
        # one merge point per other route, so the route id identifies it
        # stably across replans (the detected arc wobbles with the preview)
        return self.other_route_id


@dataclass
class PlanningMode:
    """Arbitrated planning situation for one cycle.

    mio is the most important detected vehicle (None when the worst case is a
    hypothetical vehicle at the line of sight); mandatory_stop marks a
    stop-sign merge that has not been released yet.
    """

    kind: ModeKind
    mio: VehicleState | None = None
    mio_params: DriverParams | None = None
    merge: MergePoint | None = None
    mandatory_stop: bool = False

    def __post_init__(self):
        if self.kind is ModeKind.FOLLOW_DRIVE and self.mio is None:
            raise ValidationError("FOLLOW_DRIVE requires a most important object")
        if self.kind in (ModeKind.INTERSECTION_GIVE_WAY,
                         ModeKind.INTERSECTION_RIGHT_OF_WAY) and self.merge is None:
            raise ValidationError("intersection mode requires a merge point")


def sample_preview_points(ego_route: RouteGeometry, from_arc: float,
                          length: float, spacing: float):
    """Equidistant (arc, point) samples from from_arc ahead, clamped at route end."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    end = min(from_arc + length, ego_route.length)
    arcs = np.arange(from_arc, end + spacing * 1e-9, spacing)
    if len(arcs) == 0:
        arcs = np.array([from_arc])
    return [(float(a), ego_route.point_at(a)) for a in arcs]


def determine_action(merge_ego_arc: float, other_arc: float,
                     ego_route: RouteGeometry, other_route: RouteGeometry,
                     heading, vicinity: float = DEFAULT_PREVIEW_SPACING) -> Action:
    """Decide what the ego has to do at a crossing.

    Precedence: a stop sign on the ego route near the merge wins, then
    priority-road tags, then right-before-left on the approach geometry.
    """
    ego_priority = ego_route.tagged(PRIORITY_ROAD, merge_ego_arc)
    other_priority = other_route.tagged(PRIORITY_ROAD, other_arc)
    if ego_priority and other_priority:
        raise ValidationError(
            f"conflicting priority tags at merge: routes '{ego_route.id}' and '{other_route.id}'"
        )
    stop_near = any(
        t.tag == STOP_SIGN and t.begin <= merge_ego_arc + vicinity and t.end >= merge_ego_arc - vicinity
        for t in ego_route.tags
    )
    if stop_near:
        return Action.STOP_THEN_GO
    if ego_priority:
        return Action.RIGHT_OF_WAY
    if other_priority:
        return Action.GIVE_WAY
    # right-before-left: approach direction points from the merge back toward
    # the approaching traffic (upstream), negative cross means "from the right"
    heading = np.asarray(heading, dtype=float)
    approach = -other_route.tangent_at(other_arc)
    cross = heading[0] * approach[1] - heading[1] * approach[0]
    return Action.GIVE_WAY if cross < 0 else Action.RIGHT_OF_WAY


def detect_intersections(world: WorldState, preview, lateral_tol: float = DEFAULT_LATERAL_TOL):
    """Find the first merge point with every other route touched by the preview.

    A preview point whose projection onto another route lies within
    lateral_tol marks the crossing; only the first such point per route
    counts.
    """
    if lateral_tol <= 0:
        raise ValueError("lateral_tol must be positive")
    ego_route = world.route(world.ego.route_id)
    merges = []
    for route in world.routes:
        if route.id == ego_route.id:
            continue
        for arc, point in preview:
            other_arc, lateral = project_to_route(point, route)
            if abs(lateral) <= lateral_tol:
                heading = ego_route.tangent_at(arc)
                action = determine_action(arc, other_arc, ego_route, route, heading)
                merges.append(MergePoint(ego_arc=arc, other_route_id=route.id,
                                         other_arc=other_arc, action=action))
                break
    merges.sort(key=lambda m: m.ego_arc)
    return merges


def find_merges(world: WorldState, s_vis_ego: float,
                spacing: float = DEFAULT_PREVIEW_SPACING,
                lateral_tol: float = DEFAULT_LATERAL_TOL):
    """Sample the preview over the visible range and detect merge points."""
    ego_route = world.route(world.ego.route_id)
    preview = sample_preview_points(ego_route, world.ego.arc_pos.mean, s_vis_ego, spacing)
    return detect_intersections(world, preview, lateral_tol)


def select_mode(world: WorldState, vis: VisibilityResult, merges,
                released_stops=frozenset()) -> PlanningMode:
    """Arbitrate the planning mode from the measured world.

    A detected lead on the ego route wins; otherwise the nearest merge point
    within the visible range switches to an intersection mode, with the
    nearest-to-merge upstream vehicle (or a hypothetical one) as MIO.
    """
    ego = world.ego
    lead = None
    lead_params = None
    for veh, params in world.others:
        if veh.route_id != ego.route_id:
            continue
        gap = veh.arc_pos.mean - ego.arc_pos.mean
        if gap <= 0 or gap > vis.s_vis_ego:
            continue
        if lead is None or veh.arc_pos.mean < lead.arc_pos.mean:
            lead = veh
            lead_params = params
    if lead is not None:
        return PlanningMode(ModeKind.FOLLOW_DRIVE, mio=lead, mio_params=lead_params)

    ahead = [m for m in merges
             if m.ego_arc >= ego.arc_pos.mean
             and m.ego_arc - ego.arc_pos.mean <= vis.s_vis_ego]
    if not ahead:
        return PlanningMode(ModeKind.FREE_DRIVE)
    merge = ahead[0]

    mio = None
    mio_params = None
    for veh, params in world.others:
        if veh.route_id != merge.other_route_id:
            continue
        if veh.arc_pos.mean > merge.other_arc:
            continue
        if mio is None or veh.arc_pos.mean > mio.arc_pos.mean:
            mio = veh
            mio_params = params

    if merge.action is Action.RIGHT_OF_WAY:
        return PlanningMode(ModeKind.INTERSECTION_RIGHT_OF_WAY, mio=mio,
                            mio_params=mio_params, merge=merge)
    mandatory = merge.action is Action.STOP_THEN_GO and merge.key not in released_stops
    return PlanningMode(ModeKind.INTERSECTION_GIVE_WAY, mio=mio,
                        mio_params=mio_params, merge=merge, mandatory_stop=mandatory)
