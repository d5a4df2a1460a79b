"""Line-of-sight queries against convex occluder polygons.

Visibility along a route is sampled at a fixed arc step and is contiguous:
it ends at the first blocked sample, because free space behind an occluded
gap cannot be certified. The sampling step ds keeps the error explicit
(results are exact up to one ds).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DS = 0.5


def _segment_hits_polygon(eye, target, vertices) -> bool:
    """True if the open segment eye->target crosses the polygon interior.

    Clips the segment parameter against each edge half-plane of the CCW
    polygon; touching the boundary does not count as a hit.
    """
    d = target - eye
    lo, hi = -np.inf, np.inf
    nxt = np.roll(vertices, -1, axis=0)
    for a, b in zip(vertices, nxt):
        ex, ey = b[0] - a[0], b[1] - a[1]
        # signed offset of p(t) = eye + t*d from edge line, positive inside
        alpha = ex * (eye[1] - a[1]) - ey * (eye[0] - a[0])
        beta = ex * d[1] - ey * d[0]
        if beta == 0.0:
            if alpha <= 0.0:
                return False
        elif beta > 0.0:
            lo = max(lo, -alpha / beta)
        else:
            hi = min(hi, -alpha / beta)
        if lo >= hi:
            return False
    return min(hi, 1.0) - max(lo, 0.0) > 1e-12


def is_point_visible(eye, target, occluders, sensor_range: float) -> bool:
    """Whether target can be seen from eye.

    Requires the Euclidean distance to be within sensor_range (inclusive)
    and the open sight segment to miss every occluder interior; grazing a
    polygon boundary still counts as visible.
    """
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    if np.linalg.norm(target - eye) > sensor_range + 1e-12:
        return False
    for occ in occluders:
        if _segment_hits_polygon(eye, target, occ.vertices):
            return False
    return True


def visible_range_on_route(eye, route, from_arc: float, occluders,
                           sensor_range: float, ds: float = DEFAULT_DS) -> float:
    """Contiguously visible arc distance ahead of from_arc along the route.

    Samples centerline points every ds from from_arc; returns the distance to
    the last visible sample before the first blocked one (0 if the first
    sample is already blocked). Capped by the route end.
    """
    if ds <= 0:
        raise ValueError("ds must be positive")
    eye = np.asarray(eye, dtype=float)
    arcs = np.arange(from_arc, route.length + ds * 0.5, ds)
    arcs = np.minimum(arcs, route.length)
    visible_until = None
    for arc in arcs:
        if is_point_visible(eye, route.point_at(arc), occluders, sensor_range):
            visible_until = arc
        else:
            break
    if visible_until is None:
        return 0.0
    return float(visible_until - from_arc)


def upstream_visible_distance(eye, route, merge_arc: float, occluders,
                              sensor_range: float, ds: float = DEFAULT_DS) -> float:
    """Contiguously visible distance walking upstream from a merge arc.

    Returns the distance from the farthest visible upstream point back to the
    merge arc; 0 if the merge point itself cannot be seen. Stops at the route
    start.
    """
    if ds <= 0:
        raise ValueError("ds must be positive")
    eye = np.asarray(eye, dtype=float)
    arcs = np.arange(merge_arc, -ds * 0.5, -ds)
    arcs = np.maximum(arcs, 0.0)
    visible_until = None
    for arc in arcs:
        if is_point_visible(eye, route.point_at(arc), occluders, sensor_range):
            visible_until = arc
        else:
            break
    if visible_until is None:
        return 0.0
    return float(merge_arc - visible_until)


@dataclass
class VisibilityResult:
    """Visible ranges relevant to the current planning cycle.

    s_vis_ego is the free distance ahead on the ego route; s_vis_cross maps
    an intersecting route id to the distance between the farthest visible
    upstream point and the merge point on that route.
    """

    s_vis_ego: float
    s_vis_cross: dict = field(default_factory=dict)
    line_of_sight_arcs: dict = field(default_factory=dict)


def cross_route_visibility(world, merge, ds: float = DEFAULT_DS) -> float:
    """Distance from the farthest visible upstream point to the merge point."""
    route = world.route(merge.other_route_id)
    eye = world.vehicle_point(world.ego)
    return upstream_visible_distance(eye, route, merge.other_arc,
                                     world.occluders, world.sensor_range, ds)


def compute_visibility(world, merges=(), ds: float = DEFAULT_DS) -> VisibilityResult:
    """Evaluate ego-route and cross-route visibility for one planning cycle."""
    ego = world.ego
    ego_route = world.route(ego.route_id)
    eye = world.vehicle_point(ego)
    s_vis_ego = visible_range_on_route(eye, ego_route, ego.arc_pos.mean,
                                       world.occluders, world.sensor_range, ds)
    result = VisibilityResult(s_vis_ego=s_vis_ego)
    result.line_of_sight_arcs[ego_route.id] = ego.arc_pos.mean + s_vis_ego
    for merge in merges:
        s_cross = cross_route_visibility(world, merge, ds)
        result.s_vis_cross[merge.other_route_id] = s_cross
        result.line_of_sight_arcs[merge.other_route_id] = merge.other_arc - s_cross
    return result
