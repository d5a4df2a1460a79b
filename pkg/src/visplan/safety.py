"""Probabilistic stop-position bounds for every planning mode.

The planner's safety interface is a set of per-support-point upper bounds on
the chance-constrained stop position mu + k*sigma. Bounds are expressed for
the vehicle reference point (its center): the assembly step shifts raw
formulas by the relevant half-lengths so bumpers, not centers, keep the
stand-still distance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from scipy.stats import norm

from .model import DriverParams, Gaussian1D, TimingModel, WorldState
from .prediction import (HypotheticalVehicle, deceleration_compliant, gap_acceptance,
                         hypothetical_params, visibility_compliant)
from .scene import ModeKind, PlanningMode
from .visibility import VisibilityResult

DEFAULT_K = 2.0


class SigmaMode(enum.Enum):
    """How speed uncertainty enters the stop-distance std.

    FIXED_FACTOR uses the flat 4*sigma_v^2 term; FIRST_ORDER propagates the
    braking-distance formula to first order, giving (v/a_dec)^2 * sigma_v^2.
    """

    FIXED_FACTOR = "paper"
    FIRST_ORDER = "first_order"


class ActiveRange(enum.Enum):
    FIRST_2NPIN = "FIRST_2NPIN"
    FULL_HORIZON = "FULL_HORIZON"


class NoReturn(enum.Enum):
    BELOW = "BELOW"
    ON = "ON"
    ABOVE = "ABOVE"


def braking_distance(v: float, a_dec: float) -> float:
    """Full-braking distance v^2 / (2 a_dec)."""
    if a_dec <= 0:
        raise ValueError("a_dec must be positive")
    if v < 0:
        raise ValueError("speed must be non-negative")
    return v * v / (2.0 * a_dec)


@dataclass(frozen=True)
class StopDistribution:
    mean: float
    std: float


@dataclass(frozen=True)
class StopParams:
    """Ego-side inputs of the chance-constrained stop point.

    sigma_x and sigma_v are the constant trajectory-tracking uncertainties;
    lead measurement variance arrives separately via ConstraintSet.extra_var.
    """

    a_dec: float
    sigma_x: float = 0.0
    sigma_v: float = 0.0
    sigma_mode: SigmaMode = SigmaMode.FIRST_ORDER


def stop_sigma(sigma_x: float, sigma_v: float, v: float, a_dec: float,
               mode: SigmaMode, extra_var: float = 0.0) -> float:
    """Std of the stop position for position/speed stds sigma_x, sigma_v."""
    if mode is SigmaMode.FIXED_FACTOR:
        var_v = 4.0 * sigma_v ** 2
    else:
        var_v = (v / a_dec) ** 2 * sigma_v ** 2
    return math.sqrt(sigma_x ** 2 + var_v + extra_var)


def stop_distribution(pos: Gaussian1D, speed: Gaussian1D, a_dec: float,
                      mode: SigmaMode = SigmaMode.FIRST_ORDER) -> StopDistribution:
    """Gaussian stop position from independent position and speed Gaussians."""
    mean = pos.mean + braking_distance(speed.mean, a_dec)
    std = stop_sigma(pos.std, speed.std, speed.mean, a_dec, mode)
    return StopDistribution(mean=mean, std=std)


def confidence_to_k(confidence: float) -> float:
    """Map a one-sided confidence level to the tightening factor k."""
    if not 0.5 <= confidence < 1.0:
        raise ValueError("confidence must be in [0.5, 1)")
    return float(norm.ppf(confidence))


@dataclass(frozen=True)
class ConstraintSet:
    """Upper bounds on the probabilistic stop position per support point.

    Each (index, bound) pair demands mu_stop_i + k * sigma_stop_i <= bound.
    extra_var carries measurement variance of a lead vehicle that folds into
    sigma_stop_i on top of the ego's own constant uncertainty.
    """

    mode: str
    bounds: tuple
    active_range: ActiveRange
    k: float
    extra_var: float = 0.0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.extra_var < 0:
            raise ValueError("extra_var must be >= 0")

    def shifted(self, delta: float) -> "ConstraintSet":
        """Same constraints with every bound moved by delta (length offsets)."""
        return replace(self, bounds=tuple((i, b + delta) for i, b in self.bounds))

    def as_dict(self) -> dict:
        return dict(self.bounds)


def _indexed(bound: float, count: int) -> tuple:
    return tuple((i, bound) for i in range(count))


def free_drive_bounds(x0: float, s_vis: float, s_min: float,
                      timing: TimingModel, k: float = DEFAULT_K) -> ConstraintSet:
    """Worst case of free driving: standing traffic just past the visible range.

    The stop point must stay s_min short of the end of the visible range for
    the first 2 * n_pin support points.
    """
    if s_vis < 0:
        raise ValueError("s_vis must be >= 0")
    bound = x0 + s_vis - s_min
    return ConstraintSet(mode="free_drive", bounds=_indexed(bound, 2 * timing.n_pin),
                         active_range=ActiveRange.FIRST_2NPIN, k=k)


def follow_drive_bounds(lead_pos_meas: Gaussian1D, lead_speed_meas: Gaussian1D,
                        a_dec: float, s_min: float, timing: TimingModel,
                        k: float = DEFAULT_K,
                        sigma_mode: SigmaMode = SigmaMode.FIRST_ORDER) -> ConstraintSet:
    """Worst case of following: the lead full-brakes right after being measured.

    The bound is the lead's stop position minus s_min; its measurement
    variance is folded into the per-point sigma via extra_var.
    """
    bound = lead_pos_meas.mean - s_min + braking_distance(lead_speed_meas.mean, a_dec)
    if sigma_mode is SigmaMode.FIXED_FACTOR:
        extra = lead_pos_meas.std ** 2 + 4.0 * lead_speed_meas.std ** 2
    else:
        extra = lead_pos_meas.std ** 2 + (lead_speed_meas.mean / a_dec) ** 2 * lead_speed_meas.std ** 2
    return ConstraintSet(mode="follow_drive", bounds=_indexed(bound, 2 * timing.n_pin),
                         active_range=ActiveRange.FIRST_2NPIN, k=k, extra_var=extra)


def intersection_stop_bounds(x_mp: float, s_min: float, timing: TimingModel,
                             k: float = DEFAULT_K,
                             active_range: ActiveRange = ActiveRange.FULL_HORIZON,
                             n_points: int | None = None) -> ConstraintSet:
    """Stop bound ahead of a merge point.

    Give-way maneuvers keep it for the entire horizon (n_points indices);
    right-of-way only needs the first 2 * n_pin points, the stretch no newer
    plan can influence.
    """
    bound = x_mp - s_min
    if active_range is ActiveRange.FULL_HORIZON:
        if n_points is None:
            raise ValueError("FULL_HORIZON bounds need n_points")
        count = n_points
    else:
        count = 2 * timing.n_pin
    return ConstraintSet(mode="intersection_stop", bounds=_indexed(bound, count),
                         active_range=active_range, k=k)


def merge_constraint_sets(sets, n_pin: int) -> ConstraintSet:
    """Elementwise-minimum composition of several constraint sets.

    The merged extra_var is the maximum over the sources, which can only
    tighten the chance constraint (never loosen it).
    """
    sets = [s for s in sets if s is not None]
    if not sets:
        raise ValueError("nothing to merge")
    if len({s.k for s in sets}) > 1:
        raise ValueError("cannot merge constraint sets with different k")
    merged: dict[int, float] = {}
    for s in sets:
        for i, b in s.bounds:
            merged[i] = min(merged.get(i, math.inf), b)
    active = (ActiveRange.FULL_HORIZON
              if any(s.active_range is ActiveRange.FULL_HORIZON for s in sets)
              else ActiveRange.FIRST_2NPIN)
    return ConstraintSet(
        mode="+".join(dict.fromkeys(s.mode for s in sets)),
        bounds=tuple(sorted(merged.items())),
        active_range=active,
        k=sets[0].k,
        extra_var=max(s.extra_var for s in sets),
    )


def surface_of_no_return(x: float, v: float, x_mp: float, s_min: float,
                         a_dec: float) -> NoReturn:
    """Classify a (position, speed) state against the last-chance braking surface.

    Below the surface the vehicle can still come to a full stop s_min before
    the merge point; above it cannot.
    """
    v_crit = math.sqrt(2.0 * a_dec * max(0.0, x_mp - s_min - x))
    eps = 1e-9 * max(1.0, v_crit)
    if v < v_crit - eps:
        return NoReturn.BELOW
    if v <= v_crit + eps:
        return NoReturn.ON
    return NoReturn.ABOVE


def _nearest_follower(world: WorldState, route_id: str, arc: float):
    """Nearest detected vehicle upstream of arc on the given route."""
    best = None
    best_params = None
    for veh, params in world.others:
        if veh.route_id != route_id or veh.arc_pos.mean >= arc:
            continue
        if best is None or veh.arc_pos.mean > best.arc_pos.mean:
            best, best_params = veh, params
    return best, best_params


def assemble_constraints(mode: PlanningMode, world: WorldState, vis: VisibilityResult,
                         hyp: HypotheticalVehicle | None, n_points: int,
                         k: float = DEFAULT_K,
                         sigma_mode: SigmaMode = SigmaMode.FIRST_ORDER,
                         horizon: float = 10.0, dt: float = 0.05,
                         decisions: list | None = None) -> ConstraintSet:
    """Build the bound set for the current mode.

    The ego-route visibility bound is always active; mode-specific bounds are
    composed with it index-wise. The give-way ladder tries to enter ahead of
    the MIO, then behind it, before falling back to a full-horizon stop; the
    right-of-way check stops only for uncompliant (hidden or observed)
    crossing traffic.
    """
    ego = world.ego
    params_e = world.ego_params
    timing = world.timing
    s_min = params_e.s_min
    half_ego = 0.5 * ego.length

    def note(msg):
        if decisions is not None:
            decisions.append(msg)

    sets = [free_drive_bounds(ego.arc_pos.mean, vis.s_vis_ego, s_min, timing, k)
            .shifted(-half_ego)]

    if mode.kind is ModeKind.FOLLOW_DRIVE:
        lead = mode.mio
        lead_params = mode.mio_params or DriverParams()
        pos = Gaussian1D(lead.arc_pos.mean - half_ego - 0.5 * lead.length,
                         lead.arc_pos.std)
        sets.append(follow_drive_bounds(pos, lead.speed, lead_params.a_dec,
                                        s_min, timing, k, sigma_mode))
        note("follow: worst-case lead full braking")

    elif mode.kind is ModeKind.INTERSECTION_GIVE_WAY:
        merge = mode.merge
        stop = intersection_stop_bounds(merge.ego_arc, s_min, timing, k,
                                        ActiveRange.FULL_HORIZON, n_points
                                        ).shifted(-half_ego)
        if mode.mandatory_stop:
            sets.append(stop)
            note("give-way: mandatory stop (stop sign not yet released)")
        else:
            mio = mode.mio if mode.mio is not None else hyp
            params_mio = (mode.mio_params if mode.mio is not None
                          else hypothetical_params(world, merge.other_route_id))
            gamma = params_e.politeness
            if gap_acceptance(ego, mio, merge, params_mio, gamma, horizon, dt):
                note("give-way: gap accepted, free treatment")
            elif mode.mio is not None:
                follower, follower_params = _nearest_follower(
                    world, merge.other_route_id, mode.mio.arc_pos.mean)
                if follower is None:
                    follower = hyp
                    follower_params = hypothetical_params(world, merge.other_route_id)
                if follower is not None and gap_acceptance(
                        ego, follower, merge, follower_params, gamma, horizon, dt):
                    virt_arc = merge.ego_arc + (mode.mio.arc_pos.mean - merge.other_arc)
                    pos = Gaussian1D(virt_arc - half_ego - 0.5 * mode.mio.length,
                                     mode.mio.arc_pos.std)
                    sets.append(follow_drive_bounds(pos, mode.mio.speed,
                                                    params_mio.a_dec, s_min,
                                                    timing, k, sigma_mode))
                    note("give-way: merging behind MIO, follow treatment")
                else:
                    sets.append(stop)
                    note("give-way: no acceptable gap, stop before merge")
            else:
                sets.append(stop)
                note("give-way: hypothetical vehicle too close, stop before merge")

    elif mode.kind is ModeKind.INTERSECTION_RIGHT_OF_WAY:
        merge = mode.merge
        vis_cross = vis.s_vis_cross.get(merge.other_route_id, 0.0)
        vis_ok = hyp is not None and visibility_compliant(vis_cross, hyp, timing.t_d)
        if mode.mio is not None:
            decel_ok = deceleration_compliant(mode.mio, ego, merge,
                                              mode.mio_params, horizon, dt)
        else:
            decel_ok = True
        if not (vis_ok and decel_ok):
            sets.append(intersection_stop_bounds(merge.ego_arc, s_min, timing, k,
                                                 ActiveRange.FIRST_2NPIN
                                                 ).shifted(-half_ego))
            note(f"right-of-way: uncompliant traffic (visibility ok={vis_ok}, "
                 f"deceleration ok={decel_ok}), keep stop option")
        else:
            note("right-of-way: crossing traffic compliant, free treatment")

    return merge_constraint_sets(sets, timing.n_pin)
