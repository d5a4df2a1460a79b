"""Closed-loop simulation: ground truth, perception, replanning and execution.

The loop advances ground truth on a fine tick, measures the environment every
env_period, and replans every plan_period. Each new plan pins the first n_pin
points of the motion already committed, so the executed trajectory stays
continuous and a plan can never alter motion earlier than one dead time after
it was started. Other vehicles follow the IDM on their routes; scripted
events can spawn vehicles or force full braking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import prediction, safety, scene, visibility
from .model import (DriverParams, Gaussian1D, VehicleState, WorldState, measure,
                    project_to_route)
from .planner import (DEFAULT_N_POINTS, PlanContext, PlannerWeights,
                      SupportTrajectory, optimize, warm_start)
from .safety import SigmaMode, StopParams


@dataclass
class SimLog:
    """Everything a run produced: per-tick rows, per-plan analysis, events."""

    rows: list = field(default_factory=list)
    pt_rows: list = field(default_factory=list)
    collisions: list = field(default_factory=list)
    crossings: list = field(default_factory=list)
    vehicle_ids: list = field(default_factory=list)
    pin_records: list = field(default_factory=list)
    max_commit_jump: float = 0.0
    summary: dict = field(default_factory=dict)


def plan_position(plan: SupportTrajectory, t: float) -> float:
    """Linear interpolation of the committed support points at time t."""
    s = (t - plan.t0) / plan.h
    k = int(math.floor(s + 1e-9))
    k = min(max(k, 0), plan.n - 2)
    frac = min(max(s - k, 0.0), 1.0)
    return float(plan.points[k] + frac * (plan.points[k + 1] - plan.points[k]))


def plan_speed(plan: SupportTrajectory, t: float) -> float:
    s = (t - plan.t0) / plan.h
    k = int(math.floor(s + 1e-9))
    k = min(max(k, 0), plan.n - 2)
    return float((plan.points[k + 1] - plan.points[k]) / plan.h)


def plan_accel(plan: SupportTrajectory, t: float) -> float:
    s = (t - plan.t0) / plan.h
    k = int(math.floor(s + 1e-9))
    k = min(max(k, 0), plan.n - 2)
    full = plan.full
    c = k + 3
    return float((full[c + 1] - 2.0 * full[c] + full[c - 1]) / plan.h ** 2)


def _lead_of(world: WorldState, veh: VehicleState, everyone) -> tuple[float, float] | None:
    """Bumper-aligned (arc, speed) of the nearest vehicle ahead on the same route."""
    best = None
    for other in everyone:
        if other is veh or other.route_id != veh.route_id:
            continue
        if other.arc_pos.mean <= veh.arc_pos.mean:
            continue
        if best is None or other.arc_pos.mean < best.arc_pos.mean:
            best = other
    if best is None:
        return None
    gap_arc = best.arc_pos.mean - 0.5 * (best.length + veh.length)
    return gap_arc, best.speed.mean


def step(world: WorldState, dt_sim: float, plan: SupportTrajectory | None = None,
         braking: frozenset = frozenset()) -> WorldState:
    """Advance ground truth by one tick.

    Other vehicles follow the IDM behind their same-route lead (the ego
    counts as a lead too); vehicles in `braking` apply full deceleration.
    The ego tracks its committed plan exactly, or keeps constant speed if
    there is none yet.
    """
    t_next = world.clock + dt_sim
    everyone = [world.ego] + [v for v, _ in world.others]
    new_others = []
    for veh, params in world.others:
        route = world.route(veh.route_id)
        v = veh.speed.mean
        if veh.vehicle_id in braking:
            a = -params.a_dec if v > 0 else 0.0
        else:
            lead = _lead_of(world, veh, everyone)
            if lead is None:
                gap, v_rel = math.inf, 0.0
            else:
                gap, v_rel = lead[0] - veh.arc_pos.mean, v - lead[1]
            a = prediction.idm_acceleration(v, gap, v_rel, params)
        arc = min(veh.arc_pos.mean + v * dt_sim, route.length)
        v_new = max(0.0, v + a * dt_sim) if arc < route.length else 0.0
        new_others.append((replace(veh,
                                   arc_pos=replace(veh.arc_pos, mean=arc),
                                   speed=replace(veh.speed, mean=v_new)), params))

    ego_route = world.route(world.ego.route_id)
    if plan is not None:
        arc = min(plan_position(plan, t_next), ego_route.length)
        v = plan_speed(plan, t_next)
    else:
        arc = min(world.ego.arc_pos.mean + world.ego.speed.mean * dt_sim, ego_route.length)
        v = world.ego.speed.mean
    ego = replace(world.ego,
                  arc_pos=replace(world.ego.arc_pos, mean=arc),
                  speed=replace(world.ego.speed, mean=max(0.0, v)))
    return replace(world, ego=ego, others=new_others, clock=t_next)


def find_static_crossings(world: WorldState, spacing: float = 0.25,
                          lateral_tol: float = 1.0) -> list:
    """Geometric crossings of the ego route with every other route."""
    ego_route = world.route(world.ego.route_id)
    out = []
    for route in world.routes:
        if route.id == ego_route.id:
            continue
        best = None
        for arc in np.arange(0.0, ego_route.length + spacing / 2, spacing):
            point = ego_route.point_at(arc)
            other_arc, lateral = project_to_route(point, route)
            if abs(lateral) <= lateral_tol and (best is None or abs(lateral) < best[2]):
                best = (float(arc), float(other_arc), abs(lateral))
        if best is not None:
            out.append({"ego_arc": best[0], "other_route_id": route.id,
                        "other_arc": best[1],
                        "point": ego_route.point_at(best[0]).tolist()})
    return out


class Simulation:
    """One deterministic closed-loop run over a scenario world."""

    def __init__(self, world: WorldState, seed: int = 0, dt_divisor: int = 10):
        self.world = world
        self.seed = seed
        cfg = world.config
        timing = world.timing
        self.dt_sim = timing.h / dt_divisor
        self.env_every = int(round(timing.env_period / self.dt_sim))
        self.plan_every = int(round(timing.plan_period / self.dt_sim))
        pl = cfg.get("planner", {})
        self.n_points = int(pl.get("n_points", DEFAULT_N_POINTS))
        self.weights = PlannerWeights(
            w_vel=pl.get("w_vel", 1.0), w_acc=pl.get("w_acc", 2.0),
            w_jerk=pl.get("w_jerk", 4.0), w_s=pl.get("w_s", 0.5),
            penalty_weight=pl.get("penalty_weight", 4000.0),
            penalty_sharpness=pl.get("penalty_sharpness", 40.0))
        sf = cfg.get("safety", {})
        self.k = float(sf.get("k", safety.DEFAULT_K))
        self.sigma_mode = SigmaMode(sf.get("sigma_mode", "first_order"))
        self.ds = float(cfg.get("visibility", {}).get("ds", visibility.DEFAULT_DS))
        sc = cfg.get("scene", {})
        self.preview_spacing = float(sc.get("preview_spacing", scene.DEFAULT_PREVIEW_SPACING))
        self.lateral_tol = float(sc.get("lateral_tol", scene.DEFAULT_LATERAL_TOL))
        pr = cfg.get("prediction", {})
        self.pred_dt = float(pr.get("dt", prediction.DEFAULT_DT))
        self.pred_horizon = float(pr.get("horizon", prediction.DEFAULT_HORIZON))
        self.events = sorted(cfg.get("events", []), key=lambda e: e["time"])
        self.plan: SupportTrajectory | None = None
        self.snapshots: list[tuple[float, WorldState]] = []
        self.released_stops: set[str] = set()
        self.braking: set[str] = set()
        self.log = SimLog()
        self.log.crossings = find_static_crossings(world, lateral_tol=self.lateral_tol)
        self._crossed: dict[str, float] = {}
        self._spawn_count = 0

    # -- pipeline ---------------------------------------------------------

    def _latest_snapshot(self, t: float) -> WorldState:
        cutoff = t - self.world.timing.t_p + 1e-9
        usable = [snap for ts, snap in self.snapshots if ts <= cutoff]
        return usable[-1] if usable else measure(self.world, self.seed)

    def _plan_cycle(self, t: float):
        world = self.world
        snapshot = self._latest_snapshot(t)
        # the planner knows its own state at plan time; others come from the
        # (possibly aged) snapshot
        planning_world = replace(snapshot, ego=world.ego, clock=t)

        vis0 = visibility.compute_visibility(planning_world, (), self.ds)
        merges = scene.find_merges(planning_world, vis0.s_vis_ego,
                                   self.preview_spacing, self.lateral_tol)
        vis = visibility.compute_visibility(planning_world, merges, self.ds)
        self._update_stop_release(planning_world, merges)
        mode = scene.select_mode(planning_world, vis, merges,
                                 frozenset(self.released_stops))
        hyp = None
        if mode.merge is not None:
            hyp = prediction.make_hypothetical(
                planning_world, mode.merge, vis,
                prediction.hypothetical_params(planning_world, mode.merge.other_route_id))
        decisions: list[str] = []
        constraints = safety.assemble_constraints(
            mode, planning_world, vis, hyp, self.n_points, self.k,
            self.sigma_mode, self.pred_horizon, self.pred_dt, decisions)

        params_e = world.ego_params
        init = warm_start(self.plan, t, world.ego.arc_pos.mean, world.ego.speed.mean,
                          params_e.a_dec, world.timing, self.n_points)
        stop = StopParams(a_dec=params_e.a_dec, sigma_x=world.ego.arc_pos.std,
                          sigma_v=world.ego.speed.std, sigma_mode=self.sigma_mode)
        lead_path = None
        if mode.kind is scene.ModeKind.FOLLOW_DRIVE:
            lead_path = self._lead_reference(mode, init)
        ctx = PlanContext(v_des=params_e.v_des, constraints=constraints, stop=stop,
                          s_min=params_e.s_min, headway=params_e.headway,
                          lead_path=lead_path)
        warm_prefix = np.concatenate([init.history, init.points[:init.n_pin]]).copy()
        plan, diag = optimize(init, constraints, self.weights, ctx)
        if self.plan is not None:
            # executed motion up to the last fully pinned interval must agree;
            # the stretch ending at t_pin interpolates toward the first point
            # released there
            span = (world.timing.n_pin - 1) * world.timing.h
            offsets = np.arange(0.0, span + 1e-9, self.dt_sim)
            jump = max(abs(plan_position(self.plan, t + off) - plan_position(plan, t + off))
                       for off in offsets)
            self.log.max_commit_jump = max(self.log.max_commit_jump, jump)
        self.plan = plan
        self.log.pin_records.append({
            "t": t,
            "warm_prefix": warm_prefix,
            "released_prefix": np.concatenate([plan.history, plan.points[:plan.n_pin]]).copy(),
        })
        self._record_plan(t, plan, constraints, stop, mode, vis, diag, decisions)
        return mode, vis, constraints, diag

    def _lead_reference(self, mode, init: SupportTrajectory) -> np.ndarray:
        """Per-index reference positions of the measured lead, bumper-aligned."""
        lead = mode.mio
        params = mode.mio_params or DriverParams()
        rollout = prediction.simulate_idm(
            (lead.arc_pos.mean, lead.speed.mean), lambda t: None, params,
            horizon=(init.n - 1) * init.h, dt=init.h)
        arcs = np.array([r[1] for r in rollout[:init.n]])
        return arcs - 0.5 * (lead.length + self.world.ego.length)

    def _update_stop_release(self, world: WorldState, merges) -> None:
        ego = world.ego
        for merge in merges:
            if merge.action is not scene.Action.STOP_THEN_GO:
                continue
            if merge.other_route_id in self.released_stops:
                continue
            near = merge.ego_arc - ego.arc_pos.mean <= (world.ego_params.s_min
                                                        + 0.5 * ego.length + 1.0)
            if near and ego.speed.mean < 0.1:
                self.released_stops.add(merge.other_route_id)

    # -- logging ----------------------------------------------------------

    def _record_plan(self, t, plan, constraints, stop, mode, vis, diag, decisions):
        from .planner import kinematics

        v, a, j = kinematics(plan)
        bounds = constraints.as_dict()
        for i in range(plan.n):
            mu = plan.points[i] + v[i] ** 2 / (2.0 * stop.a_dec)
            sigma = safety.stop_sigma(stop.sigma_x, stop.sigma_v, v[i], stop.a_dec,
                                      stop.sigma_mode, constraints.extra_var)
            bound = bounds.get(i)
            self.log.pt_rows.append({
                "plan_t": t, "index": i, "t": plan.t0 + i * plan.h,
                "x": plan.points[i], "v": v[i], "a": a[i],
                "stop_mu": mu, "stop_sigma": sigma,
                "stop_chance": mu + constraints.k * sigma,
                "bound": bound if bound is not None else math.inf,
                "slack": (bound - (mu + constraints.k * sigma)) if bound is not None else math.inf,
            })
        self._last_plan_info = {
            "mode": mode.kind.value,
            "mandatory_stop": mode.mandatory_stop,
            "s_vis_ego": vis.s_vis_ego,
            "s_vis_cross": min(vis.s_vis_cross.values()) if vis.s_vis_cross else math.nan,
            "iterations": diag.iterations, "grad_norm": diag.grad_norm,
            "max_violation": diag.max_violation, "fallback": diag.fallback,
            "decisions": "; ".join(decisions),
        }

    def _check_collisions(self) -> None:
        world = self.world
        everyone = [(world.ego, "ego")] + [(v, v.vehicle_id) for v, _ in world.others]
        t = world.clock
        for i in range(len(everyone)):
            for m in range(i + 1, len(everyone)):
                a, ida = everyone[i]
                b, idb = everyone[m]
                if a.route_id == b.route_id:
                    gap = abs(a.arc_pos.mean - b.arc_pos.mean) - 0.5 * (a.length + b.length)
                    if gap <= 0:
                        self.log.collisions.append(
                            {"t": t, "vehicles": [ida, idb], "gap": gap, "kind": "rear_end"})
        for crossing in self.log.crossings:
            mp = np.asarray(crossing["point"])
            others_there = [(v, v.vehicle_id) for v, _ in world.others
                            if v.route_id == crossing["other_route_id"]]
            p_ego = world.vehicle_point(world.ego)
            d_ego = float(np.linalg.norm(p_ego - mp))
            for veh, vid in others_there:
                radius = 0.25 * (world.ego.length + veh.length)
                d_other = float(np.linalg.norm(world.vehicle_point(veh) - mp))
                clearance = max(d_ego, d_other) - radius
                self._min_merge_clearance = min(self._min_merge_clearance, clearance)
                if clearance <= 0:
                    self.log.collisions.append(
                        {"t": t, "vehicles": ["ego", vid],
                         "gap": clearance, "kind": "merge_conflict"})

    def _log_tick(self, accel: float) -> None:
        world = self.world
        info = getattr(self, "_last_plan_info", {})
        row = {
            "t": world.clock,
            "ego_arc": world.ego.arc_pos.mean,
            "ego_speed": world.ego.speed.mean,
            "ego_accel": accel,
            "mode": info.get("mode", ""),
            "s_vis_ego": info.get("s_vis_ego", math.nan),
            "s_vis_cross": info.get("s_vis_cross", math.nan),
            "iterations": info.get("iterations", 0),
            "grad_norm": info.get("grad_norm", math.nan),
            "max_violation": info.get("max_violation", math.nan),
            "fallback_flag": info.get("fallback", False),
            "decisions": info.get("decisions", ""),
        }
        same_gap = math.inf
        for veh, _ in world.others:
            if veh.route_id == world.ego.route_id:
                gap = abs(veh.arc_pos.mean - world.ego.arc_pos.mean) \
                    - 0.5 * (veh.length + world.ego.length)
                same_gap = min(same_gap, gap)
        self._min_same_gap = min(self._min_same_gap, same_gap)
        snapshot = self.snapshots[-1][1] if self.snapshots else None
        measured = {v.vehicle_id: v for v, _ in snapshot.others} if snapshot else {}
        for vid in self.log.vehicle_ids:
            veh = next((v for v, _ in world.others if v.vehicle_id == vid), None)
            row[f"{vid}_arc"] = veh.arc_pos.mean if veh else math.nan
            row[f"{vid}_speed"] = veh.speed.mean if veh else math.nan
            m = measured.get(vid)
            row[f"{vid}_meas_arc"] = m.arc_pos.mean if m else math.nan
            row[f"{vid}_meas_speed"] = m.speed.mean if m else math.nan
        self.log.rows.append(row)

    # -- main loop --------------------------------------------------------

    def run(self, duration: float | None = None) -> SimLog:
        world = self.world
        cfg_duration = float(world.config.get("duration", 30.0))
        duration = cfg_duration if duration is None else float(duration)
        n_ticks = int(round(duration / self.dt_sim))

        ids = [v.vehicle_id for v, _ in world.others]
        for ev in self.events:
            if ev["kind"] == "spawn":
                ids.append(ev["vehicle"].get("id", f"spawn{len(ids)}"))
        self.log.vehicle_ids = ids

        self._min_same_gap = math.inf
        self._min_merge_clearance = math.inf
        event_queue = list(self.events)
        snapshot_index = 0
        fallback_count = 0
        replan_count = 0

        for tick in range(n_ticks + 1):
            t = world.timing.t0 + tick * self.dt_sim

            while event_queue and event_queue[0]["time"] <= t + 1e-9:
                self._apply_event(event_queue.pop(0))

            if tick % self.env_every == 0:
                snap = measure(self.world, self.seed * 1_000_003 + snapshot_index)
                self.snapshots.append((t, snap))
                snapshot_index += 1

            if tick % self.plan_every == 0:
                _, _, _, diag = self._plan_cycle(t)
                replan_count += 1
                if diag.fallback:
                    fallback_count += 1

            accel = plan_accel(self.plan, t) if self.plan is not None else 0.0
            self._track_merge_crossing()
            self._check_collisions()
            self._log_tick(accel)

            if tick < n_ticks:
                self.world = step(self.world, self.dt_sim, self.plan,
                                  frozenset(self.braking))

        self._finish_summary(duration, fallback_count, replan_count)
        return self.log

    def _apply_event(self, ev: dict) -> None:
        if ev["kind"] == "full_brake":
            self.braking.add(ev["vehicle"])
            return
        payload = dict(ev["vehicle"])
        payload.setdefault("id", f"spawn{self._spawn_count}")
        self._spawn_count += 1
        veh = VehicleState(
            route_id=payload["route_id"],
            arc_pos=Gaussian1D(float(payload["arc"])),
            speed=Gaussian1D(float(payload["speed"])),
            length=float(payload.get("length", 4.5)),
            width=float(payload.get("width", 1.8)),
            vehicle_id=payload["id"],
        )
        params = DriverParams(**payload.get("driver", {}))
        self.world = replace(self.world, others=self.world.others + [(veh, params)])

    def _track_merge_crossing(self) -> None:
        for crossing in self.log.crossings:
            key = crossing["other_route_id"]
            if key in self._crossed:
                continue
            if self.world.ego.arc_pos.mean >= crossing["ego_arc"]:
                self._crossed[key] = self.world.ego.speed.mean

    def _finish_summary(self, duration, fallback_count, replan_count) -> None:
        speeds = [r["ego_speed"] for r in self.log.rows]
        self.log.summary = {
            "duration": duration,
            "seed": self.seed,
            "collision_count": len(self.log.collisions),
            "collisions": self.log.collisions,
            "min_same_route_gap": self._min_same_gap,
            "min_merge_clearance": self._min_merge_clearance,
            "terminal_speed": speeds[-1] if speeds else math.nan,
            "min_speed": min(speeds) if speeds else math.nan,
            "max_speed": max(speeds) if speeds else math.nan,
            "terminal_arc": self.world.ego.arc_pos.mean,
            "fallback_count": fallback_count,
            "replan_count": replan_count,
            "max_commit_jump": self.log.max_commit_jump,
            "speed_at_merge": self._crossed,
        }


def run(world: WorldState, duration: float | None = None, seed: int = 0,
        dt_divisor: int = 10) -> SimLog:
    """Run one closed-loop simulation; deterministic per (world, seed)."""
    return Simulation(world, seed=seed, dt_divisor=dt_divisor).run(duration)
