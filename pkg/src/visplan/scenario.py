"""Scenario files: a self-contained JSON description of one simulation world.

A scenario holds routes (polylines with speed limits and rule tags), convex
occluder polygons, the ego and other vehicles with driver parameters, sensor
range, the replanning timing model, optional measurement noise and scripted
events, plus planner/safety configuration. Serialization is canonical
(sorted keys, fixed indent), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .model import (DriverParams, Gaussian1D, OccluderPolygon, RouteGeometry,
                    RuleTag, TimingModel, ValidationError, VehicleState, WorldState)


class ScenarioError(ValidationError):
    """Scenario file is malformed or violates an invariant."""


REQUIRED_SECTIONS = ("routes", "occluders", "ego", "others", "sensor_range",
                     "timing", "planner")

DEFAULTS = {
    "noise": {"sigma_pos": 0.0, "sigma_speed": 0.0,
              "ego_sigma_pos": 0.0, "ego_sigma_speed": 0.0},
    "planner": {"n_points": 40, "w_vel": 1.0, "w_acc": 2.0, "w_jerk": 4.0,
                "w_s": 0.5, "penalty_weight": 4000.0, "penalty_sharpness": 40.0},
    "safety": {"k": 2.0, "sigma_mode": "first_order"},
    "visibility": {"ds": 0.5},
    "scene": {"lateral_tol": 1.0, "preview_spacing": 2.0},
    "prediction": {"dt": 0.05, "horizon": 10.0},
    "hypothetical": {"a_acc": 1.5, "a_cft": 2.0, "a_dec": 8.0,
                     "s_min": 2.0, "headway": 1.5},
    "events": [],
    "duration": 30.0,
}

DRIVER_KEYS = ("a_acc", "a_cft", "a_dec", "s_min", "headway", "v_des", "politeness")


def merge_defaults(data: dict) -> dict:
    """Fill optional sections and leaves; move a planner-level k to safety.k."""
    out = copy.deepcopy(data)
    for section in REQUIRED_SECTIONS:
        if section not in out:
            raise ScenarioError(f"missing mandatory scenario key '{section}'")
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            merged = dict(default)
            merged.update(out.get(key, {}))
            out[key] = merged
        else:
            out.setdefault(key, copy.deepcopy(default))
    if "k" in out["planner"]:
        if "safety" not in data or "k" not in data.get("safety", {}):
            out["safety"]["k"] = out["planner"]["k"]
        del out["planner"]["k"]
    if "t_p" not in out["timing"]:
        out["timing"]["t_p"] = 0.0
    out["timing"].setdefault("t0", 0.0)
    return out


def _driver(d: dict, who: str) -> DriverParams:
    unknown = set(d) - set(DRIVER_KEYS)
    if unknown:
        raise ScenarioError(f"{who}: unknown driver keys {sorted(unknown)}")
    try:
        return DriverParams(**d)
    except ValidationError as e:
        raise ScenarioError(f"{who}: {e}") from e


def _vehicle(d: dict, who: str, noise: dict, is_ego: bool) -> tuple[VehicleState, DriverParams]:
    for key in ("route_id", "arc", "speed", "driver"):
        if key not in d:
            raise ScenarioError(f"{who}: missing key '{key}'")
    sigma_pos = noise["ego_sigma_pos"] if is_ego else 0.0
    sigma_speed = noise["ego_sigma_speed"] if is_ego else 0.0
    state = VehicleState(
        route_id=d["route_id"],
        arc_pos=Gaussian1D(float(d["arc"]), sigma_pos),
        speed=Gaussian1D(float(d["speed"]), sigma_speed),
        length=float(d.get("length", 4.5)),
        width=float(d.get("width", 1.8)),
        vehicle_id=d.get("id", who),
    )
    return state, _driver(d["driver"], who)


def _route(d: dict) -> RouteGeometry:
    for key in ("id", "centerline", "speed_limit", "tags"):
        if key not in d:
            raise ScenarioError(f"route {d.get('id', '?')!r}: missing key '{key}'")
    tags = []
    for t in d["tags"]:
        tags.append(RuleTag(begin=float(t["begin"]), end=float(t["end"]),
                            tag=t["tag"], value=t.get("value")))
    return RouteGeometry(d["id"], d["centerline"], float(d["speed_limit"]), tags)


def build_world(data: dict) -> WorldState:
    """Validate a merged scenario dictionary into a WorldState."""
    cfg = merge_defaults(data)
    noise = cfg["noise"]
    routes = [_route(r) for r in cfg["routes"]]
    occluders = []
    for i, poly in enumerate(cfg["occluders"]):
        try:
            occluders.append(OccluderPolygon(poly))
        except ValidationError as e:
            raise ScenarioError(f"occluder {i}: {e}") from e
    ego, ego_params = _vehicle(cfg["ego"], "ego", noise, is_ego=True)
    others = [_vehicle(o, f"other{i}", noise, is_ego=False)
              for i, o in enumerate(cfg["others"])]
    try:
        timing = TimingModel(**cfg["timing"])
    except TypeError as e:
        raise ScenarioError(f"timing: {e}") from e
    world = WorldState(
        ego=ego,
        ego_params=ego_params,
        others=others,
        occluders=occluders,
        routes=routes,
        sensor_range=float(cfg["sensor_range"]),
        timing=timing,
        sigma_meas_pos=float(noise["sigma_pos"]),
        sigma_meas_speed=float(noise["sigma_speed"]),
        config=cfg,
    )
    _validate_events(world)
    return world


def _validate_events(world: WorldState) -> None:
    ids = {veh.vehicle_id for veh, _ in world.others}
    route_ids = {r.id for r in world.routes}
    for i, ev in enumerate(world.config["events"]):
        kind = ev.get("kind")
        if kind not in ("spawn", "full_brake"):
            raise ScenarioError(f"event {i}: unknown kind {kind!r}")
        if "time" not in ev:
            raise ScenarioError(f"event {i}: missing time")
        if kind == "full_brake":
            if ev.get("vehicle") not in ids:
                raise ScenarioError(f"event {i}: unknown vehicle {ev.get('vehicle')!r}")
        else:
            veh = ev.get("vehicle", {})
            if veh.get("route_id") not in route_ids:
                raise ScenarioError(f"event {i}: spawn on unknown route "
                                    f"{veh.get('route_id')!r}")


def load_scenario(path) -> WorldState:
    """Load and validate a scenario file."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"cannot parse {path}: {e}") from e
    return build_world(data)


def scenario_dict(world: WorldState) -> dict:
    """Canonical dictionary form of a world (inverse of build_world)."""
    cfg = copy.deepcopy(world.config)
    cfg["routes"] = [
        {"id": r.id,
         "centerline": [[float(x), float(y)] for x, y in r.centerline],
         "speed_limit": r.speed_limit,
         "tags": [{"begin": t.begin, "end": t.end, "tag": t.tag,
                   **({"value": t.value} if t.value is not None else {})}
                  for t in r.tags]}
        for r in world.routes
    ]
    cfg["occluders"] = [[[float(x), float(y)] for x, y in o.vertices]
                        for o in world.occluders]

    def vehicle_dict(veh: VehicleState, params: DriverParams) -> dict:
        return {"route_id": veh.route_id, "arc": veh.arc_pos.mean,
                "speed": veh.speed.mean, "length": veh.length, "width": veh.width,
                "id": veh.vehicle_id,
                "driver": {k: getattr(params, k) for k in DRIVER_KEYS}}

    cfg["ego"] = vehicle_dict(world.ego, world.ego_params)
    cfg["others"] = [vehicle_dict(v, p) for v, p in world.others]
    cfg["sensor_range"] = world.sensor_range
    cfg["timing"] = {"h": world.timing.h, "n_pin": world.timing.n_pin,
                     "t0": world.timing.t0, "env_period": world.timing.env_period,
                     "plan_period": world.timing.plan_period, "t_p": world.timing.t_p}
    cfg["noise"] = {"sigma_pos": world.sigma_meas_pos,
                    "sigma_speed": world.sigma_meas_speed,
                    "ego_sigma_pos": world.ego.arc_pos.std,
                    "ego_sigma_speed": world.ego.speed.std}
    return cfg


def dumps_canonical(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def save_scenario(world: WorldState, path) -> None:
    Path(path).write_text(dumps_canonical(scenario_dict(world)))


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted-path overrides ("safety.k=3") onto a scenario dictionary.

    The path must exist in the merged configuration; values parse as JSON
    literals, falling back to plain strings. Last assignment wins.
    """
    merged = merge_defaults(data)
    out = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        probe = merged
        for part in path:
            if not isinstance(probe, dict) or part not in probe:
                raise ScenarioError(f"unknown config key {key.strip()!r}")
            probe = probe[part]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return out
