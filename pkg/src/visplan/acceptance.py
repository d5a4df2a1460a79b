"""End-to-end verification suite: one callable check per acceptance criterion.

Each criterion returns (passed, detail) and carries a wall-clock budget; the
CLI `check` subcommand and the test suite both run this registry. Checks use
the packaged scenario files, independent brute-force oracles (Monte Carlo,
dense ray casting, forward integration, finite differences) and fixed seeds.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import numpy as np

from .model import DriverParams, Gaussian1D, OccluderPolygon, RouteGeometry, TimingModel
from .planner import (PlanContext, PlannerWeights, SupportTrajectory,
                      objective, objective_gradient)
from .prediction import idm_acceleration, simulate_idm
from .safety import (SigmaMode, StopParams, NoReturn, free_drive_bounds,
                     follow_drive_bounds, stop_distribution, surface_of_no_return)
from .scenario import apply_overrides, build_world
from .simloop import run
from .visibility import visible_range_on_route


def scenario_path(name: str):
    return resources.files("visplan") / "scenarios" / name


def load_packaged(name: str, overrides=()):
    import json
    data = json.loads(scenario_path(name).read_text())
    if overrides:
        data = apply_overrides(data, overrides)
    return build_world(data)


# -- criterion implementations ---------------------------------------------

def check_limited_visibility_cruise():
    world = load_packaged("free_drive_limited.json")
    v_des = world.ego_params.v_des
    log = run(world, seed=0)
    s = log.summary
    tail = [r["ego_speed"] for r in log.rows if r["t"] >= s["duration"] - 3.0]
    v_star = s["terminal_speed"]
    steady = max(tail) - min(tail)
    last_t = log.pt_rows[-1]["plan_t"]
    bounded = [r for r in log.pt_rows
               if r["plan_t"] == last_t and math.isfinite(r["bound"])]
    slack = min(r["slack"] for r in bounded)
    ok = (v_star < v_des - 1e-6 and steady < 0.05 and 0.0 <= slack <= 0.1
          and s["collision_count"] == 0)
    return ok, (f"cruise {v_star:.3f} m/s vs desired {v_des} (steady band "
                f"{steady:.4f}), binding slack {slack:.4f} m")


def check_sensor_range_monotonicity():
    speeds = []
    for sensor in (30.0, 50.0, 70.0, 90.0, 110.0):
        world = load_packaged("give_way.json", [f"sensor_range={sensor}"])
        log = run(world, seed=0)
        s = log.summary
        if s["collision_count"]:
            return False, f"collision at sensor range {sensor}"
        v_mp = s["speed_at_merge"].get("cross_road")
        if v_mp is None:
            return False, f"ego never crossed the merge at sensor range {sensor}"
        speeds.append(v_mp)
    monotone = all(b >= a - 0.05 for a, b in zip(speeds, speeds[1:]))
    return monotone, "speed at merge point: " + ", ".join(f"{v:.2f}" for v in speeds)


ADVERSARIAL = ("adversarial_parked.json", "adversarial_lead_brake.json",
               "adversarial_spawn.json", "right_of_way_uncompliant.json")


def _min_gap(summary) -> float:
    return min(summary["min_same_route_gap"], summary["min_merge_clearance"])


def check_adversarial_no_collision():
    details = []
    ok = True
    for name in ADVERSARIAL:
        world = load_packaged(name)
        log = run(world, seed=0)
        s = log.summary
        gap = _min_gap(s)
        if s["collision_count"] or not gap > 0:
            ok = False
        if name == "right_of_way_uncompliant.json":
            fired = any("deceleration ok=False" in r["decisions"] for r in log.rows)
            ok = ok and fired
            details.append(f"{name}: gap {gap:.2f} m, decel check fired={fired}")
        else:
            details.append(f"{name}: gap {gap:.2f} m")
    return ok, "; ".join(details)


def _noisy_run(args):
    name, seed = args
    world = load_packaged(name, ["noise.sigma_pos=0.3", "noise.sigma_speed=0.2",
                                 "safety.k=3.0"])
    s = run(world, seed=seed).summary
    return name, seed, s["collision_count"], _min_gap(s)


def check_noisy_no_collision(seeds: int = 20, workers: int | None = None):
    jobs = [(name, seed) for name in ADVERSARIAL for seed in range(seeds)]
    worst = math.inf
    collisions = 0
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for name, seed, coll, gap in pool.map(_noisy_run, jobs, chunksize=4):
            collisions += coll
            worst = min(worst, gap)
    ok = collisions == 0 and worst > 0
    return ok, f"{len(jobs)} runs, collisions={collisions}, worst gap {worst:.2f} m"


def _random_context(rng: np.random.Generator):
    """A random trajectory plus mode context covering every objective term."""
    timing = TimingModel(h=0.25, n_pin=3, env_period=0.5, plan_period=0.75)
    n = 40
    v0 = rng.uniform(0.0, 14.0)
    x0 = rng.uniform(0.0, 50.0)
    steps = rng.uniform(0.0, 4.0, n - 1)
    pts = x0 + np.concatenate([[0.0], np.cumsum(steps)])
    hist = x0 - 0.25 * v0 * np.array([3.0, 2.0, 1.0])
    traj = SupportTrajectory(0.0, 0.25, hist, pts, 3)
    sigma_mode = SigmaMode.FIXED_FACTOR if rng.random() < 0.5 else SigmaMode.FIRST_ORDER
    stop = StopParams(a_dec=rng.uniform(4.0, 9.0), sigma_x=rng.uniform(0.0, 0.5),
                      sigma_v=rng.uniform(0.0, 0.3), sigma_mode=sigma_mode)
    kind = rng.integers(0, 3)
    k = rng.uniform(0.0, 3.0)
    if kind == 0:
        cs = free_drive_bounds(x0, rng.uniform(10.0, 60.0), 2.0, timing, k)
        lead_path = None
    elif kind == 1:
        lead = Gaussian1D(x0 + rng.uniform(20.0, 60.0), rng.uniform(0.0, 0.4))
        lead_v = Gaussian1D(rng.uniform(0.0, 10.0), rng.uniform(0.0, 0.3))
        cs = follow_drive_bounds(lead, lead_v, 8.0, 2.0, timing, k, sigma_mode)
        lead_path = lead.mean + lead_v.mean * 0.25 * np.arange(n) - 4.5
    else:
        from .safety import ActiveRange, intersection_stop_bounds
        cs = intersection_stop_bounds(x0 + rng.uniform(20.0, 80.0), 2.0, timing, k,
                                      ActiveRange.FULL_HORIZON, n)
        lead_path = None
    ctx = PlanContext(v_des=rng.uniform(5.0, 14.0), constraints=cs, stop=stop,
                      lead_path=lead_path)
    return traj, ctx


def check_gradient_correctness(n_cases: int = 20):
    rng = np.random.default_rng(42)
    weights = PlannerWeights()
    worst = 0.0
    for _ in range(n_cases):
        traj, ctx = _random_context(rng)
        grad = objective_gradient(traj, weights, ctx)
        free = traj.points[traj.n_pin:]
        fd = np.zeros_like(grad)
        for i in range(len(free)):
            h_fd = 1e-6 * max(1.0, abs(free[i]))
            for sign in (1.0, -1.0):
                pts = traj.points.copy()
                pts[traj.n_pin + i] += sign * h_fd
                t2 = SupportTrajectory(traj.t0, traj.h, traj.history, pts, traj.n_pin)
                fd[i] += sign * objective(t2, weights, ctx)
            fd[i] /= 2.0 * h_fd
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    return worst <= 1e-5, f"worst relative gradient error {worst:.2e} over {n_cases} cases"


def check_variance_propagation():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        v = rng.uniform(3.0, 20.0)
        a_dec = rng.uniform(3.0, 9.0)
        sigma_x = rng.uniform(0.0, 1.0)
        sigma_v = rng.uniform(0.01, 0.1) * v
        dist = stop_distribution(Gaussian1D(0.0, sigma_x), Gaussian1D(v, sigma_v),
                                 a_dec, SigmaMode.FIRST_ORDER)
        samples = (rng.normal(0.0, sigma_x, 1_000_000)
                   + rng.normal(v, sigma_v, 1_000_000) ** 2 / (2 * a_dec))
        rel = abs(dist.std - samples.std()) / samples.std()
        worst = max(worst, rel)
    exact_err = 0.0
    for _ in range(20):
        sx, sv = rng.uniform(0.0, 3.0, 2)
        v = rng.uniform(0.0, 20.0)
        d = stop_distribution(Gaussian1D(0.0, sx), Gaussian1D(v, sv), 8.0,
                              SigmaMode.FIXED_FACTOR)
        exact_err = max(exact_err, abs(d.std - math.sqrt(sx ** 2 + 4 * sv ** 2)))
        follow = follow_drive_bounds(Gaussian1D(30.0, sx), Gaussian1D(v, sv), 8.0, 2.0,
                                     TimingModel(), 2.0, SigmaMode.FIXED_FACTOR)
        exact_err = max(exact_err, abs(follow.extra_var - (sx ** 2 + 4 * sv ** 2)))
    ok = worst <= 0.03 and exact_err <= 1e-12
    return ok, f"first-order vs Monte Carlo worst {worst:.4f}, exact-formula error {exact_err:.1e}"


def check_pinning_commitment():
    world = load_packaged("free_drive_limited.json", ["duration=16.0"])
    log = run(world, seed=0)
    n_plans = len(log.pin_records)
    if n_plans < 20:
        return False, f"only {n_plans} replans recorded"
    exact = all(np.array_equal(rec["warm_prefix"], rec["released_prefix"])
                for rec in log.pin_records)
    jump = log.max_commit_jump
    ok = exact and jump < 1e-9
    return ok, (f"{n_plans} replans, prefixes bitwise-equal={exact}, "
                f"max commit jump {jump:.2e} m")


def check_visibility_oracle(n_scenes: int = 100):
    rng = np.random.default_rng(3)
    ds = 0.5
    worst = 0.0
    for _ in range(n_scenes):
        route = RouteGeometry("r", [[0.0, 0.0], [120.0, 0.0]], 10.0)
        occluders = []
        for _ in range(rng.integers(1, 4)):
            cx = rng.uniform(5.0, 100.0)
            cy = rng.uniform(-12.0, 12.0)
            if abs(cy) < 1.5:
                cy = math.copysign(1.5, cy if cy != 0 else 1.0)
            w = rng.uniform(2.0, 10.0)
            angles = np.sort(rng.uniform(0.0, 2 * math.pi, rng.integers(3, 8)))
            if len(angles) < 3 or np.min(np.diff(angles)) < 0.05:
                angles = np.linspace(0.0, 2 * math.pi, 5, endpoint=False)
            poly = np.c_[cx + w * np.cos(angles), cy + w * np.sin(angles)]
            try:
                occluders.append(OccluderPolygon(poly))
            except Exception:
                continue
        eye = np.array([rng.uniform(-5.0, 5.0), rng.uniform(-3.0, 3.0)])
        sensor = rng.uniform(30.0, 120.0)
        fast = visible_range_on_route(eye, route, 0.0, occluders, sensor, ds)
        fine = visible_range_on_route(eye, route, 0.0, occluders, sensor, ds / 10.0)
        worst = max(worst, abs(fast - fine))
    return worst <= ds, f"worst deviation from ds/10 ray-cast oracle: {worst:.3f} m (ds={ds})"


def check_surface_of_no_return(n_points: int = 1000):
    rng = np.random.default_rng(11)
    a_dec, s_min, x_mp = 8.0, 2.0, 100.0
    disagreements = 0
    for _ in range(n_points):
        x = rng.uniform(0.0, 110.0)
        v = rng.uniform(0.0, 25.0)
        analytic = surface_of_no_return(x, v, x_mp, s_min, a_dec)
        # midpoint-rule full-braking integration
        dt = 1e-3
        xx, vv = x, v
        while vv > 0.0:
            v_next = max(0.0, vv - a_dec * dt)
            xx += 0.5 * (vv + v_next) * dt
            vv = v_next
        oracle = NoReturn.BELOW if xx < x_mp - s_min else NoReturn.ABOVE
        if analytic is not NoReturn.ON and analytic is not oracle:
            disagreements += 1
    return disagreements == 0, f"{disagreements} disagreements on {n_points} random states"


def check_idm_equilibria():
    params = DriverParams(v_des=13.89)
    spot = idm_acceleration(params.v_des / 2.0, math.inf, 0.0, params)
    spot_err = abs(spot - 0.9375 * params.a_acc)
    horizon = 10.0 * params.v_des / params.a_acc
    free = simulate_idm((0.0, 0.0), lambda t: None, params, horizon=horizon, dt=0.05)
    v_end = free[-1][2]
    free_err = abs(v_end - params.v_des) / params.v_des
    lead_v = 5.0
    follow = simulate_idm((0.0, 10.0), lambda t: (200.0 + lead_v * t, lead_v),
                          params, horizon=120.0, dt=0.05)
    _, arc, v, _ = follow[-1]
    gap = 200.0 + lead_v * 120.0 - arc
    gap_err = abs(gap - (params.s_min + v * params.headway)) / (params.s_min + v * params.headway)
    ok = spot_err <= 1e-12 and free_err <= 0.01 and gap_err <= 0.02
    return ok, (f"spot error {spot_err:.1e}, free-road speed error {free_err:.4f}, "
                f"follow gap error {gap_err:.4f}")


CRITERIA = [
    ("limited-visibility cruise", 10.0, check_limited_visibility_cruise),
    ("sensor-range monotonicity", 60.0, check_sensor_range_monotonicity),
    ("adversarial no-collision", 30.0, check_adversarial_no_collision),
    ("noisy no-collision", 180.0, check_noisy_no_collision),
    ("gradient correctness", 5.0, check_gradient_correctness),
    ("variance propagation", 10.0, check_variance_propagation),
    ("pinning and commitment", math.inf, check_pinning_commitment),
    ("visibility oracle", 10.0, check_visibility_oracle),
    ("surface of no return", 5.0, check_surface_of_no_return),
    ("IDM equilibria", math.inf, check_idm_equilibria),
]


def run_all(emit=print) -> bool:
    all_ok = True
    for name, budget, fn in CRITERIA:
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - start
        in_budget = elapsed <= budget
        ok = ok and in_budget
        all_ok = all_ok and ok
        status = "PASS" if ok else "FAIL"
        emit(f"[{status}] {name}: {detail} ({elapsed:.1f}s"
             + ("" if in_budget else f", over {budget:.0f}s budget") + ")")
    return all_ok
