import math

import numpy as np
import pytest

from visplan.model import TimingModel
from visplan.planner import (PlanContext, PlannerWeights, SupportTrajectory,
                             kinematics, objective, objective_gradient, optimize,
                             penalty, sustainable_speed, warm_start)
from visplan.safety import (ActiveRange, ConstraintSet, StopParams,
                            free_drive_bounds, intersection_stop_bounds)

TIMING = TimingModel(h=0.25, n_pin=3, env_period=0.5, plan_period=0.75)
H = 0.25


def cruise_trajectory(v=10.0, n=40, x0=0.0):
    pts = x0 + v * H * np.arange(n)
    hist = x0 - v * H * np.array([3.0, 2.0, 1.0])
    return SupportTrajectory(0.0, H, hist, pts, 3)


class TestKinematics:
    def test_constant_points_zero_derivatives(self):
        traj = SupportTrajectory(0.0, H, np.full(3, 7.0), np.full(10, 7.0), 3)
        v, a, j = kinematics(traj)
        assert np.allclose(v, 0) and np.allclose(a, 0) and np.allclose(j, 0)

    def test_quadratic_gives_exact_acceleration(self):
        c = 1.7
        t_pts = H * np.arange(12)
        t_hist = H * np.array([-3.0, -2.0, -1.0])
        traj = SupportTrajectory(0.0, H, 0.5 * c * t_hist ** 2, 0.5 * c * t_pts ** 2, 3)
        _, a, j = kinematics(traj)
        assert np.allclose(a, c, atol=1e-9)
        assert np.allclose(j, 0.0, atol=1e-8)

    def test_linear_ramp(self):
        traj = cruise_trajectory(v=6.0, n=12)
        v, a, _ = kinematics(traj)
        assert np.allclose(v, 6.0)
        assert np.allclose(a, 0.0, atol=1e-9)


class TestObjective:
    def ctx(self, constraints=None, v_des=10.0, lead_path=None):
        return PlanContext(v_des=v_des, constraints=constraints,
                           stop=StopParams(a_dec=8.0), lead_path=lead_path)

    def test_perfect_cruise_costs_nothing(self):
        traj = cruise_trajectory(v=10.0)
        assert objective(traj, PlannerWeights(), self.ctx()) == pytest.approx(0.0, abs=1e-15)

    def test_follow_term_zero_when_tracking_desired_gap(self):
        traj = cruise_trajectory(v=10.0)
        v, _, _ = kinematics(traj)
        desired_gap = 2.0 + v * 1.5
        lead_path = traj.points + desired_gap
        w = PlannerWeights()
        ctx = self.ctx(lead_path=lead_path)
        assert objective(traj, w, ctx) == pytest.approx(0.0, abs=1e-12)

    def test_bound_violation_costs_smoothly(self):
        traj = cruise_trajectory(v=10.0)
        tight = ConstraintSet("test", ((5, traj.points[5]),), ActiveRange.FIRST_2NPIN, 0.0)
        w = PlannerWeights()
        val = objective(traj, w, self.ctx(constraints=tight))
        assert val > 0.0


class TestPenalty:
    def test_deep_feasible_is_negligible(self):
        traj = cruise_trajectory(v=10.0)
        v, _, _ = kinematics(traj)
        mu = traj.points + v ** 2 / 16.0
        cs = ConstraintSet("t", tuple((i, mu[i] + 1.0) for i in range(6)),
                           ActiveRange.FIRST_2NPIN, 0.0)
        w = PlannerWeights(penalty_weight=1000.0, penalty_sharpness=10.0)
        got = penalty(traj, cs, StopParams(a_dec=8.0), w)
        assert got < 1e-3 * w.penalty_weight

    def test_zero_violation_softplus_value(self):
        traj = cruise_trajectory(v=10.0)
        v, _, _ = kinematics(traj)
        mu0 = traj.points[0] + v[0] ** 2 / 16.0
        cs = ConstraintSet("t", ((0, mu0),), ActiveRange.FIRST_2NPIN, 0.0)
        w = PlannerWeights(penalty_weight=1000.0, penalty_sharpness=10.0)
        got = penalty(traj, cs, StopParams(a_dec=8.0), w)
        expected = 1000.0 * (math.log(2.0) / 10.0) ** 2
        assert got == pytest.approx(expected, rel=1e-9)

    def test_penalty_scales_linearly_with_weight(self):
        traj = cruise_trajectory(v=10.0)
        cs = ConstraintSet("t", ((4, traj.points[4]),), ActiveRange.FIRST_2NPIN, 0.0)
        w1 = PlannerWeights(penalty_weight=500.0, penalty_sharpness=10.0)
        w2 = PlannerWeights(penalty_weight=1000.0, penalty_sharpness=10.0)
        p1 = penalty(traj, cs, StopParams(a_dec=8.0), w1)
        p2 = penalty(traj, cs, StopParams(a_dec=8.0), w2)
        assert p2 == pytest.approx(2.0 * p1, rel=1e-12)


class TestWarmStart:
    def test_cold_start_braking_arithmetic(self):
        ws = warm_start(None, 0.0, 0.0, 10.0, 5.0, TIMING, n_points=12)
        speeds = np.diff(ws.points) / H
        expected = [max(0.0, 10.0 - 1.25 * k) for k in range(1, 12)]
        assert np.allclose(speeds, expected)
        assert ws.points[0] == 0.0

    def test_cold_start_at_rest_constant(self):
        ws = warm_start(None, 0.0, 5.0, 0.0, 5.0, TIMING, n_points=10)
        assert np.allclose(ws.points, 5.0)

    def test_prefix_copied_from_previous(self):
        prev = cruise_trajectory(v=8.0, n=40)
        ws = warm_start(prev, 0.75, None, None, 8.0, TIMING, n_points=40)
        # time-aligned: new history and pinned points are the previous plan's
        full_prev = prev.full
        assert np.array_equal(ws.history, full_prev[3:6])
        assert np.array_equal(ws.points[:3], full_prev[6:9])
        # braking resumes right after the pinned prefix, 2 m/s per step
        speeds = np.diff(ws.points) / H
        assert speeds[2] == pytest.approx(8.0 - 2.0)
        assert speeds[3] == pytest.approx(8.0 - 4.0)

    def test_off_grid_replan_rejected(self):
        prev = cruise_trajectory()
        with pytest.raises(ValueError, match="grid"):
            warm_start(prev, 0.33, None, None, 8.0, TIMING, n_points=40)


class TestOptimize:
    def test_free_road_recovers_cruise(self):
        v_des = 13.89
        prev = cruise_trajectory(v=v_des, n=40)
        ws = warm_start(prev, 0.75, None, None, 8.0, TIMING, n_points=40)
        cs = free_drive_bounds(0.0, 1e9, 2.0, TIMING, 2.0)
        ctx = PlanContext(v_des=v_des, constraints=cs, stop=StopParams(a_dec=8.0))
        out, diag = optimize(ws, cs, PlannerWeights(), ctx)
        v, _, _ = kinematics(out)
        assert not diag.fallback
        assert np.max(np.abs(v - v_des)) < 0.05

    def test_visibility_bound_binding_slack(self):
        # steady state: warm start from a previous plan cruising at the
        # sustainable speed; converged plan presses the bound within 0.1 m
        stop = StopParams(a_dec=8.0)
        cs = free_drive_bounds(0.0, 25.0, 2.0, TIMING, 2.0).shifted(-2.25)
        v_star = sustainable_speed(cs, stop, 0.0, H, 3, 13.89)
        prev = cruise_trajectory(v=v_star, n=40)
        ws = warm_start(prev, 0.75, None, None, 8.0, TIMING, n_points=40)
        cs2 = free_drive_bounds(prev.points[3], 25.0, 2.0, TIMING, 2.0).shifted(-2.25)
        ctx = PlanContext(v_des=13.89, constraints=cs2, stop=stop)
        out, diag = optimize(ws, cs2, PlannerWeights(), ctx)
        v, _, _ = kinematics(out)
        bounds = dict(cs2.bounds)
        slacks = [bounds[i] - (out.points[i] + v[i] ** 2 / 16.0) for i in bounds]
        assert not diag.fallback
        assert min(slacks) >= 0.0
        assert min(slacks) <= 0.1

    def test_window_safety_after_convergence(self):
        ws = warm_start(None, 0.0, 0.0, 8.0, 8.0, TIMING, n_points=40)
        cs = free_drive_bounds(0.0, 30.0, 2.0, TIMING, 2.0)
        ctx = PlanContext(v_des=13.89, constraints=cs, stop=StopParams(a_dec=8.0))
        out, diag = optimize(ws, cs, PlannerWeights(), ctx)
        v, _, _ = kinematics(out)
        bounds = dict(cs.bounds)
        for i, b in bounds.items():
            assert out.points[i] + v[i] ** 2 / 16.0 <= b + 1e-3

    def test_monotone_positions(self):
        ws = warm_start(None, 0.0, 0.0, 6.0, 8.0, TIMING, n_points=40)
        cs = intersection_stop_bounds(20.0, 2.0, TIMING, 2.0,
                                      ActiveRange.FULL_HORIZON, 40)
        ctx = PlanContext(v_des=13.89, constraints=cs, stop=StopParams(a_dec=8.0))
        out, _ = optimize(ws, cs, PlannerWeights(), ctx)
        assert np.all(np.diff(out.points) >= -1e-9)

    def test_objective_never_increases(self):
        ws = warm_start(None, 0.0, 0.0, 9.0, 8.0, TIMING, n_points=40)
        cs = free_drive_bounds(0.0, 40.0, 2.0, TIMING, 2.0)
        w = PlannerWeights()
        ctx = PlanContext(v_des=12.0, constraints=cs, stop=StopParams(a_dec=8.0))
        before = objective(ws, w, ctx)
        out, diag = optimize(ws, cs, w, ctx)
        if not diag.fallback:
            assert objective(out, w, ctx) <= before + 1e-9

    def test_pinned_points_bitwise_preserved(self):
        ws = warm_start(None, 0.0, 3.0, 7.0, 8.0, TIMING, n_points=40)
        cs = free_drive_bounds(3.0, 50.0, 2.0, TIMING, 2.0)
        ctx = PlanContext(v_des=10.0, constraints=cs, stop=StopParams(a_dec=8.0))
        out, _ = optimize(ws, cs, PlannerWeights(), ctx)
        assert np.array_equal(out.history, ws.history)
        assert np.array_equal(out.points[:3], ws.points[:3])

    def test_infeasible_window_falls_back_to_braking(self):
        # bound far behind the pinned prefix cannot be satisfied
        ws = warm_start(None, 0.0, 50.0, 12.0, 8.0, TIMING, n_points=40)
        cs = ConstraintSet("t", tuple((i, 10.0) for i in range(6)),
                           ActiveRange.FIRST_2NPIN, 0.0)
        ctx = PlanContext(v_des=12.0, constraints=cs, stop=StopParams(a_dec=8.0))
        out, diag = optimize(ws, cs, PlannerWeights(), ctx)
        assert diag.fallback
        assert np.array_equal(out.points, ws.points)

    def test_non_finite_objective_raises(self):
        ws = warm_start(None, 0.0, 0.0, 5.0, 8.0, TIMING, n_points=40)
        cs = free_drive_bounds(0.0, 30.0, 2.0, TIMING, 2.0)
        ctx = PlanContext(v_des=math.nan, constraints=cs, stop=StopParams(a_dec=8.0))
        with pytest.raises(ValueError, match="not finite"):
            optimize(ws, cs, PlannerWeights(), ctx)


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(0)
        w = PlannerWeights()
        for _ in range(5):
            pts = np.cumsum(rng.uniform(0.0, 3.0, 40))
            hist = pts[0] - np.array([3.0, 2.0, 1.0]) * 0.5
            traj = SupportTrajectory(0.0, H, hist, pts, 3)
            cs = free_drive_bounds(pts[0], 30.0, 2.0, TIMING, 2.0)
            ctx = PlanContext(v_des=10.0, constraints=cs,
                              stop=StopParams(a_dec=8.0, sigma_x=0.3, sigma_v=0.2))
            grad = objective_gradient(traj, w, ctx)
            fd = np.zeros_like(grad)
            free = traj.points[3:]
            for i in range(len(free)):
                step = 1e-6 * max(1.0, abs(free[i]))
                for sign in (1.0, -1.0):
                    pts2 = traj.points.copy()
                    pts2[3 + i] += sign * step
                    t2 = SupportTrajectory(0.0, H, hist, pts2, 3)
                    fd[i] += sign * objective(t2, w, ctx)
                fd[i] /= 2 * step
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel <= 1e-5


class TestSustainableSpeed:
    def test_unbounded_returns_v_des(self):
        stop = StopParams(a_dec=8.0)
        assert sustainable_speed(None, stop, 0.0, H, 3, 12.0) == 12.0

    def test_window_equation_root(self):
        stop = StopParams(a_dec=8.0)
        cs = free_drive_bounds(0.0, 25.0, 2.0, TIMING, 0.0)
        v = sustainable_speed(cs, stop, 0.0, H, 3, 50.0)
        assert v * 1.25 + v ** 2 / 16.0 == pytest.approx(23.0, abs=1e-6)

    def test_exhausted_margin_returns_zero(self):
        stop = StopParams(a_dec=8.0)
        cs = ConstraintSet("t", ((0, 1.0),), ActiveRange.FIRST_2NPIN, 0.0)
        assert sustainable_speed(cs, stop, 5.0, H, 3, 12.0) == 0.0
