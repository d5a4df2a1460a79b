import math

import numpy as np
import pytest

from visplan.model import Gaussian1D, TimingModel
from visplan.prediction import HypotheticalVehicle
from visplan.safety import (ActiveRange, NoReturn, SigmaMode,
                            assemble_constraints, braking_distance, confidence_to_k,
                            follow_drive_bounds, free_drive_bounds,
                            intersection_stop_bounds, merge_constraint_sets,
                            stop_distribution, surface_of_no_return)
from visplan.scenario import build_world
from visplan.scene import Action, MergePoint, ModeKind, PlanningMode
from visplan.visibility import VisibilityResult

TIMING = TimingModel(h=0.25, n_pin=3, env_period=0.5, plan_period=0.75)


class TestBrakingDistance:
    def test_zero_speed(self):
        assert braking_distance(0.0, 5.0) == 0.0

    def test_spot_values(self):
        assert braking_distance(10.0, 5.0) == pytest.approx(10.0)
        assert braking_distance(13.89, 8.0) == pytest.approx(12.06, abs=0.005)


class TestStopDistribution:
    def test_deterministic_case(self):
        d = stop_distribution(Gaussian1D(5.0, 0.0), Gaussian1D(10.0, 0.0), 5.0)
        assert d.mean == pytest.approx(15.0)
        assert d.std == 0.0

    def test_paper_exact_formula(self):
        d = stop_distribution(Gaussian1D(0.0, 3.0), Gaussian1D(10.0, 2.0), 5.0,
                              SigmaMode.FIXED_FACTOR)
        assert d.std == pytest.approx(5.0, abs=1e-12)

    def test_first_order_matches_monte_carlo(self):
        d = stop_distribution(Gaussian1D(0.0, 0.0), Gaussian1D(10.0, 0.5), 5.0,
                              SigmaMode.FIRST_ORDER)
        assert d.std == pytest.approx(1.0, abs=1e-12)
        rng = np.random.default_rng(0)
        samples = rng.normal(10.0, 0.5, 1_000_000) ** 2 / 10.0
        assert d.std == pytest.approx(samples.std(), rel=0.03)


class TestBounds:
    def test_free_drive_eq9(self):
        cs = free_drive_bounds(0.0, 50.0, 2.0, TIMING, k=2.0)
        assert dict(cs.bounds) == {i: 48.0 for i in range(6)}
        assert cs.active_range is ActiveRange.FIRST_2NPIN

    def test_free_drive_boundary(self):
        cs = free_drive_bounds(7.0, 2.0, 2.0, TIMING)
        assert all(b == pytest.approx(7.0) for _, b in cs.bounds)

    def test_follow_drive_stationary_lead(self):
        cs = follow_drive_bounds(Gaussian1D(30.0), Gaussian1D(0.0), 8.0, 2.0, TIMING, k=0.0)
        assert all(b == pytest.approx(28.0) for _, b in cs.bounds)

    def test_follow_drive_moving_lead(self):
        cs = follow_drive_bounds(Gaussian1D(100.0), Gaussian1D(10.0), 5.0, 2.0, TIMING)
        assert all(b == pytest.approx(108.0) for _, b in cs.bounds)

    def test_follow_drive_paper_sigma(self):
        cs = follow_drive_bounds(Gaussian1D(100.0, 3.0), Gaussian1D(10.0, 2.0),
                                 5.0, 2.0, TIMING, sigma_mode=SigmaMode.FIXED_FACTOR)
        # per-point sigma folds ego (3, 2) and lead (3, 2) stds: sqrt(9+9+16+16)
        ego_var = 3.0 ** 2 + 4 * 2.0 ** 2
        assert math.sqrt(ego_var + cs.extra_var) == pytest.approx(math.sqrt(50.0), abs=1e-12)

    def test_intersection_ranges(self):
        full = intersection_stop_bounds(100.0, 2.0, TIMING, 2.0,
                                        ActiveRange.FULL_HORIZON, n_points=40)
        window = intersection_stop_bounds(100.0, 2.0, TIMING, 2.0,
                                          ActiveRange.FIRST_2NPIN)
        assert len(full.bounds) == 40
        assert len(window.bounds) == 6
        assert all(b == pytest.approx(98.0) for _, b in full.bounds)

    def test_merge_is_elementwise_min(self):
        a = free_drive_bounds(0.0, 40.0, 2.0, TIMING)
        b = follow_drive_bounds(Gaussian1D(30.0), Gaussian1D(0.0), 8.0, 2.0, TIMING)
        merged = merge_constraint_sets([a, b], TIMING.n_pin)
        for i, bound in merged.bounds:
            assert bound == pytest.approx(min(dict(a.bounds)[i], dict(b.bounds)[i]))


class TestSurfaceOfNoReturn:
    def test_stationary_below(self):
        assert surface_of_no_return(0.0, 0.0, 100.0, 2.0, 8.0) is NoReturn.BELOW

    def test_exact_boundary_on(self):
        v_crit = math.sqrt(2 * 8.0 * (100.0 - 2.0 - 40.0))
        assert surface_of_no_return(40.0, v_crit, 100.0, 2.0, 8.0) is NoReturn.ON

    def test_monotone_in_speed(self):
        order = [surface_of_no_return(40.0, v, 100.0, 2.0, 8.0)
                 for v in np.linspace(0.0, 40.0, 100)]
        ranks = {NoReturn.BELOW: 0, NoReturn.ON: 1, NoReturn.ABOVE: 2}
        vals = [ranks[o] for o in order]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_agrees_with_integration(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            x, v = rng.uniform(0, 110), rng.uniform(0, 25)
            cls = surface_of_no_return(x, v, 100.0, 2.0, 8.0)
            if cls is NoReturn.ON:
                continue
            xx, vv = x, v
            while vv > 0:
                v_next = max(0.0, vv - 8.0 * 1e-3)
                xx += 0.5 * (vv + v_next) * 1e-3
                vv = v_next
            oracle = NoReturn.BELOW if xx < 98.0 else NoReturn.ABOVE
            assert cls is oracle


def test_confidence_to_k_quantiles():
    assert confidence_to_k(0.5) == pytest.approx(0.0)
    assert confidence_to_k(0.97725) == pytest.approx(2.0, abs=1e-3)


class TestAssemble:
    def world(self, others=(), occluders=()):
        return build_world({
            "routes": [
                {"id": "ego_road", "centerline": [[0, 0], [300, 0]],
                 "speed_limit": 13.89, "tags": []},
                {"id": "cross_road", "centerline": [[100, -150], [100, 150]],
                 "speed_limit": 6.94, "tags": []},
            ],
            "occluders": list(occluders),
            "ego": {"route_id": "ego_road", "arc": 50.0, "speed": 8.0,
                    "driver": {"v_des": 13.89, "politeness": 0.1}},
            "others": list(others),
            "sensor_range": 100.0,
            "timing": {"h": 0.25, "n_pin": 3, "env_period": 0.5, "plan_period": 0.75},
            "planner": {},
        })

    MERGE = MergePoint(ego_arc=100.0, other_route_id="cross_road", other_arc=150.0,
                       action=Action.GIVE_WAY)

    def test_free_drive_is_shifted_visibility_bound(self):
        world = self.world()
        vis = VisibilityResult(s_vis_ego=60.0)
        mode = PlanningMode(ModeKind.FREE_DRIVE)
        cs = assemble_constraints(mode, world, vis, None, 40, 2.0)
        expected = 50.0 + 60.0 - 2.0 - 2.25
        assert dict(cs.bounds)[0] == pytest.approx(expected)
        assert len(cs.bounds) == 6

    def test_give_way_hypothetical_too_close_stops_full_horizon(self):
        world = self.world()
        vis = VisibilityResult(s_vis_ego=80.0, s_vis_cross={"cross_road": 5.0})
        hyp = HypotheticalVehicle("cross_road", 145.0, 6.94, 3.0)
        mode = PlanningMode(ModeKind.INTERSECTION_GIVE_WAY, merge=self.MERGE)
        decisions = []
        cs = assemble_constraints(mode, world, vis, hyp, 40, 2.0, decisions=decisions)
        assert len(cs.bounds) == 40
        stop_bound = 100.0 - 2.0 - 2.25
        assert dict(cs.bounds)[20] == pytest.approx(stop_bound)
        assert any("stop before merge" in d for d in decisions)

    def test_give_way_far_hypothetical_accepted(self):
        world = self.world()
        vis = VisibilityResult(s_vis_ego=80.0, s_vis_cross={"cross_road": 140.0})
        hyp = HypotheticalVehicle("cross_road", 10.0, 6.94, 3.0)
        mode = PlanningMode(ModeKind.INTERSECTION_GIVE_WAY, merge=self.MERGE)
        decisions = []
        cs = assemble_constraints(mode, world, vis, hyp, 40, 2.0, decisions=decisions)
        assert len(cs.bounds) == 6  # only the free-drive visibility bound
        assert any("gap accepted" in d for d in decisions)

    def test_right_of_way_compliant_keeps_visibility_bound_only(self):
        world = self.world()
        merge = MergePoint(100.0, "cross_road", 150.0, Action.RIGHT_OF_WAY)
        vis = VisibilityResult(s_vis_ego=80.0, s_vis_cross={"cross_road": 60.0})
        hyp = HypotheticalVehicle("cross_road", 90.0, 6.94, 6.94 ** 2 / 16)
        mode = PlanningMode(ModeKind.INTERSECTION_RIGHT_OF_WAY, merge=merge)
        cs = assemble_constraints(mode, world, vis, hyp, 40, 2.0)
        free_only = free_drive_bounds(50.0, 80.0, 2.0, world.timing, 2.0).shifted(-2.25)
        assert dict(cs.bounds) == dict(free_only.bounds)

    def test_right_of_way_poor_visibility_adds_window_stop(self):
        world = self.world()
        merge = MergePoint(100.0, "cross_road", 150.0, Action.RIGHT_OF_WAY)
        vis = VisibilityResult(s_vis_ego=80.0, s_vis_cross={"cross_road": 5.0})
        hyp = HypotheticalVehicle("cross_road", 145.0, 6.94, 6.94 ** 2 / 16)
        mode = PlanningMode(ModeKind.INTERSECTION_RIGHT_OF_WAY, merge=merge)
        cs = assemble_constraints(mode, world, vis, hyp, 40, 2.0)
        assert len(cs.bounds) == 6
        assert dict(cs.bounds)[0] == pytest.approx(100.0 - 2.0 - 2.25)

    def test_follow_composes_with_visibility_minimum(self):
        # lead bound at 30 m is tighter than the 40 m visibility bound
        world = self.world(others=[{"route_id": "ego_road", "arc": 80.0, "speed": 0.0,
                                    "driver": {"v_des": 0.0}, "id": "lead"}])
        vis = VisibilityResult(s_vis_ego=40.0)
        lead, params = world.others[0]
        mode = PlanningMode(ModeKind.FOLLOW_DRIVE, mio=lead, mio_params=params)
        cs = assemble_constraints(mode, world, vis, None, 40, 2.0)
        follow_bound = (80.0 - 4.5) - 2.0
        free_bound = 50.0 + 40.0 - 2.0 - 2.25
        assert dict(cs.bounds)[0] == pytest.approx(min(follow_bound, free_bound))

    def test_bounds_never_force_backward_motion_when_feasible(self):
        world = self.world()
        vis = VisibilityResult(s_vis_ego=60.0)
        cs = assemble_constraints(PlanningMode(ModeKind.FREE_DRIVE), world, vis,
                                  None, 40, 2.0)
        assert all(b >= world.ego.arc_pos.mean for _, b in cs.bounds)
