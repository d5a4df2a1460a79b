"""Occlusion-aware, uncertainty-robust longitudinal motion planning.

Library, closed-loop simulator and CLI: worst-case hypothetical vehicles
behind visibility limits, chance-constrained stop-position bounds, IDM-based
interaction checks and an optimization-based replanning trajectory planner.
"""

from .model import (DriverParams, Gaussian1D, OccluderPolygon, RouteGeometry,
                    RuleTag, TimingModel, ValidationError, VehicleState,
                    WorldState, measure, project_to_route)
from .planner import (PlanContext, PlannerWeights, SupportTrajectory,
                      kinematics, objective, optimize, penalty, warm_start)
from .prediction import (HypotheticalVehicle, gap_acceptance, idm_acceleration,
                         make_hypothetical, simulate_idm, visibility_compliant)
from .safety import (ConstraintSet, SigmaMode, StopParams, assemble_constraints,
                     braking_distance, free_drive_bounds, follow_drive_bounds,
                     intersection_stop_bounds, stop_distribution,
                     surface_of_no_return)
from .scenario import load_scenario, save_scenario, apply_overrides
from .scene import (Action, MergePoint, ModeKind, PlanningMode,
                    detect_intersections, determine_action,
                    sample_preview_points, select_mode)
from .simloop import SimLog, Simulation, run, step
from .visibility import (VisibilityResult, compute_visibility,
                         cross_route_visibility, is_point_visible,
                         visible_range_on_route)

__version__ = "0.1.0"
