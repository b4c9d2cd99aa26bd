"""Corridor-based reference-trajectory refinement and NMPC tracking."""

from .core import (AgentState, TrajectoryWindow, UniformBSplineTrajectory,
                   evaluate, make_uniform_bspline, prepend_pose, window)
from .mapping import (EdtMap, VoxelGrid, close_in_obstacles, compute_edt,
                      insert_points, query_distance)
from .decomp import (CorridorSegment, InfeasibleSegment, Polyhedron,
                     decompose_parallel, decompose_segment)
from .solvers import (BoxSpec, ConeConstraint, ConicProgram, ConicSolution,
                      minimize_box, solve_conic)
from .global_planner import (GlobalConfig, GradientInfo, OccupiedSegment,
                             ProjectedSegment, PushFailed, RecoveryFailed,
                             calculate_gradients, checking_occupied_segments,
                             cost_feasibility, cost_obstacle, cost_smooth,
                             dead_zone_recover, find_pushing_directions,
                             refine)
from .local_planner import (ControlCommand, LocalConfig, NmpcProblem,
                            NmpcSolution, NmpcState, build_nmpc,
                            dynamics_step, solve_nmpc)
from .config import Config, load_config, parse_config

__version__ = "0.1.0"
