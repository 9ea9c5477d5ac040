"""safesim: closed-loop safety-critical traffic simulation with guided
trajectory diffusion and controllable adversaries."""

from .scene import (AgentState, ActionInput, VehicleShape, Lane, LaneMap, Route,
                    ScenarioSpec, AgentSpec, DecisionContext, build_context)
from .dynamics import Trajectory, Limits, step, rollout, inverse_dynamics, rollout_grad
from .diffusion import (DiffusionSchedule, TrajectoryDenoiser, TrainingCorpus,
                        make_cosine_schedule, add_noise, posterior_mean, train_denoiser)
from .guidance import (GuidanceConfig, SceneSamples, cost_coll, cost_v, ttc_point,
                       cost_ttc, cost_route, cost_gauss, select_adversary_weights,
                       total_cost, guided_step, filter_samples)
from .proposals import ProposalSpec, ConflictPoint, find_conflict, make_proposal, proposal_set
from .planners import (PlannerConfig, plan_idm, plan_lane_graph,
                       plan_constant_velocity, make_planner)
from .engine import SimConfig, SimLog, CollisionEvent, run, detect_events
from .metrics import (DrivingProfileHistogram, MetricsReport, realism,
                      ttc_cost_window, collision_diversity, aggregate)

__version__ = "0.1.0"
