"""Ego planners under test: IDM car following, a lane-graph candidate planner,
and a constant-velocity baseline. All emit a fixed-horizon Trajectory at each
replanning tick and are deterministic given identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import DEFAULT_LIMITS, Limits, Trajectory, rollout, step_array
from .geometry import wrap_angle
from .scene import AgentState, DecisionContext, Route

PLANNER_IDM = "idm"
PLANNER_LANE_GRAPH = "lane-graph"
PLANNER_CONSTANT_VELOCITY = "constant-velocity"


@dataclass(frozen=True)
class IdmConfig:
    v0: float = 10.0  # desired speed (m/s)
    t_headway: float = 1.5
    s0: float = 2.0  # jam distance (m)
    a_max: float = 2.0
    b_comf: float = 2.0
    delta: float = 4.0
    lateral_gate: float = 1.75  # half lane width leader gate (m)

    def validate(self):
        if min(self.v0, self.t_headway, self.s0, self.a_max, self.b_comf, self.delta) <= 0:
            raise ValueError("IDM parameters must be positive")
        return self


@dataclass(frozen=True)
class LaneGraphConfig:
    accels: tuple = (-4.0, -2.0, 0.0, 1.0, 2.0)
    offsets: tuple = (-2.0, 0.0, 2.0)
    desired_speed: float = 10.0
    inflation: float = 0.5  # disk inflation for collision proximity (m)
    progress_weight: float = 0.05
    collision_horizon: Optional[int] = None  # steps scored; None = full plan

    def validate(self):
        if len(self.accels) == 0 or len(self.offsets) == 0:
            raise ValueError("candidate sets must be nonempty")
        return self


@dataclass(frozen=True)
class PlannerConfig:
    kind: str = PLANNER_IDM
    idm: IdmConfig = field(default_factory=IdmConfig)
    lane_graph: LaneGraphConfig = field(default_factory=LaneGraphConfig)

    @staticmethod
    def from_dict(d: dict) -> "PlannerConfig":
        d = dict(d)
        kind = d.pop("kind", PLANNER_IDM)
        idm = IdmConfig(**d.pop("idm", {})).validate()
        lg = LaneGraphConfig(
            **{k: tuple(v) if isinstance(v, list) else v
               for k, v in d.pop("lane_graph", {}).items()}).validate()
        if d:
            raise ValueError(f"unknown planner keys {sorted(d)}")
        return PlannerConfig(kind=kind, idm=idm, lane_graph=lg)


def idm_accel(v: float, v_lead: Optional[float], gap: Optional[float],
              cfg: IdmConfig) -> float:
    """IDM acceleration; `gap`/`v_lead` None means free road."""
    free = (max(v, 0.0) / cfg.v0) ** cfg.delta
    if gap is None:
        interaction = 0.0
    else:
        s_star = cfg.s0 + v * cfg.t_headway + v * (v - v_lead) / (2.0 * np.sqrt(cfg.a_max * cfg.b_comf))
        interaction = (s_star / max(gap, 1e-3)) ** 2
    a = cfg.a_max * (1.0 - free - interaction)
    bound = max(cfg.a_max, cfg.b_comf)
    return float(np.clip(a, -bound, bound))


def _pure_pursuit(state: np.ndarray, route: Route, arc: float, offset: float,
                  limits: Limits) -> float:
    """Yaw rate steering toward a lookahead point on the (offset) route.

    The lookahead is kept short so corner cutting stays within a half lane
    width down to ~35 m curve radii.
    """
    v = state[2]
    lookahead = float(np.clip(0.8 * v, 2.5, 8.0))
    target = route.point_at(arc + lookahead)
    if offset != 0.0:
        tan = route.tangent_at(arc + lookahead)
        target = target + offset * np.array([-np.sin(tan), np.cos(tan)])
    alpha = wrap_angle(np.arctan2(target[1] - state[1], target[0] - state[0]) - state[3])
    yaw_rate = 2.0 * v * np.sin(alpha) / lookahead
    return float(np.clip(yaw_rate, -limits.yaw_rate_max, limits.yaw_rate_max))


def _find_leader(context: DecisionContext, route: Route, gate: float):
    """Nearest neighbor ahead of the agent within a lateral gate of its route.

    Returns (gap, leader_speed, leader_state) or (None, None, None); the gap is
    bumper to bumper.
    """
    me = context.state
    my_proj = route.project((me.x, me.y))
    best = None
    for slot in range(len(context.neighbor_present)):
        if not context.neighbor_present[slot]:
            continue
        other = context.neighbor_history[slot, -1]
        proj = route.project((other[0], other[1]))
        ahead = proj.arc_length - my_proj.arc_length
        if ahead <= 0.0 or abs(proj.normal_offset) > gate:
            continue
        gap = ahead - 0.5 * context.neighbor_shapes[slot, 0] - 0.5 * context.shape.length
        if best is None or ahead < best[0]:
            best = (ahead, gap, other)
    if best is None:
        return None, None, None
    _, gap, other = best
    return max(gap, 0.1), float(other[2]), other.copy()


def plan_idm(context: DecisionContext, route: Route, cfg: IdmConfig,
             horizon: int = 32, dt: float = 0.1,
             limits: Limits = DEFAULT_LIMITS) -> Trajectory:
    """IDM longitudinal control plus pure-pursuit steering, rolled out with the
    leader propagated at constant velocity."""
    gap0, v_lead, leader = _find_leader(context, route, cfg.lateral_gate)
    state = context.state.as_array()
    actions = np.zeros((horizon, 2))
    for t in range(horizon):
        proj = route.project((state[0], state[1]))
        if leader is not None:
            lead_pos = leader[:2] + t * dt * leader[2] * np.array(
                [np.cos(leader[3]), np.sin(leader[3])])
            lead_proj = route.project(lead_pos)
            gap = (lead_proj.arc_length - proj.arc_length
                   - 0.5 * context.shape.length - 0.5 * context.neighbor_shapes[:, 0].max())
            accel = idm_accel(state[2], v_lead, max(gap, 0.1), cfg)
        else:
            accel = idm_accel(state[2], None, None, cfg)
        yaw = _pure_pursuit(state, route, proj.arc_length, 0.0, limits)
        actions[t] = (accel, yaw)
        state = step_array(state, actions[t], dt, limits)
    return rollout(context.state, actions, dt, limits)


def _candidate_plan(state0: np.ndarray, route: Route, accel: float, offset: float,
                    desired_speed: float, horizon: int, dt: float,
                    limits: Limits = DEFAULT_LIMITS) -> Trajectory:
    state = state0.copy()
    actions = np.zeros((horizon, 2))
    for t in range(horizon):
        a = accel if state[2] < desired_speed or accel < 0.0 else 0.0
        proj = route.project((state[0], state[1]))
        yaw = _pure_pursuit(state, route, proj.arc_length, offset, limits)
        actions[t] = (a, yaw)
        state = step_array(state, actions[t], dt, limits)
    return rollout(AgentState.from_array(state0), actions, dt, limits)


def score_lane_graph_candidate(traj: Trajectory, route: Route, others, other_shapes,
                               own_shape, cfg: LaneGraphConfig, dt: float) -> float:
    """Collision proximity (inflated-disk overlap, constant-velocity others)
    minus a route-progress bonus; lower is better."""
    n_score = cfg.collision_horizon or traj.horizon
    pos = traj.states[:n_score, :2]
    r_own = 0.5 * float(np.hypot(own_shape[0], own_shape[1]))
    penalty = 0.0
    ts = (np.arange(n_score) + 1) * dt
    for o, shape in zip(others, other_shapes):
        heading = np.array([np.cos(o[3]), np.sin(o[3])])
        opos = o[:2] + ts[:, None] * o[2] * heading
        dist = np.hypot(*(pos - opos).T)
        r_other = 0.5 * float(np.hypot(shape[0], shape[1]))
        penalty += np.maximum(0.0, r_own + r_other + cfg.inflation - dist).sum()
    start = route.project(traj.initial_state.as_array()[:2]).arc_length
    end = route.project(traj.states[-1, :2]).arc_length
    return float(penalty - cfg.progress_weight * (end - start))


def plan_lane_graph(context: DecisionContext, route: Route, scene_others,
                    cfg: LaneGraphConfig, horizon: int = 32, dt: float = 0.1,
                    limits: Limits = DEFAULT_LIMITS) -> Trajectory:
    """Enumerate accel x lane-offset candidates, predict others at constant
    velocity, and keep the lowest-cost candidate (ties: lowest accel, then
    smallest absolute offset)."""
    others = [np.asarray(s, dtype=float) for s, _ in scene_others]
    shapes = [np.asarray(sh, dtype=float) for _, sh in scene_others]
    state0 = context.state.as_array()
    own_shape = (context.shape.length, context.shape.width)

    best = None
    candidates = sorted(
        ((a, off) for a in cfg.accels for off in cfg.offsets),
        key=lambda c: (c[0], abs(c[1]), c[1]))
    for accel, off in candidates:
        traj = _candidate_plan(state0, route, accel, off, cfg.desired_speed,
                               horizon, dt, limits)
        score = score_lane_graph_candidate(traj, route, others, shapes, own_shape, cfg, dt)
        if best is None or score < best[0]:
            best = (score, traj)
    return best[1]


def plan_constant_velocity(context: DecisionContext, horizon: int = 32,
                           dt: float = 0.1, limits: Limits = DEFAULT_LIMITS) -> Trajectory:
    return rollout(context.state, np.zeros((horizon, 2)), dt, limits)


class Planner:
    """Dispatching wrapper so the engine can treat all planners uniformly."""

    def __init__(self, cfg: PlannerConfig) -> None:
        if cfg.kind not in (PLANNER_IDM, PLANNER_LANE_GRAPH, PLANNER_CONSTANT_VELOCITY):
            raise ValueError(f"unknown planner kind {cfg.kind}")
        self.cfg = cfg

    def plan(self, context: DecisionContext, route: Route, scene_others,
             horizon: int, dt: float, limits: Limits = DEFAULT_LIMITS) -> Trajectory:
        if self.cfg.kind == PLANNER_IDM:
            return plan_idm(context, route, self.cfg.idm, horizon, dt, limits)
        if self.cfg.kind == PLANNER_LANE_GRAPH:
            return plan_lane_graph(context, route, scene_others, self.cfg.lane_graph,
                                   horizon, dt, limits)
        return plan_constant_velocity(context, horizon, dt, limits)


def make_planner(cfg) -> Planner:
    if isinstance(cfg, PlannerConfig):
        return Planner(cfg)
    return Planner(PlannerConfig.from_dict(dict(cfg or {})))
