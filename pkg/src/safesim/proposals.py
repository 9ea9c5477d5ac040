"""Rule-based trajectory proposals that seed partial diffusion with a chosen
collision type.

A proposal is built from a conflict point between the ego's route and the
adversary's (possibly lane-changed) path: the longitudinal profile times the
adversary's arrival to the ego's, and a lateral offset shapes where on the lane
the encounter happens. Crossing conflicts come from centerline intersections;
same-lane geometries (rear-end, side-swipe onto the ego's lane) anchor the
conflict to the ego's constant-velocity position one proposal horizon ahead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .dynamics import DEFAULT_LIMITS, Limits, Trajectory, clamp_actions, inverse_dynamics, rollout
from .geometry import Polyline, polyline_intersection, wrap_angle
from .scene import AgentState, Route

logger = logging.getLogger(__name__)

LANE_CURRENT = "current"
LANE_LEFT = "left"
LANE_RIGHT = "right"

# routes whose tangents differ less than this at the meet point are treated as
# same-lane pursuit rather than a crossing
_ALIGNED_TOL = np.pi / 6
_LATERAL_TRANSITION_S = 2.4


@dataclass(frozen=True)
class ProposalSpec:
    target_accel: Union[float, str] = "auto"  # "auto" solves for arrival timing
    lateral_offset: float = 0.0
    lane_choice: str = LANE_CURRENT

    def validate(self, lane_width: float = 3.5) -> "ProposalSpec":
        if isinstance(self.target_accel, str) and self.target_accel != "auto":
            raise ValueError(f"bad accel spec {self.target_accel}")
        if abs(self.lateral_offset) > lane_width:
            raise ValueError(f"lateral offset {self.lateral_offset} exceeds lane width")
        if self.lane_choice not in (LANE_CURRENT, LANE_LEFT, LANE_RIGHT):
            raise ValueError(f"bad lane choice {self.lane_choice}")
        return self


@dataclass(frozen=True)
class ConflictPoint:
    point: np.ndarray
    arc_ego: float
    arc_adv: float
    ego_eta: float


def _plan_eta(plan_states: np.ndarray, route: Route, arc_target: float,
              dt: float, ego_speed: float) -> float:
    """Time at which a published plan reaches the target arc on its route,
    extrapolating at the plan's final speed past the horizon."""
    arcs, _, _ = route.project_many(plan_states[:, :2])
    reached = np.nonzero(arcs >= arc_target)[0]
    if len(reached):
        return float((reached[0] + 1) * dt)
    tail_speed = max(plan_states[-1, 2], ego_speed, 0.5)
    return float(len(arcs) * dt + (arc_target - arcs[-1]) / tail_speed)


def find_conflict(ego_route: Route, adv_route: Polyline, ego_state: AgentState,
                  adv_state: AgentState, pursuit_horizon: float = 3.2,
                  ego_plan=None) -> Optional[ConflictPoint]:
    """First conflict between the ego's route and the adversary's path.

    Transverse centerline crossings ahead of both agents are returned directly
    with the ego's arrival time; when the meet point is aligned with both
    travel directions (same-lane overlap), the conflict is instead anchored to
    the ego's projected position `pursuit_horizon` seconds ahead. Arrival
    timing uses the ego's last published plan when one is supplied, else the
    constant-velocity estimate. Returns None when the paths never meet.
    """
    ego_arc = ego_route.project((ego_state.x, ego_state.y)).arc_length
    adv_arc = adv_route.project((adv_state.x, adv_state.y)).arc_length
    hit = polyline_intersection(ego_route, adv_route,
                                min_arc_a=ego_arc + 1e-9, min_arc_b=adv_arc + 1e-9)
    if hit is None:
        return None
    ego_speed = max(ego_state.v, 0.5)
    tan_e = ego_route.tangent_at(hit.arc_a)
    tan_a = adv_route.tangent_at(hit.arc_b)
    if abs(wrap_angle(tan_e - tan_a)) < _ALIGNED_TOL:
        # same-lane pursuit: aim at where the ego's plan ends up one horizon
        # from now, not at the geometric overlap start
        if ego_plan is not None:
            arcs, _, _ = ego_route.project_many(ego_plan.states[:, :2])
            target_arc = float(max(arcs[-1], ego_arc + 0.5))
        else:
            target_arc = ego_arc + ego_speed * pursuit_horizon
        point = ego_route.point_at(target_arc)
        proj = adv_route.project(point)
        if proj.arc_length <= adv_arc + 1e-9:
            return None
        return ConflictPoint(point=np.asarray(point, dtype=float),
                             arc_ego=float(target_arc),
                             arc_adv=float(proj.arc_length),
                             ego_eta=float(pursuit_horizon))
    if ego_plan is not None:
        eta = _plan_eta(ego_plan.states, ego_route, hit.arc_a, ego_plan.dt, ego_speed)
    else:
        eta = (hit.arc_a - ego_arc) / ego_speed
    return ConflictPoint(point=np.asarray(hit.point, dtype=float),
                         arc_ego=float(hit.arc_a), arc_adv=float(hit.arc_b),
                         ego_eta=float(eta))


def _offset_point(path: Polyline, arc, offset):
    base = path.point_at(arc)
    tan = path.tangent_at(arc)
    normal = np.stack([-np.sin(tan), np.cos(tan)], axis=-1)
    return base + np.asarray(offset)[..., None] * normal


def _solve_arrival_accel(distance: float, v0: float, n_steps: int, dt: float) -> float:
    """Constant accel whose Euler rollout covers `distance` in n_steps steps."""
    if n_steps < 2:
        return 0.0
    coeff = dt * dt * n_steps * (n_steps - 1) / 2.0
    return (distance - n_steps * v0 * dt) / coeff


def make_proposal(adv_state: AgentState, adv_route: Polyline, conflict: ConflictPoint,
                  spec: ProposalSpec, T: int, dt: float,
                  limits: Limits = DEFAULT_LIMITS) -> Trajectory:
    """Build an action trajectory steering toward the conflict point.

    The reference path is the adversary's path shifted laterally by the
    requested offset; the speed profile is constant-acceleration, solved (for
    "auto") so the adversary reaches the conflict arc when the ego does. If
    the required acceleration exceeds the limits, the proposal falls back to
    constant-speed centerline following.
    """
    proj = adv_route.project((adv_state.x, adv_state.y))
    arc0 = proj.arc_length
    distance = conflict.arc_adv - arc0
    target_offset = spec.lateral_offset

    if spec.target_accel == "auto":
        n_steps = max(2, int(round(conflict.ego_eta / dt)))
        accel = _solve_arrival_accel(distance, adv_state.v, n_steps, dt)
        if abs(accel) > limits.accel_max:
            logger.debug("proposal accel %.2f beyond limits; constant-speed fallback", accel)
            accel = 0.0
            target_offset = 0.0
    else:
        accel = float(np.clip(spec.target_accel, -limits.accel_max, limits.accel_max))

    # longitudinal profile with the same pre-update Euler order as the dynamics
    v = adv_state.v
    arcs = np.empty(T + 1)
    arcs[0] = arc0
    for t in range(T):
        arcs[t + 1] = arcs[t] + v * dt
        v = float(np.clip(v + accel * dt, 0.0, limits.v_max))

    # cosine-eased lateral transition, finished before the planned arrival,
    # keeps the implied yaw rates inside the action limits
    trans_s = min(_LATERAL_TRANSITION_S, max(0.8 * conflict.ego_eta, 4 * dt))
    n_trans = max(1, min(T, int(round(trans_s / dt))))
    ease = 0.5 * (1.0 - np.cos(np.pi * np.arange(1, n_trans + 1) / n_trans))
    offsets = np.concatenate([
        proj.normal_offset + (target_offset - proj.normal_offset) * ease,
        np.full(T - n_trans, target_offset),
    ])
    positions = np.empty((T + 1, 2))
    positions[0] = (adv_state.x, adv_state.y)
    positions[1:] = _offset_point(adv_route, arcs[1:], offsets)

    # headings/speeds from successive displacements keep the Euler rollout on
    # the reference positions
    disp = np.diff(positions, axis=0)
    norms = np.hypot(disp[:, 0], disp[:, 1])
    headings = np.where(norms > 1e-9, np.arctan2(disp[:, 1], disp[:, 0]), adv_state.theta)
    for t in range(1, T):
        if norms[t] <= 1e-9:
            headings[t] = headings[t - 1]
    speeds = norms / dt

    states = np.empty((T + 1, 4))
    states[0] = adv_state.as_array()
    states[1:, 0] = positions[1:, 0]
    states[1:, 1] = positions[1:, 1]
    states[1:-1, 2] = speeds[1:]
    states[1:-1, 3] = headings[1:]
    states[-1, 2] = speeds[-1]
    states[-1, 3] = headings[-1]

    actions = clamp_actions(inverse_dynamics(states, dt), limits)
    return rollout(adv_state, actions, dt, limits)


def proposal_set(offsets, adv_state: AgentState, adv_route: Polyline,
                 conflict: Optional[ConflictPoint], T: int, dt: float,
                 accel: Union[float, str] = "auto", lane_choice: str = LANE_CURRENT,
                 limits: Limits = DEFAULT_LIMITS):
    """One proposal per lateral offset; empty when there is no conflict."""
    if conflict is None:
        return []
    if len(offsets) == 0:
        raise ValueError("offsets must be nonempty")
    return [
        make_proposal(adv_state, adv_route, conflict,
                      ProposalSpec(target_accel=accel, lateral_offset=float(off),
                                   lane_choice=lane_choice).validate(),
                      T, dt, limits)
        for off in offsets
    ]


def resolve_lane_choice(lanemap, route_lanes, lane_choice: str):
    """Map a lane choice onto a concrete path: the agent's own route or the
    neighbor-lane route swapped lane-for-lane where a neighbor exists."""
    if lane_choice == LANE_CURRENT:
        return lanemap.route_from_lanes(route_lanes)
    attr = "left" if lane_choice == LANE_LEFT else "right"
    swapped = []
    for lid in route_lanes:
        neighbor = getattr(lanemap.lane(lid), attr)
        swapped.append(neighbor if neighbor is not None else lid)
    return lanemap.route_from_lanes(swapped)
