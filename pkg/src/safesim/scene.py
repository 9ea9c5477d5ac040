"""Domain types for agents, maps, routes, and scenarios.

All types are immutable value objects; a scenario file is plain JSON (SI units,
radians) with the schema documented in `ScenarioSpec.to_json`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Polyline, PolylineProjection, polyline_intersection, wrap_angle
from . import geometry

# Fixed context layout: 4 nearest neighbors, 1 s of history at 10 Hz.
K_NEIGHBORS = 4
T_HIST = 10
# Route preview sampled this far ahead of the agent (meters).
ROUTE_PREVIEW_ARCS = (2.0, 5.0, 10.0, 20.0, 30.0)

ROLE_EGO = "ego"
ROLE_ADVERSARY = "adversary"
ROLE_REACTIVE = "reactive"


@dataclass(frozen=True)
class AgentState:
    """Kinematic state of one vehicle: position (m), speed (m/s), yaw (rad)."""

    x: float
    y: float
    v: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta], dtype=float)

    @staticmethod
    def from_array(arr) -> "AgentState":
        a = np.asarray(arr, dtype=float)
        return AgentState(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def validate(self) -> "AgentState":
        arr = self.as_array()
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite agent state {self}")
        if self.v < 0.0:
            raise ValueError(f"negative speed {self.v}")
        return self


@dataclass(frozen=True)
class ActionInput:
    """Control input: longitudinal acceleration (m/s^2) and yaw rate (rad/s)."""

    accel: float
    yaw_rate: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.yaw_rate], dtype=float)

    @staticmethod
    def from_array(arr) -> "ActionInput":
        a = np.asarray(arr, dtype=float)
        return ActionInput(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class VehicleShape:
    length: float
    width: float

    def validate(self) -> "VehicleShape":
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"non-positive shape {self}")
        return self

    def as_tuple(self):
        return (self.length, self.width)


@dataclass(frozen=True)
class Lane:
    lane_id: str
    centerline: Polyline
    width: float
    successors: tuple = ()
    left: Optional[str] = None
    right: Optional[str] = None


class LaneMap:
    """Lane-graph map: polyline centerlines with widths forming the drivable area.

    The drivable area is the union of lane corridors (centerline +/- width/2).
    """

    def __init__(self, lanes) -> None:
        self.lanes = {ln.lane_id: ln for ln in lanes}
        if len(self.lanes) != len(lanes):
            raise ValueError("duplicate lane ids")
        for ln in lanes:
            if ln.width <= 0:
                raise ValueError(f"lane {ln.lane_id} has non-positive width")
            for ref in list(ln.successors) + [ln.left, ln.right]:
                if ref is not None and ref not in self.lanes:
                    raise ValueError(f"lane {ln.lane_id} references unknown lane {ref}")

    def lane(self, lane_id: str) -> Lane:
        return self.lanes[lane_id]

    def point_offroad(self, point) -> bool:
        """True iff the point lies outside every lane corridor."""
        p = np.asarray(point, dtype=float)
        for ln in self.lanes.values():
            _, offset, _ = ln.centerline.project_many(p[None, :])
            if abs(offset[0]) <= 0.5 * ln.width:
                return False
        return True

    def points_offroad(self, points) -> np.ndarray:
        """Vectorized corridor test for (n, 2) points."""
        p = np.asarray(points, dtype=float)
        off = np.ones(len(p), dtype=bool)
        for ln in self.lanes.values():
            _, offset, _ = ln.centerline.project_many(p)
            off &= np.abs(offset) > 0.5 * ln.width
        return off

    def route_from_lanes(self, lane_ids) -> "Route":
        """Concatenate lane centerlines (deduplicating joint points) into a route."""
        pts = []
        for lid in lane_ids:
            line = self.lanes[lid].centerline.points
            if pts and np.allclose(pts[-1], line[0]):
                line = line[1:]
            pts.extend(line.tolist())
        return Route(np.asarray(pts, dtype=float), lane_ids=tuple(lane_ids))


class Route(Polyline):
    """An agent's intended path: lane centerlines concatenated start to destination."""

    def __init__(self, points, lane_ids=()) -> None:
        super().__init__(points)
        self.lane_ids = tuple(lane_ids)


def project_to_polyline(point, polyline: Polyline) -> PolylineProjection:
    """Closest-point projection; see `geometry.Polyline.project`."""
    return polyline.project(point)


def obb_overlap(state_a: AgentState, shape_a: VehicleShape,
                state_b: AgentState, shape_b: VehicleShape) -> bool:
    """True iff two oriented vehicle rectangles intersect (separating-axis test)."""
    return geometry.obb_overlap((state_a.x, state_a.y), state_a.theta, shape_a.as_tuple(),
                                (state_b.x, state_b.y), state_b.theta, shape_b.as_tuple())


def point_offroad(point, lanemap: LaneMap) -> bool:
    return lanemap.point_offroad(point)


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    role: str
    state: AgentState
    shape: VehicleShape
    route_lanes: tuple
    psi: dict = field(default_factory=dict)


class ScenarioSpec:
    """A complete scenario: map, agents with roles/routes/psi, horizon, seed."""

    def __init__(self, lanemap: LaneMap, agents, horizon_s: float, seed: int,
                 planner: Optional[dict] = None, name: str = "scenario") -> None:
        self.lanemap = lanemap
        self.agents = list(agents)
        self.horizon_s = float(horizon_s)
        self.seed = int(seed)
        self.planner = dict(planner) if planner else {}
        self.name = name
        self.validate()

    def validate(self) -> None:
        roles = [a.role for a in self.agents]
        if roles.count(ROLE_EGO) != 1:
            raise ValueError("scenario must contain exactly one ego agent")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate agent ids")
        for a in self.agents:
            a.state.validate()
            a.shape.validate()
            self.lanemap.route_from_lanes(a.route_lanes)
        if self.horizon_s <= 0:
            raise ValueError("horizon must be positive")

    @property
    def ego(self) -> AgentSpec:
        return next(a for a in self.agents if a.role == ROLE_EGO)

    def route_of(self, agent: AgentSpec) -> Route:
        return self.lanemap.route_from_lanes(agent.route_lanes)

    def to_json(self) -> dict:
        return {
            "map": {
                "lanes": [
                    {
                        "id": ln.lane_id,
                        "centerline": ln.centerline.points.tolist(),
                        "width": ln.width,
                        "successors": list(ln.successors),
                        "left": ln.left,
                        "right": ln.right,
                    }
                    for ln in self.lanemap.lanes.values()
                ]
            },
            "agents": [
                {
                    "id": a.agent_id,
                    "role": a.role,
                    "state": [a.state.x, a.state.y, a.state.v, a.state.theta],
                    "shape": [a.shape.length, a.shape.width],
                    "route": list(a.route_lanes),
                    "psi": a.psi,
                }
                for a in self.agents
            ],
            "planner": self.planner,
            "horizon_s": self.horizon_s,
            "seed": self.seed,
            "name": self.name,
        }

    @staticmethod
    def from_json(doc: dict) -> "ScenarioSpec":
        lanes = [
            Lane(
                lane_id=ld["id"],
                centerline=Polyline(ld["centerline"]),
                width=float(ld["width"]),
                successors=tuple(ld.get("successors", [])),
                left=ld.get("left"),
                right=ld.get("right"),
            )
            for ld in doc["map"]["lanes"]
        ]
        agents = [
            AgentSpec(
                agent_id=ad["id"],
                role=ad["role"],
                state=AgentState(*[float(v) for v in ad["state"]]),
                shape=VehicleShape(*[float(v) for v in ad["shape"]]),
                route_lanes=tuple(ad["route"]),
                psi=dict(ad.get("psi", {})),
            )
            for ad in doc["agents"]
        ]
        return ScenarioSpec(
            LaneMap(lanes), agents, doc["horizon_s"], doc["seed"],
            planner=doc.get("planner"), name=doc.get("name", "scenario"),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @staticmethod
    def load(path) -> "ScenarioSpec":
        with open(path) as fh:
            return ScenarioSpec.from_json(json.load(fh))


# absent-neighbor sentinel: present flag 0, zeroed features
_NEIGHBOR_FEATURE_DIM = 6


@dataclass(frozen=True)
class DecisionContext:
    """What one agent sees when planning: its own and neighbors' recent history
    (world frame), plus route-relative features.

    `history` holds exactly T_HIST + 1 states (oldest first, padded by
    repeating the earliest known state); `feature_vector()` encodes everything
    in the agent's current body frame for the denoiser.
    """

    agent_id: str
    state: AgentState
    shape: VehicleShape
    history: np.ndarray  # (T_HIST + 1, 4) world frame, oldest first
    neighbor_ids: tuple
    neighbor_history: np.ndarray  # (K_NEIGHBORS, T_HIST + 1, 4)
    neighbor_present: np.ndarray  # (K_NEIGHBORS,) bool
    neighbor_shapes: np.ndarray  # (K_NEIGHBORS, 2)
    route: Route

    def __post_init__(self):
        if self.history.shape != (T_HIST + 1, 4):
            raise ValueError(f"history must be ({T_HIST + 1}, 4)")
        if not np.all(np.isfinite(self.history)):
            raise ValueError("non-finite history")

    def _to_body(self, states: np.ndarray) -> np.ndarray:
        """Map world states (..., 4) into this agent's current body frame."""
        c, s = np.cos(self.state.theta), np.sin(self.state.theta)
        dx = states[..., 0] - self.state.x
        dy = states[..., 1] - self.state.y
        bx = c * dx + s * dy
        by = -s * dx + c * dy
        dth = states[..., 3] - self.state.theta
        return np.stack([bx, by, states[..., 2], dth], axis=-1)

    def feature_vector(self) -> np.ndarray:
        own = self._to_body(self.history)
        own_feats = np.concatenate(
            [own[:, 0], own[:, 1], np.cos(own[:, 3]), np.sin(own[:, 3]), own[:, 2]]
        )

        nb = self._to_body(self.neighbor_history)  # (K, H, 4)
        present = self.neighbor_present.astype(float)[:, None]
        nb_feats = np.stack(
            [nb[..., 0], nb[..., 1], np.cos(nb[..., 3]), np.sin(nb[..., 3]), nb[..., 2],
             np.broadcast_to(present, nb[..., 0].shape)],
            axis=-1,
        )
        nb_feats = nb_feats * present[:, :, None]
        shape_feats = self.neighbor_shapes * present

        proj = self.route.project((self.state.x, self.state.y))
        herr = wrap_angle(proj.tangent_heading - self.state.theta)
        route_now = np.array([proj.normal_offset, np.cos(herr), np.sin(herr)])
        arcs = proj.arc_length + np.asarray(ROUTE_PREVIEW_ARCS)
        pts = self.route.point_at(arcs)
        tans = self.route.tangent_at(arcs)
        preview = self._to_body(
            np.stack([pts[:, 0], pts[:, 1], np.zeros(len(arcs)), tans], axis=-1)
        )
        preview_feats = np.concatenate(
            [preview[:, 0], preview[:, 1], np.cos(preview[:, 3]), np.sin(preview[:, 3])]
        )

        return np.concatenate(
            [own_feats, nb_feats.ravel(), shape_feats.ravel(), route_now, preview_feats]
        )


FEATURE_DIM = (
    5 * (T_HIST + 1)
    + K_NEIGHBORS * (T_HIST + 1) * _NEIGHBOR_FEATURE_DIM
    + K_NEIGHBORS * 2
    + 3
    + 4 * len(ROUTE_PREVIEW_ARCS)
)


def build_context(agent_id: str, states_history: np.ndarray, agent_ids, shapes,
                  routes, t_index: int) -> DecisionContext:
    """Assemble the decision context for one agent at history index `t_index`.

    `states_history` is (steps, n_agents, 4) of executed world states; histories
    shorter than T_HIST are padded by repeating the oldest state.
    """
    idx = list(agent_ids).index(agent_id)
    lo = t_index - T_HIST
    if lo < 0:
        pad = np.repeat(states_history[0:1], -lo, axis=0)
        window = np.concatenate([pad, states_history[: t_index + 1]], axis=0)
    else:
        window = states_history[lo: t_index + 1]
    own = window[:, idx, :]
    cur = AgentState.from_array(own[-1])

    others = [i for i in range(len(agent_ids)) if i != idx]
    cur_all = states_history[t_index]
    dists = [np.hypot(cur_all[i, 0] - cur.x, cur_all[i, 1] - cur.y) for i in others]
    order = sorted(range(len(others)), key=lambda j: (dists[j], others[j]))
    chosen = [others[j] for j in order[:K_NEIGHBORS]]

    nb_hist = np.zeros((K_NEIGHBORS, T_HIST + 1, 4))
    nb_present = np.zeros(K_NEIGHBORS, dtype=bool)
    nb_shapes = np.zeros((K_NEIGHBORS, 2))
    nb_ids = []
    for slot, i in enumerate(chosen):
        nb_hist[slot] = window[:, i, :]
        nb_present[slot] = True
        nb_shapes[slot] = shapes[i]
        nb_ids.append(agent_ids[i])

    return DecisionContext(
        agent_id=agent_id,
        state=cur,
        shape=VehicleShape(*shapes[idx]),
        history=own.copy(),
        neighbor_ids=tuple(nb_ids),
        neighbor_history=nb_hist,
        neighbor_present=nb_present,
        neighbor_shapes=nb_shapes,
        route=routes[idx],
    )


__all__ = [
    "AgentState", "ActionInput", "VehicleShape", "Lane", "LaneMap", "Route",
    "ScenarioSpec", "AgentSpec", "DecisionContext", "build_context",
    "project_to_polyline", "polyline_intersection", "obb_overlap", "point_offroad",
    "K_NEIGHBORS", "T_HIST", "FEATURE_DIM",
    "ROLE_EGO", "ROLE_ADVERSARY", "ROLE_REACTIVE",
]
