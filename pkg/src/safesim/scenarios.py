"""Deterministic scenario library: intersections (crossing conflicts), straight
multi-lane roads (rear-end, side-swipe), and curved roads.

Every scenario has exactly one ego, one adversary with a resolvable conflict
for at least one proposal lane choice, and up to two background reactive
agents placed on routes that do not cross the ego's.
"""

from __future__ import annotations

import numpy as np

from .geometry import Polyline, wrap_angle
from .scene import (AgentSpec, AgentState, Lane, LaneMap, ScenarioSpec, VehicleShape,
                    ROLE_ADVERSARY, ROLE_EGO, ROLE_REACTIVE)

LANE_WIDTH = 3.5
CAR = VehicleShape(4.6, 1.9)


def cross_map() -> LaneMap:
    """Four-arm intersection, one directional lane per arm, plus a wide
    junction-box lane making the paved intersection area drivable."""
    half = LANE_WIDTH / 2.0
    box = 2.0 * LANE_WIDTH
    return LaneMap([
        Lane("eb", Polyline([(-80.0, -half), (80.0, -half)]), LANE_WIDTH),
        Lane("wb", Polyline([(80.0, half), (-80.0, half)]), LANE_WIDTH),
        Lane("nb", Polyline([(half, -80.0), (half, 80.0)]), LANE_WIDTH),
        Lane("sb", Polyline([(-half, 80.0), (-half, -80.0)]), LANE_WIDTH),
        Lane("box", Polyline([(-box / 2.0, 0.0), (box / 2.0, 0.0)]), box),
    ])


def straight_map() -> LaneMap:
    """Three parallel eastbound lanes with left/right adjacency."""
    return LaneMap([
        Lane("l0", Polyline([(-40.0, -LANE_WIDTH), (140.0, -LANE_WIDTH)]), LANE_WIDTH,
             left="l1"),
        Lane("l1", Polyline([(-40.0, 0.0), (140.0, 0.0)]), LANE_WIDTH,
             left="l2", right="l0"),
        Lane("l2", Polyline([(-40.0, LANE_WIDTH), (140.0, LANE_WIDTH)]), LANE_WIDTH,
             right="l1"),
    ])


def _arc_points(radius: float, phi0: float, phi1: float, n: int):
    phi = np.linspace(phi0, phi1, n)
    return np.stack([radius * np.cos(phi), radius * np.sin(phi)], axis=-1)


def curve_map() -> LaneMap:
    """Two concentric counterclockwise lanes; the inner lane is to the left.

    The sweep is long enough that nobody reaches the route end within a run.
    """
    n = 73
    phi0, phi1 = -0.4, 3.2
    inner = _arc_points(40.0, phi0, phi1, n)
    outer = _arc_points(43.5, phi0, phi1, n)
    return LaneMap([
        Lane("inner", Polyline(inner), LANE_WIDTH, right="outer"),
        Lane("outer", Polyline(outer), LANE_WIDTH, left="inner"),
    ])


def _arc_state(radius: float, phi: float, v: float) -> AgentState:
    return AgentState(radius * np.cos(phi), radius * np.sin(phi), v,
                      wrap_angle(phi + np.pi / 2.0))


def _proposal(lane: str = "current", offsets=(0.0,)) -> dict:
    return {"proposal": {"offsets": list(offsets), "accel": "auto", "lane": lane}}


def build_library() -> list:
    """Twelve deterministic scenarios; content depends only on this code."""
    half = LANE_WIDTH / 2.0
    scenarios = []

    def cross(name, seed, ego_x, ego_v, adv_lane, adv_pos, adv_v, extras):
        cm = cross_map()
        if adv_lane == "nb":
            adv_state = AgentState(half, adv_pos, adv_v, np.pi / 2.0)
        else:  # sb
            adv_state = AgentState(-half, adv_pos, adv_v, -np.pi / 2.0)
        agents = [
            AgentSpec("ego", ROLE_EGO, AgentState(ego_x, -half, ego_v, 0.0), CAR, ("eb",)),
            AgentSpec("adv", ROLE_ADVERSARY, adv_state, CAR, (adv_lane,), psi=_proposal()),
        ]
        agents += extras
        return ScenarioSpec(cm, agents, horizon_s=12.0, seed=seed,
                            planner={"kind": "idm"}, name=name)

    def wb_npc(x, v):
        return AgentSpec("npc1", ROLE_REACTIVE, AgentState(x, half, v, np.pi), CAR, ("wb",))

    # background traffic is timed to clear the junction outside the
    # adversary's plausible interception window
    scenarios.append(cross("cross_basic", 0, -45.0, 8.0, "nb", -50.0, 7.0,
                           [wb_npc(30.0, 8.0)]))
    scenarios.append(cross("cross_close", 1, -30.0, 6.0, "nb", -52.0, 8.0,
                           [wb_npc(30.0, 8.0)]))
    scenarios.append(cross("cross_busy", 2, -50.0, 8.0, "nb", -35.0, 9.5,
                           [wb_npc(15.0, 7.0),
                            AgentSpec("npc2", ROLE_REACTIVE,
                                      AgentState(70.0, half, 7.0, np.pi), CAR, ("wb",))]))
    scenarios.append(cross("cross_slow_ego", 3, -35.0, 5.0, "nb", -50.0, 9.0,
                           [wb_npc(85.0, 8.0)]))
    scenarios.append(cross("cross_southbound", 4, -55.0, 9.0, "sb", 68.0, 9.0,
                           [wb_npc(30.0, 7.0)]))

    sm = straight_map()
    scenarios.append(ScenarioSpec(sm, [
        AgentSpec("ego", ROLE_EGO, AgentState(0.0, 0.0, 6.0, 0.0), CAR, ("l1",)),
        AgentSpec("adv", ROLE_ADVERSARY, AgentState(-18.0, 0.0, 10.0, 0.0), CAR, ("l1",),
                  psi=_proposal("current")),
        AgentSpec("npc1", ROLE_REACTIVE, AgentState(12.0, LANE_WIDTH, 7.0, 0.0), CAR, ("l2",)),
    ], horizon_s=12.0, seed=5, planner={"kind": "idm"}, name="straight_rear_end"))

    scenarios.append(ScenarioSpec(sm, [
        AgentSpec("ego", ROLE_EGO, AgentState(0.0, 0.0, 8.0, 0.0), CAR, ("l1",)),
        AgentSpec("adv", ROLE_ADVERSARY, AgentState(-8.0, LANE_WIDTH, 9.5, 0.0), CAR, ("l2",),
                  psi=_proposal("right")),
        AgentSpec("npc1", ROLE_REACTIVE, AgentState(18.0, -LANE_WIDTH, 7.0, 0.0), CAR, ("l0",)),
    ], horizon_s=12.0, seed=6, planner={"kind": "idm"}, name="straight_side_swipe"))

    scenarios.append(ScenarioSpec(sm, [
        AgentSpec("ego", ROLE_EGO, AgentState(0.0, 0.0, 7.0, 0.0), CAR, ("l1",)),
        AgentSpec("adv", ROLE_ADVERSARY, AgentState(-12.0, -LANE_WIDTH, 10.0, 0.0), CAR, ("l0",),
                  psi=_proposal("left")),
        AgentSpec("npc1", ROLE_REACTIVE, AgentState(30.0, 0.0, 6.0, 0.0), CAR, ("l1",)),
    ], horizon_s=12.0, seed=7, planner={"kind": "idm"}, name="straight_cut_in"))

    scenarios.append(ScenarioSpec(sm, [
        AgentSpec("ego", ROLE_EGO, AgentState(0.0, 0.0, 9.0, 0.0), CAR, ("l1",)),
        AgentSpec("adv", ROLE_ADVERSARY, AgentState(14.0, 0.0, 6.0, 0.0), CAR, ("l1",),
                  psi=_proposal("current")),
        AgentSpec("npc1", ROLE_REACTIVE, AgentState(-15.0, LANE_WIDTH, 8.0, 0.0), CAR, ("l2",)),
    ], horizon_s=12.0, seed=8, planner={"kind": "idm"}, name="straight_lead_brake"))

    cm2 = curve_map()
    scenarios.append(ScenarioSpec(cm2, [
        AgentSpec("ego", ROLE_EGO, _arc_state(43.5, 0.15, 7.0), CAR, ("outer",)),
        AgentSpec("adv", ROLE_ADVERSARY, _arc_state(43.5, -0.2, 12.0), CAR, ("outer",),
                  psi=_proposal("current")),
        AgentSpec("npc1", ROLE_REACTIVE, _arc_state(40.0, 0.5, 6.0), CAR, ("inner",)),
    ], horizon_s=12.0, seed=9, planner={"kind": "idm"}, name="curve_rear_end"))

    scenarios.append(ScenarioSpec(cm2, [
        AgentSpec("ego", ROLE_EGO, _arc_state(43.5, 0.3, 7.0), CAR, ("outer",)),
        AgentSpec("adv", ROLE_ADVERSARY, _arc_state(40.0, 0.1, 8.0), CAR, ("inner",),
                  psi=_proposal("right")),
        AgentSpec("npc1", ROLE_REACTIVE, _arc_state(40.0, 0.9, 6.0), CAR, ("inner",)),
    ], horizon_s=12.0, seed=10, planner={"kind": "idm"}, name="curve_side_swipe"))

    scenarios.append(cross("cross_fast", 11, -55.0, 10.0, "sb", 70.0, 9.0,
                           [wb_npc(28.0, 7.0)]))
    return scenarios


def corpus_route_groups():
    """Non-conflicting route groups the synthetic corpus draws traffic from.

    The third tuple element marks same-direction multi-lane groups where
    merge-in spawns (starting a lane over from the intended route) make sense.
    """
    cm, sm, cv = cross_map(), straight_map(), curve_map()
    return [
        (cm, [("eb",), ("wb",)], False),
        (cm, [("nb",), ("sb",)], False),
        (sm, [("l0",), ("l1",), ("l2",)], True),
        (cv, [("inner",), ("outer",)], True),
    ]


def write_library(out_dir) -> list:
    """Write the scenario library as JSON files; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for spec in build_library():
        path = os.path.join(out_dir, f"{spec.name}.json")
        spec.save(path)
        paths.append(path)
    return paths
