"""Synthetic driving corpus: procedural rule-following traffic on the library
maps, recorded as (decision context, clean action trajectory) training pairs.

Vehicles follow their routes with IDM longitudinally (leader = nearest vehicle
ahead on the same route) and pure pursuit laterally, with randomized desired
speeds, spacings, and small lateral-offset perturbations. The recorded action
profiles double as the reference "realistic driving" distribution for the
realism metric.
"""

from __future__ import annotations

import numpy as np

from .diffusion import TrainingCorpus
from .dynamics import DEFAULT_LIMITS, step_array
from .planners import IdmConfig, idm_accel, _pure_pursuit
from .scene import build_context
from .scenarios import corpus_route_groups

EPISODE_STEPS = 140
WINDOW_STRIDE = 5
CAR_SHAPE = (4.6, 1.9)


def _spawn_episode(group, rng):
    """Place 1..5 vehicles on compatible routes with safe initial spacing.

    Single-vehicle episodes keep empty-neighborhood contexts in distribution;
    merge-in spawns (one lane off the intended route, converging) teach the
    prior how lane changes toward a route look.
    """
    lanemap, route_ids, allow_merge = group
    n = 1 if rng.uniform() < 0.15 else int(rng.integers(2, 6))
    routes, arcs, states, cfgs, offsets = [], [], [], [], []
    used = {}
    for _ in range(n):
        rid = route_ids[int(rng.integers(len(route_ids)))]
        route = lanemap.route_from_lanes(rid)
        arc = float(rng.uniform(5.0, max(6.0, route.length - 60.0)))
        taken = used.setdefault(rid, [])
        if any(abs(arc - a) < 14.0 for a in taken):
            continue
        taken.append(arc)
        # initial speeds beyond the desired range teach deceleration
        v = float(rng.uniform(2.0, 12.0))
        lateral0 = 0.0
        if allow_merge and rng.uniform() < 0.25:
            lateral0 = float(rng.choice([-1.0, 1.0]) * rng.uniform(2.5, 3.5))
        pos = route.point_at(arc)
        heading = route.tangent_at(arc)
        if lateral0 != 0.0:
            pos = pos + lateral0 * np.array([-np.sin(heading), np.cos(heading)])
        routes.append(route)
        arcs.append(arc)
        states.append([pos[0], pos[1], v, heading])
        cfgs.append(IdmConfig(v0=float(rng.uniform(4.0, 11.0))))
        offsets.append(float(np.clip(rng.normal(0.0, 0.35), -1.0, 1.0)))
    return routes, np.asarray(states, dtype=float), cfgs, offsets


def _simulate_episode(routes, states0, cfgs, offsets, steps, dt):
    """Roll the rule-following agents; returns (state history, actions)."""
    n = len(routes)
    history = np.empty((steps + 1, n, 4))
    history[0] = states0
    actions = np.empty((steps, n, 2))
    cur = states0.copy()
    for t in range(steps):
        projs = [routes[i].project((cur[i, 0], cur[i, 1])) for i in range(n)]
        for i in range(n):
            gap, v_lead = None, None
            for j in range(n):
                if j == i or routes[j] is not routes[i]:
                    continue
                ahead = projs[j].arc_length - projs[i].arc_length
                if ahead <= 0.0:
                    continue
                g = ahead - CAR_SHAPE[0]
                if gap is None or g < gap:
                    gap, v_lead = max(g, 0.1), cur[j, 2]
            accel = idm_accel(cur[i, 2], v_lead, gap, cfgs[i])
            yaw = _pure_pursuit(cur[i], routes[i], projs[i].arc_length, offsets[i],
                                DEFAULT_LIMITS)
            actions[t, i] = (accel, yaw)
        for i in range(n):
            cur[i] = step_array(cur[i], actions[t, i], dt, DEFAULT_LIMITS)
        history[t + 1] = cur
    return history, actions


def generate_corpus(n_episodes: int = 260, horizon: int = 32, dt: float = 0.1,
                    seed: int = 0, episode_steps: int = EPISODE_STEPS,
                    window_stride: int = WINDOW_STRIDE):
    """Build the training corpus.

    Returns (TrainingCorpus, profiles) where profiles holds the corpus driving
    statistics (longitudinal accel, lateral accel, jerk) for the realism
    reference.
    """
    rng = np.random.default_rng(seed)
    groups = corpus_route_groups()
    feats, targets = [], []
    prof_accel, prof_lat, prof_jerk = [], [], []

    for _ in range(n_episodes):
        group = groups[int(rng.integers(len(groups)))]
        routes, states0, cfgs, offsets = _spawn_episode(group, rng)
        if len(routes) < 1:
            continue
        history, actions = _simulate_episode(routes, states0, cfgs, offsets,
                                             episode_steps, dt)
        n = len(routes)
        ids = [f"a{i}" for i in range(n)]
        shapes = np.tile(np.asarray(CAR_SHAPE), (n, 1))
        # windows whose trajectory runs near the route's end are dropped: the
        # clamped projection there no longer describes the intended path
        end_arc = np.empty(n)
        for i in range(n):
            prof_accel.append(actions[:, i, 0])
            prof_lat.append(history[:-1, i, 2] * actions[:, i, 1])
            prof_jerk.append(np.diff(actions[:, i, 0]) / dt)
        for t0 in range(0, episode_steps - horizon + 1, window_stride):
            for i in range(n):
                tail = history[t0 + horizon, i, :2]
                arc = routes[i].project(tail).arc_length
                if arc > routes[i].length - 8.0:
                    continue
                ctx = build_context(ids[i], history, ids, shapes, routes, t0)
                feats.append(ctx.feature_vector())
                targets.append(actions[t0: t0 + horizon, i])

    corpus = TrainingCorpus(features=np.asarray(feats),
                            actions=np.asarray(targets), dt=dt)
    profiles = {
        "long_accel": np.concatenate(prof_accel),
        "lat_accel": np.concatenate(prof_lat),
        "jerk": np.concatenate(prof_jerk),
    }
    return corpus, profiles
