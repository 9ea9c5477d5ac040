"""Closed-loop simulation: plan the ego, draw guided (optionally partially
diffused) samples for reactive agents, execute a few steps, detect events, log.

Timing layout: `initial_states` is the scene at t = 0; executed step s applies
`actions[s]` and lands on `states[s]` at time (s + 1) * dt. Replanning happens
every `replan_stride` executed steps (2 Hz at the defaults).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import scene as sc
from .diffusion import DEFAULT_NUM_SAMPLES, TrajectoryDenoiser, add_noise
from .dynamics import (DEFAULT_LIMITS, Trajectory, action_gradient, clamp_actions,
                       rollout_states, step_array)
from .geometry import wrap_angle
from .guidance import (GuidanceConfig, SceneSamples, filter_samples,
                       select_adversary_weights, total_cost)
from .planners import make_planner
from .proposals import ProposalSpec, find_conflict, make_proposal, resolve_lane_choice
from .scene import AgentState, ScenarioSpec, build_context

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    horizon: int = 32  # plan length in steps (3.2 s)
    replan_stride: int = 5  # executed steps between replans (2 Hz)
    t_hist: int = 10
    max_duration: float = 12.0
    num_samples: int = DEFAULT_NUM_SAMPLES
    seed: int = 0

    def validate(self) -> "SimConfig":
        if min(self.dt, self.max_duration) <= 0 or min(
                self.horizon, self.replan_stride, self.num_samples) < 1:
            raise ValueError("sim config fields must be positive")
        if self.replan_stride > self.horizon:
            raise ValueError("replan stride exceeds plan horizon")
        if self.t_hist != sc.T_HIST:
            raise ValueError(f"t_hist must be {sc.T_HIST} (fixed context layout)")
        return self


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    agent_i: str
    agent_j: str
    rel_speed: float  # speed of i minus speed of j (ego first when present)
    angle: float  # heading of j minus heading of i, wrapped
    point: tuple  # centroid of j in i's body frame


@dataclass(frozen=True)
class OffroadEvent:
    time: float
    agent_id: str


@dataclass
class TickRecord:
    index: int
    t0: float
    rho: dict
    chosen: dict  # agent -> sample index (-1 for the planner ego)
    costs: dict  # agent -> list of sample costs
    proposal: dict  # agent -> {"offset":, "gamma":, "conflict": bool}
    plans: dict  # agent -> (T, 2) actions


@dataclass
class SimLog:
    scenario_name: str
    seed: int
    dt: float
    agent_ids: list
    roles: dict
    shapes: dict  # agent -> (length, width)
    initial_states: np.ndarray  # (N, 4)
    states: np.ndarray  # (S, N, 4)
    actions: np.ndarray  # (S, N, 2)
    times: np.ndarray  # (S,)
    ticks: list = field(default_factory=list)
    collisions: list = field(default_factory=list)
    offroads: list = field(default_factory=list)
    terminated: str = "max_duration"
    duration: float = 0.0
    config: dict = field(default_factory=dict)


def detect_events(t: float, states: np.ndarray, shapes, agent_ids, roles,
                  lanemap, seen_pairs: set, seen_offroad: set):
    """First-occurrence collision and offroad events for one executed step."""
    from .geometry import obb_overlap

    collisions, offroads = [], []
    n = len(agent_ids)
    for i in range(n):
        for j in range(i + 1, n):
            pair = (agent_ids[i], agent_ids[j])
            if pair in seen_pairs:
                continue
            if obb_overlap(states[i, :2], states[i, 3], shapes[i],
                           states[j, :2], states[j, 3], shapes[j]):
                seen_pairs.add(pair)
                a, b = i, j
                if roles[agent_ids[j]] == "ego":
                    a, b = j, i
                si, sj = states[a], states[b]
                c, s = np.cos(si[3]), np.sin(si[3])
                dx, dy = sj[0] - si[0], sj[1] - si[1]
                collisions.append(CollisionEvent(
                    time=t, agent_i=agent_ids[a], agent_j=agent_ids[b],
                    rel_speed=float(si[2] - sj[2]),
                    angle=float(wrap_angle(sj[3] - si[3])),
                    point=(float(c * dx + s * dy), float(-s * dx + c * dy))))
    offroad_mask = lanemap.points_offroad(states[:, :2])
    for i in range(n):
        if offroad_mask[i] and agent_ids[i] not in seen_offroad:
            seen_offroad.add(agent_ids[i])
            offroads.append(OffroadEvent(time=t, agent_id=agent_ids[i]))
    return collisions, offroads


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0x7FFFFFFF for k in keys]))


def _agent_guidance(defaults: GuidanceConfig, psi: dict) -> GuidanceConfig:
    overrides = dict(psi.get("guidance", {}))
    return defaults.override(**overrides) if overrides else defaults


def _guidance_active(cfg: GuidanceConfig, rho: float) -> bool:
    adv = rho != 0.0 and (cfg.w_coll, cfg.w_v, cfg.w_ttc) != (0.0, 0.0, 0.0)
    return cfg.alpha_step != 0.0 and (adv or cfg.w_route != 0.0 or cfg.w_gauss != 0.0)


class _JointGuidance:
    """Clean guidance over the tick's joint denoising chain.

    All agents' sample rows co-evolve in one reverse chain (the scene extends
    into the batch dimension); at every step the in-progress clean predictions
    of the whole scene are rolled out once, and each guided agent's rows are
    perturbed against that scene. Rows still frozen by partial diffusion
    contribute their proposal actions.
    """

    def __init__(self, ids, ego_id, guided_ids, configs, rho, routes, current,
                 cur_rows, fallback_actions, num_samples, dt, sched):
        self.ids = ids
        self.ego_id = ego_id
        self.guided_ids = guided_ids
        self.configs = configs
        self.rho = rho
        self.routes = routes
        self.current = current
        self.cur_rows = cur_rows  # (R, 4) current state repeated per sample row
        self.full = fallback_actions  # (R, T, 2) latest clean actions per row
        self.M = num_samples
        self.dt = dt
        self.sched = sched

    def scene_from(self, states_rows: np.ndarray) -> SceneSamples:
        M = self.M
        return SceneSamples(
            ego_id=self.ego_id,
            states={aid: states_rows[i * M:(i + 1) * M]
                    for i, aid in enumerate(self.ids)},
            current=self.current, routes=self.routes, rho=self.rho, dt=self.dt)

    def perturb(self, actions: np.ndarray, k: int, rows) -> np.ndarray:
        self.full[rows] = actions
        states = rollout_states(self.cur_rows, self.full, self.dt)
        scene = self.scene_from(states)
        sigma2 = self.sched.posterior_variance(k)
        M = self.M
        state_grads = np.zeros_like(states)
        scales = np.zeros(len(self.full))
        blocks = []
        for i, aid in enumerate(self.ids):
            if aid not in self.guided_ids:
                continue
            cfg = self.configs[aid]
            if not _guidance_active(cfg, self.rho.get(aid, 0.0)):
                continue
            block = slice(i * M, (i + 1) * M)
            pos = int(np.searchsorted(rows, i * M))
            if pos >= len(rows) or rows[pos] != i * M:
                continue  # this agent's rows are still frozen at level k
            bd = total_cost(scene, aid, cfg, states=states[block], grad_only=True)
            state_grads[block] = bd.grad
            scales[block] = cfg.alpha_step * sigma2
            blocks.append((block, pos))
        if not blocks:
            return actions
        # one reverse-mode pullback covers every guided row
        grad = action_gradient(self.cur_rows, self.full, states, state_grads, self.dt)
        out = actions.copy()
        for block, pos in blocks:
            new = self.full[block] - scales[block, None, None] * grad[block]
            bad = ~np.all(np.isfinite(new), axis=(1, 2))
            if bad.any():
                logger.warning("non-finite guidance at k=%d; %d rows skipped",
                               k, int(bad.sum()))
                new[bad] = self.full[block][bad]
            out[pos: pos + M] = new
            self.full[block] = new
        return out


def run(scenario: ScenarioSpec, sim: SimConfig, model: TrajectoryDenoiser,
        guidance_defaults: Optional[GuidanceConfig] = None) -> SimLog:
    """Run one closed-loop scenario; deterministic for fixed seeds."""
    sim.validate()
    if model.horizon != sim.horizon or model.dt != sim.dt:
        raise ValueError("model horizon/dt do not match the sim config")
    defaults = guidance_defaults if guidance_defaults is not None else GuidanceConfig()
    agents = scenario.agents
    ids = [a.agent_id for a in agents]
    roles = {a.agent_id: a.role for a in agents}
    shapes = np.array([[a.shape.length, a.shape.width] for a in agents])
    routes = [scenario.route_of(a) for a in agents]
    route_of = dict(zip(ids, routes))
    ego_idx = next(i for i, a in enumerate(agents) if a.role == sc.ROLE_EGO)
    ego_id = ids[ego_idx]
    reactive_idx = [i for i in range(len(ids)) if i != ego_idx]
    # adversary_ids=None resolves to the scenario's adversary roles
    role_adversaries = tuple(a.agent_id for a in agents if a.role == sc.ROLE_ADVERSARY)
    configs = {}
    for i in reactive_idx:
        cfg = _agent_guidance(defaults, agents[i].psi)
        if cfg.adversary_ids is None:
            cfg = cfg.override(adversary_ids=role_adversaries)
        configs[ids[i]] = cfg.validate()
    planner = make_planner(scenario.planner)
    adv_flags = {ids[i]: ids[i] in configs[ids[i]].adversary_ids for i in reactive_idx}

    # an adversary whose proposal picks a neighbor lane intends that lane:
    # its context, route guidance, and conflict search all follow the swap
    for i in reactive_idx:
        prop = agents[i].psi.get("proposal")
        if prop and adv_flags[ids[i]] and prop.get("lane", "current") != "current":
            routes[i] = resolve_lane_choice(scenario.lanemap, agents[i].route_lanes,
                                            prop["lane"])
    route_of = dict(zip(ids, routes))

    max_t = min(scenario.horizon_s, sim.max_duration)
    n_steps_max = int(round(max_t / sim.dt))
    n = len(ids)
    history = np.empty((n_steps_max + 1, n, 4))
    history[0] = np.stack([a.state.as_array() for a in agents])
    exec_actions = np.empty((n_steps_max, n, 2))

    ticks = []
    collisions, offroads = [], []
    seen_pairs, seen_offroad = set(), set()
    terminated = "max_duration"
    step_count = 0
    tick = 0
    M = sim.num_samples
    flat = sim.horizon * 2

    while step_count < n_steps_max:
        contexts = {aid: build_context(aid, history[: step_count + 1], ids, shapes,
                                       routes, step_count) for aid in ids}
        cur = history[step_count]
        cur_states = {aid: AgentState.from_array(cur[i]) for i, aid in enumerate(ids)}

        # adversary weights from current distances to the ego
        rho = {}
        if reactive_idx:
            dists = np.array([np.hypot(cur[i, 0] - cur[ego_idx, 0],
                                       cur[i, 1] - cur[ego_idx, 1])
                              for i in reactive_idx])
            mode = defaults.rho_mode
            if mode == "dynamic-softmax":
                rho_vals = select_adversary_weights(dists, mode)
            else:
                rho_vals = select_adversary_weights(
                    dists, mode, [adv_flags[ids[i]] for i in reactive_idx])
            rho = {ids[i]: float(rho_vals[j]) for j, i in enumerate(reactive_idx)}

        ego_others = [(cur[i], shapes[i]) for i in range(n) if i != ego_idx]
        ego_plan = planner.plan(contexts[ego_id], route_of[ego_id], ego_others,
                                sim.horizon, sim.dt)

        # joint guided sampling: every agent contributes M co-evolving sample
        # rows (the ego rows are its diffusion-predicted future); adversaries
        # with a live conflict enter the chain partially diffused from their
        # proposal
        eff_role = {}
        rec_prop = {}
        proposals = {}
        for i in reactive_idx:
            aid = ids[i]
            eff_role[aid] = ("adversary"
                             if roles[aid] == sc.ROLE_ADVERSARY and rho[aid] > 0.0
                             else "reactive")
            prop_cfg = agents[i].psi.get("proposal")
            rec_prop[aid] = {"offset": None, "gamma": None, "conflict": False}
            # proposals are adversarial machinery: only effectively adversarial
            # agents (rho > 0) seed partial diffusion with them
            if prop_cfg and eff_role[aid] == "adversary":
                base_path = route_of[aid]
                conflict = find_conflict(route_of[ego_id], base_path,
                                         cur_states[ego_id], cur_states[aid],
                                         pursuit_horizon=sim.horizon * sim.dt,
                                         ego_plan=ego_plan)
                if conflict is not None:
                    offset = float(prop_cfg.get("offsets", [0.0])[0])
                    spec = ProposalSpec(target_accel=prop_cfg.get("accel", "auto"),
                                        lateral_offset=offset,
                                        lane_choice=prop_cfg.get("lane", "current"))
                    proposals[aid] = make_proposal(cur_states[aid], base_path,
                                                   conflict, spec, sim.horizon, sim.dt)
                    cfg = configs[aid]
                    rec_prop[aid] = {"offset": offset, "gamma": cfg.gamma,
                                     "conflict": True}

        rng_tick = _rng(scenario.seed, sim.seed, tick, 0)
        feats = np.concatenate([
            np.tile(model.normalize_features(contexts[aid].feature_vector()), (M, 1))
            for aid in ids])
        z0 = np.empty((n * M, flat))
        start_k = np.full(n * M, model.k_steps)
        fallback = np.zeros((n * M, sim.horizon, 2))
        for i, aid in enumerate(ids):
            block = slice(i * M, (i + 1) * M)
            draw = rng_tick.standard_normal((M, flat))
            if aid in proposals:
                k_p = int(round(configs[aid].gamma * model.k_steps))
                start_k[block] = k_p
                prop_actions = proposals[aid].actions
                fallback[block] = prop_actions
                if k_p == model.k_steps:
                    z0[block] = draw
                else:
                    z_prop = model.normalize_actions(prop_actions).reshape(1, flat)
                    z0[block] = add_noise(z_prop, k_p, draw, model.schedule_)
            else:
                z0[block] = draw

        guided_ids = {ids[i] for i in reactive_idx}
        joint = _JointGuidance(
            ids=ids, ego_id=ego_id, guided_ids=guided_ids, configs=configs,
            rho=rho, routes=route_of, current=cur_states,
            cur_rows=np.repeat(cur, M, axis=0), fallback_actions=fallback,
            num_samples=M, dt=sim.dt, sched=model.schedule_)
        z, failed = model.denoise_rows(z0, start_k, feats, rng_tick,
                                       perturb=joint.perturb)
        actions_rows = model.denormalize_actions(z.reshape(n * M, sim.horizon, 2))
        frozen = start_k == 0  # gamma = 0 rows pass the proposal through
        actions_rows[frozen] = fallback[frozen]
        actions_rows[failed] = 0.0
        states_rows = rollout_states(np.repeat(cur, M, axis=0), actions_rows, sim.dt)
        scene_final = joint.scene_from(states_rows)

        plans = {ego_id: ego_plan}
        rec_chosen = {ego_id: -1}
        rec_costs = {}
        for i in reactive_idx:
            aid = ids[i]
            cfg = configs[aid]
            block = slice(i * M, (i + 1) * M)
            bd = total_cost(scene_final, aid, cfg, need_adv=eff_role[aid] == "adversary")
            costs = np.asarray(bd.adv if eff_role[aid] == "adversary" else bd.total,
                               dtype=float)
            costs[failed[block]] = np.inf
            if np.all(np.isinf(costs)):
                terminated = "sampling_failure"
                logger.error("all samples non-finite for %s at tick %d", aid, tick)
                break
            choice = filter_samples(list(range(M)), costs, eff_role[aid])
            plans[aid] = Trajectory(initial_state=cur_states[aid],
                                    actions=actions_rows[block][choice],
                                    states=states_rows[block][choice], dt=sim.dt)
            rec_chosen[aid] = choice
            rec_costs[aid] = [float(c) for c in costs]
        if terminated == "sampling_failure":
            break

        ticks.append(TickRecord(
            index=tick, t0=step_count * sim.dt, rho=rho, chosen=rec_chosen,
            costs=rec_costs, proposal=rec_prop,
            plans={aid: plans[aid].actions.copy() for aid in plans}))

        # execute the first replan_stride steps of every plan
        stop = False
        for s in range(sim.replan_stride):
            if step_count >= n_steps_max:
                break
            acts = np.stack([plans[aid].actions[s] for aid in ids])
            acts = clamp_actions(acts)
            new = step_array(history[step_count], acts, sim.dt)
            exec_actions[step_count] = acts
            history[step_count + 1] = new
            step_count += 1
            t = step_count * sim.dt
            ev_c, ev_o = detect_events(t, new, shapes, ids, roles, scenario.lanemap,
                                       seen_pairs, seen_offroad)
            collisions.extend(ev_c)
            offroads.extend(ev_o)
            for e in ev_c:
                if {roles[e.agent_i], roles[e.agent_j]} == {"ego", "adversary"}:
                    terminated = "ego_adversary_collision"
                    stop = True
            if stop:
                break
        if stop:
            break
        tick += 1

    S = step_count
    return SimLog(
        scenario_name=scenario.name, seed=int(sim.seed), dt=sim.dt, agent_ids=ids,
        roles=roles, shapes={aid: tuple(shapes[i]) for i, aid in enumerate(ids)},
        initial_states=history[0].copy(), states=history[1: S + 1].copy(),
        actions=exec_actions[:S].copy(),
        times=(np.arange(S) + 1) * sim.dt, ticks=ticks, collisions=collisions,
        offroads=offroads, terminated=terminated, duration=S * sim.dt,
        config={"sim": sim.__dict__, "guidance_defaults": defaults.to_dict()})


# -- JSONL serialization ------------------------------------------------------


def write_jsonl(log: SimLog, path) -> None:
    """One meta record, one record per tick (with its executed steps), one
    events record."""
    stride = int(log.config.get("sim", {}).get("replan_stride",
                 max(1, round(len(log.times) / max(len(log.ticks), 1)))))
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "type": "meta", "schema_version": SCHEMA_VERSION,
            "scenario_name": log.scenario_name, "seed": log.seed, "dt": log.dt,
            "agent_ids": log.agent_ids, "roles": log.roles,
            "shapes": {k: list(v) for k, v in log.shapes.items()},
            "initial_states": log.initial_states.tolist(),
            "config": log.config,
        }) + "\n")
        for rec in log.ticks:
            lo = int(round(rec.t0 / log.dt))
            hi = min(lo + stride, len(log.times))
            fh.write(json.dumps({
                "type": "tick", "index": rec.index, "t0": rec.t0, "rho": rec.rho,
                "chosen": rec.chosen, "costs": rec.costs, "proposal": rec.proposal,
                "plans": {k: v.tolist() for k, v in rec.plans.items()},
                "executed": {
                    "times": log.times[lo:hi].tolist(),
                    "states": log.states[lo:hi].tolist(),
                    "actions": log.actions[lo:hi].tolist(),
                },
            }) + "\n")
        fh.write(json.dumps({
            "type": "events",
            "collisions": [e.__dict__ for e in log.collisions],
            "offroads": [e.__dict__ for e in log.offroads],
            "terminated": log.terminated, "duration": log.duration,
        }) + "\n")


def read_jsonl(path) -> SimLog:
    meta = None
    ticks = []
    times, states, actions = [], [], []
    events = None
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "meta":
                if rec["schema_version"] != SCHEMA_VERSION:
                    raise ValueError(f"unsupported schema {rec['schema_version']}")
                meta = rec
            elif rec["type"] == "tick":
                ticks.append(TickRecord(
                    index=rec["index"], t0=rec["t0"], rho=rec["rho"],
                    chosen=rec["chosen"], costs=rec["costs"], proposal=rec["proposal"],
                    plans={k: np.asarray(v) for k, v in rec["plans"].items()}))
                times.extend(rec["executed"]["times"])
                states.extend(rec["executed"]["states"])
                actions.extend(rec["executed"]["actions"])
            elif rec["type"] == "events":
                events = rec
    if meta is None or events is None:
        raise ValueError("log is missing meta or events records")
    return SimLog(
        scenario_name=meta["scenario_name"], seed=meta["seed"], dt=meta["dt"],
        agent_ids=meta["agent_ids"], roles=meta["roles"],
        shapes={k: tuple(v) for k, v in meta["shapes"].items()},
        initial_states=np.asarray(meta["initial_states"]),
        states=np.asarray(states), actions=np.asarray(actions),
        times=np.asarray(times), ticks=ticks,
        collisions=[CollisionEvent(time=e["time"], agent_i=e["agent_i"],
                                   agent_j=e["agent_j"], rel_speed=e["rel_speed"],
                                   angle=e["angle"], point=tuple(e["point"]))
                    for e in events["collisions"]],
        offroads=[OffroadEvent(time=e["time"], agent_id=e["agent_id"])
                  for e in events["offroads"]],
        terminated=events["terminated"], duration=events["duration"],
        config=meta.get("config", {}))
