"""Guidance costs and the clean-guidance perturbation used inside sampling.

Every cost returns its value together with analytic gradients with respect to
the evaluated agent's state sequence, so the dynamics module can pull the
gradient back to action space. All functions broadcast over leading batch
dimensions: states are (..., T, 4) arrays and values come back as (...).

Cost conventions:
  * the adversarial block (collision, relative-speed, time-to-collision) is
    evaluated against the ego's *predicted* future and scaled by the agent's
    adversary weight rho;
  * route and pairwise-Gaussian terms regularize every reactive agent;
  * more negative collision/TTC values mean a more imminent ego conflict, so
    the most adversarial sample is the argmin of the adversarial block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dynamics import action_gradient, rollout_states, Trajectory
from .scene import AgentState, Route

logger = logging.getLogger(__name__)

RHO_FIXED = "fixed"
RHO_DYNAMIC = "dynamic-softmax"


@dataclass(frozen=True)
class GuidanceConfig:
    """All controllability knobs for one agent's guided sampling."""

    rho_mode: str = RHO_FIXED
    w_coll: float = 1.0
    w_v: float = 1.0
    w_ttc: float = 1.0
    w_route: float = 1.0
    w_gauss: float = 1.0
    v_diff: float = 0.0  # desired ego-minus-adversary speed gap (m/s)
    d_col: float = 10.0  # gate distance for the speed cost (m)
    lambda_t: float = 4.0  # TTC time bandwidth (s^2)
    lambda_d: float = 4.0  # TTC distance bandwidth (m^2)
    d_m: float = 1.5  # route corridor half-width before penalty (m)
    sigma: float = 1.0  # Gaussian collision bandwidth (m)
    lambda_tangential: float = 1.0
    alpha_step: float = 1.0  # guidance step scale
    gamma: float = 0.2  # partial-diffusion ratio
    # None: resolve the fixed-mode adversaries from scenario roles at run
    # time; an explicit empty tuple turns every agent non-adversarial (the
    # rho = 0 control condition)
    adversary_ids: Optional[tuple] = None

    def validate(self) -> "GuidanceConfig":
        for name in ("w_coll", "w_v", "w_ttc", "w_route", "w_gauss"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lambda_t <= 0 or self.lambda_d <= 0 or self.sigma <= 0:
            raise ValueError("bandwidths must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma outside [0, 1]")
        if self.rho_mode not in (RHO_FIXED, RHO_DYNAMIC):
            raise ValueError(f"unknown rho mode {self.rho_mode}")
        return self

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["adversary_ids"] = list(self.adversary_ids) if self.adversary_ids is not None else None
        return d

    @staticmethod
    def from_dict(d: dict) -> "GuidanceConfig":
        d = dict(d)
        if d.get("adversary_ids") is not None:
            d["adversary_ids"] = tuple(d["adversary_ids"])
        return GuidanceConfig(**d).validate()

    def override(self, **kwargs) -> "GuidanceConfig":
        return replace(self, **kwargs).validate()


@dataclass
class SceneSamples:
    """Sample-aligned candidate futures for every agent in the scene.

    Sample m of every agent forms one joint hypothesis; the ego future comes
    from the same diffusion model as the reactive agents.
    """

    ego_id: str
    states: dict  # agent_id -> (M, T, 4)
    current: dict  # agent_id -> AgentState at the plan anchor
    routes: dict  # agent_id -> Route
    rho: dict  # agent_id -> float, reactive agents only
    dt: float

    def __post_init__(self):
        shapes = {s.shape for s in self.states.values()}
        if len(shapes) > 1:
            raise ValueError(f"misaligned sample arrays: {shapes}")

    @property
    def num_samples(self) -> int:
        return next(iter(self.states.values())).shape[0]

    @property
    def horizon(self) -> int:
        return next(iter(self.states.values())).shape[1]

    def reactive_ids(self):
        return [a for a in self.states if a != self.ego_id]


# -- cost terms --------------------------------------------------------------


def cost_coll(ego_states: np.ndarray, adv_states: np.ndarray):
    """Negative summed center distance: J = -sum_t d(t).

    Returns (value, d_value/d_adv_states); the gradient at exactly coincident
    centers is zero by convention.
    """
    dvec = ego_states[..., :2] - adv_states[..., :2]
    d = np.sqrt((dvec**2).sum(-1))
    value = -d.sum(-1)
    grad = np.zeros_like(adv_states)
    safe = d > 0.0
    grad[..., :2] = np.where(safe[..., None], dvec / np.where(safe, d, 1.0)[..., None], 0.0)
    return value, grad


def cost_v(ego_states: np.ndarray, adv_states: np.ndarray, v_diff: float, d_col: float):
    """Gated absolute deviation of the relative speed from the target v_diff."""
    dvec = ego_states[..., :2] - adv_states[..., :2]
    gate = (dvec**2).sum(-1) < d_col**2
    dev = ego_states[..., 2] - adv_states[..., 2] - v_diff
    value = (np.abs(dev) * gate).sum(-1)
    grad = np.zeros_like(adv_states)
    grad[..., 2] = -np.sign(dev) * gate
    return value, grad


def ttc_point(dx, dy, dvx, dvy):
    """Constant-velocity closest approach: (time, squared distance).

    Receding pairs and degenerate relative velocity fall to the "otherwise"
    branch: zero time and the current squared separation.
    """
    dx, dy, dvx, dvy = (np.asarray(a, dtype=float) for a in (dx, dy, dvx, dvy))
    q = dvx**2 + dvy**2
    safe_q = np.where(q < 1e-12, 1.0, q)
    s_dot = dvx * dx + dvy * dy
    t_raw = -s_dot / safe_q
    approaching = (t_raw >= 0.0) & (q >= 1e-12)
    cross = dvx * dy - dvy * dx
    t_col = np.where(approaching, t_raw, 0.0)
    d_col2 = np.where(approaching, cross**2 / safe_q, dx**2 + dy**2)
    if np.ndim(t_col) == 0:
        return float(t_col), float(d_col2)
    return t_col, d_col2


def cost_ttc(ego_states: np.ndarray, adv_states: np.ndarray,
             lambda_t: float, lambda_d: float):
    """Smooth collision-imminence cost: J = sum_t -exp(-t^2/2lt - d^2/2ld).

    Velocities come from each state's (v, theta); gradients treat the
    closest-approach branch as fixed at the evaluation point.
    """
    dx = ego_states[..., 0] - adv_states[..., 0]
    dy = ego_states[..., 1] - adv_states[..., 1]
    va, tha = adv_states[..., 2], adv_states[..., 3]
    cos_a, sin_a = np.cos(tha), np.sin(tha)
    dvx = ego_states[..., 2] * np.cos(ego_states[..., 3]) - va * cos_a
    dvy = ego_states[..., 2] * np.sin(ego_states[..., 3]) - va * sin_a

    q = dvx**2 + dvy**2
    safe_q = np.where(q < 1e-12, 1.0, q)
    s_dot = dvx * dx + dvy * dy
    t_raw = -s_dot / safe_q
    approaching = (t_raw >= 0.0) & (q >= 1e-12)
    cross = dvx * dy - dvy * dx

    t_col = np.where(approaching, t_raw, 0.0)
    d_col2 = np.where(approaching, cross**2 / safe_q, dx**2 + dy**2)
    e = np.exp(-(t_col**2) / (2.0 * lambda_t) - d_col2 / (2.0 * lambda_d))
    value = -e.sum(-1)

    # branch-wise partials of (t, d^2) wrt (dx, dy, dvx, dvy)
    dt_dx = np.where(approaching, -dvx / safe_q, 0.0)
    dt_dy = np.where(approaching, -dvy / safe_q, 0.0)
    dt_dvx = np.where(approaching, -dx / safe_q + 2.0 * s_dot * dvx / safe_q**2, 0.0)
    dt_dvy = np.where(approaching, -dy / safe_q + 2.0 * s_dot * dvy / safe_q**2, 0.0)
    dd_dx = np.where(approaching, -2.0 * cross * dvy / safe_q, 2.0 * dx)
    dd_dy = np.where(approaching, 2.0 * cross * dvx / safe_q, 2.0 * dy)
    dd_dvx = np.where(approaching, 2.0 * cross * dy / safe_q - 2.0 * cross**2 * dvx / safe_q**2, 0.0)
    dd_dvy = np.where(approaching, -2.0 * cross * dx / safe_q - 2.0 * cross**2 * dvy / safe_q**2, 0.0)

    # dJ_t/du = e * (t/lt * dt/du + dd2/du / (2 ld))
    def pull(dt_du, dd_du):
        return e * (t_col / lambda_t * dt_du + dd_du / (2.0 * lambda_d))

    grad = np.zeros_like(adv_states)
    g_dx, g_dy = pull(dt_dx, dd_dx), pull(dt_dy, dd_dy)
    g_dvx, g_dvy = pull(dt_dvx, dd_dvx), pull(dt_dvy, dd_dvy)
    grad[..., 0] = -g_dx
    grad[..., 1] = -g_dy
    grad[..., 2] = -g_dvx * cos_a - g_dvy * sin_a
    grad[..., 3] = g_dvx * va * sin_a - g_dvy * va * cos_a
    return value, grad


def cost_route(states: np.ndarray, route: Route, d_m: float):
    """Hinge penalty on normal deviation beyond the margin d_m from the route.

    |d_n| equals the distance to the projected foot point, so the active-hinge
    gradient points radially away from the foot (which reduces to the segment
    normal away from the route's ends).
    """
    pos = states[..., :2]
    flat = pos.reshape(-1, 2)
    arc, offset, _ = route.project_many(flat)
    foot = route.point_at(arc)
    offset = offset.reshape(pos.shape[:-1])
    diff = (flat - foot).reshape(pos.shape)
    dist = np.maximum(np.abs(offset), 1e-12)
    excess = np.abs(offset) - d_m
    active = excess > 0.0
    value = np.where(active, excess, 0.0).sum(-1)
    grad = np.zeros_like(states)
    grad[..., :2] = np.where(active[..., None], diff / dist[..., None], 0.0)
    return value, grad


def gauss_pair(states_i: np.ndarray, states_j: np.ndarray, sigma: float, lam: float):
    """Gaussian proximity of agent j's points in agent i's heading frame.

    Returns (value, grad_i, grad_j) summed over the horizon.
    """
    rx = states_j[..., 0] - states_i[..., 0]
    ry = states_j[..., 1] - states_i[..., 1]
    c, s = np.cos(states_i[..., 3]), np.sin(states_i[..., 3])
    d_t = c * rx + s * ry
    d_n = -s * rx + c * ry
    e = np.exp(-(lam * d_t**2 + d_n**2) / (2.0 * sigma**2))
    value = e.sum(-1)

    de_drx = -e / sigma**2 * (lam * d_t * c - d_n * s)
    de_dry = -e / sigma**2 * (lam * d_t * s + d_n * c)
    grad_j = np.zeros_like(states_j)
    grad_j[..., 0] = de_drx
    grad_j[..., 1] = de_dry
    grad_i = np.zeros_like(states_i)
    grad_i[..., 0] = -de_drx
    grad_i[..., 1] = -de_dry
    grad_i[..., 3] = -e / sigma**2 * d_t * d_n * (lam - 1.0)
    return value, grad_i, grad_j


def _gauss_vs_partners(agent: np.ndarray, partners: np.ndarray, sigma: float,
                       lam: float):
    """Both orderings of (agent, partner) Gaussian terms, stacked over a
    leading partner axis; returns (value, grad wrt agent)."""
    rel = partners[..., :2] - agent[None, ..., :2]  # (P, ..., T, 2)
    inv2s2 = 1.0 / (2.0 * sigma**2)

    # agent as frame owner
    c_a, s_a = np.cos(agent[..., 3]), np.sin(agent[..., 3])
    d_t = c_a * rel[..., 0] + s_a * rel[..., 1]
    d_n = -s_a * rel[..., 0] + c_a * rel[..., 1]
    e = np.exp(-(lam * d_t**2 + d_n**2) * inv2s2)
    de_drx = -e / sigma**2 * (lam * d_t * c_a - d_n * s_a)
    de_dry = -e / sigma**2 * (lam * d_t * s_a + d_n * c_a)
    grad = np.zeros_like(agent)
    grad[..., 0] = (-de_drx).sum(axis=0)
    grad[..., 1] = (-de_dry).sum(axis=0)
    grad[..., 3] = (-e / sigma**2 * d_t * d_n * (lam - 1.0)).sum(axis=0)
    value = e.sum(axis=0).sum(-1)

    # agent as the projected point in each partner's frame
    c_p, s_p = np.cos(partners[..., 3]), np.sin(partners[..., 3])
    rx2, ry2 = -rel[..., 0], -rel[..., 1]
    d_t2 = c_p * rx2 + s_p * ry2
    d_n2 = -s_p * rx2 + c_p * ry2
    e2 = np.exp(-(lam * d_t2**2 + d_n2**2) * inv2s2)
    de_drx2 = -e2 / sigma**2 * (lam * d_t2 * c_p - d_n2 * s_p)
    de_dry2 = -e2 / sigma**2 * (lam * d_t2 * s_p + d_n2 * c_p)
    grad[..., 0] += de_drx2.sum(axis=0)
    grad[..., 1] += de_dry2.sum(axis=0)
    value = value + e2.sum(axis=0).sum(-1)
    return value, grad


def cost_gauss(scene: SceneSamples, sigma: float, lam: float, grad_agent: str,
               override_states: Optional[np.ndarray] = None,
               grad_only: bool = False):
    """Scene-level pairwise Gaussian collision cost.

    Sums over all ordered agent pairs (reactive-reactive and reactive-ego);
    the gradient is returned for `grad_agent` only, whose candidate states may
    be overridden during sampling. With `grad_only`, pairs not involving the
    agent are skipped (their value is a constant for the perturbation) and the
    involving pairs are evaluated in one stacked pass.
    """
    ids = list(scene.states)

    def states_of(a):
        if a == grad_agent and override_states is not None:
            return override_states
        return scene.states[a]

    target = states_of(grad_agent)
    if grad_only:
        partners = np.stack([states_of(a) for a in ids if a != grad_agent])
        return _gauss_vs_partners(target, partners, sigma, lam)
    value = np.zeros(target.shape[:-2])
    grad = np.zeros_like(target)
    for i in ids:
        for j in ids:
            if i == j:
                continue
            v, gi, gj = gauss_pair(states_of(i), states_of(j), sigma, lam)
            value = value + v
            if i == grad_agent:
                grad = grad + gi
            if j == grad_agent:
                grad = grad + gj
    return value, grad


def select_adversary_weights(distances_to_ego, mode: str, adversary_flags=None):
    """Per-agent adversary weights rho.

    Dynamic mode: softmax over negated distance to the ego, summing to one.
    Fixed mode: one for flagged adversaries, zero otherwise.
    """
    d = np.asarray(distances_to_ego, dtype=float)
    if d.size == 0:
        raise ValueError("need at least one reactive agent")
    if mode == RHO_DYNAMIC:
        logits = -d
        logits = logits - logits.max()
        e = np.exp(logits)
        return e / e.sum()
    if mode == RHO_FIXED:
        if adversary_flags is None:
            raise ValueError("fixed mode requires adversary flags")
        return np.asarray(adversary_flags, dtype=float)
    raise ValueError(f"unknown rho mode {mode}")


# -- composition --------------------------------------------------------------


@dataclass
class CostBreakdown:
    total: np.ndarray  # (...,)
    adv: Optional[np.ndarray]  # adversarial block, None when rho = 0 skipped it
    parts: dict = field(default_factory=dict)
    grad: Optional[np.ndarray] = None  # (..., T, 4)


def total_cost(scene: SceneSamples, agent_id: str, config: GuidanceConfig,
               states: Optional[np.ndarray] = None,
               need_adv: bool = False, grad_only: bool = False) -> CostBreakdown:
    """Composite guidance cost J = rho * J_adv + J_reg for one agent.

    `states` overrides the agent's scene entry (the candidate being denoised);
    gradients are taken with respect to those states only. Zero-weight terms
    are skipped; the adversarial block is evaluated whenever rho is nonzero or
    `need_adv` asks for it (adversary-role filtering). `grad_only` lets the
    Gaussian term drop constant pairs inside the sampling loop.
    """
    if agent_id == scene.ego_id:
        raise ValueError("guidance costs are defined for reactive agents only")
    if states is None:
        states = scene.states[agent_id]
    rho = float(scene.rho.get(agent_id, 0.0))
    ego_states = scene.states[scene.ego_id]

    total = np.zeros(states.shape[:-2])
    grad = np.zeros_like(states)
    parts = {}
    adv = None

    if rho != 0.0 or need_adv:
        adv = np.zeros(states.shape[:-2])
        adv_grad = np.zeros_like(states)
        for name, w, fn in (
            ("coll", config.w_coll, lambda: cost_coll(ego_states, states)),
            ("v", config.w_v, lambda: cost_v(ego_states, states, config.v_diff, config.d_col)),
            ("ttc", config.w_ttc, lambda: cost_ttc(ego_states, states, config.lambda_t, config.lambda_d)),
        ):
            if w == 0.0:
                parts[name] = np.zeros(states.shape[:-2])
                continue
            v, g = fn()
            parts[name] = v
            adv = adv + w * v
            adv_grad = adv_grad + w * g
        total = total + rho * adv
        grad = grad + rho * adv_grad

    if config.w_route != 0.0:
        v, g = cost_route(states, scene.routes[agent_id], config.d_m)
        parts["route"] = v
        total = total + config.w_route * v
        grad = grad + config.w_route * g
    else:
        parts["route"] = np.zeros(states.shape[:-2])

    if config.w_gauss != 0.0:
        v, g = cost_gauss(scene, config.sigma, config.lambda_tangential,
                          grad_agent=agent_id, override_states=states,
                          grad_only=grad_only)
        parts["gauss"] = v
        total = total + config.w_gauss * v
        grad = grad + config.w_gauss * g
    else:
        parts["gauss"] = np.zeros(states.shape[:-2])

    return CostBreakdown(total=total, adv=adv, parts=parts, grad=grad)


def guided_step(tau0_hat: np.ndarray, k: int, scene: SceneSamples, agent_id: str,
                config: GuidanceConfig, sched) -> np.ndarray:
    """Clean-guidance perturbation: tau0 - alpha * Sigma_k * dJ/d(actions).

    `tau0_hat` is the predicted clean action trajectory, (T, 2) or batched
    (M, T, 2), in physical units. The cost gradient is taken with respect to
    the clean prediction itself (the noisy-input Jacobian is approximated as
    identity), pulled back through the rollout so the perturbation stays in
    action space. Rows with non-finite gradients are left unperturbed.
    """
    if not 1 <= k <= sched.K:
        raise ValueError(f"step {k} outside 1..{sched.K}")
    actions = np.asarray(tau0_hat, dtype=float)
    squeeze = actions.ndim == 2
    if squeeze:
        actions = actions[None]
    s0 = scene.current[agent_id].as_array()
    states = rollout_states(s0, actions, scene.dt)
    bd = total_cost(scene, agent_id, config, states=states, grad_only=True)
    g = action_gradient(s0, actions, states, bd.grad, scene.dt)
    out = actions - config.alpha_step * sched.posterior_variance(k) * g
    bad = ~np.all(np.isfinite(out), axis=(1, 2))
    if bad.any():
        logger.warning("guided_step: non-finite gradient for %d/%d samples at k=%d; skipped",
                       int(bad.sum()), len(bad), k)
        out[bad] = actions[bad]
    return out[0] if squeeze else out


def filter_samples(samples, costs, role: str) -> int:
    """Pick the sample index for a role.

    Reactive agents take the lowest total cost; adversaries take the most
    adversarial sample, which under this module's sign convention is the
    lowest (most negative) adversarial-block value. Ties break toward the
    lowest index.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 1 or len(costs) < 1:
        raise ValueError("costs must be a nonempty vector")
    if len(samples) != len(costs):
        raise ValueError("samples/costs length mismatch")
    return int(np.argmin(costs))


class GuidanceHook:
    """Adapter binding a scene, an agent, and a config to the sampler loop.

    `perturb` applies the clean-guidance step; `final_costs` evaluates the
    finished samples and returns the filtering cost for the agent's role.
    """

    def __init__(self, scene: SceneSamples, agent_id: str, config: GuidanceConfig,
                 sched, role: str) -> None:
        self.scene = scene
        self.agent_id = agent_id
        self.config = config
        self.sched = sched
        self.role = role
        self.breakdown: Optional[CostBreakdown] = None

    def perturb(self, actions: np.ndarray, k: int, rows=None) -> np.ndarray:
        cfg = self.config
        rho = self.scene.rho.get(self.agent_id, 0.0)
        adv_active = rho != 0.0 and (cfg.w_coll, cfg.w_v, cfg.w_ttc) != (0.0, 0.0, 0.0)
        if cfg.alpha_step == 0.0 or (
                not adv_active and cfg.w_route == 0.0 and cfg.w_gauss == 0.0):
            return actions
        return guided_step(actions, k, self.scene, self.agent_id, cfg, self.sched)

    def final_costs(self, trajectories) -> np.ndarray:
        states = np.stack([t.states for t in trajectories])
        adversarial = self.role == "adversary" and self.scene.rho.get(self.agent_id, 0.0) > 0.0
        bd = total_cost(self.scene, self.agent_id, self.config, states=states,
                        need_adv=adversarial)
        self.breakdown = bd
        if adversarial:
            return bd.adv
        return bd.total
