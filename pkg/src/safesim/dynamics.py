"""Unicycle dynamics: single step, horizon rollout, inverse dynamics, and exact
reverse-mode gradients of trajectory costs with respect to actions.

Conventions (shared by every caller):
  * forward Euler with the position advanced using the *pre-update* speed and
    heading, so inverse dynamics is exact for speed and heading;
  * speed clamped to [0, v_max], |accel| and |yaw rate| clamped to limits;
  * subgradients through any clamp boundary are zero.

All functions accept arbitrary leading batch dimensions; states are (..., 4)
arrays laid out as (x, y, v, theta) and actions are (..., 2) as
(accel, yaw_rate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle
from .scene import ActionInput, AgentState


@dataclass(frozen=True)
class Limits:
    v_max: float = 30.0
    accel_max: float = 8.0
    yaw_rate_max: float = 1.5


DEFAULT_LIMITS = Limits()


_PI = np.pi
_TWO_PI = 2.0 * np.pi


def clamp_actions(actions: np.ndarray, limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    actions = np.asarray(actions, dtype=float)
    out = np.empty_like(actions)
    out[..., 0] = np.minimum(np.maximum(actions[..., 0], -limits.accel_max), limits.accel_max)
    out[..., 1] = np.minimum(np.maximum(actions[..., 1], -limits.yaw_rate_max), limits.yaw_rate_max)
    return out


def step_array(state: np.ndarray, action: np.ndarray, dt: float,
               limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    """One Euler step of the unicycle model on (..., 4) states."""
    s = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    a = np.minimum(np.maximum(action[..., 0], -limits.accel_max), limits.accel_max)
    w = np.minimum(np.maximum(action[..., 1], -limits.yaw_rate_max), limits.yaw_rate_max)
    v = s[..., 2]
    th = s[..., 3]
    out = np.empty(np.broadcast_shapes(s.shape[:-1], a.shape) + (4,), dtype=float)
    out[..., 0] = s[..., 0] + v * np.cos(th) * dt
    out[..., 1] = s[..., 1] + v * np.sin(th) * dt
    out[..., 2] = np.minimum(np.maximum(v + a * dt, 0.0), limits.v_max)
    th2 = np.mod(th + w * dt + _PI, _TWO_PI) - _PI
    out[..., 3] = np.where(th2 == -_PI, _PI, th2)
    return out


def step(s: AgentState, a: ActionInput, dt: float,
         limits: Limits = DEFAULT_LIMITS) -> AgentState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return AgentState.from_array(step_array(s.as_array(), a.as_array(), dt, limits))


def rollout_states(s0: np.ndarray, actions: np.ndarray, dt: float,
                   limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    """Iterate the unicycle step over a horizon: (..., 4) x (..., T, 2) -> (..., T, 4).

    The loop body inlines `step_array` (same operations in the same order, so
    the states are bit-identical to repeated single steps) to keep the hot
    sampling path cheap.
    """
    actions = np.asarray(actions, dtype=float)
    T = actions.shape[-2]
    out = np.empty(actions.shape[:-2] + (T, 4), dtype=float)
    cur = np.broadcast_to(np.asarray(s0, dtype=float), actions.shape[:-2] + (4,))
    a_max, w_max, v_max = limits.accel_max, limits.yaw_rate_max, limits.v_max
    x, y, v, th = cur[..., 0], cur[..., 1], cur[..., 2], cur[..., 3]
    for t in range(T):
        at = actions[..., t, :]
        a = np.minimum(np.maximum(at[..., 0], -a_max), a_max)
        w = np.minimum(np.maximum(at[..., 1], -w_max), w_max)
        step = out[..., t, :]
        np.add(x, v * np.cos(th) * dt, out=step[..., 0])
        np.add(y, v * np.sin(th) * dt, out=step[..., 1])
        step[..., 2] = np.minimum(np.maximum(v + a * dt, 0.0), v_max)
        th2 = np.mod(th + w * dt + _PI, _TWO_PI) - _PI
        step[..., 3] = np.where(th2 == -_PI, _PI, th2)
        x, y, v, th = step[..., 0], step[..., 1], step[..., 2], step[..., 3]
    return out


@dataclass(frozen=True)
class Trajectory:
    """A fixed-horizon action sequence plus the states it induces by rollout.

    The stored actions are the raw commands; `step_array` clamps internally,
    so re-rolling the stored actions from `initial_state` reproduces `states`
    bit-exactly.
    """

    initial_state: AgentState
    actions: np.ndarray  # (T, 2)
    states: np.ndarray  # (T, 4)
    dt: float

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def check_consistent(self, limits: Limits = DEFAULT_LIMITS) -> bool:
        rerolled = rollout_states(self.initial_state.as_array(), self.actions, self.dt, limits)
        return np.array_equal(rerolled, self.states)


def rollout(s0: AgentState, actions, dt: float,
            limits: Limits = DEFAULT_LIMITS) -> Trajectory:
    acts = np.asarray(actions, dtype=float).reshape(-1, 2)
    if acts.shape[0] < 1:
        raise ValueError("rollout needs at least one action")
    states = rollout_states(s0.as_array(), acts, dt, limits)
    return Trajectory(initial_state=s0, actions=acts, states=states, dt=dt)


def inverse_dynamics(states: np.ndarray, dt: float) -> np.ndarray:
    """Recover (accel, yaw_rate) from a (T+1, 4) state sequence.

    Exact for the speed and heading channels of any Euler-consistent path.
    """
    s = np.asarray(states, dtype=float)
    accel = (s[1:, 2] - s[:-1, 2]) / dt
    yaw = wrap_angle(s[1:, 3] - s[:-1, 3]) / dt
    return np.stack([accel, yaw], axis=-1)


@dataclass(frozen=True)
class RolloutGradient:
    d_actions: np.ndarray  # (T, 2)

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d_actions)))


def action_gradient(s0: np.ndarray, actions: np.ndarray, states: np.ndarray,
                    state_grad: np.ndarray, dt: float,
                    limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    """Reverse-mode pullback of dJ/dstates to dJ/dactions through the rollout.

    `states` must be the rollout of `actions` from `s0`; `state_grad` is the
    cost partial with respect to each rolled state, shape (..., T, 4). Clamped
    channels (speed at its bounds, saturated actions) propagate zero gradient.
    """
    actions = np.asarray(actions, dtype=float)
    states = np.asarray(states, dtype=float)
    g = np.asarray(state_grad, dtype=float)
    T = actions.shape[-2]
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), states.shape[:-2] + (4,))
    prev = np.concatenate([s0[..., None, :], states[..., :-1, :]], axis=-2)

    a_cl = clamp_actions(actions, limits)
    pass_a = (np.abs(actions[..., 0]) < limits.accel_max).astype(float)
    pass_w = (np.abs(actions[..., 1]) < limits.yaw_rate_max).astype(float)
    v_raw = prev[..., 2] + a_cl[..., 0] * dt
    pass_v = ((v_raw > 0.0) & (v_raw < limits.v_max)).astype(float)

    # per-step Jacobian entries, vectorized over the horizon up front
    cp_dt = np.cos(prev[..., 3]) * dt
    sp_dt = np.sin(prev[..., 3]) * dt
    vsp_dt = -prev[..., 2] * sp_dt
    vcp_dt = prev[..., 2] * cp_dt
    da = dt * pass_v * pass_a
    dw = dt * pass_w

    grad = np.empty_like(actions)
    batch = states.shape[:-2]
    lx = np.zeros(batch)
    ly = np.zeros(batch)
    lv = np.zeros(batch)
    lth = np.zeros(batch)
    for t in range(T - 1, -1, -1):
        gt = g[..., t, :]
        lx = lx + gt[..., 0]
        ly = ly + gt[..., 1]
        lv = lv + gt[..., 2]
        lth = lth + gt[..., 3]
        grad[..., t, 0] = lv * da[..., t]
        grad[..., t, 1] = lth * dw[..., t]
        if t == 0:
            break
        lv, lth = (
            lx * cp_dt[..., t] + ly * sp_dt[..., t] + lv * pass_v[..., t],
            lx * vsp_dt[..., t] + ly * vcp_dt[..., t] + lth,
        )
    return grad


def rollout_grad(s0: AgentState, actions, dt: float, cost,
                 limits: Limits = DEFAULT_LIMITS) -> RolloutGradient:
    """Gradient of a scalar trajectory cost with respect to the action sequence.

    `cost` maps a (T, 4) state array to (value, dvalue_dstates); the returned
    gradient may contain non-finite entries if the cost partials do, which
    callers are expected to check via `RolloutGradient.is_finite`.
    """
    acts = np.asarray(actions, dtype=float).reshape(-1, 2)
    states = rollout_states(s0.as_array(), acts, dt, limits)
    _, g = cost(states)
    d = action_gradient(s0.as_array(), acts, states, np.asarray(g, dtype=float), dt, limits)
    return RolloutGradient(d_actions=d)
