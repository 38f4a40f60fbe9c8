"""Comparison methods: vanilla state flow, joint state-action flow, ID tracker.

Both flow baselines reuse the DynaFlow network and trainer; only the head
changes.  The vanilla model predicts the normalized state window directly.
The state-action model flows over concatenated state and action channels and
is reported two ways: its state channels (SA-State) and a rollout of its
clamped action channels (SA-Rollout).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import SystemSpec, clamp_action, rollout, state_difference, step
from .flowcore import DynaFlow, FlowBatch, FlowModel, SampleResult
from .metrics import IDSolverConfig, inverse_dynamics
from .netmodel import predict

__all__ = [
    "BASELINE_KINDS",
    "VanillaStateFlow",
    "StateActionFlow",
    "MODEL_CLASSES",
    "TrackResult",
    "tracker_rollout",
    "MissingActionsError",
]

BASELINE_KINDS = ("vanilla_state", "sa_flow", "tracker_on")


class MissingActionsError(ValueError):
    pass


class VanillaStateFlow(FlowModel):
    """Direct x1-prediction over the state window; no rollout layer."""

    kind = "vanilla"

    def __init__(self, system, net, norm, cond):
        if net.in_channels != system.state_dim or net.out_channels != system.state_dim or net.squash:
            raise ValueError("vanilla flow needs an unsquashed (d_x -> d_x) network")
        super().__init__(system, net, norm, cond)

    def predict_x1(self, params, Z_t, c, t, x0):
        return predict(params, self.net, Z_t, c, t), {}

    def finalize(self, Z, Z1_hat, aux, x0):
        states = self.norm.decode(Z, x0)
        return SampleResult(states, None, states)


class StateActionFlow(FlowModel):
    """Joint flow over ``[states, actions]`` channels, trained on expert pairs."""

    kind = "sa_flow"

    def __init__(self, system, net, norm, cond):
        width = system.state_dim + system.action_dim
        if net.in_channels != width or net.out_channels != width or net.squash:
            raise ValueError("state-action flow needs an unsquashed (d_x+d_u -> d_x+d_u) network")
        if norm.action_mean is None:
            raise MissingActionsError("state-action flow needs action normalization statistics")
        super().__init__(system, net, norm, cond)

    def target(self, batch: FlowBatch):
        if batch.U is None:
            raise MissingActionsError("dataset lacks actions")
        return np.concatenate(
            [self.norm.encode(batch.X1, batch.x0), self.norm.encode_actions(batch.U)], axis=-1
        )

    def predict_x1(self, params, Z_t, c, t, x0):
        return predict(params, self.net, Z_t, c, t), {}

    def finalize(self, Z, Z1_hat, aux, x0):
        dx = self.system.state_dim
        states = self.norm.decode(Z[..., :dx], x0)
        actions = clamp_action(self.system, self.norm.decode_actions(Z[..., dx:]))
        rolled = rollout(self.system, x0, actions)
        return SampleResult(states, actions, states, {"rollout": rolled})


MODEL_CLASSES = {"dynaflow": DynaFlow, "vanilla": VanillaStateFlow, "sa_flow": StateActionFlow}


@dataclass
class TrackResult:
    states: np.ndarray  # (N, H, d_x) executed states; frozen after a failure
    actions: np.ndarray  # (N, H, d_u)
    success: np.ndarray  # (N,) bool
    failure_step: np.ndarray  # (N,) int, -1 when successful
    terminal_error: np.ndarray  # (N,) wrapped distance between final executed and planned states


def tracker_rollout(spec: SystemSpec, plan, x0, id_config: IDSolverConfig | None = None) -> TrackResult:
    """Execute a state plan by solving inverse dynamics towards each planned state.

    ``plan`` is ``(H, d_x)`` or ``(N, H, d_x)`` (states ``x_1 .. x_H``) and
    ``x0`` the matching initial state(s).  A trajectory that trips the
    system failure predicate stops there; its remaining states repeat the
    failing state.
    """
    plan = np.asarray(plan, dtype=np.float64)
    single = plan.ndim == 2
    plan = plan[None] if single else plan
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    if x.shape[0] != plan.shape[0] or x.shape[1] != plan.shape[2]:
        raise ValueError("plan and x0 disagree on batch size or state_dim")
    n, horizon, _ = plan.shape
    states = np.zeros_like(plan)
    actions = np.zeros((n, horizon, spec.action_dim))
    alive = np.ones(n, dtype=bool)
    failure_step = np.full(n, -1)
    for i in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size:
            res = inverse_dynamics(spec, x[idx], plan[idx, i], id_config)
            actions[idx, i] = res.action
            x[idx] = step(spec, x[idx], res.action)
            fell = spec.failed(x[idx])
            failure_step[idx[fell]] = i
            alive[idx[fell]] = False
        states[:, i] = x
    terminal = np.linalg.norm(state_difference(spec, states[:, -1], plan[:, -1]), axis=-1)
    out = TrackResult(states, actions, alive.copy(), failure_step, terminal)
    if single:
        return TrackResult(out.states[0], out.actions[0], out.success[0], out.failure_step[0], out.terminal_error[0])
    return out
