"""Flow-matching machinery with a simulator embedded in the posterior mean.

All flow arithmetic runs in a normalized trajectory space.  A raw window
``X`` (states ``x_1 .. x_H``) maps to ``Z = (X - anchor - mean) / std`` where
``anchor`` is ``x0`` on the system's translation-invariant coordinates and
zero elsewhere, so the sampler never sees absolute positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import SystemSpec, rollout
from .netmodel import NetworkConfig, predict

__all__ = [
    "FlowSchedule",
    "SamplerConfig",
    "Normalizer",
    "ConditioningSpec",
    "FlowBatch",
    "FlowModel",
    "DynaFlow",
    "SampleResult",
    "interpolate",
    "velocity",
    "posterior_mean",
    "sample",
    "cm_loss",
    "base_noise",
    "weight_mask",
]


@dataclass(frozen=True)
class FlowSchedule:
    """Optimal-transport schedule ``alpha(t) = t``, ``sigma(t) = 1 - t``."""

    t_max_clip: float = 1.0 - 1e-3

    @staticmethod
    def alpha(t):
        return t

    @staticmethod
    def sigma(t):
        return 1.0 - t


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps


def interpolate(X0, X1, t):
    """``(1 - t) X0 + t X1``; ``t`` is a scalar or has one entry per batch item."""
    if np.shape(ad.value(X0)) != np.shape(ad.value(X1)):
        raise ValueError("X0 and X1 must share a shape")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (np.ndim(ad.value(X0)) - 1))
    return (1.0 - t) * X0 + t * X1


def velocity(X_t, X1_hat, t, schedule: FlowSchedule = FlowSchedule()):
    """Marginal OT velocity ``(X1_hat - X_t) / (1 - t)``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t > schedule.t_max_clip):
        raise ValueError(f"t={t} beyond t_max_clip={schedule.t_max_clip}; clip before calling")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (np.ndim(ad.value(X_t)) - 1))
    return (X1_hat - X_t) / (1.0 - t)


def base_noise(seeds, horizon: int, state_dim: int, extra_dim: int = 0) -> np.ndarray:
    """Standard-normal base samples, one generator per seed.

    The first ``horizon * state_dim`` draws of each generator fill the state
    channels, so methods with extra channels share the state noise exactly.
    """
    out = np.empty((len(seeds), horizon, state_dim + extra_dim))
    for k, s in enumerate(seeds):
        g = np.random.default_rng(int(s))
        out[k, :, :state_dim] = g.standard_normal((horizon, state_dim))
        if extra_dim:
            out[k, :, state_dim:] = g.standard_normal((horizon, extra_dim))
    return out


@dataclass
class Normalizer:
    """Per-dimension statistics of windows in the anchored frame."""

    state_mean: np.ndarray
    state_std: np.ndarray
    relative_dims: tuple[int, ...] = ()
    action_mean: np.ndarray | None = None
    action_std: np.ndarray | None = None

    @property
    def anchor_mask(self) -> np.ndarray:
        m = np.zeros(len(self.state_mean))
        m[list(self.relative_dims)] = 1.0
        return m

    @classmethod
    def fit(cls, spec: SystemSpec, x0s, windows, actions=None, floor: float = 1e-6) -> "Normalizer":
        mask = np.zeros(spec.state_dim)
        mask[list(spec.relative_dims)] = 1.0
        rel = np.asarray(windows) - np.asarray(x0s)[:, None, :] * mask
        flat = rel.reshape(-1, spec.state_dim)
        std = flat.std(axis=0)
        std = np.where(std < floor, 1.0, std)
        am = asd = None
        if actions is not None:
            a = np.asarray(actions).reshape(-1, spec.action_dim)
            am = a.mean(axis=0)
            asd = a.std(axis=0)
            asd = np.where(asd < floor, 1.0, asd)
        return cls(flat.mean(axis=0), std, tuple(spec.relative_dims), am, asd)

    def encode(self, X, x0):
        anchor = np.asarray(x0)[..., None, :] * self.anchor_mask
        return (X - anchor - self.state_mean) / self.state_std

    def decode(self, Z, x0):
        anchor = np.asarray(x0)[..., None, :] * self.anchor_mask
        return Z * self.state_std + self.state_mean + anchor

    def encode_actions(self, U):
        return (U - self.action_mean) / self.action_std

    def decode_actions(self, V):
        return V * self.action_std + self.action_mean

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"norm.state_mean": self.state_mean, "norm.state_std": self.state_std}
        if self.action_mean is not None:
            out["norm.action_mean"] = self.action_mean
            out["norm.action_std"] = self.action_std
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, relative_dims) -> "Normalizer":
        return cls(
            tensors["norm.state_mean"],
            tensors["norm.state_std"],
            tuple(relative_dims),
            tensors.get("norm.action_mean"),
            tensors.get("norm.action_std"),
        )


@dataclass(frozen=True)
class ConditioningSpec:
    """Layout of ``c = [x0 (non-anchored coords, normalized), command, tag one-hot]``."""

    state_dims: tuple[int, ...]
    command_dim: int
    n_tags: int = 1

    @property
    def width(self) -> int:
        return len(self.state_dims) + self.command_dim + self.n_tags

    @classmethod
    def for_system(cls, spec: SystemSpec, command_dim: int, n_tags: int = 1) -> "ConditioningSpec":
        dims = tuple(d for d in range(spec.state_dim) if d not in spec.relative_dims)
        return cls(dims, command_dim, n_tags)

    def build(self, norm: Normalizer, x0, command, tag) -> np.ndarray:
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        command = np.asarray(command, dtype=np.float64).reshape(len(x0), self.command_dim)
        tag = np.broadcast_to(np.asarray(tag, dtype=int), (len(x0),))
        if np.any(tag < 0) or np.any(tag >= self.n_tags):
            raise ValueError("tag out of range")
        d = list(self.state_dims)
        xs = (x0[:, d] - norm.state_mean[d]) / norm.state_std[d]
        onehot = np.eye(self.n_tags)[tag]
        c = np.concatenate([xs, command, onehot], axis=1)
        assert c.shape[1] == self.width
        return c


@dataclass
class FlowBatch:
    """Batched training items: targets, base noise, flow times and conditioning."""

    X1: np.ndarray  # (B, H, d_x) raw target states x_1..x_H
    X0: np.ndarray  # (B, H, C) base noise in normalized space
    t: np.ndarray  # (B,)
    x0: np.ndarray  # (B, d_x) raw initial states
    c: np.ndarray  # (B, d_c)
    U: np.ndarray | None = None  # (B, H, d_u) expert actions when available

    def __len__(self):
        return len(self.t)


@dataclass
class SampleResult:
    states: np.ndarray  # (B, H, d_x) reported trajectory
    actions: np.ndarray | None  # (B, H, d_u) when the method produces actions
    euler_states: np.ndarray  # raw Euler iterate at t = 1, decoded
    extras: dict = field(default_factory=dict)


def weight_mask(spec: SystemSpec, horizon: int, velocity_weight: float = 1.0, extra_channels: int = 0):
    """Loss weights over ``(H, d_x + extra)``; velocity coordinates may be down-weighted."""
    W = np.ones((horizon, spec.state_dim + extra_channels))
    W[:, list(spec.velocity_dims)] = velocity_weight
    return W


class FlowModel:
    """A flow-matching generator trained with the x1-prediction loss.

    Subclasses define the flow-space channels and :meth:`predict_x1`.
    """

    kind = "base"

    def __init__(self, system: SystemSpec, net: NetworkConfig, norm: Normalizer, cond: ConditioningSpec):
        if net.cond_dim != cond.width:
            raise ValueError("network cond_dim disagrees with the conditioning layout")
        self.system = system
        self.net = net
        self.norm = norm
        self.cond = cond

    @property
    def horizon(self) -> int:
        return self.net.horizon

    @property
    def channels(self) -> int:
        return self.net.in_channels

    @property
    def extra_channels(self) -> int:
        return self.channels - self.system.state_dim

    def target(self, batch: FlowBatch) -> np.ndarray:
        return self.norm.encode(batch.X1, batch.x0)

    def predict_x1(self, params, Z_t, c, t, x0):
        """Return ``(Z1_hat, aux)``: the flow-space prediction plus raw by-products."""
        raise NotImplementedError

    def finalize(self, Z, Z1_hat, aux, x0) -> SampleResult:
        raise NotImplementedError

    def default_weights(self, velocity_weight: float = 1.0) -> np.ndarray:
        return weight_mask(self.system, self.horizon, velocity_weight, self.extra_channels)


class DynaFlow(FlowModel):
    """Action network followed by the differentiable rollout."""

    kind = "dynaflow"

    def __init__(self, system, net, norm, cond):
        if net.in_channels != system.state_dim or net.out_channels != system.action_dim or not net.squash:
            raise ValueError("DynaFlow needs a squashed (d_x -> d_u) network")
        super().__init__(system, net, norm, cond)

    def predict_x1(self, params, Z_t, c, t, x0):
        U = predict(params, self.net, Z_t, c, t)
        X1_hat = rollout(self.system, x0, U)
        return self.norm.encode(X1_hat, x0), {"actions": U, "states": X1_hat}

    def finalize(self, Z, Z1_hat, aux, x0):
        # the last prediction is a rollout of the last actions; report that
        # instead of the Euler mixture, which need not be feasible
        return SampleResult(aux["states"], aux["actions"], self.norm.decode(Z, x0))


def posterior_mean(model: DynaFlow, params, X_t, c, t, x0) -> np.ndarray:
    """Raw ``E[X1 | X_t] = Phi(x0, D(X_t, c, t))`` for a normalized ``X_t``."""
    U = predict(params, model.net, X_t, c, t)
    return rollout(model.system, x0, U)


def sample(model: FlowModel, params, x0, c, sampler: SamplerConfig, noise=None) -> SampleResult:
    """Euler-integrate the x1-prediction field from ``t = 0`` to ``1``.

    Velocities are evaluated at ``t in {0, dt, ..., 1 - dt}`` only.  ``noise``
    overrides the base sample (shape ``(B, H, C)``); otherwise it is drawn
    from ``sampler.seed``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if noise is None:
        rng = np.random.default_rng(sampler.seed)
        noise = rng.standard_normal((len(x0), model.horizon, model.channels))
    Z = np.array(noise, dtype=np.float64)
    dt = sampler.dt
    Z1_hat = aux = None
    for k in range(sampler.n_steps):
        t = k * dt
        Z1_hat, aux = model.predict_x1(params, Z, c, t, x0)
        Z = Z + dt * velocity(Z, Z1_hat, t)
    return model.finalize(Z, Z1_hat, aux, x0)


def cm_loss(model: FlowModel, params, batch: FlowBatch, W) -> object:
    """Mean over the batch of ``|| W * (Z1_hat - Z1) ||^2`` in flow space."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (model.horizon, model.channels):
        raise ValueError(f"weight mask shape {W.shape} != {(model.horizon, model.channels)}")
    if np.any(W < 0):
        raise ValueError("weight mask must be nonnegative")
    Z1 = model.target(batch)
    Z_t = interpolate(batch.X0, Z1, batch.t)
    Z1_hat, _ = model.predict_x1(params, Z_t, batch.c, batch.t, batch.x0)
    r = (Z1_hat - Z1) * W
    return ad.sum(r * r) / float(len(batch))
