"""Differentiable toy systems and the rollout operator.

States and actions carry arbitrary leading batch dimensions: ``x`` has shape
``(..., state_dim)`` and ``u`` has shape ``(..., action_dim)``.  All functions
accept plain arrays or traced :class:`~dynaflow.autodiff.Var` values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "SystemSpec",
    "DoubleIntegrator2D",
    "Pendulum",
    "StateTrajectory",
    "ActionTrajectory",
    "make_system",
    "SYSTEMS",
    "step",
    "rollout",
    "clamp_action",
    "wrap_angle",
    "state_difference",
]


def wrap_angle(a):
    """Map angles to ``[-pi, pi)``."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class SystemSpec:
    name: str
    state_dim: int
    action_dim: int
    dt: float
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    # indices of angle coordinates, compared with wrapped differences
    angle_dims: tuple[int, ...] = ()
    # coordinates the dynamics are invariant to translating
    relative_dims: tuple[int, ...] = ()
    velocity_dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        lo, hi = np.asarray(self.action_low), np.asarray(self.action_high)
        if lo.shape != (self.action_dim,) or hi.shape != (self.action_dim,):
            raise ValueError("action bounds must have length action_dim")
        if not np.all(lo < hi):
            raise ValueError("action_low must be strictly below action_high")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    def dynamics(self, x, u, force=None):
        """One semi-implicit Euler step with an already admissible action."""
        raise NotImplementedError

    def failed(self, x: np.ndarray) -> np.ndarray:
        """Boolean failure predicate over the leading dimensions of ``x``."""
        raise NotImplementedError

    def to_config(self) -> dict:
        return {"name": self.name}


@dataclass(frozen=True)
class DoubleIntegrator2D(SystemSpec):
    """Planar unit point mass, state ``[p_x, p_y, v_x, v_y]``, force action."""

    name: str = "double_integrator"
    state_dim: int = 4
    action_dim: int = 2
    dt: float = 0.1
    action_low: tuple[float, ...] = (-1.0, -1.0)
    action_high: tuple[float, ...] = (1.0, 1.0)
    angle_dims: tuple[int, ...] = ()
    relative_dims: tuple[int, ...] = (0, 1)
    velocity_dims: tuple[int, ...] = (2, 3)
    mass: float = 1.0
    max_speed: float = 10.0

    def dynamics(self, x, u, force=None):
        acc = u / self.mass if force is None else (u + force) / self.mass
        v = x[..., 2:4] + self.dt * acc
        p = x[..., 0:2] + self.dt * v
        return ad.concatenate([p, v], axis=-1)

    def failed(self, x):
        x = np.asarray(x)
        return np.sqrt(np.sum(x[..., 2:4] ** 2, axis=-1)) > self.max_speed


@dataclass(frozen=True)
class Pendulum(SystemSpec):
    """Torque-limited damped pendulum, state ``[theta, omega]``.

    ``theta = 0`` is upright and ``theta = pi`` hangs down.
    """

    name: str = "pendulum"
    state_dim: int = 2
    action_dim: int = 1
    dt: float = 0.05
    action_low: tuple[float, ...] = (-2.0,)
    action_high: tuple[float, ...] = (2.0,)
    angle_dims: tuple[int, ...] = (0,)
    relative_dims: tuple[int, ...] = ()
    velocity_dims: tuple[int, ...] = (1,)
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    damping: float = 0.05
    max_rate: float = 25.0

    def dynamics(self, x, u, force=None):
        inertia = self.mass * self.length**2
        theta = x[..., 0:1]
        omega = x[..., 1:2]
        torque = u if force is None else u + force
        alpha = (self.gravity / self.length) * ad.sin(theta) + (torque - self.damping * omega) / inertia
        omega_next = omega + self.dt * alpha
        theta_next = theta + self.dt * omega_next
        return ad.concatenate([theta_next, omega_next], axis=-1)

    def failed(self, x):
        return np.abs(np.asarray(x)[..., 1]) > self.max_rate


SYSTEMS = {"double_integrator": DoubleIntegrator2D, "pendulum": Pendulum}


def make_system(name: str) -> SystemSpec:
    try:
        return SYSTEMS[name]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


@dataclass
class StateTrajectory:
    """Initial state ``x0`` and the states ``x_1 .. x_H`` that follow it."""

    x0: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ValueError("states must be an (H, state_dim) array with H >= 1")
        if self.states.shape[1] != self.x0.shape[-1]:
            raise ValueError("x0 and states disagree on state_dim")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.x0))):
            raise ValueError("trajectory contains non-finite states")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def full(self) -> np.ndarray:
        """``(H + 1, state_dim)`` array including ``x0`` as row 0."""
        return np.vstack([self.x0[None], self.states])


@dataclass
class ActionTrajectory:
    actions: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 2:
            raise ValueError("actions must be an (H, action_dim) array")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def clamp_action(spec: SystemSpec, u):
    return ad.clamp(u, spec.low, spec.high)


def step(spec: SystemSpec, x, u, force=None):
    """Advance one control step; ``u`` is clamped to the admissible box first.

    ``force`` is an optional external generalized force added after clamping
    (used by the disturbance experiments; it is not an action).
    """
    if not (np.all(np.isfinite(ad.value(x))) and np.all(np.isfinite(ad.value(u)))):
        raise FloatingPointError("non-finite state or action passed to step")
    return spec.dynamics(x, clamp_action(spec, u), force)


def rollout(spec: SystemSpec, x0, U):
    """Map ``x0`` of shape ``(..., d_x)`` and ``U`` of shape ``(..., H, d_u)``
    to the states ``x_1 .. x_H`` with shape ``(..., H, d_x)``."""
    horizon = ad.value(U).shape[-2]
    if horizon < 1:
        raise ValueError("rollout horizon must be at least 1")
    x = x0
    states = []
    for i in range(horizon):
        x = step(spec, x, U[..., i, :])
        states.append(x)
    return ad.stack(states, axis=-2)


def state_difference(spec: SystemSpec, a, b) -> np.ndarray:
    """``a - b`` with angle coordinates wrapped to ``[-pi, pi)``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if spec.angle_dims:
        d = d.copy()
        idx = list(spec.angle_dims)
        d[..., idx] = wrap_angle(d[..., idx])
    return d
