"""Expert and kinematic trajectory datasets.

Expert episodes are closed-loop rollouts of analytic controllers and are
feasible by construction.  Kinematic episodes are state-only curves drawn
without regard to actuation limits, with velocities from finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import SystemSpec, make_system, step, wrap_angle
from .fileformat import FormatError, read_container, write_container

log = logging.getLogger(__name__)

DATASET_MAGIC = b"DYND"
PROVENANCES = ("expert", "kinematic")
CONTROLLERS = {"double_integrator": ("pd_regulator",), "pendulum": ("energy_swingup",)}
STYLES = {"double_integrator": ("overshoot_dash",), "pendulum": ("instant_swingup",)}


class AccidentalFeasibilityError(RuntimeError):
    """A kinematic dataset turned out (nearly) dynamically feasible."""


@dataclass
class Episode:
    states: np.ndarray  # (L + 1, d_x), row 0 is x0
    command: np.ndarray  # (d_cmd,)
    tag: int = 0
    actions: np.ndarray | None = None  # (L, d_u) for expert data

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def length(self) -> int:
        return len(self.states) - 1


@dataclass
class WindowSet:
    """All horizon-``H`` windows of a dataset, stacked."""

    x0: np.ndarray  # (N, d_x)
    X: np.ndarray  # (N, H, d_x)
    U: np.ndarray | None  # (N, H, d_u)
    command: np.ndarray  # (N, d_cmd)
    tag: np.ndarray  # (N,)
    episode: np.ndarray  # (N,)
    start: np.ndarray  # (N,)

    def __len__(self):
        return len(self.x0)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(
            self.x0[idx], self.X[idx], None if self.U is None else self.U[idx],
            self.command[idx], self.tag[idx], self.episode[idx], self.start[idx],
        )


@dataclass
class Dataset:
    system: str
    dt: float
    provenance: str
    episodes: list[Episode]
    command_dim: int
    n_tags: int = 1
    meta: dict = field(default_factory=dict)
    state_mean: np.ndarray | None = None
    state_std: np.ndarray | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        spec = self.spec
        for k, ep in enumerate(self.episodes):
            if ep.states.ndim != 2 or ep.states.shape[1] != spec.state_dim or len(ep.states) < 2:
                raise ValueError(f"episode {k}: states must be (L + 1, {spec.state_dim}) with L >= 1")
            if np.shape(ep.command) != (self.command_dim,):
                raise ValueError(f"episode {k}: command must have length {self.command_dim}")
            if self.provenance == "expert":
                if ep.actions is None or ep.actions.shape != (ep.length, spec.action_dim):
                    raise ValueError(f"episode {k}: expert episodes need (L, {spec.action_dim}) actions")
            elif ep.actions is not None:
                raise ValueError(f"episode {k}: kinematic episodes carry no actions")
        if self.state_mean is None:
            self.state_mean, self.state_std = self.compute_stats()

    @property
    def spec(self) -> SystemSpec:
        return make_system(self.system)

    @property
    def has_actions(self) -> bool:
        return bool(self.episodes) and all(ep.actions is not None for ep in self.episodes)

    def compute_stats(self) -> tuple[np.ndarray, np.ndarray]:
        allx = np.concatenate([ep.states for ep in self.episodes], axis=0)
        return allx.mean(axis=0), allx.std(axis=0)

    def windows(self, horizon: int) -> WindowSet:
        rows = []
        for e, ep in enumerate(self.episodes):
            for s in range(ep.length - horizon + 1):
                rows.append((e, s))
        if not rows:
            raise ValueError(f"no episode is long enough for horizon {horizon}")
        eps = [self.episodes[e] for e, _ in rows]
        x0 = np.stack([ep.states[s] for ep, (_, s) in zip(eps, rows)])
        X = np.stack([ep.states[s + 1:s + 1 + horizon] for ep, (_, s) in zip(eps, rows)])
        U = None
        if self.has_actions:
            U = np.stack([ep.actions[s:s + horizon] for ep, (_, s) in zip(eps, rows)])
        return WindowSet(
            x0, X, U,
            np.stack([ep.command for ep in eps]).reshape(len(rows), self.command_dim),
            np.array([ep.tag for ep in eps]),
            np.array([e for e, _ in rows]),
            np.array([s for _, s in rows]),
        )

    def transitions(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.concatenate([ep.states[:-1] for ep in self.episodes])
        b = np.concatenate([ep.states[1:] for ep in self.episodes])
        return a, b


# ---------------------------------------------------------------------------
# controllers

def pd_regulator(spec, x, command, mode="velocity", kp=1.0, kd=2.0):
    """Velocity mode tracks a commanded velocity; waypoint mode drives to a position."""
    p, v = x[..., :2], x[..., 2:4]
    if mode == "velocity":
        u = kd * (command - v)
    elif mode == "waypoint":
        u = kp * (command - p) - kd * v
    else:
        raise ValueError(f"unknown pd mode {mode!r}")
    return np.clip(u, spec.low, spec.high)


def energy_swingup(spec, x, k_energy=1.0, kp=30.0, kd=6.0, capture_angle=0.4, capture_rate=3.0):
    """Energy pumping towards the upright energy, PD capture near the top."""
    theta, omega = x[..., 0], x[..., 1]
    err = wrap_angle(theta)
    inertia = spec.mass * spec.length**2
    energy = 0.5 * inertia * omega**2 + spec.mass * spec.gravity * spec.length * np.cos(theta)
    target = spec.mass * spec.gravity * spec.length
    pump = k_energy * (target - energy) * omega + spec.damping * omega
    capture = -kp * err - kd * omega
    near = (np.abs(err) < capture_angle) & (np.abs(omega) < capture_rate)
    u = np.where(near, capture, pump)
    return np.clip(u[..., None], spec.low, spec.high)


def _simulate(spec, x0, policy, length):
    states = [np.asarray(x0, dtype=np.float64)]
    actions = []
    x = states[0]
    for _ in range(length):
        u = np.clip(policy(x), spec.low, spec.high)
        x = step(spec, x, u)
        actions.append(u)
        states.append(x)
    return np.stack(states), np.stack(actions)


def generate_expert(
    system: str,
    controller: str,
    n_episodes: int,
    episode_len: int,
    rng: np.random.Generator,
    command_range: float = 1.0,
    init_position_range: float = 2.0,
    init_velocity_range: float = 1.0,
    init_angle_std: float = 0.3,
    init_rate_range: float = 0.5,
    pd_mode: str = "velocity",
) -> Dataset:
    """Closed-loop expert rollouts.

    Double integrator: commands uniform in ``[-r, r]^2`` (velocities, or
    waypoints in waypoint mode).  Pendulum: a single upright command with
    randomized hanging initial states; each episode is shifted by a multiple
    of ``2 pi`` so that it ends near ``theta = 0``.
    """
    spec = make_system(system)
    if controller not in CONTROLLERS[system]:
        raise ValueError(f"controller {controller!r} does not drive {system!r}")
    episodes = []
    for _ in range(n_episodes):
        if system == "double_integrator":
            cmd = rng.uniform(-command_range, command_range, size=2)
            x0 = np.concatenate([
                rng.uniform(-init_position_range, init_position_range, size=2),
                rng.uniform(-init_velocity_range, init_velocity_range, size=2),
            ])
            X, U = _simulate(spec, x0, lambda x: pd_regulator(spec, x, cmd, pd_mode), episode_len)
        else:
            cmd = np.zeros(1)
            x0 = np.array([np.pi + rng.normal(0.0, init_angle_std),
                           rng.uniform(-init_rate_range, init_rate_range)])
            X, U = _simulate(spec, x0, lambda x: energy_swingup(spec, x), episode_len)
            # a constant shift of theta leaves the dynamics unchanged
            shift = 2.0 * np.pi * np.round(X[-1, 0] / (2.0 * np.pi))
            X = X - np.array([shift, 0.0])
        episodes.append(Episode(X, cmd, 0, U))
    meta = {"controller": controller, "episode_len": episode_len, "command_range": command_range}
    if system == "double_integrator":
        meta["pd_mode"] = pd_mode
    return Dataset(system, spec.dt, "expert", episodes, command_dim=len(episodes[0].command), meta=meta)


def _cosine_ramp(n_steps: int, onset: int, duration_steps: int) -> np.ndarray:
    """0 before ``onset``, smooth cosine rise to 1 over ``duration_steps``, then 1."""
    k = np.arange(n_steps + 1, dtype=np.float64)
    s = np.clip((k - onset) / duration_steps, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * s))


def _kinematic_episode(spec, style, length, rng, duration, onset_range, amplitude, start_std):
    steps = max(1, int(round(duration / spec.dt)))
    onset = int(rng.integers(onset_range[0], onset_range[1] + 1))
    ramp = _cosine_ramp(length, onset, steps)
    if style == "instant_swingup":
        start = np.pi + rng.normal(0.0, start_std)
        end = start - amplitude
        theta = start + (end - start) * ramp
        # retargeting-style central differences
        omega = np.gradient(theta, spec.dt)
        return np.stack([theta, omega], axis=1), np.zeros(1)
    # overshoot_dash: straight dash of length ``amplitude`` in a random direction
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    p0 = rng.normal(0.0, start_std, size=2)
    pos = p0 + amplitude * ramp[:, None] * direction
    vel = np.gradient(pos, spec.dt, axis=0)
    return np.concatenate([pos, vel], axis=1), direction * amplitude / duration


def generate_kinematic(
    system: str,
    style: str,
    n_episodes: int,
    episode_len: int,
    rng: np.random.Generator,
    duration: float = 0.4,
    onset_range: tuple[int, int] = (4, 20),
    amplitude: float | None = None,
    start_std: float = 0.05,
    sae_floor: float = 0.01,
    max_attempts: int = 3,
    id_config=None,
) -> Dataset:
    """State-only demonstrations that ignore the actuation limits.

    ``instant_swingup`` moves the pendulum from hanging (``pi``) through
    ``amplitude`` radians (default ``pi``, i.e. to upright) in ``duration``
    seconds; ``overshoot_dash`` moves the point mass ``amplitude`` metres
    (default 2) in ``duration`` seconds.  After generation the mean
    per-transition SAE must exceed ``sae_floor``; otherwise the draw is
    repeated up to ``max_attempts`` times before failing.
    """
    from .metrics import IDSolverConfig, sae_pairs

    spec = make_system(system)
    if style not in STYLES[system]:
        raise ValueError(f"style {style!r} does not apply to {system!r}")
    if amplitude is None:
        amplitude = np.pi if system == "pendulum" else 2.0
    if onset_range[1] + duration / spec.dt > episode_len:
        raise ValueError("episode too short for the requested onset range and duration")
    id_config = id_config or IDSolverConfig()
    mean_sae = 0.0
    for attempt in range(max_attempts):
        episodes = []
        for _ in range(n_episodes):
            X, cmd = _kinematic_episode(spec, style, episode_len, rng, duration, onset_range, amplitude, start_std)
            episodes.append(Episode(X, cmd, 0, None))
        ds = Dataset(
            system, spec.dt, "kinematic", episodes, command_dim=len(episodes[0].command),
            meta={"style": style, "duration": duration, "amplitude": float(amplitude),
                  "onset_range": list(onset_range), "episode_len": episode_len, "sae_floor": sae_floor},
        )
        a, b = ds.transitions()
        mean_sae = float(np.mean(sae_pairs(spec, a, b, id_config)))
        if mean_sae > sae_floor:
            ds.meta["intrinsic_mean_sae"] = mean_sae
            return ds
        log.warning("kinematic draw %d accidentally feasible (mean SAE %.3g <= %.3g)", attempt, mean_sae, sae_floor)
    raise AccidentalFeasibilityError(
        f"{style}: mean SAE {mean_sae:.3g} did not exceed floor {sae_floor} after {max_attempts} attempts "
        f"(duration={duration}, amplitude={amplitude}); shorten the duration or enlarge the amplitude"
    )


# ---------------------------------------------------------------------------
# persistence

def write_dataset(ds: Dataset, path) -> None:
    header = {
        "kind": "dataset",
        "system": ds.system,
        "dt": ds.dt,
        "provenance": ds.provenance,
        "command_dim": ds.command_dim,
        "n_tags": ds.n_tags,
        "n_episodes": len(ds.episodes),
        "tags": [int(ep.tag) for ep in ds.episodes],
        "meta": ds.meta,
    }
    tensors = {"stats.state_mean": ds.state_mean, "stats.state_std": ds.state_std}
    for k, ep in enumerate(ds.episodes):
        tensors[f"ep{k}.states"] = ep.states
        tensors[f"ep{k}.command"] = ep.command
        if ep.actions is not None:
            tensors[f"ep{k}.actions"] = ep.actions
    write_container(path, DATASET_MAGIC, header, tensors)


def read_dataset(path, provenance: str | None = None, system: str | None = None) -> Dataset:
    header, tensors = read_container(path, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: not a dataset file")
    if provenance is not None and header["provenance"] != provenance:
        raise FormatError(f"{path}: provenance is {header['provenance']!r}, expected {provenance!r}")
    if system is not None and header["system"] != system:
        raise FormatError(f"{path}: system is {header['system']!r}, expected {system!r}")
    episodes = []
    for k in range(header["n_episodes"]):
        actions = tensors.get(f"ep{k}.actions")
        if header["provenance"] == "kinematic" and actions is not None:
            raise FormatError(f"{path}: kinematic episode {k} carries actions")
        episodes.append(Episode(tensors[f"ep{k}.states"], tensors[f"ep{k}.command"], header["tags"][k], actions))
    return Dataset(
        header["system"], header["dt"], header["provenance"], episodes, header["command_dim"],
        header["n_tags"], header["meta"], tensors["stats.state_mean"], tensors["stats.state_std"],
    )
