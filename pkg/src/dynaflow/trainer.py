"""Training loop: batch assembly, Adam with global-norm clipping, EMA, checkpoints."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .datagen import WindowSet
from .dynamics import make_system
from .fileformat import FormatError, read_container, write_container
from .flowcore import ConditioningSpec, FlowBatch, FlowModel, Normalizer, cm_loss
from .netmodel import NetworkConfig, init_params, layer_shapes

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DYNF"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 128
    n_steps: int = 3000
    ema_decay: float = 0.995
    seed: int = 0
    velocity_weight: float = 1.0
    grad_clip: float | None = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 50

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1 or self.n_steps < 0:
            raise ValueError("batch_size must be >= 1 and n_steps >= 0")


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "TrainState":
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(
            {k: p.copy() for k, p in params.items()},
            zeros,
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: p.copy() for k, p in params.items()},
        )

    def equals(self, other: "TrainState") -> bool:
        if self.step != other.step:
            return False
        for mine, theirs in ((self.params, other.params), (self.m, other.m), (self.v, other.v), (self.ema, other.ema)):
            if mine.keys() != theirs.keys():
                return False
            if not all(np.array_equal(mine[k], theirs[k]) for k in mine):
                return False
        return True


@dataclass
class TrainResult:
    state: TrainState
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)


def sample_batch(model: FlowModel, windows: WindowSet, batch_size: int, rng: np.random.Generator) -> FlowBatch:
    """Uniform windows, fresh base noise and independent flow times per item."""
    if len(windows) == 0:
        raise ValueError("dataset has no windows of the model horizon")
    if windows.X.shape[1] != model.horizon:
        raise ValueError(f"window horizon {windows.X.shape[1]} != model horizon {model.horizon}")
    idx = rng.integers(0, len(windows), size=batch_size)
    noise = rng.standard_normal((batch_size, model.horizon, model.channels))
    t = rng.uniform(0.0, 1.0, size=batch_size)
    x0 = windows.x0[idx]
    c = model.cond.build(model.norm, x0, windows.command[idx], windows.tag[idx])
    U = None if windows.U is None else windows.U[idx]
    return FlowBatch(windows.X[idx], noise, t, x0, c, U)


def loss_and_grad(model: FlowModel, params: dict, batch: FlowBatch, W) -> tuple[float, dict]:
    names = list(params)

    def f(*ps):
        return cm_loss(model, dict(zip(names, ps)), batch, W)

    value, grads = ad.value_and_grad(f, [params[k] for k in names])
    return value, dict(zip(names, grads))


def train_step(state: TrainState, batch: FlowBatch, model: FlowModel, cfg: TrainConfig, W):
    """One Adam update on the CM loss.  Returns ``(new_state, loss, grad_norm)``."""
    loss, grads = loss_and_grad(model, state.params, batch, W)
    gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not (np.isfinite(loss) and np.isfinite(gnorm)):
        diag = {
            "step": state.step, "loss": loss, "grad_norm": gnorm,
            "t": batch.t.tolist(), "param_abs_max": {k: float(np.max(np.abs(p))) for k, p in state.params.items()},
        }
        raise NonFiniteLossError(f"non-finite loss at step {state.step}", diag)
    scale = 1.0
    if cfg.grad_clip is not None and gnorm > cfg.grad_clip:
        scale = cfg.grad_clip / gnorm
    k = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    params, m, v, ema = {}, {}, {}, {}
    for name, p in state.params.items():
        g = grads[name] * scale
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = m[name] / (1.0 - b1**k)
        vhat = v[name] / (1.0 - b2**k)
        params[name] = p - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        ema[name] = cfg.ema_decay * state.ema[name] + (1.0 - cfg.ema_decay) * params[name]
    return TrainState(params, m, v, ema, k), loss, gnorm


def train(model: FlowModel, windows: WindowSet, cfg: TrainConfig, state: TrainState | None = None,
          params_seed: int | None = None, W=None, callback=None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = TrainState.fresh(init_params(model.net, cfg.seed if params_seed is None else params_seed))
    W = model.default_weights(cfg.velocity_weight) if W is None else W
    result = TrainResult(state)
    for i in range(cfg.n_steps):
        batch = sample_batch(model, windows, cfg.batch_size, rng)
        state, loss, gnorm = train_step(state, batch, model, cfg, W)
        result.losses.append(loss)
        result.grad_norms.append(gnorm)
        if callback is not None:
            callback(state.step, loss, gnorm)
        if cfg.log_every and (i % cfg.log_every == 0 or i == cfg.n_steps - 1):
            log.info("step %d loss %.6g grad_norm %.4g", state.step, loss, gnorm)
    result.state = state
    return result


# ---------------------------------------------------------------------------
# checkpoints

def _model_header(model: FlowModel) -> dict:
    return {
        "method": model.kind,
        "system": model.system.name,
        "network": model.net.to_dict(),
        "conditioning": {"state_dims": list(model.cond.state_dims), "command_dim": model.cond.command_dim,
                         "n_tags": model.cond.n_tags},
    }


def save_checkpoint(path, model: FlowModel, state: TrainState, train_cfg: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    header = {"kind": "checkpoint", "step": state.step, **_model_header(model)}
    header["train"] = asdict(train_cfg) if train_cfg is not None else None
    header["extra"] = extra or {}
    tensors = dict(model.norm.tensors())
    for prefix, group in (("params", state.params), ("ema", state.ema), ("adam_m", state.m), ("adam_v", state.v)):
        for name, arr in group.items():
            tensors[f"{prefix}/{name}"] = arr
    write_container(path, CHECKPOINT_MAGIC, header, tensors)


def build_model(method: str, system: str, net: NetworkConfig, norm: Normalizer, cond: ConditioningSpec) -> FlowModel:
    from .baselines import MODEL_CLASSES

    try:
        cls = MODEL_CLASSES[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(MODEL_CLASSES)}") from None
    return cls(make_system(system), net, norm, cond)


def load_checkpoint(path, expect_system: str | None = None, expect_state_dim: int | None = None,
                    expect_method: str | None = None):
    """Return ``(model, state, header)``; validates the embedded configuration."""
    header, tensors = read_container(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint file")
    net = NetworkConfig.from_dict(header["network"])
    system = make_system(header["system"])
    if expect_system is not None and header["system"] != expect_system:
        raise ConfigMismatchError(f"checkpoint system {header['system']!r} != {expect_system!r}")
    if expect_state_dim is not None and system.state_dim != expect_state_dim:
        raise ConfigMismatchError(f"checkpoint state_dim {system.state_dim} != {expect_state_dim}")
    if expect_method is not None and header["method"] != expect_method:
        raise ConfigMismatchError(f"checkpoint method {header['method']!r} != {expect_method!r}")
    cc = header["conditioning"]
    cond = ConditioningSpec(tuple(cc["state_dims"]), cc["command_dim"], cc["n_tags"])
    norm = Normalizer.from_tensors(tensors, system.relative_dims)
    if len(norm.state_mean) != system.state_dim:
        raise ConfigMismatchError("normalizer dimension disagrees with the system")
    model = build_model(header["method"], header["system"], net, norm, cond)
    groups = {"params": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in tensors.items():
        if "/" in name:
            prefix, key = name.split("/", 1)
            groups[prefix][key] = arr
    expected = dict(layer_shapes(net))
    for prefix, group in groups.items():
        if set(group) != set(expected):
            raise FormatError(f"{path}: {prefix} tensors do not match the network layout")
        for key, arr in group.items():
            if arr.shape != expected[key]:
                raise ConfigMismatchError(f"{path}: tensor {prefix}/{key} has shape {arr.shape}")
    state = TrainState(groups["params"], groups["adam_m"], groups["adam_v"], groups["ema"], header["step"])
    return model, state, header


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
