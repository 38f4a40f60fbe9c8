"""MLP prediction network shared by DynaFlow and the flow baselines.

The network maps a noisy trajectory ``X_t`` (``H x in_channels``), a
conditioning vector ``c`` and flow time ``t`` to an ``H x out_channels``
output.  For DynaFlow the output is an action sequence squashed into the
admissible box; the baselines reuse it with a different head width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "NetworkConfig",
    "init_params",
    "param_count",
    "time_features",
    "time_embedding",
    "predict",
    "predict_actions",
    "frequencies",
]


@dataclass(frozen=True)
class NetworkConfig:
    horizon: int
    in_channels: int  # state channels of X_t (d_x, or d_x + d_u for the joint flow)
    out_channels: int  # per-step head width (d_u for DynaFlow)
    cond_dim: int
    hidden_width: int = 256
    n_hidden_layers: int = 3
    time_embed_dim: int = 16
    squash: bool = True
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("horizon", "in_channels", "out_channels", "hidden_width", "n_hidden_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cond_dim < 0:
            raise ValueError("cond_dim must be >= 0")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be an even number >= 2")
        if self.squash:
            if self.action_low is None or self.action_high is None:
                raise ValueError("squashing needs action bounds")
            if len(self.action_low) != self.out_channels or len(self.action_high) != self.out_channels:
                raise ValueError("action bounds must match out_channels")

    @property
    def input_width(self) -> int:
        return self.horizon * self.in_channels + self.cond_dim + self.time_embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("action_low", "action_high"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        for k in ("action_low", "action_high"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def frequencies(dim: int) -> np.ndarray:
    """Geometrically spaced frequencies (cycles per unit flow time) from 1 to 16."""
    return np.geomspace(1.0, 16.0, dim // 2)


def layer_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = [("time.w", (cfg.time_embed_dim, cfg.time_embed_dim)), ("time.b", (cfg.time_embed_dim,))]
    width = cfg.input_width
    for k in range(cfg.n_hidden_layers):
        shapes += [(f"h{k}.w", (width, cfg.hidden_width)), (f"h{k}.b", (cfg.hidden_width,))]
        width = cfg.hidden_width
    out = cfg.horizon * cfg.out_channels
    shapes += [("out.w", (width, out)), ("out.b", (out,))]
    return shapes


def param_count(cfg: NetworkConfig) -> int:
    e, w, L = cfg.time_embed_dim, cfg.hidden_width, cfg.n_hidden_layers
    out = cfg.horizon * cfg.out_channels
    return (e * e + e) + (cfg.input_width * w + w) + (L - 1) * (w * w + w) + (w * out + out)


def init_params(cfg: NetworkConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform hidden weights, zero biases and a zero output layer."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg):
        if name.startswith("out.") or name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def time_features(t, dim: int) -> np.ndarray:
    """Raw sinusoidal features ``[sin(2 pi f t), cos(2 pi f t)]`` of shape ``(..., dim)``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    phase = 2.0 * np.pi * frequencies(dim) * t
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def time_embedding(params, t, dim: int):
    return ad.tanh(time_features(t, dim) @ params["time.w"] + params["time.b"])


def predict(params, cfg: NetworkConfig, X_t, c, t):
    """Raw network output of shape ``(B, H, out_channels)``.

    ``X_t`` is ``(B, H, in_channels)``, ``c`` is ``(B, cond_dim)`` and ``t``
    is a scalar or ``(B,)``.  Squashing, when enabled, maps the head into the
    open action box with ``low + (high - low) * (tanh(z) + 1) / 2``.
    """
    xs = ad.value(X_t).shape
    if len(xs) != 3 or xs[1:] != (cfg.horizon, cfg.in_channels):
        raise ValueError(f"X_t shape {xs} does not match (B, {cfg.horizon}, {cfg.in_channels})")
    batch = xs[0]
    if np.shape(c) != (batch, cfg.cond_dim):
        raise ValueError(f"conditioning shape {np.shape(c)} does not match ({batch}, {cfg.cond_dim})")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("flow time must lie in [0, 1]")

    h = ad.concatenate(
        [ad.reshape(X_t, (batch, cfg.horizon * cfg.in_channels)), np.asarray(c, dtype=np.float64),
         time_embedding(params, t, cfg.time_embed_dim)],
        axis=-1,
    )
    for k in range(cfg.n_hidden_layers):
        h = ad.tanh(h @ params[f"h{k}.w"] + params[f"h{k}.b"])
    z = ad.reshape(h @ params["out.w"] + params["out.b"], (batch, cfg.horizon, cfg.out_channels))
    if not cfg.squash:
        return z
    low = np.asarray(cfg.action_low)
    high = np.asarray(cfg.action_high)
    return low + (high - low) * ((ad.tanh(z) + 1.0) * 0.5)


def predict_actions(params, cfg: NetworkConfig, X_t, c, t):
    """Action sequence ``U_hat = D(X_t, c, t)`` of shape ``(B, H, d_u)``."""
    if not cfg.squash:
        raise ValueError("predict_actions expects a squashed action head")
    return predict(params, cfg, X_t, c, t)
