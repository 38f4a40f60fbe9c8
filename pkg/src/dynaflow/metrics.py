"""Feasibility and fidelity metrics.

``inverse_dynamics`` finds the admissible action whose one-step prediction
lands closest to a demanded next state, by projected gradient descent on the
squared residual with gradients from the autodiff tape.  The residual of that
action is the statewise admissibility error (SAE).  The trajectory
reconstruction error (TRE) is the mean squared deviation from a reference
that shares the initial state.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .dynamics import SystemSpec, state_difference

__all__ = [
    "IDSolverConfig",
    "IDResult",
    "inverse_dynamics",
    "sae_pairs",
    "sae",
    "tre",
    "EvalReport",
    "evaluate_method",
    "summary_stats",
]


@dataclass(frozen=True)
class IDSolverConfig:
    max_iters: int = 500
    step_size: float = 0.1
    tol: float = 1e-10
    n_restarts: int = 4
    max_halvings: int = 50
    armijo: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 1 <= self.n_restarts <= 4:
            raise ValueError("n_restarts must be between 1 and 4")


@dataclass
class IDResult:
    action: np.ndarray  # (N, d_u)
    residual: np.ndarray  # (N,)
    converged: np.ndarray  # (N,) bool
    iterations: np.ndarray  # (N,) iterations of the winning restart


def _residual(spec: SystemSpec, x, x_next, u):
    """``x_next - f(x, u)`` with angle coordinates wrapped; ``u`` may be traced."""
    pred = spec.dynamics(x, u)
    d = x_next - pred
    if spec.angle_dims:
        raw = x_next - ad.value(pred)
        shift = np.zeros_like(raw)
        idx = list(spec.angle_dims)
        shift[:, idx] = raw[:, idx] - state_difference(spec, x_next, ad.value(pred))[:, idx]
        d = d - shift
    return d


def _loss(spec, x, x_next, u) -> np.ndarray:
    r = _residual(spec, x, x_next, u)
    return 0.5 * np.sum(r * r, axis=1)


def _loss_and_grad(spec, x, x_next, u):
    def f(uu):
        r = _residual(spec, x, x_next, uu)
        return 0.5 * ad.sum(r * r, axis=1)

    (per_item,), tape = ad.record(f, [u])
    (g,) = ad.backward(tape, np.ones(len(u)))
    return per_item, g


def _least_squares_seed(spec, x, x_next):
    """Clamped Gauss-Newton step from ``u = 0`` using the tape Jacobian."""
    n, du = len(x), spec.action_dim
    u0 = np.zeros((n, du))

    def f(uu):
        return _residual(spec, x, x_next, uu)

    (r0,), tape = ad.record(f, [u0])
    # rows of d(residual)/du, one backward sweep per state coordinate
    J = np.empty((n, spec.state_dim, du))
    for k in range(spec.state_dim):
        seed = np.zeros_like(r0)
        seed[:, k] = 1.0
        (J[:, k, :],) = ad.backward(tape, seed)
    # residual = r0 + J u  =>  u = -pinv(J) r0
    u = -np.einsum("nij,nj->ni", np.linalg.pinv(J), r0)
    return np.clip(u, spec.low, spec.high)


def _pgd(spec, x, x_next, u, cfg: IDSolverConfig):
    n = len(u)
    u = np.clip(u, spec.low, spec.high)
    loss, g = _loss_and_grad(spec, x, x_next, u)
    alpha = np.full(n, cfg.step_size)
    done = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    floor = 0.5 * (1e-3 * cfg.tol) ** 2
    done |= loss <= floor
    for _ in range(cfg.max_iters):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        xa, xna, ua, ga, la = x[act], x_next[act], u[act], g[act], loss[act]
        step = alpha[act].copy()
        accepted = np.zeros(act.size, dtype=bool)
        cand = ua.copy()
        lc = la.copy()
        pending = np.arange(act.size)
        for _ in range(cfg.max_halvings):
            trial = np.clip(ua[pending] - step[pending, None] * ga[pending], spec.low, spec.high)
            lt = _loss(spec, xa[pending], xna[pending], trial)
            decrease = np.sum(ga[pending] * (ua[pending] - trial), axis=1)
            ok = (lt <= la[pending] - cfg.armijo * decrease) & (decrease > 0)
            hit = pending[ok]
            cand[hit], lc[hit], accepted[hit] = trial[ok], lt[ok], True
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= 0.5
        iters[act] += 1
        # no admissible decrease: projected-stationary at machine precision
        stalled = act[~accepted]
        done[stalled] = True

        acc = act[accepted]
        if acc.size:
            new_u = cand[accepted]
            new_l = lc[accepted]
            _, new_g = _loss_and_grad(spec, x[acc], x_next[acc], new_u)
            s = new_u - u[acc]
            y = new_g - g[acc]
            sy = np.sum(s * y, axis=1)
            ss = np.sum(s * s, axis=1)
            # Barzilai-Borwein trial step for the next iteration
            bb = np.where(sy > 0, ss / np.where(sy > 0, sy, 1.0), step[accepted] * 2.0)
            alpha[acc] = np.clip(bb, 1e-12, 1e12)
            res_change = np.sqrt(2.0 * loss[acc]) - np.sqrt(2.0 * new_l)
            u[acc], loss[acc], g[acc] = new_u, new_l, new_g
            done[acc] |= (res_change <= cfg.tol) | (new_l <= floor)
    return u, np.sqrt(2.0 * loss), done, iters


def inverse_dynamics(spec: SystemSpec, x, x_next, config: IDSolverConfig | None = None):
    """Batched inverse dynamics.

    ``x`` and ``x_next`` are ``(N, d_x)`` (or single states).  Returns an
    :class:`IDResult`; for single-state inputs the fields are unbatched.
    Starting points: zero action, the clamped least-squares action, and two
    uniform random actions.  Non-converged items keep their best iterate
    and are flagged.
    """
    cfg = config or IDSolverConfig()
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_next = np.atleast_2d(np.asarray(x_next, dtype=np.float64))
    if x.shape != x_next.shape or x.shape[1] != spec.state_dim:
        raise ValueError("x and x_next must both be (N, state_dim)")
    n = len(x)
    rng = np.random.default_rng(cfg.seed)
    starts = [lambda: np.zeros((n, spec.action_dim)), lambda: _least_squares_seed(spec, x, x_next)]
    starts += [lambda: rng.uniform(spec.low, spec.high, size=(n, spec.action_dim))] * 2
    best_u = np.zeros((n, spec.action_dim))
    best_r = np.full(n, np.inf)
    best_c = np.zeros(n, dtype=bool)
    best_i = np.zeros(n, dtype=int)
    for k in range(cfg.n_restarts):
        u0 = starts[k]()
        todo = np.flatnonzero(best_r > cfg.tol)
        if todo.size == 0:
            break
        u, r, conv, it = _pgd(spec, x[todo], x_next[todo], u0[todo], cfg)
        better = r < best_r[todo]
        idx = todo[better]
        best_u[idx], best_r[idx], best_c[idx], best_i[idx] = u[better], r[better], conv[better], it[better]
    res = IDResult(best_u, best_r, best_c, best_i)
    if single:
        return IDResult(res.action[0], res.residual[0], res.converged[0], res.iterations[0])
    return res


def sae_pairs(spec: SystemSpec, x, x_next, config: IDSolverConfig | None = None) -> np.ndarray:
    """SAE of each transition ``x[k] -> x_next[k]``."""
    if len(x) == 0:
        return np.zeros(0)
    return inverse_dynamics(spec, x, x_next, config).residual


def sae(spec: SystemSpec, trajectory, config: IDSolverConfig | None = None) -> np.ndarray:
    """Per-transition SAE of a ``(..., T, d_x)`` trajectory that includes ``x0``."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.shape[-2] < 2:
        raise ValueError("trajectory needs at least two states")
    lead = traj.shape[:-2]
    a = traj[..., :-1, :].reshape(-1, spec.state_dim)
    b = traj[..., 1:, :].reshape(-1, spec.state_dim)
    return sae_pairs(spec, a, b, config).reshape(lead + (traj.shape[-2] - 1,))


def tre(X_hat, X_ref, spec: SystemSpec | None = None) -> np.ndarray:
    """Mean over rows ``1 .. T-1`` of ``||x_hat_i - x_ref_i||^2``.

    Both arrays are ``(..., T, d_x)`` with the shared initial state in row 0.
    """
    a = np.asarray(X_hat, dtype=np.float64)
    b = np.asarray(X_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-2] < 2:
        raise ValueError("trajectories need at least two states")
    d = state_difference(spec, a, b) if spec is not None else a - b
    return np.mean(np.sum(d[..., 1:, :] ** 2, axis=-1), axis=-1)


def summary_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {
        "n": int(v.size), "mean": float(v.mean()), "median": float(med), "q1": float(q1),
        "q3": float(q3), "min": float(v.min()), "max": float(v.max()),
    }


@dataclass
class EvalReport:
    method: str
    dataset: str
    seed: int
    sae: np.ndarray  # (N, H) per-transition SAE
    tre: np.ndarray  # (N,)
    tracking: dict | None = None  # success (N,), failure_step (N,), terminal_error (N,)
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        out = {"sae": summary_stats(self.sae), "tre": summary_stats(self.tre)}
        if self.tracking is not None:
            ok = np.asarray(self.tracking["success"], dtype=bool)
            out["tracking"] = {
                "success_rate": float(ok.mean()) if ok.size else float("nan"),
                "terminal_error": summary_stats(self.tracking["terminal_error"]),
            }
        return out

    def to_dict(self) -> dict:
        d = {
            "method": self.method, "dataset": self.dataset, "seed": self.seed,
            "sae": np.asarray(self.sae).tolist(), "tre": np.asarray(self.tre).tolist(),
            "aggregates": self.aggregates(), "meta": self.meta,
        }
        if self.tracking is not None:
            d["tracking"] = {k: np.asarray(v).tolist() for k, v in self.tracking.items()}
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def read_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        tracking = d.get("tracking")
        if tracking is not None:
            tracking = {k: np.asarray(v) for k, v in tracking.items()}
        return cls(d["method"], d["dataset"], d["seed"], np.asarray(d["sae"]), np.asarray(d["tre"]),
                   tracking, d.get("meta", {}))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "dataset", "metric", "item", "step", "value"])
            for i, row in enumerate(np.atleast_2d(self.sae)):
                for j, v in enumerate(row):
                    w.writerow([self.method, self.dataset, "sae", i, j, repr(float(v))])
            for i, v in enumerate(self.tre):
                w.writerow([self.method, self.dataset, "tre", i, "", repr(float(v))])


def evaluate_method(
    method: str,
    sampler: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    spec: SystemSpec,
    windows,
    noise_seeds,
    config: IDSolverConfig | None = None,
    dataset: str = "",
    seed: int = 0,
) -> EvalReport:
    """Sample one trajectory per evaluation window and score it.

    ``sampler(x0, command, tag, noise_seeds)`` returns ``(N, H, d_x)`` raw
    states.  Every method in a comparison receives the same ``noise_seeds``.
    """
    noise_seeds = np.asarray(noise_seeds)
    if len(noise_seeds) != len(windows):
        raise ValueError("one noise seed per evaluation window is required")
    X = np.asarray(sampler(windows.x0, windows.command, windows.tag, noise_seeds), dtype=np.float64)
    if X.shape != windows.X.shape:
        raise ValueError(f"sampler returned {X.shape}, expected {windows.X.shape}")
    gen = np.concatenate([windows.x0[:, None, :], X], axis=1)
    ref = np.concatenate([windows.x0[:, None, :], windows.X], axis=1)
    return EvalReport(
        method, dataset, seed, sae(spec, gen, config), tre(gen, ref, spec),
        meta={"n_items": len(windows), "id_solver": asdict(config or IDSolverConfig())},
    )
