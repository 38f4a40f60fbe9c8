"""Experiment protocols shared by the CLI and the acceptance suite.

Every protocol is a pure function of its inputs and seeds.  Outputs are
plain dicts and arrays; the ``write_*`` helpers turn them into JSON/CSV
files that carry a config echo and the SHA-256 of every input file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import tracker_rollout
from .datagen import Dataset, WindowSet, generate_expert, generate_kinematic, read_dataset, write_dataset
from .dynamics import SystemSpec, state_difference, step
from .flowcore import ConditioningSpec, FlowModel, Normalizer, SamplerConfig, SampleResult, base_noise, sample
from .metrics import IDSolverConfig, evaluate_method, inverse_dynamics, sae, summary_stats
from .netmodel import NetworkConfig
from .trainer import TrainConfig, build_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

# what each trained method is reported as; sa_flow yields two views
VIEWS = {"dynaflow": ("dynaflow",), "vanilla": ("vanilla",), "sa_flow": ("sa_state", "sa_rollout")}
# views that execute their own actions instead of being tracked
ACTION_VIEWS = {"dynaflow": "dynaflow", "sa_flow": "sa_rollout"}
TERMINAL_ERROR_THRESHOLD = 0.5
SEED_BOUND = 2**31 - 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _echo_path(path, base) -> str:
    """Paths inside the output directory are echoed relative to it so that
    reruns into a different directory produce identical files."""
    try:
        return os.path.relpath(path, base) if base is not None else str(path)
    except ValueError:
        return str(path)


# ---------------------------------------------------------------------------
# models

def model_for_dataset(method: str, dataset: Dataset, horizon: int = 16, hidden_width: int = 256,
                      n_hidden_layers: int = 3, time_embed_dim: int = 16) -> tuple[FlowModel, WindowSet]:
    """Build an untrained model whose normalizer is fitted on ``dataset``."""
    spec = dataset.spec
    windows = dataset.windows(horizon)
    if len(windows) == 0:
        raise ValueError(f"dataset episodes are shorter than the horizon {horizon}")
    if method == "sa_flow" and not dataset.has_actions:
        from .baselines import MissingActionsError

        raise MissingActionsError("dataset lacks actions")
    norm = Normalizer.fit(spec, windows.x0, windows.X, windows.U if method == "sa_flow" else None)
    cond = ConditioningSpec.for_system(spec, dataset.command_dim, dataset.n_tags)
    if method == "dynaflow":
        net = NetworkConfig(horizon, spec.state_dim, spec.action_dim, cond.width, hidden_width, n_hidden_layers,
                            time_embed_dim, True, spec.action_low, spec.action_high)
    elif method == "vanilla":
        net = NetworkConfig(horizon, spec.state_dim, spec.state_dim, cond.width, hidden_width, n_hidden_layers,
                            time_embed_dim, False)
    elif method == "sa_flow":
        width = spec.state_dim + spec.action_dim
        net = NetworkConfig(horizon, width, width, cond.width, hidden_width, n_hidden_layers, time_embed_dim, False)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(VIEWS)}")
    return build_model(method, spec.name, net, norm, cond), windows


@dataclass
class Trained:
    """A loaded checkpoint evaluated with its EMA parameters."""

    model: FlowModel
    params: dict
    header: dict
    path: str
    sha256: str

    @property
    def method(self) -> str:
        return self.model.kind

    @classmethod
    def load(cls, path, **expect) -> "Trained":
        model, state, header = load_checkpoint(path, **expect)
        return cls(model, state.ema, header, str(path), file_sha256(path))


def draw_plans(model: FlowModel, params, x0, command, tag, seeds, n_flow_steps: int = 1) -> SampleResult:
    """Sample one plan per item with base noise fixed by the item's seed."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    c = model.cond.build(model.norm, x0, command, tag)
    noise = base_noise(seeds, model.horizon, model.system.state_dim, model.extra_channels)
    return sample(model, params, x0, c, SamplerConfig(n_flow_steps), noise=noise)


def view_states(view: str, result: SampleResult) -> np.ndarray:
    return result.extras["rollout"] if view == "sa_rollout" else result.states


def view_actions(view: str, result: SampleResult):
    """Actions a view would execute open loop, or None for state-only views."""
    if view in ("dynaflow", "sa_rollout"):
        return result.actions
    return None


def eval_items(dataset: Dataset, horizon: int, n_eval: int, seed: int) -> tuple[WindowSet, np.ndarray]:
    """Evaluation windows and their shared noise seeds.

    The draw depends only on ``(dataset, horizon, n_eval, seed)``, so every
    method evaluated on the same dataset sees identical items and noise.
    """
    windows = dataset.windows(horizon)
    rng = np.random.default_rng(seed)
    n = min(n_eval, len(windows))
    idx = np.sort(rng.choice(len(windows), size=n, replace=False))
    seeds = rng.integers(0, SEED_BOUND, size=n)
    return windows.subset(idx), seeds


# ---------------------------------------------------------------------------
# protocols

@dataclass
class Run:
    trained: Trained
    dataset: Dataset
    dataset_name: str
    dataset_path: str
    dataset_sha256: str


def load_runs(pairs, base=None) -> list[Run]:
    """Load and validate every ``(checkpoint, dataset)`` pair before any compute."""
    runs = []
    datasets = {}
    for ckpt, data in pairs:
        if not Path(ckpt).is_file():
            raise FileNotFoundError(f"missing checkpoint: {ckpt}")
        if not Path(data).is_file():
            raise FileNotFoundError(f"missing dataset: {data}")
        if data not in datasets:
            datasets[data] = read_dataset(data)
        ds = datasets[data]
        trained = Trained.load(ckpt, expect_system=ds.system)
        runs.append(Run(trained, ds, Path(data).stem, _echo_path(data, base), file_sha256(data)))
    return runs


def quantitative_compare(runs: list[Run], n_eval: int = 200, seed: int = 0, n_flow_steps: int = 1,
                         id_config: IDSolverConfig | None = None) -> dict:
    """SAE/TRE of every method view plus the dataset itself on shared items.

    Returns ``{"reports": [EvalReport], "rows": [summary row dicts]}`` with
    one row per (method, dataset, metric).
    """
    id_config = id_config or IDSolverConfig()
    reports = []
    seen = set()
    for run in runs:
        model, ds = run.trained.model, run.dataset
        items, seeds = eval_items(ds, model.horizon, n_eval, seed)
        if (run.dataset_name, model.horizon) not in seen:
            seen.add((run.dataset_name, model.horizon))
            ref = evaluate_method("reference", lambda x0, cmd, tag, s: items.X, ds.spec, items, seeds,
                                  id_config, run.dataset_name, seed)
            ref.meta["dataset_intrinsic_mean_sae"] = ds.meta.get("intrinsic_mean_sae")
            reports.append(ref)
        cache = {}

        def sampler_for(view):
            def sampler(x0, cmd, tag, s):
                if "res" not in cache:
                    cache["res"] = draw_plans(model, run.trained.params, x0, cmd, tag, s, n_flow_steps)
                return view_states(view, cache["res"])
            return sampler

        for view in VIEWS[model.kind]:
            rep = evaluate_method(view, sampler_for(view), ds.spec, items, seeds, id_config, run.dataset_name, seed)
            rep.meta.update({"checkpoint": run.trained.sha256, "n_flow_steps": n_flow_steps})
            reports.append(rep)
    rows = []
    for rep in reports:
        for metric, stats in rep.aggregates().items():
            if metric in ("sae", "tre"):
                rows.append({"method": rep.method, "dataset": rep.dataset, "metric": metric, **stats})
    return {"reports": reports, "rows": rows}


def tracking_analysis(runs: list[Run], n_eval: int = 200, seed: int = 0, n_flow_steps: int = 1,
                      threshold: float = TERMINAL_ERROR_THRESHOLD, id_config: IDSolverConfig | None = None) -> dict:
    """Track every sampled plan with the inverse-dynamics tracker.

    A plan counts as tracked when the failure predicate never fires and the
    final executed state lies within ``threshold`` (wrapped Euclidean norm
    over the full state) of the final planned state.
    """
    out = []
    for run in runs:
        model, ds = run.trained.model, run.dataset
        items, seeds = eval_items(ds, model.horizon, n_eval, seed)
        res = draw_plans(model, run.trained.params, items.x0, items.command, items.tag, seeds, n_flow_steps)
        for view in VIEWS[model.kind]:
            plans = view_states(view, res)
            tr = tracker_rollout(ds.spec, plans, items.x0, id_config)
            tracked = tr.success & (tr.terminal_error <= threshold)
            out.append({
                "method": view, "dataset": run.dataset_name, "x0": items.x0, "plans": plans, "track": tr,
                "tracked": tracked,
                "summary": {
                    "method": view, "dataset": run.dataset_name, "n": int(len(tracked)),
                    "tracked_rate": float(tracked.mean()),
                    "failure_rate": float((~tr.success).mean()),
                    "exceeds_threshold_rate": float((tr.terminal_error > threshold).mean()),
                    "untracked_rate": float((~tracked).mean()),
                    "terminal_error": summary_stats(tr.terminal_error),
                    "threshold": threshold,
                },
            })
    return {"results": out, "rows": [r["summary"] for r in out]}


@dataclass
class ChainResult:
    states: np.ndarray  # (n_segments * H + 1, d_x), starts with x0
    actions: np.ndarray | None  # (n_segments * H, d_u)
    segment_seeds: np.ndarray
    sae: np.ndarray  # per transition
    stats: dict = field(default_factory=dict)


def chain(trained: Trained, x0, command, tag: int = 0, n_segments: int = 28, seed: int = 0,
          n_flow_steps: int = 1, id_config: IDSolverConfig | None = None) -> ChainResult:
    """Open-loop chaining: each segment starts from the previous segment's last state."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    model = trained.model
    view = ACTION_VIEWS.get(model.kind, model.kind)
    seeds = np.random.default_rng(seed).integers(0, SEED_BOUND, size=n_segments)
    x = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    command = np.asarray(command, dtype=np.float64).reshape(1, -1)
    states, actions = [x], []
    for k in range(n_segments):
        res = draw_plans(model, trained.params, x, command, tag, seeds[k:k + 1], n_flow_steps)
        seg = view_states(view, res)
        states.append(seg[0])
        acts = view_actions(view, res)
        if acts is not None:
            actions.append(acts[0])
        x = seg[:, -1]
    X = np.concatenate(states, axis=0)
    U = np.concatenate(actions, axis=0) if actions else None
    spec = model.system
    errs = sae(spec, X, id_config)
    stats = {"sae": summary_stats(errs), "n_steps": int(len(X) - 1), "method": view}
    if spec.name == "double_integrator" and trained.header.get("extra", {}).get("pd_mode", "velocity") == "velocity":
        verr = np.linalg.norm(X[1:, 2:4] - command[0], axis=-1)
        stats["command_velocity_error"] = summary_stats(verr)
    if U is not None:
        replay = np.concatenate([X[:1], _replay(spec, X[0], U)], axis=0)
        stats["replay_max_deviation"] = float(np.max(np.abs(state_difference(spec, replay, X))))
    return ChainResult(X, U, seeds, errs, stats)


def _replay(spec: SystemSpec, x0, U) -> np.ndarray:
    x = np.asarray(x0, dtype=np.float64)
    out = []
    for u in U:
        x = step(spec, x, u)
        out.append(x)
    return np.stack(out)


@dataclass(frozen=True)
class DisturbConfig:
    windows: tuple[int, ...] = (2, 5, 10)
    flow_steps: tuple[int, ...] = (1, 2, 5)
    magnitudes: tuple[float, ...] = (0.0, 5.0, 10.0, 20.0, 50.0)
    n_trials: int = 100
    n_control_steps: int = 40
    onset: int = 10
    duration: int = 10
    command: tuple[float, ...] = (0.5, 0.0)
    x0: tuple[float, ...] | None = None
    tag: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1 or self.n_control_steps < 1:
            raise ValueError("n_trials and n_control_steps must be >= 1")
        if any(w < 1 for w in self.windows) or any(n < 1 for n in self.flow_steps):
            raise ValueError("windows and flow steps must be >= 1")
        if any(m < 0 for m in self.magnitudes):
            raise ValueError("disturbance magnitudes must be nonnegative")


def _directions(spec: SystemSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, spec.action_dim))
    if spec.action_dim == 1:
        return np.sign(d) + (d == 0)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def receding_horizon(trained: Trained, cfg: DisturbConfig, window: int, n_flow_steps: int, magnitude: float,
                     directions: np.ndarray, plan_seeds: np.ndarray, id_config: IDSolverConfig | None = None):
    """Vectorized closed loop over ``n_trials``; returns ``(alive, failure_step)``.

    Every ``window`` steps a plan is drawn from the current state and its
    first ``window`` steps executed.  Action views replay their actions;
    state-only views are executed through inverse dynamics.  Between
    ``onset`` and ``onset + duration`` a constant force of ``magnitude``
    along each trial's direction is added to the action.
    """
    model = trained.model
    spec = model.system
    view = ACTION_VIEWS.get(model.kind, model.kind)
    if window > model.horizon:
        raise ValueError(f"replan window {window} exceeds the model horizon {model.horizon}")
    n = len(directions)
    x0 = np.zeros(spec.state_dim) if cfg.x0 is None else np.asarray(cfg.x0, dtype=np.float64)
    x = np.tile(x0, (n, 1))
    command = np.tile(np.asarray(cfg.command, dtype=np.float64), (n, 1))
    alive = np.ones(n, dtype=bool)
    failure_step = np.full(n, -1)
    k = 0
    for r in range(-(-cfg.n_control_steps // window)):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        res = draw_plans(model, trained.params, x[idx], command[idx], cfg.tag, plan_seeds[r, idx], n_flow_steps)
        plans = view_states(view, res)
        acts = view_actions(view, res)
        for j in range(min(window, cfg.n_control_steps - k)):
            live = np.flatnonzero(alive[idx])
            sub = idx[live]
            if sub.size == 0:
                break
            if acts is not None:
                u = acts[live, j]
            else:
                u = inverse_dynamics(spec, x[sub], plans[live, j], id_config).action
            force = None
            if cfg.onset <= k < cfg.onset + cfg.duration and magnitude > 0:
                force = magnitude * directions[sub]
            x[sub] = step(spec, x[sub], u, force=force)
            fell = spec.failed(x[sub])
            failure_step[sub[fell]] = k
            alive[sub[fell]] = False
            k += 1
    return alive, failure_step


def disturbance_sweep(trained_list: list[Trained], cfg: DisturbConfig,
                      id_config: IDSolverConfig | None = None) -> dict:
    """Survival-rate grid over method x window x flow steps x magnitude.

    Directions and plan seeds are drawn once from ``cfg.seed`` and shared by
    every method and cell.
    """
    rng = np.random.default_rng(cfg.seed)
    spec = trained_list[0].model.system
    for t in trained_list:
        if t.model.system.name != spec.name:
            raise ValueError("all checkpoints in a sweep must share the system")
    directions = _directions(spec, cfg.n_trials, rng)
    max_replans = max(-(-cfg.n_control_steps // w) for w in cfg.windows)
    plan_seeds = rng.integers(0, SEED_BOUND, size=(max_replans, cfg.n_trials))
    rows = []
    for trained in trained_list:
        view = ACTION_VIEWS.get(trained.method, trained.method)
        for window in cfg.windows:
            for nfs in cfg.flow_steps:
                for mag in cfg.magnitudes:
                    alive, _ = receding_horizon(trained, cfg, window, nfs, mag, directions, plan_seeds, id_config)
                    rows.append({"method": view, "window": int(window), "flow_steps": int(nfs),
                                 "magnitude": float(mag), "n_trials": int(cfg.n_trials),
                                 "survival_rate": float(alive.mean())})
    return {"rows": rows}


# ---------------------------------------------------------------------------
# output

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, payload: dict, config: dict, inputs: dict) -> None:
    """``inputs`` maps an echoed file name to its SHA-256."""
    doc = {"config": _jsonable(config), "inputs": inputs, **_jsonable(payload)}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_rows_csv(path, rows: list[dict], config: dict, inputs: dict) -> None:
    """CSV with a leading ``#`` comment line holding the config echo and input hashes."""
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps({"config": _jsonable(config), "inputs": inputs}, sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_rows_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_tracking_csv(path, results: list[dict], spec: SystemSpec) -> None:
    """Per-step executed and planned states; ``failed`` marks the failing step."""
    d = spec.state_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "dataset", "item", "step"] + [f"x{i}" for i in range(d)]
                   + [f"plan{i}" for i in range(d)] + ["failed"])
        for r in results:
            tr = r["track"]
            for item in range(len(tr.states)):
                rows = [(0, r["x0"][item], r["x0"][item], 0)]
                fs = tr.failure_step[item]
                last = tr.states.shape[1] if fs < 0 else fs + 1
                for s in range(last):
                    rows.append((s + 1, tr.states[item, s], r["plans"][item, s], int(s == fs)))
                for s, xs, ps, f in rows:
                    w.writerow([r["method"], r["dataset"], item, s] + [repr(float(v)) for v in xs]
                               + [repr(float(v)) for v in ps] + [f])


# ---------------------------------------------------------------------------
# end-to-end suite

@dataclass(frozen=True)
class SuiteConfig:
    """Desk-scale settings for the full pipeline used by the acceptance tests."""

    seed: int = 0
    horizon: int = 16
    hidden_width: int = 256
    n_hidden_layers: int = 3
    train_steps: int = 3000
    batch_size: int = 128
    learning_rate: float = 2e-4
    expert_episodes: int = 200
    expert_len: int = 100
    kinematic_episodes: int = 200
    kinematic_len: int = 40
    kinematic_onset: tuple[int, int] = (4, 28)
    n_eval: int = 200
    n_flow_steps: int = 1
    chain_segments: int = 28
    chain_command: tuple[float, float] = (0.5, 0.0)
    disturb: DisturbConfig = DisturbConfig()


SUITE_MODELS = (
    ("di_expert", "dynaflow"), ("di_expert", "vanilla"), ("di_expert", "sa_flow"),
    ("pend_kinematic", "dynaflow"), ("pend_kinematic", "vanilla"),
)


def suite_datasets(cfg: SuiteConfig) -> dict[str, Dataset]:
    return {
        "di_expert": generate_expert("double_integrator", "pd_regulator", cfg.expert_episodes, cfg.expert_len,
                                     np.random.default_rng(cfg.seed)),
        "pend_kinematic": generate_kinematic("pendulum", "instant_swingup", cfg.kinematic_episodes,
                                             cfg.kinematic_len, np.random.default_rng(cfg.seed + 1),
                                             onset_range=cfg.kinematic_onset),
    }


def train_to_checkpoint(method: str, dataset: Dataset, path, tcfg: TrainConfig, horizon: int = 16,
                        hidden_width: int = 256, n_hidden_layers: int = 3, time_embed_dim: int = 16,
                        extra: dict | None = None, callback=None):
    model, windows = model_for_dataset(method, dataset, horizon, hidden_width, n_hidden_layers, time_embed_dim)
    result = train(model, windows, tcfg, callback=callback)
    meta = dict(extra or {})
    if "pd_mode" in dataset.meta:
        meta["pd_mode"] = dataset.meta["pd_mode"]
    save_checkpoint(path, model, result.state, tcfg, meta)
    return model, result


def run_suite(out_dir, cfg: SuiteConfig = SuiteConfig(), timings: dict | None = None) -> dict[str, Path]:
    """Generate data, train every model and run all four protocols.

    Returns the paths of the metrics files.  All files are deterministic
    functions of ``cfg``; nothing in them depends on ``out_dir``.  Wall
    times per stage go into ``timings`` when given, never into the files.
    """
    timings = {} if timings is None else timings
    clock = time.process_time
    t0 = clock()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = asdict(cfg)
    data_paths = {}
    for name, ds in suite_datasets(cfg).items():
        data_paths[name] = out / f"{name}.dfd"
        write_dataset(ds, data_paths[name])
    timings["data"] = clock() - t0
    t0 = clock()
    ckpts = {}
    tcfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, n_steps=cfg.train_steps,
                       seed=cfg.seed, log_every=0)
    for name, method in SUITE_MODELS:
        ds = read_dataset(data_paths[name])
        path = out / f"{name}_{method}.dfc"
        log.info("training %s on %s", method, name)
        train_to_checkpoint(method, ds, path, tcfg, cfg.horizon, cfg.hidden_width, cfg.n_hidden_layers)
        ckpts[(name, method)] = path
        timings[f"train_{name}_{method}"] = clock() - t0
        t0 = clock()

    pairs = [(str(ckpts[k]), str(data_paths[k[0]])) for k in SUITE_MODELS]
    runs = load_runs(pairs, base=out)
    inputs = {_echo_path(p, out): file_sha256(p) for p in list(data_paths.values()) + list(ckpts.values())}
    files = {}

    cmp = quantitative_compare(runs, cfg.n_eval, cfg.seed, cfg.n_flow_steps)
    files["compare_csv"] = out / "compare_summary.csv"
    write_rows_csv(files["compare_csv"], cmp["rows"], config, inputs)
    files["compare_json"] = out / "compare_reports.json"
    write_json(files["compare_json"], {"reports": [r.to_dict() for r in cmp["reports"]]}, config, inputs)
    timings["compare"] = clock() - t0
    t0 = clock()

    trk = tracking_analysis(runs, cfg.n_eval, cfg.seed, cfg.n_flow_steps)
    files["tracking_json"] = out / "tracking_summary.json"
    write_json(files["tracking_json"], {"rows": trk["rows"]}, config, inputs)
    timings["tracking"] = clock() - t0
    t0 = clock()

    di = next(r.trained for r in runs if r.trained.method == "dynaflow" and r.dataset.system == "double_integrator")
    ch = chain(di, np.zeros(4), cfg.chain_command, 0, cfg.chain_segments, cfg.seed, cfg.n_flow_steps)
    files["chain_json"] = out / "chain.json"
    write_json(files["chain_json"], {"states": ch.states, "actions": ch.actions, "segment_seeds": ch.segment_seeds,
                                     "sae": ch.sae, "stats": ch.stats}, config, inputs)
    timings["chain"] = clock() - t0
    t0 = clock()

    sweepers = [r.trained for r in runs if r.dataset.system == "double_integrator" and r.trained.method in ACTION_VIEWS]
    sw = disturbance_sweep(sweepers, cfg.disturb)
    files["disturb_csv"] = out / "disturb_survival.csv"
    write_rows_csv(files["disturb_csv"], sw["rows"], config, inputs)
    timings["disturb"] = clock() - t0
    return files
