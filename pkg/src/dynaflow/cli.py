"""Command-line harness: gen-data, train, eval, chain, disturb, suite.

Settings resolve as built-in defaults < ``--config FILE.json`` < flags, and
the effective settings are echoed into every output file.  Outputs default
to ``$DYNAFLOW_OUT`` (or ``./runs``).  Exit codes: 0 success, 1 invalid
input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .baselines import MissingActionsError
from .datagen import AccidentalFeasibilityError, CONTROLLERS, STYLES, generate_expert, generate_kinematic, \
    read_dataset, write_dataset
from .dynamics import SYSTEMS
from .experiments import (
    DisturbConfig, SuiteConfig, Trained, chain, disturbance_sweep, file_sha256, load_runs,
    quantitative_compare, run_suite, tracking_analysis, train_to_checkpoint, write_json, write_rows_csv,
    write_tracking_csv,
)
from .fileformat import FormatError
from .metrics import sae_pairs, summary_stats
from .trainer import ConfigMismatchError, NonFiniteLossError, TrainConfig

log = logging.getLogger("dynaflow")

OUT_ENV = "DYNAFLOW_OUT"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _effective(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _out_dir(args) -> Path:
    out = Path(args.out_dir) if args.out_dir else default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.regime == "expert":
        controller = args.controller or CONTROLLERS[args.system][0]
        length = args.episode_len or (100 if args.system == "double_integrator" else 200)
        ds = generate_expert(args.system, controller, args.episodes, length, rng, pd_mode=args.pd_mode)
    else:
        style = args.style or STYLES[args.system][0]
        length = args.episode_len or 40
        onset = (args.onset_min, args.onset_max if args.onset_max is not None else max(args.onset_min, length - 12))
        ds = generate_kinematic(args.system, style, args.episodes, length, rng, duration=args.duration,
                                onset_range=onset, amplitude=args.amplitude, sae_floor=args.sae_floor)
    ds.meta["seed"] = args.seed
    out = Path(args.out) if args.out else _out_dir(args) / f"{args.system}_{args.regime}.dfd"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    a, b = ds.transitions()
    summary = {
        "path": str(out), "sha256": file_sha256(out), "system": ds.system, "provenance": ds.provenance,
        "episodes": len(ds.episodes), "transitions": int(len(a)), "has_actions": ds.has_actions,
        "intrinsic_sae": summary_stats(sae_pairs(ds.spec, a, b)),
    }
    if "sae_floor" in ds.meta:
        summary["sae_floor"] = ds.meta["sae_floor"]
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_train(args) -> int:
    ds = read_dataset(args.dataset)
    if args.method == "sa_flow" and not ds.has_actions:
        raise MissingActionsError("dataset lacks actions")
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, n_steps=args.steps,
                       ema_decay=args.ema_decay, seed=args.seed, velocity_weight=args.velocity_weight,
                       grad_clip=args.grad_clip if args.grad_clip > 0 else None, log_every=0)
    out = Path(args.out) if args.out else _out_dir(args) / f"{Path(args.dataset).stem}_{args.method}.dfc"
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log_csv) if args.log_csv else out.with_suffix(".loss.csv")
    every = max(1, args.log_every)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "grad_norm"])

        def callback(step, loss, gnorm):
            if step % every == 0 or step == tcfg.n_steps or step == 1:
                writer.writerow([step, repr(loss), repr(gnorm)])
                log.info("step %d loss %.6g grad_norm %.4g", step, loss, gnorm)

        extra = {"dataset": Path(args.dataset).name, "dataset_sha256": file_sha256(args.dataset),
                 "config": _effective(args)}
        try:
            _, result = train_to_checkpoint(args.method, ds, out, tcfg, args.horizon, args.hidden_width,
                                            args.layers, args.time_embed_dim, extra, callback)
        except NonFiniteLossError as exc:
            diag = Path(str(out) + ".diagnostics.json")
            diag.write_text(json.dumps(exc.diagnostics, indent=1, default=float))
            print(f"error: {exc}; diagnostics written to {diag}", file=sys.stderr)
            return EXIT_NUMERIC
    losses = np.asarray(result.losses)
    print(json.dumps({"checkpoint": str(out), "loss_log": str(log_path), "steps": tcfg.n_steps,
                      "final_loss": float(losses[-1]) if losses.size else None}, indent=1))
    return EXIT_OK


def _runs_arg(args):
    if not args.run:
        raise UsageError("at least one --run CHECKPOINT DATASET pair is required")
    return [tuple(r) for r in args.run]


def cmd_eval(args) -> int:
    out = _out_dir(args)
    runs = load_runs(_runs_arg(args))
    config = _effective(args)
    inputs = {}
    for r in runs:
        inputs[r.trained.path] = r.trained.sha256
        inputs[r.dataset_path] = r.dataset_sha256
    if args.experiment == "quantitative_compare":
        res = quantitative_compare(runs, args.n_eval, args.seed, args.flow_steps)
        for rep in res["reports"]:
            write_json(out / f"{rep.method}_{rep.dataset}.json", rep.to_dict(), config, inputs)
        write_rows_csv(out / "compare_summary.csv", res["rows"], config, inputs)
        for row in res["rows"]:
            print(f"{row['method']:>10s} {row['dataset']:>20s} {row['metric']:>4s} "
                  f"mean {row['mean']:.4g} median {row['median']:.4g}")
    else:
        res = tracking_analysis(runs, args.n_eval, args.seed, args.flow_steps, args.threshold)
        for r in res["results"]:
            spec = next(x.dataset.spec for x in runs if x.dataset_name == r["dataset"])
            write_tracking_csv(out / f"tracking_{r['method']}_{r['dataset']}.csv", [r], spec)
        write_json(out / "tracking_summary.json", {"rows": res["rows"]}, config, inputs)
        for row in res["rows"]:
            print(f"{row['method']:>10s} {row['dataset']:>20s} tracked {row['tracked_rate']:.3f} "
                  f"failed {row['failure_rate']:.3f}")
    return EXIT_OK


def cmd_chain(args) -> int:
    trained = Trained.load(args.checkpoint)
    spec = trained.model.system
    x0 = np.zeros(spec.state_dim) if args.x0 is None else np.asarray(args.x0, dtype=np.float64)
    if x0.shape != (spec.state_dim,):
        raise UsageError(f"--x0 needs {spec.state_dim} values")
    command = np.zeros(trained.model.cond.command_dim) if args.command is None else np.asarray(args.command)
    if command.shape != (trained.model.cond.command_dim,):
        raise UsageError(f"--command needs {trained.model.cond.command_dim} values")
    res = chain(trained, x0, command, args.tag, args.segments, args.seed, args.flow_steps)
    out = _out_dir(args)
    inputs = {trained.path: trained.sha256}
    write_json(out / "chain.json", {"states": res.states, "actions": res.actions,
                                    "segment_seeds": res.segment_seeds, "sae": res.sae, "stats": res.stats},
               _effective(args), inputs)
    print(json.dumps(res.stats, indent=1))
    return EXIT_OK


def cmd_disturb(args) -> int:
    if not args.checkpoint:
        raise UsageError("at least one --checkpoint is required")
    trained = [Trained.load(p) for p in args.checkpoint]
    cfg = DisturbConfig(tuple(args.windows), tuple(args.flow_steps), tuple(args.magnitudes), args.trials,
                        args.steps, args.onset, args.duration, tuple(args.command),
                        None if args.x0 is None else tuple(args.x0), args.tag, args.seed)
    res = disturbance_sweep(trained, cfg)
    out = _out_dir(args)
    write_rows_csv(out / "disturb_survival.csv", res["rows"], _effective(args),
                   {t.path: t.sha256 for t in trained})
    for row in res["rows"]:
        print(f"{row['method']:>10s} window {row['window']:>2d} flow_steps {row['flow_steps']} "
              f"magnitude {row['magnitude']:>5g} survival {row['survival_rate']:.2f}")
    return EXIT_OK


def cmd_suite(args) -> int:
    cfg = SuiteConfig(seed=args.seed, train_steps=args.train_steps, n_eval=args.n_eval,
                      disturb=DisturbConfig(n_trials=args.trials, seed=args.seed))
    files = run_suite(_out_dir(args), cfg)
    for name, path in files.items():
        print(f"{name}: {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynaflow", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file of flag defaults (keys are flag names with underscores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate an expert or kinematic dataset")
    g.add_argument("--system", required=True, choices=sorted(SYSTEMS))
    g.add_argument("--regime", required=True, choices=("expert", "kinematic"))
    g.add_argument("--controller", help="expert controller (default depends on the system)")
    g.add_argument("--style", help="kinematic style (default depends on the system)")
    g.add_argument("--pd-mode", default="velocity", choices=("velocity", "waypoint"))
    g.add_argument("--episodes", type=int, default=200)
    g.add_argument("--episode-len", type=int)
    g.add_argument("--duration", type=float, default=0.4, help="kinematic motion duration in seconds")
    g.add_argument("--amplitude", type=float)
    g.add_argument("--onset-min", type=int, default=4)
    g.add_argument("--onset-max", type=int)
    g.add_argument("--sae-floor", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a flow model on a dataset")
    t.add_argument("--method", required=True, choices=("dynaflow", "vanilla", "sa_flow"))
    t.add_argument("--dataset", required=True)
    t.add_argument("--steps", type=int, default=3000)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--ema-decay", type=float, default=0.995)
    t.add_argument("--velocity-weight", type=float, default=1.0)
    t.add_argument("--grad-clip", type=float, default=10.0, help="global norm clip; 0 disables")
    t.add_argument("--horizon", type=int, default=16)
    t.add_argument("--hidden-width", type=int, default=256)
    t.add_argument("--layers", type=int, default=3)
    t.add_argument("--time-embed-dim", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--log-csv")
    t.add_argument("--out")
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare methods or track their plans")
    e.add_argument("--experiment", required=True, choices=("quantitative_compare", "tracking_analysis"))
    e.add_argument("--run", nargs=2, action="append", metavar=("CHECKPOINT", "DATASET"))
    e.add_argument("--n-eval", type=int, default=200)
    e.add_argument("--flow-steps", type=int, default=1)
    e.add_argument("--threshold", type=float, default=0.5, help="terminal-error threshold for tracking")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("chain", help="chain open-loop segments into a long trajectory")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--segments", type=int, default=28)
    c.add_argument("--x0", type=float, nargs="+")
    c.add_argument("--command", type=float, nargs="+")
    c.add_argument("--tag", type=int, default=0)
    c.add_argument("--flow-steps", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_chain)

    d = sub.add_parser("disturb", help="survival under disturbances with receding-horizon replanning")
    d.add_argument("--checkpoint", action="append")
    d.add_argument("--windows", type=int, nargs="+", default=[2, 5, 10])
    d.add_argument("--flow-steps", type=int, nargs="+", default=[1, 2, 5])
    d.add_argument("--magnitudes", type=float, nargs="+", default=[0.0, 5.0, 10.0, 20.0, 50.0])
    d.add_argument("--trials", type=int, default=100)
    d.add_argument("--steps", type=int, default=40, help="closed-loop control steps per trial")
    d.add_argument("--onset", type=int, default=10)
    d.add_argument("--duration", type=int, default=10)
    d.add_argument("--command", type=float, nargs="+", default=[0.5, 0.0])
    d.add_argument("--x0", type=float, nargs="+")
    d.add_argument("--tag", type=int, default=0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir")
    d.set_defaults(func=cmd_disturb)

    s = sub.add_parser("suite", help="run the full desk-scale pipeline end to end")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-steps", type=int, default=3000)
    s.add_argument("--n-eval", type=int, default=200)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_suite)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in rest if tok in choices), None)
    if known.config and command is not None:
        try:
            values = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from None
        if not isinstance(values, dict):
            raise UsageError("config file must hold a JSON object")
        sub = choices[command]
        dests = {a.dest for a in sub._actions} - {"help"}
        unknown = sorted(set(values) - dests)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        sub.set_defaults(**values)
        # required flags may now come from the file
        for action in sub._actions:
            if action.dest in values:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as exc:  # usage errors and --help
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingActionsError, ConfigMismatchError, FormatError, AccidentalFeasibilityError, UsageError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
