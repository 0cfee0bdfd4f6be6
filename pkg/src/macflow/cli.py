"""Command line entry point: ``macflow train|eval|compare|sweep``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

import argparse
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import format_config, load_config
from .exceptions import ConfigError, NumericalAbort
from .figures import PALETTE, render_panels
from .sampler import generate
from .trainer import EVAL_COLUMNS, build_coupling, evaluate, load_checkpoint, train, write_rows

THREADS_ENV = "MACFLOW_NUM_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
SWEEP_COLUMNS = ("param", "value") + EVAL_COLUMNS
COUPLING_COLUMNS = ("run", "pair", "x0_0", "x0_1", "x1_0", "x1_1", "weight", "selected")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("arguments", message)


def _csv_list(text, cast, name):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError(name, "expected a non-empty comma-separated list")
    try:
        return [cast(s) for s in items]
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from None


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _prepare_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError("out", f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def final_checkpoint(run_dir):
    ckpts = sorted(Path(run_dir).glob("checkpoint_epoch*.ckpt"))
    if not ckpts:
        raise ConfigError("run", f"no checkpoint found in {run_dir}")
    return ckpts[-1]


def _train_run(config, out, log=None):
    out.joinpath("config.txt").write_text(format_config(config))

    def progress(state):
        if log is not None:
            last = state.log[-1]["total"] if state.log else float("nan")
            print(f"[{out.name}] epoch {state.epoch - 1}/{config.epochs} step {state.step} loss {last:.5f}", file=log)

    return train(config, out, progress=progress)


def cmd_train(args):
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = load_config(args.config, overrides)
    out = Path(args.out) if args.out else Path("runs") / f"{config.coupling}-seed{config.seed}"
    out = _prepare_dir(out, args.force)
    _train_run(config, out, log=sys.stderr)
    print(out)
    return EXIT_OK


def eval_rows(run_dir, steps):
    state, config = load_checkpoint(final_checkpoint(run_dir))
    return evaluate(state, config, steps, model=Path(run_dir).name)


def cmd_eval(args):
    steps = _csv_list(args.steps, int, "steps")
    if any(s < 1 for s in steps):
        raise ConfigError("steps", "step counts must be >= 1")
    target = Path(args.out) if args.out else Path(args.run) / "eval.csv"
    if target.exists() and not args.force:
        raise ConfigError("out", f"{target} exists; pass --force to overwrite")
    rows = eval_rows(args.run, steps)
    write_rows(target, rows, EVAL_COLUMNS)
    for row in rows:
        print(f"{row['model']} n={row['n_steps']} w2={row['w2']:.4f} straightness={row['straightness']:.4f}")
    return EXIT_OK


def _coupling_probe(state, config, n_pairs):
    """Coupled pairs for a fixed evaluation batch, built from the EMA weights."""
    rng = np.random.default_rng([config.eval_seed, 3])
    x0 = config.mixture("source").sample(config.batch_size, rng)
    x1 = config.mixture("target").sample(config.batch_size, rng)
    probe = type(state)(state.net, state.adam, state.ema, rng)
    batch = build_coupling(config.coupling, x0, x1, probe, config)
    return batch, min(n_pairs, config.batch_size)


def cmd_compare(args):
    runs = [Path(r) for r in args.runs]
    out = _prepare_dir(args.out, args.force)
    sample_panels, segment_panels, coupling_rows = [], [], []
    for i, run in enumerate(runs):
        state, config = load_checkpoint(final_checkpoint(run))
        rng = np.random.default_rng(config.eval_seed)
        x0 = config.mixture("source").sample(args.n_points, rng)
        reference = config.mixture("target").sample(args.n_points, rng)
        shortcut = config.resolved_objective == "shortcut"
        gen, _ = generate(state.net, x0, 1, shortcut=shortcut, d_grid=config.d_grid, params=state.ema.shadow)
        color = PALETTE[i % len(PALETTE)]
        sample_panels.append({"title": f"{run.name} (1 step)", "layers": [
            {"kind": "points", "points": reference, "color": "#bbbbbb"},
            {"kind": "points", "points": gen, "color": color},
        ]})
        batch, n = _coupling_probe(state, config, args.n_pairs)
        segs = np.stack([batch.x0[:n], batch.x1[:n]], axis=1)
        segment_panels.append({"title": f"{run.name} ({config.coupling})", "layers": [
            {"kind": "segments", "points": segs, "color": color},
        ]})
        for j in range(n):
            coupling_rows.append({
                "run": run.name, "pair": j,
                "x0_0": float(batch.x0[j, 0]), "x0_1": float(batch.x0[j, 1]),
                "x1_0": float(batch.x1[j, 0]), "x1_1": float(batch.x1[j, 1]),
                "weight": float(batch.weight[j]), "selected": int(batch.selected[j]),
            })
        rows = evaluate(state, config, _csv_list(args.steps, int, "steps"), model=run.name)
        write_rows(out / "eval.csv", rows, EVAL_COLUMNS, append=i > 0)
    (out / "samples.svg").write_text(render_panels(sample_panels, "one-step samples"))
    (out / "couplings.svg").write_text(render_panels(segment_panels, "coupled pairs"))
    write_rows(out / "couplings.csv", coupling_rows, COUPLING_COLUMNS)
    print(out)
    return EXIT_OK


def _sweep_one(job):
    config_path, overrides, param, value, run_dir, steps = job
    config = load_config(config_path, overrides)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True)
    state = _train_run(config, run_dir)
    rows = evaluate(state, config, steps, model=run_dir.name)
    write_rows(run_dir / "eval.csv", rows, EVAL_COLUMNS)
    return [dict(param=param, value=value, **row) for row in rows]


def cmd_sweep(args):
    values = _csv_list(args.values, str, "values")
    steps = _csv_list(args.steps, int, "steps")
    base = _overrides(args.set)
    for value in values:  # fail fast on bad keys or values
        load_config(args.config, {**base, args.param: value})
    out = _prepare_dir(args.out or Path("runs") / f"sweep-{args.param}", args.force)
    jobs = [
        (args.config, {**base, args.param: value}, args.param, value, str(out / f"{args.param}={value}"), steps)
        for value in values
    ]
    workers = args.jobs or int(os.environ.get(THREADS_ENV, "1") or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(job) for job in jobs]
    rows = [row for chunk in results for row in chunk]
    write_rows(out / "sweep.csv", rows, SWEEP_COLUMNS)
    for row in rows:
        print(f"{args.param}={row['value']} n={row['n_steps']} w2={row['w2']:.4f}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="macflow", description="Flow matching coupling lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate the final checkpoint of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--steps", default="1,4,128")
    p.add_argument("--out", help="output CSV (default RUN/eval.csv)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="side-by-side figures and metrics for several runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default="compare")
    p.add_argument("--steps", default="1,4,128")
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--n-pairs", type=int, default=128)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="train and evaluate one run per value of a parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--steps", default="1,4,128")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--jobs", type=int, help=f"parallel runs (default ${THREADS_ENV} or 1)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        threads = os.environ.get(THREADS_ENV)
        limit = int(threads) if threads else None
        with threadpool_limits(limits=limit):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
