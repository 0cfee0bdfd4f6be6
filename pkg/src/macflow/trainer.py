"""Training loop: random-coupling warm-up, then per-step coupling, loss, Adam and EMA."""

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import coupling as cp
from .distributions import GaussianMixture
from .exceptions import ConfigError, NumericalAbort
from .metrics import coupling_cost_stats, straightness, w2_sliced
from .net import AdamState, EmaParams, VectorFieldNet, adam_step, load_arrays, save_arrays
from .objectives import draw_self_consistency, fm_loss, shortcut_loss
from .sampler import euler_sample, generate, in_grid

METRIC_COLUMNS = (
    "step", "epoch", "coupling", "total", "fm_term", "sc_term", "one_step_term", "selected_fraction",
)
OBJECTIVES = ("auto", "fm", "shortcut")


@dataclass
class TrainConfig:
    coupling: str = "mac_topk"
    objective: str = "auto"
    error_mode: str = "auto"
    batch_size: int = 256
    k: float = 0.3
    r: float = 0.4
    lam: float = 0.02
    m: float = 0.125
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    steps_per_epoch: int = 500
    seed: int = 0
    d_grid: tuple = (0.125, 0.25, 0.5, 1.0)
    ema_decay: float = 0.999
    sinkhorn_reg: float = 0.5
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iters: int = 5000
    mac_full_weighting: bool = False
    one_step_t: str = "sampled"
    hidden_width: int = 128
    hidden_layers: int = 3
    n_features: int = 8
    source_means: tuple = ((-4.0, -4.0), (-4.0, 4.0), (4.0, -4.0), (4.0, 4.0))
    source_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    target_means: tuple = ((-4.0, 0.0), (4.0, 0.0))
    target_weights: tuple = (0.5, 0.5)
    eval_seed: int = 20240917
    eval_samples: int = 4096
    eval_projections: int = 256

    def __post_init__(self):
        self.validate()

    @property
    def resolved_objective(self):
        if self.objective != "auto":
            return self.objective
        return "shortcut" if self.coupling in ("mac_topk", "mac_full") else "fm"

    @property
    def resolved_error_mode(self):
        if self.error_mode != "auto":
            return self.error_mode
        return "d1" if self.resolved_objective == "shortcut" else "endpoint"

    def validate(self):
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        need(self.coupling in cp.STRATEGIES, "coupling", f"unknown strategy {self.coupling!r}; choose from {cp.STRATEGIES}")
        need(self.objective in OBJECTIVES, "objective", f"unknown objective {self.objective!r}")
        need(self.error_mode in ("auto",) + cp.ERROR_MODES, "error_mode", f"unknown mode {self.error_mode!r}")
        need(self.one_step_t in ("sampled", "zero"), "one_step_t", "must be 'sampled' or 'zero'")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(0 < self.k <= 1, "k", "must be in (0, 1]")
        need(0 <= self.r <= 1, "r", "must be in [0, 1]")
        need(self.lam >= 0, "lam", "must be >= 0")
        need(0 <= self.m <= 1, "m", "must be in [0, 1]")
        need(self.lr > 0, "lr", "must be > 0")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1", "Adam betas must be in [0, 1)")
        need(self.adam_eps > 0, "adam_eps", "must be > 0")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.steps_per_epoch >= 0, "steps_per_epoch", "must be >= 0")
        need(len(self.d_grid) > 0 and all(0 < d <= 1 for d in self.d_grid), "d_grid", "values must be in (0, 1]")
        need(0 <= self.ema_decay < 1, "ema_decay", "must be in [0, 1)")
        need(self.sinkhorn_reg > 0, "sinkhorn_reg", "must be > 0")
        need(self.sinkhorn_tol > 0, "sinkhorn_tol", "must be > 0")
        need(self.sinkhorn_max_iters >= 1, "sinkhorn_max_iters", "must be >= 1")
        need(min(self.hidden_width, self.hidden_layers, self.n_features) >= 1, "hidden_width", "network sizes must be >= 1")
        need(self.eval_samples >= 1 and self.eval_projections >= 1, "eval_samples", "must be >= 1")
        for side in ("source", "target"):
            try:
                self.mixture(side)
            except ValueError as exc:
                raise ConfigError(f"{side}_means", str(exc)) from None
        need(self.mixture("source").dim == self.mixture("target").dim, "target_means", "source and target dimensions differ")

    def mixture(self, side):
        return GaussianMixture(getattr(self, f"{side}_weights"), getattr(self, f"{side}_means"))

    def to_dict(self):
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = json.loads(json.dumps(value))
        return out

    def replace(self, **changes):
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return TrainConfig(**data)


@dataclass
class RunState:
    net: VectorFieldNet
    adam: AdamState
    ema: EmaParams
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    log: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    flags: dict = field(default_factory=lambda: {"sinkhorn_fallbacks": 0, "sinkhorn_calls": 0})

    @property
    def warmup(self):
        return self.epoch == 0


def init_state(config):
    rng = np.random.default_rng(config.seed)
    net = VectorFieldNet(
        dim=config.mixture("source").dim,
        hidden_width=config.hidden_width,
        hidden_layers=config.hidden_layers,
        n_features=config.n_features,
        rng=rng,
    )
    adam = AdamState.zeros_like(
        net.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps
    )
    return RunState(net, adam, EmaParams.from_params(net.params, config.ema_decay), rng)


def build_coupling(strategy, x0, x1, state, config):
    """Pair a drawn batch under ``strategy``; model-aligned strategies read only the EMA shadow."""
    ema = state.ema.shadow
    mode = config.resolved_error_mode
    sk = dict(reg=config.sinkhorn_reg, max_iters=config.sinkhorn_max_iters, tol=config.sinkhorn_tol)
    if strategy == "random":
        return cp.random_coupling(x0, x1)
    if strategy == "batch_ot":
        return cp.batch_ot_coupling(x0, x1)
    if strategy == "sinkhorn_ot":
        return cp.sinkhorn_coupling(x0, x1, state.rng, **sk)
    if strategy == "mac_topk":
        return cp.mac_topk_coupling(
            state.net, ema, x0, x1, k=config.k, lam=config.lam, r=config.r, mode=mode
        )
    if strategy == "mac_full":
        return cp.mac_full_coupling(
            state.net, ema, x0, x1, state.rng, mode=mode, weighting=config.mac_full_weighting,
            k=config.k, lam=config.lam, r=config.r, **sk,
        )
    raise ConfigError("coupling", f"unknown strategy {strategy!r}")


def compute_loss(state, config, coupling):
    t = state.rng.random(len(coupling))
    if config.resolved_objective == "fm":
        return fm_loss(state.net, coupling, t)
    draw = draw_self_consistency(state.rng, len(coupling), config.m, config.d_grid)
    return shortcut_loss(state.net, state.ema.shadow, coupling, t, draw, config.one_step_t)


def train_step(state, config, source=None, target=None):
    """One iteration: draw, couple, loss, Adam, EMA, log. Warm-up epochs use random pairs."""
    source = config.mixture("source") if source is None else source
    target = config.mixture("target") if target is None else target
    tic = time.perf_counter()
    x0 = source.sample(config.batch_size, state.rng)
    x1 = target.sample(config.batch_size, state.rng)
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x1))):
        raise NumericalAbort(f"non-finite sample drawn at step {state.step}", {"step": state.step, "x0": x0, "x1": x1})
    strategy = "random" if state.warmup else config.coupling
    coupling = build_coupling(strategy, x0, x1, state, config)
    if "sinkhorn_converged" in coupling.meta:
        state.flags["sinkhorn_calls"] += 1
        state.flags["sinkhorn_fallbacks"] += int(coupling.meta["sinkhorn_fallback"])
    loss, grads = compute_loss(state, config, coupling)
    if not np.isfinite(loss.total):
        raise NumericalAbort(
            f"non-finite loss at step {state.step}",
            {"step": state.step, "x0": coupling.x0, "x1": coupling.x1, "weight": coupling.weight},
        )
    adam_step(state.net.params, grads, state.adam)
    state.ema.update(state.net.params)
    state.step += 1
    row = {"step": state.step, "epoch": state.epoch, "coupling": strategy}
    row.update(loss.as_dict())
    state.log.append(row)
    state.timing.append({"step": state.step, "wallclock": time.perf_counter() - tic})
    return state


def run_epoch(state, config, source=None, target=None):
    for _ in range(config.steps_per_epoch):
        train_step(state, config, source, target)
    state.epoch += 1
    return state


def warmup_epoch(state, config, source=None, target=None):
    """The first epoch, trained with random pairs whatever the configured strategy."""
    if state.step != 0 or state.epoch != 0:
        raise RuntimeError("warm-up must run on a fresh state")
    return run_epoch(state, config, source, target)


# -- persistence -------------------------------------------------------------------


def save_checkpoint(path, state, config):
    meta = {
        "step": state.step,
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
        "flags": state.flags,
        "config": config.to_dict(),
    }
    arrays = {
        "params": state.net.params,
        "ema": state.ema.shadow,
        "adam_m": state.adam.m,
        "adam_v": state.adam.v,
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path):
    arrays, meta = load_arrays(path)
    config = config_from_dict(meta["config"])
    state = init_state(config)
    state.net.params[...] = arrays["params"]
    state.ema.shadow[...] = arrays["ema"]
    state.adam.m[...] = arrays["adam_m"]
    state.adam.v[...] = arrays["adam_v"]
    state.adam.step = meta["adam_step"]
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    state.flags = dict(meta["flags"])
    return state, config


def config_from_dict(data):
    data = dict(data)
    for key in ("d_grid", "source_weights", "target_weights"):
        if key in data:
            data[key] = tuple(float(x) for x in data[key])
    for key in ("source_means", "target_means"):
        if key in data:
            data[key] = tuple(tuple(float(x) for x in row) for row in data[key])
    known = {f.name for f in fields(TrainConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    return TrainConfig(**data)


def _format(value):
    return repr(value) if isinstance(value, float) else str(value)


def write_rows(path, rows, columns, append=False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if not new else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row[c]) for c in columns])


def _flush(state, out_dir, written):
    write_rows(out_dir / "metrics.csv", state.log[written:], METRIC_COLUMNS, append=written > 0)
    write_rows(out_dir / "timing.csv", state.timing[written:], ("step", "wallclock"), append=written > 0)
    return len(state.log)


def write_run_metadata(out_dir, state, config, extra=None):
    meta = {
        "seed": config.seed,
        "config": config.to_dict(),
        "resolved_objective": config.resolved_objective,
        "resolved_error_mode": config.resolved_error_mode,
        "steps": state.step,
        "epochs_completed": state.epoch,
        "sinkhorn_calls": state.flags["sinkhorn_calls"],
        "sinkhorn_fallbacks": state.flags["sinkhorn_fallbacks"],
        "sinkhorn_converged_all": state.flags["sinkhorn_fallbacks"] == 0,
    }
    meta.update(extra or {})
    Path(out_dir, "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _dump_abort(out_dir, state, config, exc):
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in exc.payload.items() if np.ndim(v) > 0}
    scalars = {k: (v if np.isfinite(v) else repr(v)) for k, v in exc.payload.items() if np.ndim(v) == 0}
    if arrays:
        save_arrays(out_dir / "abort_payload.ckpt", arrays, {"message": str(exc)})
    write_run_metadata(out_dir, state, config, {"aborted": str(exc), "abort_scalars": scalars})


def train(config, out_dir=None, source=None, target=None, state=None, progress=None):
    """Warm-up epoch followed by ``config.epochs`` epochs.

    With ``out_dir`` the run writes ``metrics.csv``, ``timing.csv``, one
    ``checkpoint_epochNNN.ckpt`` per epoch and ``run.json``. Passing a ``state``
    loaded from a checkpoint continues that run.
    """
    state = init_state(config) if state is None else state
    out_dir = None if out_dir is None else Path(out_dir)
    written = len(state.log)
    while state.epoch <= config.epochs:
        try:
            run_epoch(state, config, source, target)
        except NumericalAbort as exc:
            if out_dir is not None:
                _flush(state, out_dir, written)
                _dump_abort(out_dir, state, config, exc)
            raise
        if progress is not None:
            progress(state)
        if out_dir is not None:
            written = _flush(state, out_dir, written)
            save_checkpoint(out_dir / f"checkpoint_epoch{state.epoch - 1:03d}.ckpt", state, config)
    if out_dir is not None:
        write_run_metadata(out_dir, state, config)
    return state


# -- evaluation --------------------------------------------------------------------


EVAL_COLUMNS = ("model", "strategy", "n_steps", "w2", "straightness", "coupling_cost_mean")


def evaluate(state, config, steps=(1, 4, 128), model="model", source=None, target=None):
    """Sliced W2, straightness and coupling cost for each step budget.

    Uses the EMA parameters and a fixed evaluation seed, so every model sees the
    same source noise and reference target draw.
    """
    steps = [int(s) for s in steps]
    if not steps:
        raise ValueError("at least one step count is required")
    source = config.mixture("source") if source is None else source
    target = config.mixture("target") if target is None else target
    eval_rng = np.random.default_rng(config.eval_seed)
    x0 = source.sample(config.eval_samples, eval_rng)
    reference = target.sample(config.eval_samples, eval_rng)
    pair_rng = np.random.default_rng([config.eval_seed, 1])
    b0 = source.sample(config.batch_size, pair_rng)
    b1 = target.sample(config.batch_size, pair_rng)
    probe = RunState(state.net, state.adam, state.ema, pair_rng)
    cost_mean = coupling_cost_stats(build_coupling(config.coupling, b0, b1, probe, config))[0]
    params = state.ema.shadow
    shortcut = config.resolved_objective == "shortcut"
    rows = []
    for n in steps:
        gen, traj = generate(state.net, x0, n, shortcut=shortcut, d_grid=config.d_grid, params=params)
        w2 = w2_sliced(gen, reference, config.eval_projections, np.random.default_rng([config.eval_seed, 2]))
        straight = float("nan")
        if n >= 2:
            if shortcut and in_grid(n, config.d_grid):
                _, traj = euler_sample(state.net, x0, n, params=params)
            # Euler velocities, recovered from the recorded states
            velocities = np.diff(traj, axis=0) * n
            straight = straightness(state.net, traj, velocities=velocities)
        rows.append({
            "model": model, "strategy": config.coupling, "n_steps": n, "w2": w2,
            "straightness": straight, "coupling_cost_mean": cost_mean,
        })
    return rows
