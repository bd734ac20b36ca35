"""Supervised toy study: per-agent targets that mix an agent's input with a joint statistic."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .autodiff import NonFiniteError
from .estimators import FlatMlpRegressor, GlpeRegressor

MODES = ("mean", "sum", "max", "mix")

VARIANTS: Dict[str, dict] = {
    "mlp": {},
    "pe-mean-tanh": {"pooling": "mean", "global_activation": "tanh"},
    "pe-mean": {"pooling": "mean", "global_activation": "identity"},
    "pe-sum-tanh": {"pooling": "sum", "global_activation": "tanh"},
    "pe-sum": {"pooling": "sum", "global_activation": "identity"},
    "pe-max-tanh": {"pooling": "max", "global_activation": "tanh"},
    "pe-max": {"pooling": "max", "global_activation": "identity"},
}

CSV_HEADER = ("mode", "N", "variant", "seed", "epoch", "mse")


@dataclass(frozen=True)
class ToyTask:
    mode: str
    n_agents: int
    d: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown toy mode {self.mode!r}; expected one of {MODES}")


def joint_targets(mode: str, x: np.ndarray) -> np.ndarray:
    """Targets for joint inputs ``x`` of shape [..., N, d]."""
    mean = x.mean(axis=-2, keepdims=True)
    total = x.sum(axis=-2, keepdims=True)
    peak = x.max(axis=-2, keepdims=True)
    if mode == "mean":
        return x + mean
    if mode == "sum":
        return x + total
    if mode == "max":
        return x + peak
    if mode == "mix":
        return x + (mean + total + peak) / 3.0
    raise ValueError(f"unknown toy mode {mode!r}")


def generate_batch(task: ToyTask, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs uniform on [0, N] with their targets, both [count, N, d]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    x = rng.uniform(0.0, task.n_agents, size=(count, task.n_agents, task.d))
    return x, joint_targets(task.mode, x)


@dataclass
class ToyRunConfig:
    modes: Tuple[str, ...] = MODES
    agents: Tuple[int, ...] = (5, 10, 20)
    seeds: int = 3
    variants: Tuple[str, ...] = tuple(VARIANTS)
    epochs: int = 300
    steps_per_epoch: int = 1
    batch_size: int = 32
    hidden: int = 64
    layers: int = 3
    d: int = 2
    lr: float = 1e-3
    final_window: int = 10


def make_model(variant: str, config: ToyRunConfig, seed: int):
    kw = dict(hidden=config.hidden, n_layers=config.layers, lr=config.lr, batch_size=config.batch_size,
              epochs=config.epochs, random_state=np.random.default_rng([seed, 7919, list(VARIANTS).index(variant)]))
    if variant == "mlp":
        return FlatMlpRegressor(activation="elu", **kw)
    return GlpeRegressor(local_activation="elu", **VARIANTS[variant], **kw)


def run_single(mode: str, n_agents: int, variant: str, seed: int, config: ToyRunConfig) -> List[float]:
    """Per-epoch training MSE (mean over the epoch's steps); a divergent run ends with NaN."""
    task = ToyTask(mode, n_agents, config.d)
    # identical data stream for every variant of a (mode, N, seed) cell
    data_rng = np.random.default_rng([seed, MODES.index(mode), n_agents])
    model = make_model(variant, config, seed)
    curve = []
    for _ in range(config.epochs):
        losses = []
        for _ in range(config.steps_per_epoch):
            x, y = generate_batch(task, config.batch_size, data_rng)
            try:
                model.partial_fit(x, y)
            except NonFiniteError:
                curve.append(math.nan)
                return curve
            losses.append(model.loss_curve_[-1])
        curve.append(float(np.mean(losses)))
    return curve


def _job(args):
    mode, n, variant, seed, config = args
    return (mode, n, variant, seed), run_single(mode, n, variant, seed, config)


def run_toy_experiment(config: ToyRunConfig, out_path=None, workers: int = 1) -> List[tuple]:
    """Run the full (mode, N, variant, seed) grid; rows follow ``CSV_HEADER``."""
    jobs = [(m, n, v, s, config) for m in config.modes for n in config.agents
            for v in config.variants for s in range(config.seeds)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    rows = []
    for (mode, n, variant, seed), curve in results:
        for epoch, value in enumerate(curve):
            rows.append((mode, n, variant, seed, epoch, value))
    if out_path is not None:
        write_rows(out_path, rows)
    return rows


def write_rows(path, rows: Sequence[tuple]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for mode, n, variant, seed, epoch, value in rows:
            w.writerow([mode, n, variant, seed, epoch, repr(float(value))])


def read_rows(path) -> List[tuple]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["mode"], int(r["N"]), r["variant"], int(r["seed"]), int(r["epoch"]), float(r["mse"]))
                for r in reader]


def final_mse(rows: Sequence[tuple], window: int = 10) -> Dict[Tuple[str, int, str], float]:
    """Seed-averaged final MSE per (mode, N, variant): mean over each run's last ``window`` epochs.

    A run that diverged counts as infinite loss.
    """
    curves: Dict[tuple, List[float]] = defaultdict(list)
    for mode, n, variant, seed, _epoch, value in rows:
        curves[(mode, n, variant, seed)].append(value)
    per_cell: Dict[tuple, List[float]] = defaultdict(list)
    for (mode, n, variant, _seed), curve in curves.items():
        tail = curve[-window:]
        value = math.inf if any(math.isnan(v) for v in tail) else float(np.mean(tail))
        per_cell[(mode, n, variant)].append(value)
    return {key: float(np.mean(vals)) for key, vals in per_cell.items()}
