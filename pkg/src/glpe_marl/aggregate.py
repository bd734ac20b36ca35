"""Seed aggregation of metrics CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

SUMMARY_HEADER = ("env_steps", "runs", "mean", "min", "max", "q12_5", "q87_5")
QUANTILES = (0.125, 0.875)


class AlignmentError(ValueError):
    """Runs were evaluated at different env-step grids."""


def read_metrics(path) -> Dict[int, float]:
    """env_steps -> mean_test_return for one run."""
    with Path(path).open(newline="") as fh:
        return {int(r["env_steps"]): float(r["mean_test_return"]) for r in csv.DictReader(fh)}


def resolve_metrics(path) -> Path:
    path = Path(path)
    return path / "metrics.csv" if path.is_dir() else path


def aggregate_runs(paths: Sequence) -> List[tuple]:
    """Per env_steps: seed mean, min, max and the 12.5%/87.5% quantiles.

    Quantiles use linear interpolation between order statistics
    (position q * (n - 1) in the sorted values).
    """
    if not paths:
        raise ValueError("need at least one run")
    files = [resolve_metrics(p) for p in paths]
    runs = [read_metrics(f) for f in files]
    grid = sorted(runs[0])
    for f, run in zip(files[1:], runs[1:]):
        if sorted(run) != grid:
            raise AlignmentError(f"step grid of {f} differs from {files[0]}")
    rows = []
    for step in grid:
        vals = np.array([run[step] for run in runs])
        lo, hi = np.quantile(vals, QUANTILES, method="linear")
        rows.append((step, len(vals), float(vals.mean()), float(vals.min()), float(vals.max()), float(lo), float(hi)))
    return rows


def write_summary(path, rows: Sequence[tuple], extra_header: Sequence[str] = ()) -> None:
    """Write aggregate rows; ``extra_header`` names leading columns already present in each row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*extra_header, *SUMMARY_HEADER])
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
