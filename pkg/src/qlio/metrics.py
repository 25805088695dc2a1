"""Per-sweep metrics CSV."""

from __future__ import annotations

import csv
from pathlib import Path

from qlio.odometry import RunMetrics

COLUMNS = (
    "sweep_id",
    "iterations",
    "transforms",
    "distance_ops",
    "sorts",
    "eigendecompositions",
    "decodes",
    "encodes",
    "map_bytes",
    "total_ms",
)


def metric_rows(metrics: RunMetrics):
    for s in metrics.sweeps:
        c = s.counters
        yield [
            s.sweep_id,
            s.iterations,
            c.transforms,
            c.distance_ops,
            c.sorts,
            c.eigendecompositions,
            c.decodes,
            c.encodes,
            s.map_bytes,
            "" if s.total_ms is None else f"{s.total_ms:.3f}",
        ]


def report_metrics(metrics: RunMetrics, path) -> None:
    """Write one CSV row per reconstructed sweep; ``total_ms`` is empty when untimed."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(metric_rows(metrics))


def read_metrics(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
