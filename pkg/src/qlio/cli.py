"""Command line entry point: ``run``, ``synth`` and ``ate``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from qlio.config import ConfigError, RunConfig, load_config
from qlio.dataset import load_dataset, read_trajectory, write_trajectory
from qlio.errors import OdometryError
from qlio.evaluation import evaluate_ate
from qlio.metrics import report_metrics
from qlio.odometry import count_input_sweeps, records_to_trajectory, run_odometry
from qlio.synthetic import SCENES, TRAJECTORIES, generate_synthetic


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1"):
        return True
    if low in ("off", "false", "0"):
        return False
    raise argparse.ArgumentTypeError("expected on or off")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlio", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run odometry on a dataset directory")
    run.add_argument("--config", help="key = value config file (defaults if omitted)")
    run.add_argument("--data", required=True, help="dataset directory")
    run.add_argument("--out", required=True, help="trajectory output file")
    run.add_argument("--metrics", help="per-sweep metrics CSV")
    run.add_argument("--reuse", type=_on_off, help="surface parameter reuse on|off")
    run.add_argument("--quantize", type=_on_off, help="8-bit map on|off")
    run.add_argument("--seed", type=int)
    run.add_argument("--timing", action="store_true", help="record wall times (output no longer reproducible)")

    syn = sub.add_parser("synth", help="generate a synthetic dataset")
    syn.add_argument("--scene", default="box", choices=sorted(SCENES))
    syn.add_argument("--traj", default="smooth", choices=sorted(TRAJECTORIES))
    syn.add_argument("--duration", type=float, default=10.0, help="seconds")
    syn.add_argument("--out", required=True, help="output dataset directory")
    syn.add_argument("--seed", type=int, default=0)

    ate = sub.add_parser("ate", help="absolute trajectory error after rigid alignment")
    ate.add_argument("--est", required=True)
    ate.add_argument("--gt", required=True)
    return p


def _run(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(reuse=args.reuse, quantize=args.quantize, seed=args.seed)
    data = load_dataset(args.data, cfg.imu_rate_hz)
    start = time.perf_counter()
    records, metrics = run_odometry(cfg, data, timing=args.timing)
    elapsed = time.perf_counter() - start
    write_trajectory(args.out, records_to_trajectory(records))
    if args.metrics:
        report_metrics(metrics, args.metrics)
    n = count_input_sweeps(data, cfg)
    print(f"input sweeps: {n}  records: {len(records)}  map bytes: {metrics.map_bytes}")
    if args.timing:
        print(f"wall time: {elapsed:.2f} s")
    if metrics.ate is not None:
        print(f"ATE RMSE: {metrics.ate:.4f} m")
    return 0


def _synth(args) -> int:
    out = generate_synthetic(args.scene, args.traj, args.duration, seed=args.seed, out=args.out)
    d = out.dataset
    print(f"points: {len(d.points)}  imu samples: {len(d.imu_times)}  -> {args.out}")
    return 0


def _ate(args) -> int:
    rmse = evaluate_ate(read_trajectory(args.est), read_trajectory(args.gt))
    print(f"{rmse:.6f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"run": _run, "synth": _synth, "ate": _ate}
    try:
        return handlers[args.command](args)
    except (OdometryError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
