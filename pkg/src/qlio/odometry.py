"""Offline odometry loop: initialize, propagate, de-skew, update, map."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from qlio.cloud import (
    PoseTrajectory,
    SweepReconstructor,
    assemble_sweep,
    downsample,
    reanchor_segment,
    split_sweep,
    undistort_segment,
)
from qlio.config import RunConfig
from qlio.counters import OpCounters
from qlio.dataset import Dataset, Trajectory
from qlio.errors import AssociationError, InsufficientDataError
from qlio.evaluation import evaluate_ate
from qlio.imu import (
    NS_PER_S,
    ImuSample,
    build_fw,
    build_fx,
    interpolate_imu,
    propagate_covariance,
    propagate_state,
    static_initialize,
    step_terms,
)
from qlio.manifold import NavState
from qlio.update import SurfaceCache, iterate_update
from qlio.voxel_map import VoxelMap

log = logging.getLogger(__name__)

MODULES = ("propagation", "undistortion", "update", "map")


@dataclass(frozen=True)
class TrajectoryRecord:
    timestamp: int  # ns
    t: np.ndarray
    q: np.ndarray  # (w, x, y, z)


@dataclass
class SweepMetrics:
    sweep_id: int
    timestamp: int
    iterations: int
    counters: OpCounters
    map_bytes: int
    total_ms: float | None = None
    degenerate: bool = False
    cache_hits: int = 0
    constraints: int = 0


@dataclass
class RunMetrics:
    sweeps: list = field(default_factory=list)
    module_ms: dict | None = None
    map_bytes: int = 0
    map_points: int = 0
    peak_points: int = 0
    segment_points: int = 0  # points entering the pipeline after down-sampling
    corrected_points: int = 0  # de-skew operations performed; equals segment_points
    ate: float | None = None

    def totals(self) -> OpCounters:
        out = OpCounters()
        for s in self.sweeps:
            out = out + s.counters
        return out


def records_to_trajectory(records) -> Trajectory:
    if not records:
        return Trajectory(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 4)))
    return Trajectory(
        np.array([r.timestamp for r in records], dtype=np.int64),
        np.array([r.t for r in records]),
        np.array([r.q for r in records]),
    )


class _ImuStream:
    def __init__(self, data: Dataset):
        self.times = np.asarray(data.imu_times, dtype=np.int64)
        self.gyr = np.asarray(data.imu_gyr, dtype=float)
        self.acc = np.asarray(data.imu_acc, dtype=float)

    def sample(self, i: int) -> ImuSample:
        return ImuSample(int(self.times[i]), self.acc[i], self.gyr[i])

    def at(self, t: int) -> ImuSample:
        """Measurement at ``t``, interpolated inside the stream and held outside it."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i < 0:
            s = self.sample(0)
        elif i >= len(self.times) - 1:
            s = self.sample(len(self.times) - 1)
        else:
            return interpolate_imu(self.sample(i), self.sample(i + 1), t)
        return ImuSample(t, s.acc, s.gyr)

    def between(self, t0: int, t1: int) -> list[ImuSample]:
        lo = int(np.searchsorted(self.times, t0, side="right"))
        hi = int(np.searchsorted(self.times, t1, side="left"))
        return [self.sample(i) for i in range(lo, hi)]


def _propagate(x: NavState, P, imu: _ImuStream, Q, t0: int, t1: int):
    """Propagate from ``t0`` to ``t1``; returns the new state, covariance and visited poses."""
    knots = [imu.at(t0)] + imu.between(t0, t1) + [imu.at(t1)]
    times, pos, quats = [t0], [x.t.copy()], [x.q.copy()]
    for s0, s1 in zip(knots[:-1], knots[1:]):
        if s1.timestamp <= s0.timestamp:
            continue
        dt, _, rate = step_terms(x, s0, s1)
        Fx = build_fx(x, s0, s1)
        Fw = build_fw(x, dt, rate)
        x = propagate_state(x, s0, s1)
        P = propagate_covariance(P, Fx, Fw, Q)
        times.append(s1.timestamp)
        pos.append(x.t.copy())
        quats.append(x.q.copy())
    return x, P, PoseTrajectory(times, pos, quats)


def _initialize(cfg: RunConfig, imu: _ImuStream):
    if len(imu.times) < 2:
        raise InsufficientDataError("dataset holds fewer than two IMU samples")
    end = imu.times[0] + int(round(cfg.init.duration_s * NS_PER_S))
    hi = int(np.searchsorted(imu.times, end, side="left")) + 1
    window = [imu.sample(i) for i in range(min(hi, len(imu.times)))]
    return static_initialize(window, cfg.gravity, cfg.init)


def _segments(data: Dataset, cfg: RunConfig):
    ts = np.asarray(data.point_times, dtype=np.int64)
    pts = np.asarray(data.points, dtype=float)
    period = cfg.sweep_period_ns
    t0 = int(ts[0])
    n = (int(ts[-1]) - t0) // period + 1
    bounds = np.searchsorted(ts, t0 + period * np.arange(n + 1), side="left")
    for j in range(n):
        lo, hi = bounds[j], bounds[j + 1]
        sweep_ts, sweep_pts = downsample(ts[lo:hi], pts[lo:hi])
        yield from split_sweep(j, t0 + j * period, period, sweep_ts, sweep_pts)


def count_input_sweeps(data: Dataset, cfg: RunConfig) -> int:
    ts = np.asarray(data.point_times, dtype=np.int64)
    if len(ts) == 0:
        return 0
    return (int(ts[-1]) - int(ts[0])) // cfg.sweep_period_ns + 1


def run_odometry(cfg: RunConfig, data: Dataset, timing: bool = False):
    """Process a whole dataset.

    Returns ``(records, metrics)``: one record per reconstructed sweep, stamped
    at the sweep end. Wall times are only measured with ``timing`` on, which
    keeps output files reproducible otherwise.
    """
    if len(data.point_times) == 0:
        return [], RunMetrics(module_ms={m: 0.0 for m in MODULES} if timing else None)
    imu = _ImuStream(data)
    x, P = _initialize(cfg, imu)
    Q = cfg.noise.q_matrix()
    extrinsic = cfg.extrinsic()
    rng = np.random.default_rng(cfg.seed)
    voxel_map = VoxelMap(
        quantized=cfg.quantize, capacity=cfg.update.volume_capacity, volume_size=cfg.update.volume_size
    )
    cache = SurfaceCache(cfg.update.max_iterations, cfg.update.keypoints_per_segment)
    recon = SweepReconstructor()
    module_ms = {m: 0.0 for m in MODULES}
    clock = time.perf_counter

    records: list[TrajectoryRecord] = []
    metrics = RunMetrics(module_ms=module_ms if timing else None)
    inserted: set[int] = set()
    t_cur = int(data.point_times[0])
    interval = int(round(cfg.removal_interval_s * NS_PER_S))
    last_removal = t_cur

    for seg in _segments(data, cfg):
        c0 = clock()
        x, P, poses = _propagate(x, P, imu, Q, t_cur, seg.t_end)
        t_cur = seg.t_end
        c1 = clock()
        undistort_segment(seg, poses, extrinsic)
        c2 = clock()
        metrics.segment_points += len(seg)
        metrics.corrected_points += seg.corrections
        module_ms["propagation"] += 1e3 * (c1 - c0)
        module_ms["undistortion"] += 1e3 * (c2 - c1)
        sweep = recon.push(seg)
        if sweep is None:
            continue

        old_body, new_body = assemble_sweep(sweep, (x.R, x.t))
        res = iterate_update(
            old_body,
            new_body,
            x,
            P,
            voxel_map,
            cache,
            cfg.update,
            rng,
            old_id=sweep.old.id,
            new_id=sweep.new.id,
            reuse=cfg.reuse,
        )
        if res.degenerate:
            if voxel_map.num_points:
                log.warning("sweep ending at %d ns: %d constraints, update skipped", seg.t_end, res.constraints)
        else:
            x, P = res.state, res.covariance
            reanchor_segment(seg, (x.R, x.t))
        c3 = clock()

        counters = res.counters
        for part in (sweep.old, sweep.new):
            if part.id not in inserted:
                voxel_map.insert_points(part.world, counters)
                inserted.add(part.id)
        if t_cur - last_removal >= interval:
            voxel_map.remove_far(x.t, cfg.removal_radius)
            last_removal = t_cur
        c4 = clock()
        module_ms["update"] += 1e3 * (c3 - c2)
        module_ms["map"] += 1e3 * (c4 - c3)

        records.append(TrajectoryRecord(seg.t_end, x.t.copy(), x.q.copy()))
        metrics.sweeps.append(
            SweepMetrics(
                sweep_id=len(metrics.sweeps),
                timestamp=seg.t_end,
                iterations=res.iterations,
                counters=counters,
                map_bytes=voxel_map.payload_bytes(),
                total_ms=1e3 * (c4 - c0) if timing else None,
                degenerate=res.degenerate,
                cache_hits=res.cache_hits,
                constraints=res.constraints,
            )
        )

    metrics.map_bytes = voxel_map.payload_bytes()
    metrics.map_points = voxel_map.num_points
    metrics.peak_points = voxel_map.peak_points
    if data.groundtruth is not None and len(records) >= 3:
        try:
            metrics.ate = evaluate_ate(records_to_trajectory(records), data.groundtruth)
        except AssociationError:
            metrics.ate = None
    return records, metrics
