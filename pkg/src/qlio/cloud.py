"""Point cloud processing: down-sampling, sweep reconstruction, de-skewing.

An input sweep is split at its temporal midpoint into two segments. Each
reconstructed sweep pairs two consecutive segments, so sweeps overlap by one
segment and come out at twice the input rate. Segments are moved into the
world frame exactly once, when they first appear as the new half of a sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from qlio.errors import InvariantViolationError

DECIMATION = 4
GRID_SIZE = 0.5

# pose query: int64 ns timestamps (N,) -> rotations (N, 3, 3), translations (N, 3)
PoseQuery = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def downsample(timestamps, points, decimation: int = DECIMATION, grid: float = GRID_SIZE):
    """Keep every ``decimation``-th point, then the first point of each grid cell.

    Returns the kept ``(timestamps, points)`` in their original order.
    """
    idx = downsample_indices(points, decimation, grid)
    return np.asarray(timestamps)[idx], np.asarray(points, dtype=np.float64).reshape(-1, 3)[idx]


def downsample_indices(points, decimation: int = DECIMATION, grid: float = GRID_SIZE) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kept = np.arange(0, len(pts), decimation)
    if len(kept) == 0:
        return kept
    cells = np.floor(pts[kept] / grid).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return kept[np.sort(first)]


@dataclass(eq=False)
class Segment:
    """Half of an input sweep, ``[t_start, t_end)`` in integer nanoseconds."""

    id: int
    t_start: int
    t_end: int
    timestamps: np.ndarray
    points: np.ndarray  # raw LiDAR-frame coordinates
    world: np.ndarray | None = None
    anchor_pose: tuple | None = None  # (R_wb, t_wb) used at t_end during correction
    corrected: bool = False
    corrections: int = 0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.timestamps) != len(self.points):
            raise ValueError("timestamps and points differ in length")
        if len(self.timestamps) and (self.timestamps[0] < self.t_start or self.timestamps[-1] >= self.t_end):
            raise ValueError(f"segment {self.id} holds points outside [{self.t_start}, {self.t_end})")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(eq=False)
class ReconstructedSweep:
    old: Segment
    new: Segment

    @property
    def t_ref(self) -> int:
        return self.new.t_end

    @property
    def t_start(self) -> int:
        return self.old.t_start


def split_sweep(index: int, t_start: int, period: int, timestamps, points) -> tuple[Segment, Segment]:
    """Split input sweep ``index`` spanning ``[t_start, t_start + period)`` at its midpoint."""
    ts = np.asarray(timestamps, dtype=np.int64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t_mid = t_start + period // 2
    t_end = t_start + period
    cut = int(np.searchsorted(ts, t_mid, side="left"))
    first = Segment(2 * index, t_start, t_mid, ts[:cut], pts[:cut])
    second = Segment(2 * index + 1, t_mid, t_end, ts[cut:], pts[cut:])
    return first, second


@dataclass
class SweepReconstructor:
    """Streaming pairer of consecutive segments (single consumer, in order)."""

    _last: Segment | None = field(default=None, repr=False)
    gaps: int = 0

    def push(self, segment: Segment) -> ReconstructedSweep | None:
        prev, self._last = self._last, segment
        if prev is None:
            return None
        if segment.id != prev.id + 1 or segment.t_start != prev.t_end:
            self.gaps += 1
            return None
        return ReconstructedSweep(prev, segment)


def reconstruct_sweeps(stream: Iterable[Segment]) -> Iterator[ReconstructedSweep]:
    """Yield overlapping sweeps built from consecutive segment pairs.

    Pairing is dropped across a gap (missing id or time discontinuity).
    """
    rec = SweepReconstructor()
    for seg in stream:
        sweep = rec.push(seg)
        if sweep is not None:
            yield sweep


def undistort_segment(segment: Segment, pose_at: PoseQuery, extrinsic=None, anchor: int | None = None) -> Segment:
    """Map every point of ``segment`` into the world frame with the body pose at its timestamp.

    ``pose_at`` returns body-to-world rotations and translations for an array
    of timestamps; ``extrinsic`` is the LiDAR-to-body ``(R, t)``. The body pose
    at ``anchor`` (default: segment end) is recorded on the segment.
    """
    if segment.corrected:
        raise InvariantViolationError(f"segment {segment.id} was already corrected")
    R_bl, t_bl = _extrinsic(extrinsic)
    body = segment.points @ R_bl.T + t_bl
    if len(body):
        R, t = pose_at(segment.timestamps)
        segment.world = np.einsum("nij,nj->ni", R, body) + t
    else:
        segment.world = np.zeros((0, 3))
    anchor = segment.t_end if anchor is None else anchor
    Ra, ta = pose_at(np.array([anchor], dtype=np.int64))
    segment.anchor_pose = (Ra[0], ta[0])
    segment.corrected = True
    segment.corrections += len(body)
    return segment


def reanchor_segment(segment: Segment, pose) -> None:
    """Rigidly move a corrected segment so its anchor body pose becomes ``pose``.

    Used after a state update: the relative geometry of the de-skewed points
    is untouched, only the whole segment follows the refined anchor pose.
    """
    if not segment.corrected:
        raise InvariantViolationError(f"segment {segment.id} is not corrected")
    R_old, t_old = segment.anchor_pose
    R_new, t_new = pose
    R_delta = R_new @ R_old.T
    segment.world = (segment.world - t_old) @ R_delta.T + t_new
    segment.anchor_pose = (np.array(R_new, dtype=float), np.array(t_new, dtype=float))


def assemble_sweep(sweep: ReconstructedSweep, lidar_pose) -> tuple[np.ndarray, np.ndarray]:
    """Express both segments in the LiDAR frame ``lidar_pose = (R_wl, t_wl)`` at the sweep end.

    Returns ``(old_points, new_points)``.
    """
    for seg in (sweep.old, sweep.new):
        if not seg.corrected:
            raise InvariantViolationError(f"segment {seg.id} is not corrected")
    R, t = lidar_pose
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    return (sweep.old.world - t) @ R, (sweep.new.world - t) @ R


def _extrinsic(extrinsic):
    if extrinsic is None:
        return np.eye(3), np.zeros(3)
    R, t = extrinsic
    return np.asarray(R, dtype=float), np.asarray(t, dtype=float)


class PoseTrajectory:
    """Body poses at increasing timestamps, queried with lerp / slerp between them."""

    def __init__(self, times, positions, quats):
        self.times = np.asarray(times, dtype=np.int64)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        if len(self.times) == 0:
            raise ValueError("empty trajectory")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must increase")

    def __call__(self, times) -> tuple[np.ndarray, np.ndarray]:
        q, t = self.interpolate(times)
        return _quat_to_matrices(q), t

    def interpolate(self, times):
        times = np.asarray(times, dtype=np.int64)
        n = len(self.times)
        if n == 1:
            return np.repeat(self.quats, len(times), 0), np.repeat(self.positions, len(times), 0)
        i = np.clip(np.searchsorted(self.times, times, side="right") - 1, 0, n - 2)
        t0 = self.times[i]
        a = np.clip((times - t0) / (self.times[i + 1] - t0), 0.0, 1.0)
        pos = self.positions[i] + a[:, None] * (self.positions[i + 1] - self.positions[i])
        return _slerp(self.quats[i], self.quats[i + 1], a), pos


def _slerp(q0: np.ndarray, q1: np.ndarray, a: np.ndarray) -> np.ndarray:
    dot = np.sum(q0 * q1, axis=1)
    q1 = np.where(dot[:, None] < 0.0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    small = s < 1e-9
    safe = np.where(small, 1.0, s)
    w0 = np.where(small, 1.0 - a, np.sin((1.0 - a) * theta) / safe)
    w1 = np.where(small, a, np.sin(a * theta) / safe)
    q = w0[:, None] * q0 + w1[:, None] * q1
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _quat_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R
