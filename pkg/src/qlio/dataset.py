"""Dataset and trajectory file formats.

A dataset directory holds little-endian binary streams ``points.bin``
(timestamp u64 ns, x, y, z f64) and ``imu.bin`` (timestamp u64 ns, gyro xyz,
accel xyz f64), plus an optional ``groundtruth.txt`` with lines
``t tx ty tz qx qy qz qw`` (t in seconds). Trajectory outputs share that text
format.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from qlio.errors import DatasetFormatError, OrderingError
from qlio.imu import NS_PER_S, ImuSample

POINT_DTYPE = np.dtype([("t", "<u8"), ("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
IMU_DTYPE = np.dtype(
    [("t", "<u8"), ("wx", "<f8"), ("wy", "<f8"), ("wz", "<f8"), ("ax", "<f8"), ("ay", "<f8"), ("az", "<f8")]
)

POINTS_FILE = "points.bin"
IMU_FILE = "imu.bin"
GROUNDTRUTH_FILE = "groundtruth.txt"


@dataclass
class Trajectory:
    """Timestamped poses; quaternions stored as (w, x, y, z)."""

    times: np.ndarray  # int64 ns
    positions: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        if not len(self.times) == len(self.positions) == len(self.quats):
            raise ValueError("trajectory arrays differ in length")

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class Dataset:
    point_times: np.ndarray  # int64 ns, non-decreasing
    points: np.ndarray  # (N, 3) LiDAR frame
    imu_times: np.ndarray  # int64 ns, strictly increasing
    imu_gyr: np.ndarray  # (M, 3)
    imu_acc: np.ndarray  # (M, 3)
    groundtruth: Trajectory | None = None

    def imu_sample(self, i: int) -> ImuSample:
        return ImuSample(int(self.imu_times[i]), self.imu_acc[i], self.imu_gyr[i])

    def imu_samples(self):
        return [self.imu_sample(i) for i in range(len(self.imu_times))]


# binary streams -------------------------------------------------------------


def _read_records(path: Path, dtype: np.dtype) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) % dtype.itemsize:
        full = len(raw) // dtype.itemsize
        raise DatasetFormatError(
            f"{path.name}: record {full + 1} is truncated ({len(raw) % dtype.itemsize} of {dtype.itemsize} bytes)"
        )
    return np.frombuffer(raw, dtype=dtype)


def _check_times(times: np.ndarray, name: str, strict: bool) -> None:
    if len(times) == 0:
        return
    if np.any(times > np.iinfo(np.int64).max):
        raise DatasetFormatError(f"{name}: timestamp exceeds the int64 range")
    step = np.diff(times.astype(np.int64))
    bad = np.flatnonzero(step <= 0 if strict else step < 0)
    if len(bad):
        i = int(bad[0]) + 1
        raise OrderingError(f"{name}: record {i + 1} has timestamp {times[i]} after {times[i - 1]}")


def _check_finite(arr: np.ndarray, name: str) -> None:
    bad = np.flatnonzero(~np.all(np.isfinite(arr), axis=1))
    if len(bad):
        raise DatasetFormatError(f"{name}: record {int(bad[0]) + 1} holds a non-finite value")


def read_points(path):
    rec = _read_records(Path(path), POINT_DTYPE)
    _check_times(rec["t"], Path(path).name, strict=False)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1) if len(rec) else np.zeros((0, 3))
    _check_finite(pts, Path(path).name)
    return rec["t"].astype(np.int64), pts


def read_imu(path):
    rec = _read_records(Path(path), IMU_DTYPE)
    _check_times(rec["t"], Path(path).name, strict=True)
    if len(rec):
        gyr = np.stack([rec["wx"], rec["wy"], rec["wz"]], axis=1)
        acc = np.stack([rec["ax"], rec["ay"], rec["az"]], axis=1)
    else:
        gyr = acc = np.zeros((0, 3))
    _check_finite(np.hstack([gyr, acc]), Path(path).name)
    return rec["t"].astype(np.int64), gyr, acc


def write_points(path, times, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rec = np.empty(len(pts), dtype=POINT_DTYPE)
    rec["t"] = np.asarray(times, dtype=np.int64)
    rec["x"], rec["y"], rec["z"] = pts.T
    Path(path).write_bytes(rec.tobytes())


def write_imu(path, times, gyr, acc) -> None:
    gyr = np.asarray(gyr, dtype=np.float64).reshape(-1, 3)
    acc = np.asarray(acc, dtype=np.float64).reshape(-1, 3)
    rec = np.empty(len(gyr), dtype=IMU_DTYPE)
    rec["t"] = np.asarray(times, dtype=np.int64)
    rec["wx"], rec["wy"], rec["wz"] = gyr.T
    rec["ax"], rec["ay"], rec["az"] = acc.T
    Path(path).write_bytes(rec.tobytes())


# trajectory text ------------------------------------------------------------


def format_seconds(ns: int) -> str:
    ns = int(ns)
    sign = "-" if ns < 0 else ""
    s, frac = divmod(abs(ns), NS_PER_S)
    return f"{sign}{s}.{frac:09d}"


def parse_seconds(text: str) -> int:
    """Decimal seconds to integer nanoseconds without binary rounding."""
    try:
        value = Decimal(text.strip())
    except InvalidOperation:
        raise ValueError(f"not a timestamp: {text!r}") from None
    if not value.is_finite():
        raise ValueError(f"not a timestamp: {text!r}")
    return int((value * NS_PER_S).to_integral_value(ROUND_HALF_EVEN))


def read_trajectory(path) -> Trajectory:
    times, pos, quats = [], [], []
    prev = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 8:
            raise DatasetFormatError(f"{Path(path).name}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            t = parse_seconds(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DatasetFormatError(f"{Path(path).name}:{lineno}: {exc}") from exc
        if not np.all(np.isfinite(vals)):
            raise DatasetFormatError(f"{Path(path).name}:{lineno}: non-finite value")
        if prev is not None and t <= prev:
            raise OrderingError(f"{Path(path).name}:{lineno}: timestamp not increasing")
        prev = t
        times.append(t)
        pos.append(vals[0:3])
        qx, qy, qz, qw = vals[3:7]
        q = np.array([qw, qx, qy, qz])
        n = np.linalg.norm(q)
        if n == 0.0:
            raise DatasetFormatError(f"{Path(path).name}:{lineno}: zero quaternion")
        quats.append(q / n)
    return Trajectory(np.array(times, dtype=np.int64), np.array(pos).reshape(-1, 3), np.array(quats).reshape(-1, 4))


def format_trajectory(traj: Trajectory) -> str:
    out = []
    for t, p, q in zip(traj.times, traj.positions, traj.quats):
        w, x, y, z = q
        out.append(f"{format_seconds(t)} " + " ".join(f"{v:.17g}" for v in (p[0], p[1], p[2], x, y, z, w)))
    return "".join(line + "\n" for line in out)


def write_trajectory(path, traj: Trajectory) -> None:
    Path(path).write_text(format_trajectory(traj))


# datasets -------------------------------------------------------------------


def resample_imu(times, gyr, acc, rate_hz: float):
    """Linearly interpolate IMU streams onto a uniform grid at ``rate_hz``."""
    times = np.asarray(times, dtype=np.int64)
    if len(times) < 2:
        return times, np.asarray(gyr), np.asarray(acc)
    step = int(round(NS_PER_S / rate_hz))
    if step <= 0:
        raise ValueError("rate too high")
    grid = np.arange(times[0], times[-1] + 1, step, dtype=np.int64)
    rel = (times - times[0]).astype(np.float64)
    g = (grid - times[0]).astype(np.float64)
    new_gyr = np.stack([np.interp(g, rel, gyr[:, i]) for i in range(3)], axis=1)
    new_acc = np.stack([np.interp(g, rel, acc[:, i]) for i in range(3)], axis=1)
    return grid, new_gyr, new_acc


def load_dataset(path, imu_rate_hz: float = 0.0) -> Dataset:
    root = Path(path)
    for name in (POINTS_FILE, IMU_FILE):
        if not (root / name).is_file():
            raise DatasetFormatError(f"{root}: missing {name}")
    pt, pts = read_points(root / POINTS_FILE)
    it, gyr, acc = read_imu(root / IMU_FILE)
    if imu_rate_hz > 0.0:
        it, gyr, acc = resample_imu(it, gyr, acc, imu_rate_hz)
    gt_path = root / GROUNDTRUTH_FILE
    gt = read_trajectory(gt_path) if gt_path.is_file() else None
    return Dataset(pt, pts, it, gyr, acc, gt)


def write_dataset(path, data: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_points(root / POINTS_FILE, data.point_times, data.points)
    write_imu(root / IMU_FILE, data.imu_times, data.imu_gyr, data.imu_acc)
    if data.groundtruth is not None:
        write_trajectory(root / GROUNDTRUTH_FILE, data.groundtruth)
