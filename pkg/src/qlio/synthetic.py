"""Synthetic spinning-LiDAR + IMU datasets in planar scenes.

Trajectories are sums of sinusoids with analytic derivatives, so the IMU
stream is generated from exact accelerations and body rates. LiDAR rays are
cast column by column, each column carrying its own timestamp and pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qlio.config import RunConfig, write_config
from qlio.dataset import Dataset, Trajectory, write_dataset
from qlio.errors import GenerationError
from qlio.imu import NS_PER_S, NoiseConfig
from qlio.manifold import GRAVITY_MAGNITUDE, quat_from_matrix

# scenes ---------------------------------------------------------------------


@dataclass(frozen=True)
class Scene:
    """Planes ``n . p + d = 0`` with normals pointing into free space."""

    name: str
    normals: np.ndarray  # (P, 3)
    offsets: np.ndarray  # (P,)

    def distances(self, points) -> np.ndarray:
        """Unsigned distance of each point to its closest plane."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.min(np.abs(pts @ self.normals.T + self.offsets), axis=1)


def box_room(size=(12.0, 8.0, 3.5), center=(1.0, 0.5, 0.3)) -> Scene:
    half = np.asarray(size, dtype=float) / 2.0
    c = np.asarray(center, dtype=float)
    normals, offsets = [], []
    for axis in range(3):
        for sign in (1.0, -1.0):
            n = np.zeros(3)
            n[axis] = sign
            # wall at c[axis] - sign * half[axis], normal pointing inwards
            wall = c[axis] - sign * half[axis]
            normals.append(n)
            offsets.append(-sign * wall)
    return Scene("box", np.array(normals), np.array(offsets))


SCENES = {"box": box_room}


def make_scene(name: str) -> Scene:
    try:
        return SCENES[name]()
    except KeyError:
        raise GenerationError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# trajectories ---------------------------------------------------------------


@dataclass(frozen=True)
class Wave:
    """``offset + rate t + env(t) amp sin(freq (t - start) + phase)``.

    ``env`` is a quintic smoothstep rising from 0 at ``start`` to 1 at
    ``start + ramp`` (identically 1 when ``ramp == 0``).
    """

    amp: float = 0.0
    freq: float = 0.0
    phase: float = 0.0
    offset: float = 0.0
    rate: float = 0.0
    start: float = 0.0
    ramp: float = 0.0

    def eval(self, t):
        """Value and first two time derivatives."""
        t = np.asarray(t, dtype=float)
        env, denv, ddenv = _smoothstep(t, self.start, self.ramp)
        arg = self.freq * (t - self.start) + self.phase
        s = self.amp * np.sin(arg)
        ds = self.amp * self.freq * np.cos(arg)
        dds = -self.amp * self.freq**2 * np.sin(arg)
        f = self.offset + self.rate * t + env * s
        df = self.rate + denv * s + env * ds
        ddf = ddenv * s + 2.0 * denv * ds + env * dds
        return f, df, ddf


def _smoothstep(t, start, ramp):
    if ramp <= 0.0:
        one = np.ones_like(t)
        return one, 0.0 * one, 0.0 * one
    u = np.clip((t - start) / ramp, 0.0, 1.0)
    inside = (t > start) & (t < start + ramp)
    e = u**3 * (10.0 - 15.0 * u + 6.0 * u * u)
    de = np.where(inside, 30.0 * u**2 * (1.0 - u) ** 2 / ramp, 0.0)
    dde = np.where(inside, 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / ramp**2, 0.0)
    return e, de, dde


@dataclass(frozen=True)
class MotionModel:
    """Body pose from six scalar signals: x, y, z and ZYX Euler roll, pitch, yaw."""

    name: str
    x: tuple = ()
    y: tuple = ()
    z: tuple = ()
    roll: tuple = ()
    pitch: tuple = ()
    yaw: tuple = ()

    def _signal(self, waves, t):
        t = np.asarray(t, dtype=float)
        f = np.zeros_like(t)
        df = np.zeros_like(t)
        ddf = np.zeros_like(t)
        for w in waves:
            a, b, c = w.eval(t)
            f, df, ddf = f + a, df + b, ddf + c
        return f, df, ddf

    def position(self, t):
        """Positions, velocities and accelerations, each ``(N, 3)``."""
        parts = [self._signal(w, t) for w in (self.x, self.y, self.z)]
        return tuple(np.stack([p[i] for p in parts], axis=-1) for i in range(3))

    def rotation(self, t):
        """Body-to-world rotations ``(N, 3, 3)`` and body angular rates ``(N, 3)``."""
        r, dr, _ = self._signal(self.roll, t)
        p, dp, _ = self._signal(self.pitch, t)
        y, dy, _ = self._signal(self.yaw, t)
        cr, sr = np.cos(r), np.sin(r)
        cp, sp = np.cos(p), np.sin(p)
        cy, sy = np.cos(y), np.sin(y)
        R = np.empty(np.shape(r) + (3, 3))
        R[..., 0, 0] = cy * cp
        R[..., 0, 1] = cy * sp * sr - sy * cr
        R[..., 0, 2] = cy * sp * cr + sy * sr
        R[..., 1, 0] = sy * cp
        R[..., 1, 1] = sy * sp * sr + cy * cr
        R[..., 1, 2] = sy * sp * cr - cy * sr
        R[..., 2, 0] = -sp
        R[..., 2, 1] = cp * sr
        R[..., 2, 2] = cp * cr
        omega = np.stack(
            [dr - sp * dy, cr * dp + sr * cp * dy, -sr * dp + cr * cp * dy],
            axis=-1,
        )
        return R, omega


def smooth_motion(still: float = 1.0, ramp: float = 1.0) -> MotionModel:
    def w(amp, freq, phase=0.0):
        return (Wave(amp=amp, freq=freq, phase=phase, start=still, ramp=ramp),)

    return MotionModel(
        "smooth",
        x=w(1.5, 0.6),
        y=w(1.0, 0.8),
        z=w(0.2, 0.5),
        roll=w(0.05, 0.9),
        pitch=w(0.05, 0.7),
        yaw=w(0.6, 0.4),
    )


def stationary_motion() -> MotionModel:
    return MotionModel("stationary")


def circle_motion(radius: float = 2.0, speed: float = 1.0) -> MotionModel:
    """Constant-speed circle through the origin; body x points away from the center."""
    w = speed / radius
    return MotionModel(
        "circle",
        x=(Wave(amp=radius, freq=w, phase=np.pi / 2, offset=-radius),),
        y=(Wave(amp=radius, freq=w),),
        yaw=(Wave(rate=w),),
    )


TRAJECTORIES = {"smooth": smooth_motion, "stationary": stationary_motion, "circle": circle_motion}


def make_motion(name: str) -> MotionModel:
    try:
        return TRAJECTORIES[name]()
    except KeyError:
        raise GenerationError(f"unknown trajectory {name!r}; choose from {sorted(TRAJECTORIES)}") from None


# sensors --------------------------------------------------------------------


@dataclass(frozen=True)
class LidarModel:
    rings: int = 32
    fov_deg: tuple = (-25.0, 25.0)
    columns: int = 720
    rate_hz: float = 10.0
    min_range: float = 0.5
    max_range: float = 100.0

    def directions(self) -> np.ndarray:
        """Unit ray directions in the LiDAR frame, ``(columns, rings, 3)``."""
        elev = np.deg2rad(np.linspace(self.fov_deg[0], self.fov_deg[1], self.rings))
        az = 2.0 * np.pi * np.arange(self.columns) / self.columns
        ce, se = np.cos(elev), np.sin(elev)
        d = np.empty((self.columns, self.rings, 3))
        d[..., 0] = np.cos(az)[:, None] * ce[None, :]
        d[..., 1] = np.sin(az)[:, None] * ce[None, :]
        d[..., 2] = se[None, :]
        return d


@dataclass(frozen=True)
class SensorNoise:
    sigma_acc: float = 0.02
    sigma_gyr: float = 0.002
    sigma_range: float = 0.005
    acc_bias: tuple = (0.0, 0.0, 0.0)
    gyr_bias: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def zero(cls) -> SensorNoise:
        return cls(0.0, 0.0, 0.0)


@dataclass
class SyntheticData:
    dataset: Dataset
    config: RunConfig
    scene: Scene
    motion: MotionModel


def cast_rays(scene: Scene, origins, directions, max_range: float = np.inf) -> np.ndarray:
    """Range to the first plane hit along each ray (``inf`` when nothing is hit).

    ``origins`` ``(..., 3)`` broadcast against ``directions`` ``(..., 3)``.
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(directions, dtype=float)
    num = -(o @ scene.normals.T + scene.offsets)  # (..., P)
    den = d @ scene.normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(den < -1e-12, num / den, np.inf)
    t = np.where(t > 0.0, t, np.inf)
    r = t.min(axis=-1)
    return np.where(r <= max_range, r, np.inf)


def generate_synthetic(
    scene="box",
    trajectory="smooth",
    duration: float = 10.0,
    lidar: LidarModel | None = None,
    imu_rate_hz: float = 200.0,
    noise: SensorNoise | None = None,
    seed: int = 0,
    extrinsic=None,
    gravity: float = GRAVITY_MAGNITUDE,
    out=None,
) -> SyntheticData:
    """Simulate a dataset; optionally write it (plus ``config.txt``) to ``out``."""
    scene = make_scene(scene) if isinstance(scene, str) else scene
    motion = make_motion(trajectory) if isinstance(trajectory, str) else trajectory
    lidar = lidar or LidarModel()
    noise = noise or SensorNoise()
    if not duration > 0.0:
        raise GenerationError("duration must be positive")
    rng = np.random.default_rng(seed)
    R_bl, t_bl = (np.eye(3), np.zeros(3)) if extrinsic is None else (np.asarray(extrinsic[0]), np.asarray(extrinsic[1]))

    # IMU stream and ground truth at the IMU rate
    imu_step = int(round(NS_PER_S / imu_rate_hz))
    imu_ns = np.arange(0, int(round(duration * NS_PER_S)) + 1, imu_step, dtype=np.int64)
    ts = imu_ns / NS_PER_S
    pos, _, acc_w = motion.position(ts)
    R, omega = motion.rotation(ts)
    up = np.array([0.0, 0.0, gravity])
    f_body = np.einsum("nji,nj->ni", R, acc_w + up)
    acc = f_body + np.asarray(noise.acc_bias) + rng.normal(0.0, 1.0, f_body.shape) * noise.sigma_acc
    gyr = omega + np.asarray(noise.gyr_bias) + rng.normal(0.0, 1.0, omega.shape) * noise.sigma_gyr
    quats = np.array([quat_from_matrix(r) for r in R])
    gt = Trajectory(imu_ns, pos, quats)

    # LiDAR stream, one pose per column
    period = int(round(NS_PER_S / lidar.rate_hz))
    n_sweeps = int(np.floor(duration * NS_PER_S / period + 1e-9))
    dirs_l = lidar.directions()
    col_offsets = (np.arange(lidar.columns, dtype=np.int64) * period) // lidar.columns
    point_ns, points = [], []
    for k in range(n_sweeps):
        col_ns = k * period + col_offsets
        cts = col_ns / NS_PER_S
        p, _, _ = motion.position(cts)
        Rc, _ = motion.rotation(cts)
        R_wl = Rc @ R_bl
        o_wl = p + Rc @ t_bl
        dirs_w = np.einsum("cij,crj->cri", R_wl, dirs_l)
        rng_hit = cast_rays(scene, o_wl[:, None, :], dirs_w, lidar.max_range)
        ok = np.isfinite(rng_hit) & (rng_hit >= lidar.min_range)
        r = np.where(ok, rng_hit, 0.0) + rng.normal(0.0, 1.0, rng_hit.shape) * noise.sigma_range
        pts = dirs_l * r[..., None]
        point_ns.append(np.broadcast_to(col_ns[:, None], ok.shape)[ok])
        points.append(pts[ok])
    point_ns = np.concatenate(point_ns) if point_ns else np.zeros(0, np.int64)
    points = np.concatenate(points) if points else np.zeros((0, 3))
    if len(points) == 0:
        raise GenerationError("no LiDAR ray hit the scene")

    data = Dataset(point_ns, points, imu_ns, gyr, acc, gt)
    cfg = RunConfig(
        noise=NoiseConfig(
            sigma_acc=max(noise.sigma_acc, 1e-3),
            sigma_gyr=max(noise.sigma_gyr, 1e-4),
        ),
        extrinsic_rotation=tuple(float(v) for v in R_bl.ravel()),
        extrinsic_translation=tuple(float(v) for v in t_bl),
        sweep_period_ms=period / 1e6,
        seed=seed,
        gravity=gravity,
    )
    if out is not None:
        write_dataset(out, data)
        write_config(cfg, Path(out) / "config.txt")
    return SyntheticData(data, cfg, scene, motion)
