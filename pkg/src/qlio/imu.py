"""Static initialization and IMU-driven state / covariance propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qlio.errors import InsufficientDataError, NotStationaryError, OdometryError
from qlio.manifold import (
    BA_SL,
    BW_SL,
    ERROR_DIM,
    G_SL,
    GRAVITY_MAGNITUDE,
    T_SL,
    TH_SL,
    V_SL,
    NavState,
    b_matrix,
    quat_exp,
    quat_multiply,
    skew,
    so3_exp,
    so3_right_jacobian,
)

NS_PER_S = 1_000_000_000


@dataclass(frozen=True)
class ImuSample:
    timestamp: int  # ns
    acc: np.ndarray  # specific force, m/s^2
    gyr: np.ndarray  # rad/s


@dataclass(frozen=True)
class NoiseConfig:
    """Per-axis standard deviations of the discrete-time IMU noise terms."""

    sigma_acc: float = 0.1
    sigma_gyr: float = 0.01
    sigma_ba: float = 1e-3
    sigma_bw: float = 1e-4

    def __post_init__(self):
        for name in ("sigma_acc", "sigma_gyr", "sigma_ba", "sigma_bw"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def q_matrix(self) -> np.ndarray:
        return np.diag(
            np.repeat(
                [self.sigma_acc**2, self.sigma_gyr**2, self.sigma_ba**2, self.sigma_bw**2],
                3,
            )
        )


@dataclass(frozen=True)
class InitConfig:
    duration_s: float = 1.0
    acc_var_threshold: float = 0.05  # (m/s^2)^2, per axis
    # initial covariance diagonal (variances)
    p_pos: float = 1e-4
    p_rot: float = 1e-4
    p_vel: float = 1e-2
    p_bias: float = 1e-3
    p_grav: float = 1e-4

    def initial_covariance(self) -> np.ndarray:
        d = np.empty(ERROR_DIM)
        d[T_SL] = self.p_pos
        d[TH_SL] = self.p_rot
        d[V_SL] = self.p_vel
        d[BA_SL] = self.p_bias
        d[BW_SL] = self.p_bias
        d[G_SL] = self.p_grav
        return np.diag(d)


def static_initialize(window, gravity_mag: float = GRAVITY_MAGNITUDE, config: InitConfig | None = None):
    """Estimate biases and gravity from a stationary IMU window.

    The initial body frame defines the world frame, so the attitude is the
    identity. At rest the accelerometer reads ``b_a + R^T g``, hence gravity is
    taken along the mean specific force with the configured magnitude and the
    accelerometer bias absorbs the remaining length mismatch.

    Returns ``(state, covariance)``.
    """
    config = config or InitConfig()
    window = list(window)
    if len(window) < 2:
        raise InsufficientDataError("static initialization needs at least two IMU samples")
    span = window[-1].timestamp - window[0].timestamp
    if span < round(config.duration_s * NS_PER_S):
        raise InsufficientDataError(f"IMU window spans {span / NS_PER_S:.3f} s, need {config.duration_s:.3f} s")
    acc = np.array([s.acc for s in window], dtype=float)
    gyr = np.array([s.gyr for s in window], dtype=float)
    acc_var = acc.var(axis=0)
    if np.any(acc_var > config.acc_var_threshold):
        raise NotStationaryError(f"accelerometer variance {acc_var.max():.4f} exceeds {config.acc_var_threshold}")
    mean_acc = acc.mean(axis=0)
    norm = float(np.linalg.norm(mean_acc))
    if norm <= 0.0:
        raise NotStationaryError("mean specific force is zero; cannot observe gravity")
    g = gravity_mag * mean_acc / norm
    state = NavState(ba=mean_acc - g, bw=gyr.mean(axis=0), g=g)
    return state, config.initial_covariance()


def step_terms(x: NavState, s0: ImuSample, s1: ImuSample):
    """Step length in seconds and the bias-corrected midpoint specific force and rate."""
    dt = (s1.timestamp - s0.timestamp) / NS_PER_S
    if dt <= 0.0:
        raise OdometryError(f"non-positive IMU step {dt} s")
    acc = 0.5 * (np.asarray(s0.acc, dtype=float) + np.asarray(s1.acc, dtype=float)) - x.ba
    rate = 0.5 * (np.asarray(s0.gyr, dtype=float) + np.asarray(s1.gyr, dtype=float)) - x.bw
    return dt, acc, rate


def propagate_state(x: NavState, s0: ImuSample, s1: ImuSample) -> NavState:
    """Midpoint integration of one IMU interval; biases and gravity are held."""
    dt, acc, rate = step_terms(x, s0, s1)
    R = x.R
    # R (a - b_a - R^T g) == R (a - b_a) - g
    a_world = R @ acc - x.g
    q = quat_multiply(x.q, quat_exp(rate * dt))
    q /= np.linalg.norm(q)
    return NavState(
        t=x.t + x.v * dt + 0.5 * a_world * dt * dt,
        q=q,
        v=x.v + a_world * dt,
        ba=x.ba,
        bw=x.bw,
        g=x.g,
    )


def build_fx(x: NavState, s0: ImuSample, s1: ImuSample) -> np.ndarray:
    """Error-state transition matrix of one propagation step.

    Rotation blocks use the body-to-world rotation. The position row carries
    the dt^2 couplings of the midpoint position update and the attitude row
    uses the exact SO(3) step, so the matrix agrees with finite differences
    of ``propagate_state`` at any step length.
    """
    dt, acc, rate = step_terms(x, s0, s1)
    R = x.R
    g = x.g
    B = b_matrix(g)
    acc_hat = skew(acc)
    g_hat = skew(g)
    F = np.eye(ERROR_DIM)
    half_dt2 = 0.5 * dt * dt
    F[T_SL, TH_SL] = -R @ acc_hat * half_dt2
    F[T_SL, V_SL] = np.eye(3) * dt
    F[T_SL, BA_SL] = -R * half_dt2
    F[T_SL, G_SL] = g_hat @ B * half_dt2
    # exact attitude blocks; to first order I - [rate]x dt and -I dt
    F[TH_SL, TH_SL] = so3_exp(-rate * dt)
    F[TH_SL, BW_SL] = -so3_right_jacobian(rate * dt) * dt
    F[V_SL, TH_SL] = -R @ acc_hat * dt
    F[V_SL, BA_SL] = -R * dt
    F[V_SL, G_SL] = g_hat @ B * dt
    F[G_SL, G_SL] = -(B.T @ g_hat @ g_hat @ B) / float(g @ g)
    return F


def build_fw(x: NavState, dt: float, rate=None) -> np.ndarray:
    """Noise input matrix over the noise order (n_a, n_w, n_ba, n_bw).

    ``rate`` is the bias-corrected angular rate of the step; with it the
    attitude block is exact, without it the first-order ``-I dt``. The
    position row carries the midpoint update's ``dt^2`` term.
    """
    F = np.zeros((ERROR_DIM, 12))
    R = x.R
    F[T_SL, 0:3] = -R * (0.5 * dt * dt)
    if rate is None:
        F[TH_SL, 3:6] = -np.eye(3) * dt
    else:
        F[TH_SL, 3:6] = -so3_right_jacobian(np.asarray(rate, dtype=float) * dt) * dt
    F[V_SL, 0:3] = -R * dt
    F[BA_SL, 6:9] = -np.eye(3) * dt
    F[BW_SL, 9:12] = -np.eye(3) * dt
    return F


def propagate_covariance(P, Fx, Fw, Q) -> np.ndarray:
    P = Fx @ P @ Fx.T + Fw @ Q @ Fw.T
    return 0.5 * (P + P.T)


def interpolate_imu(s0: ImuSample, s1: ImuSample, timestamp: int) -> ImuSample:
    """Linearly interpolate the measurements of two samples at ``timestamp``."""
    span = s1.timestamp - s0.timestamp
    if span <= 0:
        return ImuSample(timestamp, np.asarray(s0.acc, dtype=float), np.asarray(s0.gyr, dtype=float))
    a = (timestamp - s0.timestamp) / span
    acc = (1.0 - a) * np.asarray(s0.acc, dtype=float) + a * np.asarray(s1.acc, dtype=float)
    gyr = (1.0 - a) * np.asarray(s0.gyr, dtype=float) + a * np.asarray(s1.gyr, dtype=float)
    return ImuSample(timestamp, acc, gyr)
