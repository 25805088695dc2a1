"""Absolute trajectory error after rigid alignment."""

from __future__ import annotations

import numpy as np

from qlio.dataset import Trajectory
from qlio.errors import AssociationError

MAX_GAP_NS = 10_000_000


def associate(est_times, gt_times, max_gap_ns: int = MAX_GAP_NS):
    """Pair each estimate with the nearest ground-truth timestamp within ``max_gap_ns``.

    Returns index arrays ``(est_idx, gt_idx)``.
    """
    est_times = np.asarray(est_times, dtype=np.int64)
    gt_times = np.asarray(gt_times, dtype=np.int64)
    if len(gt_times) == 0 or len(est_times) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    hi = np.minimum(np.searchsorted(gt_times, est_times), len(gt_times) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = np.abs(est_times - gt_times[lo])
    d_hi = np.abs(gt_times[hi] - est_times)
    nearest = np.where(d_hi < d_lo, hi, lo)
    gap = np.minimum(d_lo, d_hi)
    keep = gap <= max_gap_ns
    return np.flatnonzero(keep), nearest[keep]


def align_rigid(source, target):
    """Least-squares rotation and translation mapping ``source`` onto ``target``."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ S @ U.T
    return R, mu_d - R @ mu_s


def evaluate_ate(estimate: Trajectory, ground_truth: Trajectory, max_gap_ns: int = MAX_GAP_NS) -> float:
    ei, gi = associate(estimate.times, ground_truth.times, max_gap_ns)
    if len(ei) < 3:
        raise AssociationError(f"only {len(ei)} pose pairs within {max_gap_ns / 1e6:g} ms; need 3")
    est = estimate.positions[ei]
    gt = ground_truth.positions[gi]
    R, t = align_rigid(est, gt)
    err = est @ R.T + t - gt
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
