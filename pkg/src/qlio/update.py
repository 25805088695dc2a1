"""Iterated error-state update from point-to-plane constraints.

Each reconstructed sweep has an old and a new segment. Keypoints of the new
segment go through transform, map search and plane fitting every iteration;
the resulting plane parameters are cached per iteration so that, one sweep
later, the same segment (now the old one) reuses them instead of searching
and fitting again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from qlio.counters import OpCounters
from qlio.manifold import (
    ERROR_DIM,
    G_SL,
    T_SL,
    TH_SL,
    NavState,
    b_matrix,
    quat_conjugate,
    quat_log,
    quat_multiply,
    skew,
    so3_right_jacobian,
    so3_right_jacobian_inv,
    state_boxminus,
    state_boxplus,
)
from qlio.voxel_map import VoxelMap


@dataclass(frozen=True)
class UpdateConfig:
    keypoints_per_sweep: int = 600
    max_iterations: int = 5
    neighborhood_volumes: int = 27
    k_neighbors: int = 20
    volume_size: float = 1.0
    volume_capacity: int = 20
    rotation_eps_deg: float = 0.1
    translation_eps: float = 0.01
    observation_var: float = 0.001
    min_fit_points: int = 5
    min_planarity: float = 0.1
    max_plane_deviation: float = 0.05
    residual_gate: float = 0.5
    min_constraints: int = 50
    weight_policy: str = "planarity"  # or "constant"

    def __post_init__(self):
        if self.keypoints_per_sweep <= 0 or self.keypoints_per_sweep % 2:
            raise ValueError("keypoints_per_sweep must be positive and even")
        for name in ("max_iterations", "k_neighbors", "volume_capacity", "min_fit_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("rotation_eps_deg", "translation_eps", "observation_var", "volume_size", "max_plane_deviation"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.neighborhood_volumes != 27:
            raise ValueError("only the 27-volume neighborhood is supported")
        if self.weight_policy not in ("planarity", "constant"):
            raise ValueError(f"unknown weight policy {self.weight_policy!r}")

    @property
    def keypoints_per_segment(self) -> int:
        return self.keypoints_per_sweep // 2


# surface fitting -----------------------------------------------------------


@dataclass
class SurfaceParam:
    """Plane ``n . p + d = 0`` with residual weight ``w``."""

    n: np.ndarray
    d: float
    w: float
    valid: bool


@dataclass
class SurfaceBatch:
    normals: np.ndarray  # (M, 3)
    d: np.ndarray  # (M,)
    w: np.ndarray  # (M,)
    valid: np.ndarray  # (M,) bool

    def __len__(self) -> int:
        return len(self.d)

    def __getitem__(self, i) -> SurfaceParam:
        return SurfaceParam(self.normals[i], float(self.d[i]), float(self.w[i]), bool(self.valid[i]))

    @classmethod
    def concat(cls, a: SurfaceBatch, b: SurfaceBatch) -> SurfaceBatch:
        return cls(
            np.concatenate([a.normals, b.normals]),
            np.concatenate([a.d, b.d]),
            np.concatenate([a.w, b.w]),
            np.concatenate([a.valid, b.valid]),
        )


def planarity_weight(eigvals_desc) -> np.ndarray:
    """Squared planarity ``((sqrt(l2) - sqrt(l3)) / sqrt(l1))**2`` clamped to [0, 1]."""
    lam = np.sqrt(np.clip(np.asarray(eigvals_desc, dtype=float), 0.0, None))
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        a2d = np.where(l1 > 0.0, (l2 - l3) / np.where(l1 > 0.0, l1, 1.0), 0.0)
    return np.clip(a2d, 0.0, 1.0) ** 2


def compute_weight(neighbors) -> float:
    pts = np.asarray(neighbors, dtype=float)
    cov = np.cov(pts.T, bias=True)
    lam = np.linalg.eigvalsh(cov)[::-1]
    return float(planarity_weight(lam))


def fit_surfaces(neighbors, counts=None, cfg: UpdateConfig | None = None) -> SurfaceBatch:
    """Fit planes to batches of neighbors ``(M, k, 3)``; ``counts`` masks padded rows.

    Every batch entry gets one symmetric eigendecomposition, including those
    with too few neighbors (they come back invalid).
    """
    cfg = cfg or UpdateConfig()
    nb = np.asarray(neighbors, dtype=float)
    M, k, _ = nb.shape
    counts = np.full(M, k) if counts is None else np.asarray(counts)
    mask = (np.arange(k)[None, :] < counts[:, None]).astype(float)
    denom = np.maximum(counts, 1).astype(float)
    mean = np.einsum("mk,mkc->mc", mask, nb) / denom[:, None]
    centered = (nb - mean[:, None, :]) * mask[:, :, None]
    cov = np.einsum("mki,mkj->mij", centered, centered) / denom[:, None, None]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    normals = _canonical_sign(normals)
    d = -np.einsum("mc,mc->m", normals, mean)
    evals_desc = evals[:, ::-1]
    planarity = planarity_weight(evals_desc)
    if cfg.weight_policy == "constant":
        w = np.ones(M)
    else:
        w = planarity
    a2d = np.sqrt(planarity)
    # neighbors straddling two surfaces (e.g. a room corner) give a tilted
    # least-squares plane that no single surface supports
    spread = np.abs(np.einsum("mkc,mc->mk", centered, normals)) * mask
    valid = (
        (counts >= max(cfg.min_fit_points, 3))
        & (a2d >= cfg.min_planarity)
        & (spread.max(axis=1) <= cfg.max_plane_deviation)
    )
    return SurfaceBatch(normals, d, w, valid)


def fit_surface(neighbors, cfg: UpdateConfig | None = None) -> SurfaceParam:
    pts = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return SurfaceParam(np.array([0.0, 0.0, 1.0]), 0.0, 0.0, False)
    return fit_surfaces(pts[None], np.array([len(pts)]), cfg)[0]


def _canonical_sign(n: np.ndarray) -> np.ndarray:
    # n_z >= 0; when n_z is zero fall back to n_y, then n_x
    tol = 1e-12
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    key = np.where(np.abs(z) > tol, z, np.where(np.abs(y) > tol, y, x))
    return np.where(key[:, None] < 0.0, -n, n)


# residuals ---------------------------------------------------------------


def point_to_plane_residual(p_body, x: NavState, s: SurfaceParam):
    """Weighted signed distance of a body point to a plane, and its 1x17 Jacobian."""
    r, H = point_to_plane_rows(
        np.asarray(p_body, dtype=float)[None],
        x,
        np.asarray(s.n, dtype=float)[None],
        np.array([s.d]),
        np.array([s.w]),
    )
    return float(r[0]), H[0]


def point_to_plane_rows(p_body, x: NavState, normals, d, w):
    R = x.R
    pw = p_body @ R.T + x.t
    r = w * (np.einsum("mc,mc->m", normals, pw) + d)
    H = np.zeros((len(p_body), ERROR_DIM))
    H[:, T_SL] = w[:, None] * normals
    # -w n^T R [p]x == w (R^T n) x p ... written as row vector: w * cross(p, R^T n)
    nb = normals @ R
    H[:, TH_SL] = w[:, None] * np.cross(p_body, nb)
    return r, H


# prior Jacobian -----------------------------------------------------------


def _gravity_chart_derivative(g_n, g0) -> np.ndarray:
    """d/d(dg) of ``(g_n boxplus dg) boxminus g0`` at dg = 0 (2x2)."""
    u = np.asarray(g0, dtype=float) / np.linalg.norm(g0)
    w = np.asarray(g_n, dtype=float) / np.linalg.norm(g_n)
    B0 = b_matrix(g0)
    Bn = b_matrix(g_n)
    c = np.cross(u, w)
    s = float(np.linalg.norm(c))
    cs = float(np.dot(u, w))
    u_hat = skew(u)
    if s < 1e-3 and cs > 0.0:
        phi_over_s = 1.0 + s * s / 6.0
        f = -2.0 / 3.0 - s * s / 5.0
    else:
        phi = np.arctan2(s, cs)
        phi_over_s = phi / s
        f = (cs * s - phi) / s**3
    dtheta_db = np.outer(c, f * (c @ u_hat) - u) + phi_over_s * u_hat
    db_ddg = -skew(w) @ Bn
    return B0.T @ dtheta_db @ db_ddg


def boxminus_jacobian(x_n: NavState, x0: NavState) -> np.ndarray:
    """d/d(dx) of ``(x_n boxplus dx) boxminus x0`` at dx = 0."""
    D = np.eye(ERROR_DIM)
    dtheta = quat_log(quat_multiply(quat_conjugate(x0.q), x_n.q))
    D[TH_SL, TH_SL] = so3_right_jacobian_inv(dtheta)
    D[G_SL, G_SL] = _gravity_chart_derivative(x_n.g, x0.g)
    return D


def build_prior_jacobian(x_n: NavState, x0: NavState) -> np.ndarray:
    """Map from the prior's tangent space at ``x0`` to the tangent space at ``x_n``.

    This is the inverse of ``boxminus_jacobian``: the rotation block is the
    right Jacobian of ``Log(R0^T Rn)`` (``I - 1/2 [dtheta]x`` to first order)
    and the gravity block inverts the exact S2 chart derivative (``I + 1/2
    B0^T [dtheta_g]x B0`` to first order, ``dtheta_g`` rotating ``g_n`` onto
    ``g0``). Identity when ``x_n == x0``.
    """
    J = np.eye(ERROR_DIM)
    dtheta = quat_log(quat_multiply(quat_conjugate(x0.q), x_n.q))
    J[TH_SL, TH_SL] = so3_right_jacobian(dtheta)
    J[G_SL, G_SL] = np.linalg.inv(_gravity_chart_derivative(x_n.g, x0.g))
    return J


# surface cache -------------------------------------------------------------

# 4 x 64 bits of plane parameters plus 672 bits of per-keypoint bookkeeping
CACHE_ENTRY_DTYPE = np.dtype(
    {
        "names": ["normal", "d", "body", "world", "weight", "index", "valid"],
        "formats": [("<f8", 3), "<f8", ("<f8", 3), ("<f8", 3), "<f8", "<i8", "u1"],
        "offsets": [0, 24, 32, 56, 80, 88, 96],
        "itemsize": 116,
    }
)


class SurfaceCache:
    """Per-iteration plane parameters of the last processed new segment."""

    def __init__(self, iterations: int = 5, slots: int = 300):
        self.entries = np.zeros((iterations, slots), dtype=CACHE_ENTRY_DTYPE)
        self.counts = np.zeros(iterations, dtype=np.int64)
        self.populated = np.zeros(iterations, dtype=bool)
        self.segment_ids = np.full(iterations, -1, dtype=np.int64)

    @property
    def iterations(self) -> int:
        return self.entries.shape[0]

    @property
    def slots(self) -> int:
        return self.entries.shape[1]

    def footprint_bytes(self) -> int:
        return int(self.entries.nbytes)

    def reset(self) -> None:
        self.populated[:] = False
        self.counts[:] = 0
        self.segment_ids[:] = -1

    def hit(self, iteration: int, segment_id) -> bool:
        return bool(
            iteration < self.iterations
            and self.populated[iteration]
            and segment_id is not None
            and self.segment_ids[iteration] == segment_id
        )

    def store(self, iteration, segment_id, indices, surfaces: SurfaceBatch, body, world) -> None:
        if iteration >= self.iterations:
            return
        n = len(indices)
        if n > self.slots:
            raise ValueError(f"{n} keypoints exceed the {self.slots} cache slots")
        e = self.entries[iteration]
        e["normal"][:n] = surfaces.normals
        e["d"][:n] = surfaces.d
        e["weight"][:n] = surfaces.w
        e["valid"][:n] = surfaces.valid
        e["body"][:n] = body
        e["world"][:n] = world
        e["index"][:n] = indices
        self.counts[iteration] = n
        self.populated[iteration] = True
        self.segment_ids[iteration] = -1 if segment_id is None else segment_id

    def load(self, iteration):
        """Return ``(indices, SurfaceBatch)`` stored for ``iteration``."""
        n = int(self.counts[iteration])
        e = self.entries[iteration, :n]
        surfaces = SurfaceBatch(e["normal"].copy(), e["d"].copy(), e["weight"].copy(), e["valid"].astype(bool))
        return e["index"].copy(), surfaces

    def invalidate_from(self, iteration: int) -> None:
        self.populated[iteration:] = False


# update --------------------------------------------------------------------


def select_keypoints(num_points: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` distinct points drawn uniformly (all of them if fewer)."""
    if num_points <= n:
        return np.arange(num_points)
    return rng.choice(num_points, size=n, replace=False)


@dataclass
class UpdateResult:
    state: NavState
    covariance: np.ndarray
    iterations: int
    degenerate: bool
    counters: OpCounters
    cache_hits: int = 0
    constraints: int = 0
    # per-iteration (iteration, keypoint indices, planes) of reused old-segment
    # fits and of freshly fitted new-segment planes, for inspection
    reused: list = field(default_factory=list)
    fitted: list = field(default_factory=list)


def _process(points_body, idx, x: NavState, voxel_map: VoxelMap, cfg: UpdateConfig, counters: OpCounters):
    body = points_body[idx]
    world = body @ x.R.T + x.t
    counters.transforms += len(idx)
    if len(idx) == 0:
        empty = np.zeros(0)
        return body, world, SurfaceBatch(np.zeros((0, 3)), empty, empty, np.zeros(0, bool))
    knn = voxel_map.knn_search(world, cfg.k_neighbors, counters)
    surfaces = fit_surfaces(knn.points, knn.count, cfg)
    counters.eigendecompositions += len(idx)
    return body, world, surfaces


def iterate_update(
    old_body,
    new_body,
    x0: NavState,
    P,
    voxel_map: VoxelMap,
    cache: SurfaceCache | None,
    cfg: UpdateConfig,
    rng: np.random.Generator,
    old_id=None,
    new_id=None,
    reuse: bool = True,
) -> UpdateResult:
    """Run the iterated update for one reconstructed sweep.

    ``old_body`` / ``new_body`` are the sweep's segments in the body frame at
    the sweep end. With ``reuse`` on and the cache holding planes computed for
    segment ``old_id``, the old half skips search and fitting for that
    iteration; otherwise both halves are fully processed.
    """
    old_body = np.asarray(old_body, dtype=float).reshape(-1, 3)
    new_body = np.asarray(new_body, dtype=float).reshape(-1, 3)
    counters = OpCounters()
    half = cfg.keypoints_per_segment
    V = cfg.observation_var
    rot_eps = np.deg2rad(cfg.rotation_eps_deg)
    use_cache = reuse and cache is not None

    x = x0.copy()
    hits = 0
    reused = []
    fitted = []
    I = np.eye(ERROR_DIM)
    KH = np.zeros((ERROR_DIM, ERROR_DIM))
    n_iter = 0
    n_constraints = 0
    for it in range(cfg.max_iterations):
        n_iter = it + 1
        sel_new = select_keypoints(len(new_body), half, rng)
        nb_body, nb_world, nb_surf = _process(new_body, sel_new, x, voxel_map, cfg, counters)
        fitted.append((it, sel_new, nb_surf))

        if use_cache and cache.hit(it, old_id):
            hits += 1
            ids, ob_surf = cache.load(it)
            ob_body = old_body[ids]
            reused.append((it, ids, ob_surf))
        else:
            sel_old = select_keypoints(len(old_body), half, rng)
            ob_body, _, ob_surf = _process(old_body, sel_old, x, voxel_map, cfg, counters)
        if use_cache:
            cache.store(it, new_id, sel_new, nb_surf, nb_body, nb_world)

        body = np.concatenate([ob_body, nb_body])
        surf = SurfaceBatch.concat(ob_surf, nb_surf)
        pw = body @ x.R.T + x.t
        dist = np.einsum("mc,mc->m", surf.normals, pw) + surf.d
        keep = surf.valid & (np.abs(dist) <= cfg.residual_gate)
        n_constraints = int(keep.sum())
        if n_constraints < cfg.min_constraints:
            if use_cache:
                cache.invalidate_from(it + 1)
            return UpdateResult(
                x0.copy(), np.array(P, copy=True), n_iter, True, counters, hits, n_constraints, reused, fitted
            )
        h, H = point_to_plane_rows(body[keep], x, surf.normals[keep], surf.d[keep], surf.w[keep])

        J = build_prior_jacobian(x, x0)
        prior = J @ P @ J.T
        prior = 0.5 * (prior + prior.T)
        HtH = H.T @ H / V
        Hth = H.T @ h / V
        A = HtH + _spd_inverse(prior)
        A_fac = _spd_factor(A)
        KH = cho_solve(A_fac, HtH)
        Kh = cho_solve(A_fac, Hth)
        dx = -Kh - (I - KH) @ J @ state_boxminus(x, x0)
        x = state_boxplus(x, dx)
        if np.linalg.norm(dx[TH_SL]) < rot_eps and np.linalg.norm(dx[T_SL]) < cfg.translation_eps:
            break

    if use_cache:
        cache.invalidate_from(n_iter)
    J1 = build_prior_jacobian(x, x0)
    P_new = J1 @ (I - KH) @ P @ J1.T
    P_new = 0.5 * (P_new + P_new.T)
    return UpdateResult(x, P_new, n_iter, False, counters, hits, n_constraints, reused, fitted)


def _spd_factor(A):
    try:
        return cho_factor(A)
    except LinAlgError:
        return cho_factor(A + 1e-9 * np.eye(len(A)))


def _spd_inverse(A) -> np.ndarray:
    return cho_solve(_spd_factor(A), np.eye(len(A)))
