"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

from __future__ import annotations

import time

import numpy as np
import pytest

from qlio.cli import main
from qlio.cloud import reconstruct_sweeps, split_sweep
from qlio.evaluation import evaluate_ate
from qlio.imu import ImuSample, build_fw, build_fx, propagate_state, step_terms
from qlio.manifold import ERROR_DIM, NavState, state_boxminus, state_boxplus
from qlio.odometry import _segments, records_to_trajectory
from qlio.update import (
    CACHE_ENTRY_DTYPE,
    SurfaceCache,
    SurfaceParam,
    UpdateConfig,
    boxminus_jacobian,
    build_prior_jacobian,
    iterate_update,
    point_to_plane_residual,
)
from qlio.voxel_map import (
    COUNTS_PER_VOLUME,
    MAX_CODE,
    RESOLUTION,
    VoxelMap,
    decode_offset,
    decode_point,
    encode_offset,
    volume_center,
    volume_key,
)

from helpers import random_state, room_points

MS = 1_000_000


@pytest.fixture
def report(capsys):
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return emit


# 1 -----------------------------------------------------------------------------


def test_quantization_fidelity(report):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, size=(100_000, 3))
    start = time.perf_counter()
    err = np.abs(decode_offset(encode_offset(x)) - x).max()
    secs = time.perf_counter() - start
    report(1, "quantization fidelity", err <= 0.002 + 1e-12 and secs < 1.0, f"max |err| {err:.6f} m in {secs:.3f} s")


# 2 -----------------------------------------------------------------------------


def knn_oracle(m: VoxelMap, query, k):
    """Float64 brute force over decoded map points, ordered by (distance, key, slot)."""
    n = m.num_volumes
    vol, slot = np.nonzero(np.arange(m.capacity)[None, :] < m.counts[:n, None])
    keys = m.keys[vol]
    pts = decode_offset(m.data[vol, slot]) + volume_center(keys)
    qkey = volume_key(query)
    qdec = decode_point(qkey, encode_offset(query - volume_center(qkey)))
    near = np.abs(keys - qkey).max(axis=1) <= 1
    d2 = np.sum((pts[near] - qdec) ** 2, axis=1) / RESOLUTION**2
    units = np.rint(d2).astype(np.int64)
    assert np.abs(d2 - units).max(initial=0.0) <= 1e-6  # lattice distances are integers
    kn, sn = keys[near], slot[near]
    order = np.lexsort((sn, kn[:, 2], kn[:, 1], kn[:, 0], units))[:k]
    return units[order], kn[order], sn[order]


def test_integer_knn_matches_brute_force(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    mismatches, queries = 0, 0
    for _ in range(200):
        n = int(rng.integers(1, 10_001))
        half = rng.uniform(1.0, 4.0)
        pts = rng.uniform(-half, half, size=(n, 3))
        dup = rng.random(n) < 0.1  # coincident points force distance ties
        pts[dup] = pts[rng.integers(0, n, dup.sum())]
        m = VoxelMap()
        m.insert_points(pts)
        qs = np.concatenate([rng.uniform(-half, half, size=(5, 3)), pts[rng.integers(0, n, 5)]])
        res = m.knn_search(qs, k=20)
        for i, q in enumerate(qs):
            units, keys, slots = knn_oracle(m, q, 20)
            c = int(res.count[i])
            same = (
                c == len(units)
                and np.array_equal(res.dist2[i, :c], units)
                and np.array_equal(res.keys[i, :c], keys)
                and np.array_equal(res.slots[i, :c], slots)
            )
            mismatches += not same
            queries += 1
    secs = time.perf_counter() - start
    ok = mismatches == 0 and secs < 30.0
    report(
        2,
        "integer kNN equals brute force",
        ok,
        f"{mismatches} mismatches over {queries} queries on 200 maps, {secs:.1f} s",
    )


# 3 -----------------------------------------------------------------------------


def test_bit_width_sufficiency(report):
    # exhaustive per-axis lattice: query code, candidate code, neighbor step
    codes = np.arange(-MAX_CODE, MAX_CODE + 1)
    q, c, s = np.meshgrid(codes, codes, np.array([-1, 0, 1]), indexing="ij")
    delta = q - c - s * COUNTS_PER_VOLUME
    worst_axis = int(np.abs(delta).max())
    worst_d2 = 3 * worst_axis**2
    analytic = worst_axis == 500 and worst_d2 == 750000 and worst_axis < 2**15 and worst_d2 < 2**31

    # randomized search through the map itself
    rng = np.random.default_rng(3)
    seen_axis, seen_d2 = 0, 0
    for _ in range(1000):
        step = rng.integers(-1, 2, size=3)
        cand = volume_center(step) + rng.choice([-1.0, 1.0], 3) * rng.uniform(0.45, 0.5, 3)
        query = volume_center(np.zeros(3)) + rng.choice([-1.0, 1.0], 3) * rng.uniform(0.45, 0.5, 3)
        m = VoxelMap()
        m.insert_points(cand[None])
        r = m.knn_search(query, k=1)
        qdec = decode_point(volume_key(query), encode_offset(query - volume_center(volume_key(query))))
        axis = np.rint(np.abs(qdec - r.points[0]) / RESOLUTION).astype(int)
        seen_axis = max(seen_axis, int(axis.max()))
        seen_d2 = max(seen_d2, int(r.dist2[0]))
        assert int(r.dist2[0]) == int(np.sum(axis**2))
    ok = analytic and seen_axis <= 500 and seen_d2 <= 750000
    report(
        3,
        "16/32-bit sufficiency",
        ok,
        f"lattice worst |d| {worst_axis}, d^2 {worst_d2}; random search max |d| {seen_axis}, d^2 {seen_d2}",
    )


# 4 -----------------------------------------------------------------------------


def test_memory_ratio(report, smooth_run, smooth_run_standard):
    rng = np.random.default_rng(4)
    q, s = VoxelMap(), VoxelMap(quantized=False)
    pts = rng.uniform(0.0, 1.0, size=(20, 3))
    q.insert_points(pts)
    s.insert_points(pts)
    full = (q.payload_bytes(), s.payload_bytes())
    e2e = smooth_run.metrics.map_bytes / smooth_run_standard.metrics.map_bytes
    ok = full == (84, 480) and full[0] * 40 == full[1] * 7 and e2e <= 0.20
    report(4, "memory ratio", ok, f"full volume {full[0]}/{full[1]} bytes; synthetic run {e2e:.4f}")


# 5 -----------------------------------------------------------------------------


def rel_err(A, B):
    return float(np.abs(A - B).max() / max(np.abs(B).max(), 1e-12))


def random_step(rng):
    s0 = ImuSample(0, rng.normal(size=3) * 3 + [0, 0, 9.81], rng.normal(size=3))
    dt = int(rng.integers(1_000_000, 20_000_000))
    s1 = ImuSample(dt, s0.acc + rng.normal(scale=0.5, size=3), s0.gyr + rng.normal(scale=0.2, size=3))
    return s0, s1


def fd_columns(f, dim, h=1e-6):
    cols = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        cols.append((f(e) - f(-e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_jacobian_suite(report):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst = {"F_x": 0.0, "F_w": 0.0, "H": 0.0, "J": 0.0}
    for _ in range(100):
        x = random_state(rng)
        s0, s1 = random_step(rng)
        y0 = propagate_state(x, s0, s1)
        fx = fd_columns(lambda e: state_boxminus(propagate_state(state_boxplus(x, e), s0, s1), y0), ERROR_DIM)
        worst["F_x"] = max(worst["F_x"], rel_err(build_fx(x, s0, s1), fx))

        dt, _, rate = step_terms(x, s0, s1)

        def noisy(w):
            t0 = ImuSample(s0.timestamp, s0.acc - w[0:3], s0.gyr - w[3:6])
            t1 = ImuSample(s1.timestamp, s1.acc - w[0:3], s1.gyr - w[3:6])
            y = propagate_state(x, t0, t1)
            y.ba = y.ba - w[6:9] * dt
            y.bw = y.bw - w[9:12] * dt
            return state_boxminus(y, y0)

        worst["F_w"] = max(worst["F_w"], rel_err(build_fw(x, dt, rate), fd_columns(noisy, 12)))

        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        plane = SurfaceParam(n, float(rng.normal()), float(rng.uniform(0.1, 1.0)), True)
        p = rng.normal(size=3)
        _, H = point_to_plane_residual(p, x, plane)
        fd_h = fd_columns(lambda e: np.array([point_to_plane_residual(p, state_boxplus(x, e), plane)[0]]), ERROR_DIM)[0]
        worst["H"] = max(worst["H"], float(np.abs(H - fd_h).max()))

        d = rng.normal(size=ERROR_DIM)
        xn = state_boxplus(x, d * rng.uniform(0.01, 0.3) / np.linalg.norm(d))
        fd_d = fd_columns(lambda e: state_boxminus(state_boxplus(xn, e), x), ERROR_DIM)
        D = boxminus_jacobian(xn, x)
        chain = np.abs(build_prior_jacobian(xn, x) @ D - np.eye(ERROR_DIM)).max()
        worst["J"] = max(worst["J"], rel_err(D, fd_d), float(chain))
    secs = time.perf_counter() - start
    ok = worst["F_x"] <= 1e-4 and worst["F_w"] <= 1e-4 and worst["H"] <= 1e-6 and worst["J"] <= 1e-4 and secs < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" over 100 configurations, {secs:.1f} s"
    report(5, "Jacobians vs finite differences", ok, detail)


# 6 -----------------------------------------------------------------------------


def test_counter_halving(report, short_runs):
    on, off = short_runs
    budget = on.config.update.keypoints_per_segment
    # halves are only symmetric when both segments fill the keypoint budget
    full = [min(len(sw.old), len(sw.new)) >= budget for sw in reconstruct_sweeps(_segments(on.data, on.config))]
    fields = ("eigendecompositions", "transforms", "sorts", "distance_ops")
    compared, halved = 0, 0
    for a, b, both_full in zip(on.metrics.sweeps[1:], off.metrics.sweeps[1:], full[1:]):
        if both_full and a.cache_hits == a.iterations and a.iterations == b.iterations:
            compared += 1
            halved += all(getattr(a.counters, f) * 2 == getattr(b.counters, f) for f in fields)
    steady = on.metrics.sweeps[2:]
    hit_fraction = sum(s.cache_hits for s in steady) / sum(s.iterations for s in steady)
    ok = compared >= len(steady) // 2 and halved == compared and hit_fraction >= 0.9
    detail = f"{halved}/{compared} comparable sweeps exactly halved; "
    detail += f"cache-hit fraction {hit_fraction:.3f} over {len(steady)} sweeps"
    report(6, "counter halving", ok, detail)


# 7 -----------------------------------------------------------------------------


def test_reuse_exactness(report):
    rng = np.random.default_rng(7)
    m = VoxelMap()
    m.insert_points(room_points(rng, 60_000))
    poses = [NavState(t=np.array([0.2 + 0.05 * k, -0.1, 1.5])) for k in range(8)]
    segs = [(room_points(rng, 3000) - p.t) @ p.R for p in poses]
    cache, cfg = SurfaceCache(), UpdateConfig()
    P = np.eye(ERROR_DIM) * 1e-3
    prev, compared, identical = None, 0, 0
    for k in range(1, 8):
        x = state_boxplus(poses[k], np.r_[[0.01, -0.01, 0.005], np.zeros(14)])
        res = iterate_update(segs[k - 1], segs[k], x, P, m, cache, cfg, np.random.default_rng(k), k - 1, k)
        if prev is not None:
            for (it, ids, surf), (it0, ids0, surf0) in zip(res.reused, prev.fitted):
                compared += 1
                identical += (
                    it == it0
                    and np.array_equal(ids, ids0)
                    and np.array_equal(surf.valid, surf0.valid)
                    and all(getattr(surf, f).tobytes() == getattr(surf0, f).tobytes() for f in ("normals", "d", "w"))
                )
        prev = res
    ok = compared > 0 and identical == compared
    report(
        7, "reuse exactness", ok, f"{identical}/{compared} reused iterations bit-identical to the previous sweep's fits"
    )


# 8 -----------------------------------------------------------------------------


def test_synthetic_accuracy(report, smooth_run):
    records = smooth_run.records
    gt = smooth_run.data.groundtruth
    ate = evaluate_ate(records_to_trajectory(records), gt)
    n = smooth_run.input_sweeps
    gaps = np.diff([r.timestamp for r in records])
    doubled = len(records) == 2 * n - 1 and np.all(gaps == smooth_run.config.sweep_period_ns // 2)
    iters = max(s.iterations for s in smooth_run.metrics.sweeps)
    ok = ate <= 0.05 and doubled and smooth_run.seconds < 60.0 and iters <= 5
    detail = f"ATE {ate:.4f} m, {len(records)} records from {n} sweeps (2x rate), "
    detail += f"max {iters} iterations, {smooth_run.seconds:.1f} s"
    report(8, "synthetic accuracy", ok, detail)


# 9 -----------------------------------------------------------------------------


def test_cache_budget(report):
    cache = SurfaceCache()
    target_bits = 300 * 5 * (4 * 64 + 672)
    nbytes = cache.footprint_bytes()
    ok = abs(nbytes * 8 - target_bits) <= 0.1 * target_bits and CACHE_ENTRY_DTYPE.itemsize == 116
    report(9, "cache budget", ok, f"{nbytes} bytes = {nbytes / 2**20:.3f} MiB vs {target_bits // 8} bytes target")


# 10 ----------------------------------------------------------------------------


def test_frequency_doubling(report, smooth_run):
    counts = []
    for n in (1, 2, 5, 17, 64):
        segs = []
        for j in range(n):
            ts = np.arange(j * 100 * MS, (j + 1) * 100 * MS, MS, dtype=np.int64)
            segs.extend(split_sweep(j, j * 100 * MS, 100 * MS, ts, np.zeros((len(ts), 3))))
        counts.append((n, len(list(reconstruct_sweeps(segs)))))
    streams_ok = all(c == 2 * n - 1 for n, c in counts)
    n = smooth_run.input_sweeps
    run_ok = len(smooth_run.records) == len(smooth_run.metrics.sweeps) == 2 * n - 1
    report(
        10,
        "2n-1 reconstructed sweeps",
        streams_ok and run_ok,
        f"streams {counts}; run {n} -> {len(smooth_run.records)}",
    )


# 11 ----------------------------------------------------------------------------


def test_determinism(report, tmp_path, capsys):
    data = tmp_path / "data"
    main(["synth", "--traj", "smooth", "--duration", "3", "--out", str(data), "--seed", "11"])
    outputs = []
    for k in range(2):
        traj, met = tmp_path / f"traj{k}.txt", tmp_path / f"metrics{k}.csv"
        args = [
            "run",
            "--config",
            str(data / "config.txt"),
            "--data",
            str(data),
            "--out",
            str(traj),
            "--metrics",
            str(met),
        ]
        main(args + ["--seed", "5"])
        outputs.append((traj.read_bytes(), met.read_bytes()))
    capsys.readouterr()
    ok = outputs[0] == outputs[1] and len(outputs[0][0]) > 0
    report(
        11,
        "determinism",
        ok,
        f"trajectory {len(outputs[0][0])} bytes and metrics {len(outputs[0][1])} bytes identical across runs",
    )
