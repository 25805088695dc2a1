from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from qlio.counters import OpCounters
from qlio.voxel_map import (
    COUNTS_PER_VOLUME,
    MAX_CODE,
    NEIGHBOR_OFFSETS,
    RESOLUTION,
    VoxelMap,
    decode_offset,
    decode_point,
    encode_offset,
    volume_center,
    volume_key,
)


def scalar_round_half_away(x: float) -> int:
    # brute force over the code lattice: nearest code, ties away from zero
    best, best_err = 0, np.inf
    for c in range(-MAX_CODE, MAX_CODE + 1):
        err = abs(x - c * RESOLUTION)
        if err < best_err - 1e-15 or (abs(err - best_err) <= 1e-15 and abs(c) > abs(best)):
            best, best_err = c, err
    return best


# encode / decode ---------------------------------------------------------------


def test_encode_examples():
    assert encode_offset([0.1, 0.0, -0.2]).tolist() == [25, 0, -50]
    assert encode_offset([0.0, 0.0, 0.0]).tolist() == [0, 0, 0]
    assert encode_offset([0.5, -0.5, 0.002]).tolist() == [125, -125, 1]
    assert encode_offset([-0.002, 0.006, -0.006]).tolist() == [-1, 2, -2]
    assert encode_offset([0.1]).dtype == np.int8


def test_encode_matches_scalar_brute_force():
    rng = np.random.default_rng(0)
    xs = np.r_[rng.uniform(-0.5, 0.5, 500), (np.arange(-125, 125) + 0.5) * RESOLUTION]
    got = encode_offset(xs)
    assert got.tolist() == [scalar_round_half_away(float(x)) for x in xs]


def test_encode_out_of_range():
    for bad in ([0.51, 0, 0], [0, -0.6, 0], [np.nan, 0, 0]):
        with pytest.raises(ValueError):
            encode_offset(bad)


def test_decode_examples():
    assert np.allclose(decode_offset(np.array([25, 0, -50], np.int8)), [0.1, 0.0, -0.2], atol=1e-15)
    assert np.array_equal(decode_offset(np.zeros(3, np.int8)), np.zeros(3))
    codes = np.arange(-125, 126)
    assert np.array_equal(decode_offset(codes), codes * RESOLUTION)


def test_round_trip_1e5():
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, size=(100_000, 3))
    assert np.abs(decode_offset(encode_offset(x)) - x).max() <= 0.002 + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.5, 0.5, allow_nan=False))
def test_round_trip_property(x):
    assert abs(float(decode_offset(encode_offset([x]))[0]) - x) <= 0.002 + 1e-12


def test_decode_point_and_keys():
    assert volume_key([[0.6, -0.2, 1.0]]).tolist() == [[0, -1, 1]]
    assert np.array_equal(volume_center([[0, -1, 1]]), [[0.5, -0.5, 1.5]])
    assert np.array_equal(decode_point(np.array([2, 3, 4]), np.zeros(3, np.int8)), [2.5, 3.5, 4.5])


# insertion ---------------------------------------------------------------------


def test_insert_example():
    m = VoxelMap()
    c = OpCounters()
    assert m.insert_points([[0.6, 0.6, 0.6]], counters=c) == 1
    assert m.keys[0].tolist() == [0, 0, 0]
    assert np.array_equal(m.centers[0], [0.5, 0.5, 0.5])
    assert m.data[0, 0].tolist() == [25, 25, 25]
    assert c.encodes == 1


def test_capacity_21_points():
    m = VoxelMap()
    pts = np.full((21, 3), 0.5) + np.linspace(-0.4, 0.4, 21)[:, None]
    assert m.insert_points(pts) == 20
    assert m.num_points == 20 and m.skipped == 1
    # first-come: the 21st point is the one dropped
    assert np.allclose(m.decoded_points(), pts[:20], atol=0.002)


def test_face_points_go_to_higher_cell():
    m = VoxelMap()
    m.insert_points([[1.0, 0.5, 0.5]])
    assert m.keys[0].tolist() == [1, 0, 0]
    assert m.data[0, 0].tolist() == [-125, 0, 0]


def test_insert_decode_error_bound():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-20, 20, size=(5000, 3))
    m = VoxelMap(capacity=5000)
    m.insert_points(pts)
    dec = m.decoded_points()
    # output is volume by volume; match each decode to its nearest original point
    d, _ = cKDTree(pts).query(dec, p=np.inf)
    assert len(dec) == len(pts) and d.max() <= 0.002 + 1e-12


def test_payload_ratio_full_volumes():
    rng = np.random.default_rng(3)
    q, s = VoxelMap(), VoxelMap(quantized=False)
    for key in [(0, 0, 0), (3, -2, 1), (-5, 7, 2)]:
        pts = np.array(key) + rng.uniform(0, 1, size=(20, 3))
        q.insert_points(pts)
        s.insert_points(pts)
    assert q.payload_bytes() == 3 * 84 and s.payload_bytes() == 3 * 480
    assert q.payload_bytes() / s.payload_bytes() == 7 / 40


def test_quantized_map_requires_unit_volumes():
    with pytest.raises(ValueError):
        VoxelMap(volume_size=0.5)
    VoxelMap(quantized=False, volume_size=0.5)


# nearest neighbors ------------------------------------------------------------


def stored_points(m: VoxelMap):
    """(key, slot, decoded point) for every stored point."""
    out = []
    for row in range(m.num_volumes):
        key = tuple(int(v) for v in m.keys[row])
        for slot in range(int(m.counts[row])):
            if m.quantized:
                p = decode_point(np.array(key), m.data[row, slot])
            else:
                p = m.data[row, slot].copy()
            out.append((key, slot, p))
    return out


def brute_force_knn(m: VoxelMap, query, k):
    qkey = volume_key(query)
    qdec = decode_point(qkey, encode_offset(query - volume_center(qkey)))
    cands = []
    for key, slot, p in stored_points(m):
        if np.abs(np.array(key) - qkey).max() > 1:
            continue
        units = int(round(float(np.sum((p - qdec) ** 2)) / RESOLUTION**2))
        cands.append((units, key, slot))
    cands.sort()
    return cands[:k]


def test_knn_query_at_stored_point():
    m = VoxelMap()
    m.insert_points([[0.6, 0.6, 0.6], [0.9, 0.1, 0.2], [1.4, 0.6, 0.6]])
    r = m.knn_search([0.6, 0.6, 0.6], k=3)
    assert r.dist2[0] == 0 and r.slots[0] == 0 and r.keys[0].tolist() == [0, 0, 0]
    assert np.allclose(r.points[0], [0.6, 0.6, 0.6])
    assert np.all(np.diff(r.dist2) >= 0)


def test_knn_boundary_coincident_points():
    m = VoxelMap()
    m.insert_points([[1.0, 0.5, 0.5]])  # code (-125, 0, 0) in volume (1, 0, 0)
    r = m.knn_search([0.5 + 0.5 - 1e-13, 0.5, 0.5], k=1)  # code (125, 0, 0) in volume (0, 0, 0)
    assert int(r.dist2[0]) == 0


def test_knn_extreme_delta_fits_32_bit():
    m = VoxelMap()
    m.insert_points([[1.999, 0.5, 0.5]])  # code (+125) in volume (1, .)
    r = m.knn_search([0.0, 0.5, 0.5], k=1)  # code (-125) in volume (0, .)
    assert int(r.dist2[0]) == 500**2 == 250000
    assert r.dist2.dtype == np.int32


def test_bit_width_bound_over_reachable_lattice():
    # worst case per axis: query code -125, candidate +125 one volume over
    per_axis = MAX_CODE + MAX_CODE + COUNTS_PER_VOLUME
    assert per_axis == 500 < 2**15
    assert 3 * per_axis**2 == 750000 < 2**31
    m = VoxelMap()
    m.insert_points([[1.999, 1.999, 1.999]])
    r = m.knn_search([0.0, 0.0, 0.0], k=1)
    assert int(r.dist2[0]) == 750000
    assert np.abs(NEIGHBOR_OFFSETS).max() == 1


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = VoxelMap()
    m.insert_points(rng.uniform(-2, 2, size=(1000, 3)))
    queries = rng.uniform(-2.5, 2.5, size=(40, 3))
    batch = m.knn_search(queries, k=20)
    for i, q in enumerate(queries):
        expect = brute_force_knn(m, q, 20)
        n = int(batch.count[i])
        got = [(int(batch.dist2[i, j]), tuple(batch.keys[i, j].tolist()), int(batch.slots[i, j])) for j in range(n)]
        assert got == expect


def test_knn_ties_break_by_key_then_slot():
    m = VoxelMap()
    m.insert_points([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])
    r = m.knn_search([1.0, 0.5, 0.5], k=3)
    # two coincident points at equal distance to the third: slots 0, 1 in (0,0,0) then (1,0,0)
    assert r.dist2.tolist() == [125**2] * 3
    assert [tuple(k) for k in r.keys.tolist()] == [(0, 0, 0), (0, 0, 0), (1, 0, 0)]
    assert r.slots.tolist() == [0, 1, 0]


def test_knn_fewer_than_k():
    m = VoxelMap()
    m.insert_points([[0.5, 0.5, 0.5]])
    r = m.knn_search([0.5, 0.5, 0.5], k=20)
    assert r.count == 1 and len(r.points) == 1
    empty = VoxelMap().knn_search([[0.0, 0.0, 0.0]], k=5)
    assert empty.count.tolist() == [0] and np.all(empty.slots == -1)
    with pytest.raises(ValueError):
        m.knn_search([0, 0, 0], k=0)


def test_knn_counters():
    m = VoxelMap()
    m.insert_points(np.random.default_rng(0).uniform(0, 1, size=(10, 3)))
    c = OpCounters()
    r = m.knn_search(np.zeros((4, 3)) + 0.5, k=5, counters=c)
    assert c.distance_ops == 4 * 540 and c.sorts == 4 and c.encodes == 4
    assert c.decodes == int(r.count.sum()) == 20


def test_standard_and_quantized_agree_on_lattice():
    rng = np.random.default_rng(7)
    codes = rng.integers(-120, 121, size=(600, 3))
    keys = rng.integers(-2, 2, size=(600, 3))
    pts = volume_center(keys) + codes * RESOLUTION
    q, s = VoxelMap(), VoxelMap(quantized=False)
    q.insert_points(pts)
    s.insert_points(pts)
    qcodes = rng.integers(-120, 121, size=(50, 3))
    qkeys = rng.integers(-2, 2, size=(50, 3))
    queries = volume_center(qkeys) + qcodes * RESOLUTION
    rq, rs = q.knn_search(queries, k=20), s.knn_search(queries, k=20)
    assert np.array_equal(rq.count, rs.count)
    assert np.abs(rq.points - rs.points).max() <= 1e-9
    assert np.allclose(rq.dist2 * RESOLUTION**2, rs.dist2, atol=1e-9)


# removal / export --------------------------------------------------------------


def test_remove_far_examples():
    m = VoxelMap()
    m.insert_points([[200.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    assert m.remove_far([0, 0, 0], np.inf) == 0
    assert m.remove_far([0, 0, 0], 100.0) == 1
    assert m.num_volumes == 1 and m.keys[0].tolist() == [1, 1, 1]
    assert m.knn_search([1.0, 1.0, 1.0], k=1).count == 1
    with pytest.raises(ValueError):
        m.remove_far([0, 0, 0], 0.0)


def test_remove_far_matches_filter():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-30, 30, size=(3000, 3))
    m = VoxelMap()
    m.insert_points(pts)
    before = {tuple(k) for k in m.keys[: m.num_volumes].tolist()}
    origin = np.array([3.0, -2.0, 1.0])
    m.remove_far(origin, 20.0)
    expect = {k for k in before if np.linalg.norm(volume_center(k) - origin) <= 20.0}
    assert {tuple(k) for k in m.keys[: m.num_volumes].tolist()} == expect
    # the hash still resolves every surviving volume
    r = m.knn_search(volume_center(np.array(sorted(expect))), k=1)
    assert np.all(r.count == 1)


def test_dump_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    m = VoxelMap()
    m.insert_points(rng.uniform(-3, 3, size=(500, 3)))
    path = tmp_path / "map.bin"
    m.dump_binary(path)
    assert path.stat().st_size == 13 * m.num_volumes + 3 * m.num_points
    m2 = VoxelMap.load_binary(path)
    assert np.array_equal(m2.decoded_points(), m.decoded_points())
    txt = tmp_path / "map.txt"
    m.export_text(txt)
    assert len(txt.read_text().splitlines()) == m.num_points
