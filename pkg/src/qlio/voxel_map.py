"""Voxel map of 1 m volumes with 8-bit quantized point offsets.

Each volume keeps its center as three float64 values and up to 20 points as
int8 offsets from that center, in units of 4 mm. Nearest-neighbor search over
the 27 volumes around a query runs entirely on integers: int16 differences
(the inter-volume step is 250 counts) and int32 squared distances.

A float64 mode with the same interface stores raw coordinates instead; it
exists for ablation runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qlio.counters import OpCounters

RESOLUTION = 0.004  # m per code
MAX_CODE = 125
COUNTS_PER_VOLUME = 250  # codes spanning one 1 m volume edge
VOLUME_SIZE = 1.0
VOLUME_CAPACITY = 20
CENTER_BYTES = 3 * 8

# neighbor volume offsets in lexicographic order, so candidate position order
# equals ascending (volume key, slot) order
NEIGHBOR_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)

_KEY_BIAS = 1 << 20
_KEY_MASK = (1 << 21) - 1


class IndexTable:
    """Lookup tables between metric offsets and 8-bit codes.

    ``decode`` indexes a 251-entry table of ``code * 0.004``. ``encode`` does a
    binary search over the precomputed rounding edges ``(2c + 1) * 0.002``;
    inputs exactly on an edge round away from zero.
    """

    def __init__(self, resolution: float = RESOLUTION, max_code: int = MAX_CODE):
        self.resolution = resolution
        self.max_code = max_code
        self.codes = np.arange(-max_code, max_code + 1, dtype=np.int16)
        self.offsets = self.codes.astype(np.float64) * resolution
        self.edges = (2.0 * np.arange(max_code) + 1.0) * (0.5 * resolution)
        self.limit = max_code * resolution

    def encode(self, offsets) -> np.ndarray:
        x = np.asarray(offsets, dtype=np.float64)
        mag = np.abs(x)
        if np.any(mag > self.limit + 1e-12) or not np.all(np.isfinite(x)):
            bad = x[~(mag <= self.limit + 1e-12)]
            raise ValueError(f"offset {bad.ravel()[0]!r} outside [-{self.limit}, {self.limit}] m")
        code = np.searchsorted(self.edges, mag, side="right")
        return np.where(x < 0.0, -code, code).astype(np.int8)

    def decode(self, codes) -> np.ndarray:
        return self.offsets[np.asarray(codes, dtype=np.int16) + self.max_code]


INDEX_TABLE = IndexTable()


def encode_offset(offset) -> np.ndarray:
    """Encode a metric offset in [-0.5, 0.5]^3 into 8-bit codes."""
    return INDEX_TABLE.encode(offset)


def decode_offset(codes) -> np.ndarray:
    return INDEX_TABLE.decode(codes)


def volume_key(points) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / VOLUME_SIZE).astype(np.int64)


def volume_center(keys) -> np.ndarray:
    return (np.asarray(keys, dtype=np.float64) + 0.5) * VOLUME_SIZE


def decode_point(key, codes) -> np.ndarray:
    return decode_offset(codes) + volume_center(key)


def _pack(keys: np.ndarray) -> np.ndarray:
    k = (keys + _KEY_BIAS) & _KEY_MASK
    return (k[..., 0] << 42) | (k[..., 1] << 21) | k[..., 2]


def _mix(packed: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = packed.astype(np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


class _VolumeHash:
    """Open-addressed (linear probing) table from packed volume keys to rows."""

    def __init__(self, capacity: int = 1024):
        self._alloc(capacity)

    def _alloc(self, capacity: int) -> None:
        self.capacity = capacity
        self.mask = np.uint64(capacity - 1)
        self.keys = np.zeros(capacity, dtype=np.int64)
        self.rows = np.full(capacity, -1, dtype=np.int64)
        self.size = 0

    def lookup(self, packed: np.ndarray) -> np.ndarray:
        packed = np.asarray(packed, dtype=np.int64)
        out = np.full(packed.shape, -1, dtype=np.int64)
        if self.size == 0 or packed.size == 0:
            return out
        flat = packed.ravel()
        res = out.ravel()
        slot = _mix(flat) & self.mask
        pending = np.arange(flat.size)
        while pending.size:
            s = slot[pending].astype(np.int64)
            rows = self.rows[s]
            hit = (rows >= 0) & (self.keys[s] == flat[pending])
            res[pending[hit]] = rows[hit]
            more = (rows >= 0) & ~hit
            pending = pending[more]
            slot[pending] = (slot[pending] + np.uint64(1)) & self.mask
        return res.reshape(packed.shape)

    def insert(self, packed: int, row: int) -> None:
        if 2 * (self.size + 1) > self.capacity:
            self._grow()
        s = int(_mix(np.array([packed], dtype=np.int64))[0] & self.mask)
        while self.rows[s] >= 0:
            s = (s + 1) & int(self.mask)
        self.keys[s] = packed
        self.rows[s] = row
        self.size += 1

    def _grow(self) -> None:
        keys, rows = self.keys[self.rows >= 0], self.rows[self.rows >= 0]
        self._alloc(self.capacity * 2)
        for k, r in zip(keys.tolist(), rows.tolist()):
            self.insert(k, r)

    def rebuild(self, packed: np.ndarray) -> None:
        cap = 1024
        while 2 * len(packed) > cap:
            cap *= 2
        self._alloc(cap)
        for row, k in enumerate(packed.tolist()):
            self.insert(k, row)


@dataclass
class KnnResult:
    """Neighbors of one or many queries, nearest first.

    Arrays carry a leading query axis for batch searches. ``count`` tells how
    many of the ``k`` columns are filled; unfilled columns have ``slot == -1``.
    """

    points: np.ndarray  # (..., k, 3) decoded world coordinates
    dist2: np.ndarray  # (..., k) squared distance; int32 code units or float64 m^2
    keys: np.ndarray  # (..., k, 3) volume keys
    slots: np.ndarray  # (..., k) slot index inside the volume
    count: np.ndarray  # (...) number of valid neighbors


class VoxelMap:
    """Global map of 1 m volumes, each holding at most ``capacity`` points.

    ``quantized=True`` stores 8-bit offset codes; ``quantized=False`` stores
    float64 coordinates and is used for ablation. Writers (``insert_points``,
    ``remove_far``) need exclusive access; ``knn_search`` only reads.
    """

    def __init__(self, quantized: bool = True, capacity: int = VOLUME_CAPACITY, volume_size: float = VOLUME_SIZE):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not volume_size > 0.0:
            raise ValueError("volume_size must be positive")
        if quantized and volume_size != VOLUME_SIZE:
            # the 8-bit code range covers exactly one 1 m volume at 4 mm
            raise ValueError("the quantized map requires 1 m volumes")
        self.quantized = quantized
        self.capacity = capacity
        self.volume_size = float(volume_size)
        self._hash = _VolumeHash()
        self.keys = np.zeros((0, 3), dtype=np.int64)
        self.centers = np.zeros((0, 3), dtype=np.float64)
        self.counts = np.zeros(0, dtype=np.int64)
        dtype = np.int8 if quantized else np.float64
        self.data = np.zeros((0, capacity, 3), dtype=dtype)
        self._n = 0
        self.skipped = 0
        self.peak_points = 0
        self._reserve(1)

    # sizes ---------------------------------------------------------------

    @property
    def num_volumes(self) -> int:
        return self._n

    @property
    def num_points(self) -> int:
        return int(self.counts[: self._n].sum())

    def __len__(self) -> int:
        return self.num_points

    def payload_bytes(self) -> int:
        """Bytes of point payload: centers plus codes, or raw float64 points."""
        if self.quantized:
            return CENTER_BYTES * self._n + 3 * self.num_points
        return 3 * 8 * self.num_points

    # storage -------------------------------------------------------------

    def _key(self, points: np.ndarray) -> np.ndarray:
        if self.volume_size == VOLUME_SIZE:
            return volume_key(points)
        return np.floor(points / self.volume_size).astype(np.int64)

    def _center(self, keys: np.ndarray) -> np.ndarray:
        return (np.asarray(keys, dtype=np.float64) + 0.5) * self.volume_size

    def _reserve(self, n: int) -> None:
        cap = self.keys.shape[0]
        if n <= cap:
            return
        new = max(n, 2 * cap, 64)
        # one spare row at the end acts as an always-empty volume for gathers
        self.keys = np.concatenate([self.keys, np.zeros((new - cap, 3), np.int64)])
        self.centers = np.concatenate([self.centers, np.zeros((new - cap, 3))])
        self.counts = np.concatenate([self.counts, np.zeros(new - cap, np.int64)])
        self.data = np.concatenate([self.data, np.zeros((new - cap,) + self.data.shape[1:], self.data.dtype)])

    def _rows_for(self, keys: np.ndarray, create: bool) -> np.ndarray:
        packed = _pack(keys)
        rows = self._hash.lookup(packed)
        if create and np.any(rows < 0):
            missing = np.flatnonzero(rows < 0)
            uniq, first = np.unique(packed[missing], return_index=True)
            order = np.argsort(missing[first], kind="stable")
            self._reserve(self._n + len(uniq) + 1)
            for j in order:
                idx = missing[first[j]]
                row = self._n
                self.keys[row] = keys[idx]
                self.centers[row] = self._center(keys[idx])
                self.counts[row] = 0
                self._hash.insert(int(uniq[j]), row)
                self._n += 1
            rows = self._hash.lookup(packed)
        return rows

    def insert_points(self, points, counters: OpCounters | None = None) -> int:
        """Add world points; points landing in a full volume are skipped.

        Returns the number of points stored.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        keys = self._key(pts)
        rows = self._rows_for(keys, create=True)
        offsets = pts - self.centers[rows]
        if self.quantized:
            payload = INDEX_TABLE.encode(offsets)
            if counters is not None:
                counters.encodes += len(pts)
        else:
            payload = pts
        order = np.argsort(rows, kind="stable")
        sorted_rows = rows[order]
        starts = np.r_[0, np.flatnonzero(np.diff(sorted_rows)) + 1]
        group_start = np.repeat(starts, np.diff(np.r_[starts, len(order)]))
        rank = np.arange(len(order)) - group_start
        slot = self.counts[sorted_rows] + rank
        ok = slot < self.capacity
        self.data[sorted_rows[ok], slot[ok]] = payload[order[ok]]
        np.add.at(self.counts, sorted_rows[ok], 1)
        stored = int(ok.sum())
        self.skipped += len(pts) - stored
        self.peak_points = max(self.peak_points, self.num_points)
        return stored

    def remove_far(self, origin, radius: float) -> int:
        """Drop whole volumes whose center lies farther than ``radius`` from ``origin``."""
        if not radius > 0.0:
            raise ValueError("radius must be positive")
        n = self._n
        if n == 0 or np.isinf(radius):
            return 0
        d2 = np.sum((self.centers[:n] - np.asarray(origin, dtype=np.float64)) ** 2, axis=1)
        keep = d2 <= radius * radius
        removed = int(n - keep.sum())
        if removed == 0:
            return 0
        self.keys = self.keys[:n][keep].copy()
        self.centers = self.centers[:n][keep].copy()
        self.counts = self.counts[:n][keep].copy()
        self.data = self.data[:n][keep].copy()
        self._n = len(self.keys)
        self._hash.rebuild(_pack(self.keys))
        self._reserve(self._n + 1)
        return removed

    # queries -------------------------------------------------------------

    def decoded_points(self) -> np.ndarray:
        """All stored points as world coordinates, volume by volume."""
        n = self._n
        mask = np.arange(self.capacity)[None, :] < self.counts[:n, None]
        if self.quantized:
            pts = INDEX_TABLE.decode(self.data[:n]) + self.centers[:n, None, :]
        else:
            pts = self.data[:n]
        return pts[mask]

    def knn_search(self, query, k: int = 20, counters: OpCounters | None = None) -> KnnResult:
        """k nearest stored points among the 27 volumes around ``query``.

        Accepts one point ``(3,)`` or a batch ``(Q, 3)``. Ties are broken by
        ascending (volume key, slot). Fewer than ``k`` hits leave the tail of
        each row empty (see ``KnnResult.count``).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        nq = len(q)
        sentinel = self._n  # spare zero-count row kept by the writers

        qkeys = self._key(q)
        nb_keys = qkeys[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]
        rows = self._hash.lookup(_pack(nb_keys)) if self._n else np.full((nq, 27), -1, np.int64)
        rows = np.where(rows < 0, sentinel, rows)
        valid = np.arange(self.capacity)[None, None, :] < self.counts[rows][:, :, None]

        if self.quantized:
            qcode = INDEX_TABLE.encode(q - volume_center(qkeys)).astype(np.int16)
            step = (NEIGHBOR_OFFSETS * COUNTS_PER_VOLUME).astype(np.int16)
            cand = self.data[rows].astype(np.int16)
            delta = qcode[:, None, None, :] - cand - step[None, :, None, :]
            d = delta.astype(np.int32)
            dist = np.einsum("qnsc,qnsc->qns", d, d, dtype=np.int32).reshape(nq, -1)
            span = 27 * self.capacity
            order_key = dist.astype(np.int64) * span + np.arange(span, dtype=np.int64)[None, :]
            order_key[~valid.reshape(nq, -1)] = np.iinfo(np.int64).max
            if k < span:
                part = np.argpartition(order_key, k - 1, axis=1)[:, :k]
                sel = np.take_along_axis(part, np.argsort(np.take_along_axis(order_key, part, 1), axis=1), 1)
            else:
                sel = np.argsort(order_key, axis=1)
            if counters is not None:
                counters.encodes += nq
        else:
            cand = self.data[rows]
            delta = q[:, None, None, :] - cand
            dist = np.einsum("qnsc,qnsc->qns", delta, delta).reshape(nq, -1)
            dist[~valid.reshape(nq, -1)] = np.inf
            sel = np.argsort(dist, axis=1, kind="stable")[:, :k]

        width = sel.shape[1]
        flat_valid = valid.reshape(nq, -1)
        ok = np.take_along_axis(flat_valid, sel, 1)
        nb = sel // self.capacity
        slots = sel % self.capacity
        sel_rows = np.take_along_axis(rows, nb, 1)
        out_keys = qkeys[:, None, :] + NEIGHBOR_OFFSETS[nb]
        if self.quantized:
            codes = self.data[sel_rows, slots]
            pts = INDEX_TABLE.decode(codes) + self.centers[sel_rows]
        else:
            pts = self.data[sel_rows, slots].copy()
        d2 = np.take_along_axis(dist, sel, 1)
        count = ok.sum(axis=1)

        if width < k:
            pad = k - width
            pts = np.concatenate([pts, np.zeros((nq, pad, 3))], 1)
            d2 = np.concatenate([d2, np.zeros((nq, pad), d2.dtype)], 1)
            out_keys = np.concatenate([out_keys, np.zeros((nq, pad, 3), np.int64)], 1)
            slots = np.concatenate([slots, np.zeros((nq, pad), slots.dtype)], 1)
            ok = np.concatenate([ok, np.zeros((nq, pad), bool)], 1)
        slots = np.where(ok, slots, -1)
        pts[~ok] = 0.0
        d2 = np.where(ok, d2, 0)

        if counters is not None:
            counters.distance_ops += nq * 27 * self.capacity
            counters.sorts += nq
            if self.quantized:
                counters.decodes += int(count.sum())

        result = KnnResult(points=pts, dist2=d2, keys=out_keys, slots=slots, count=count)
        if single:
            n = int(count[0])
            return KnnResult(
                points=pts[0, :n], dist2=d2[0, :n], keys=out_keys[0, :n], slots=slots[0, :n], count=count[0]
            )
        return result

    # export --------------------------------------------------------------

    def dump_binary(self, path) -> None:
        """Write volumes as little-endian records: i, j, k (int32), count (uint8), codes."""
        if not self.quantized:
            raise ValueError("binary dump is defined for the quantized map only")
        with open(path, "wb") as fh:
            for row in range(self._n):
                i, j, k = (int(v) for v in self.keys[row])
                c = int(self.counts[row])
                fh.write(struct.pack("<iiiB", i, j, k, c))
                fh.write(self.data[row, :c].astype("<i1").tobytes())

    @classmethod
    def load_binary(cls, path) -> VoxelMap:
        raw = Path(path).read_bytes()
        m = cls(quantized=True)
        pos = 0
        while pos < len(raw):
            i, j, k, c = struct.unpack_from("<iiiB", raw, pos)
            pos += 13
            codes = np.frombuffer(raw, dtype="<i1", count=3 * c, offset=pos).reshape(c, 3)
            pos += 3 * c
            row = int(m._rows_for(np.array([[i, j, k]], dtype=np.int64), create=True)[0])
            m.data[row, :c] = codes
            m.counts[row] = c
        m.peak_points = m.num_points
        return m

    def export_text(self, path) -> None:
        pts = self.decoded_points()
        with open(path, "w") as fh:
            for x, y, z in pts:
                fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
