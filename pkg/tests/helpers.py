"""Shared random generators for tests."""

from __future__ import annotations

import numpy as np

from qlio.manifold import NavState, quat_exp


def random_rotvec(rng, max_angle=np.pi - 1e-6):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_state(rng, gmag=9.81):
    g = rng.normal(size=3)
    g[2] = abs(g[2]) + 0.5  # keep away from the chart singularity
    g *= gmag / np.linalg.norm(g)
    return NavState(
        t=rng.normal(size=3),
        q=quat_exp(random_rotvec(rng)),
        v=rng.normal(size=3),
        ba=rng.normal(scale=0.1, size=3),
        bw=rng.normal(scale=0.01, size=3),
        g=g,
    )


# an axis-aligned room: (normal, offset) with n . p + d = 0
ROOM_PLANES = [
    ((0.0, 0.0, 1.0), 0.0),
    ((0.0, 0.0, 1.0), -3.0),
    ((1.0, 0.0, 0.0), 3.0),
    ((1.0, 0.0, 0.0), -3.0),
    ((0.0, 1.0, 0.0), 3.0),
    ((0.0, 1.0, 0.0), -3.0),
]


def room_points(rng, n, margin=0.3):
    """Points uniformly spread over the room's six faces, away from edges."""
    out = []
    per = -(-n // len(ROOM_PLANES))
    for normal, d in ROOM_PLANES:
        axis = int(np.argmax(normal))
        lo = np.array([-3.0, -3.0, 0.0]) + margin
        hi = np.array([3.0, 3.0, 3.0]) - margin
        p = rng.uniform(lo, hi, size=(per, 3))
        p[:, axis] = -d
        out.append(p)
    pts = np.concatenate(out)
    return pts[rng.permutation(len(pts))[:n]]
