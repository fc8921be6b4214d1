"""Geometry and kinematics shared by mining, guidance, sampling and metrics.

Positions are plain ``numpy`` arrays whose last axis holds ``(x, y)`` in
meters.  Every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

# boundary tolerance for polygon membership (meters)
BOUNDARY_TOL = 1e-9


class InvalidInput(ValueError):
    """Raised for non-finite or structurally invalid inputs."""


class EmptyProfile(InvalidInput):
    """Raised when a track is too short to differentiate."""


def normalize_yaw(yaw):
    """Wrap angle(s) to ``(-pi, pi]``."""
    if np.ndim(yaw) == 0:
        y = math.remainder(float(yaw), 2.0 * math.pi)
        return math.pi if y <= -math.pi else y
    y = np.pi - np.mod(np.pi - np.asarray(yaw, dtype=float), 2.0 * np.pi)
    return y


def _finite(arr, what="input"):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"non-finite {what}")
    return arr


def rotation(yaw) -> np.ndarray:
    """Rotation matrix (or stack of matrices) for ``yaw``."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        _finite([self.x, self.y, self.yaw], "pose")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    yaw: float
    extent: tuple[float, float]  # (length, width)

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise InvalidInput("box extent must be positive")

    def corners(self) -> np.ndarray:
        return box_corners(np.asarray(self.center, float), self.yaw, self.extent)


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """One agent over the scene timeline (history followed by future)."""

    agent_id: int
    extent: tuple[float, float]
    positions: np.ndarray  # (T, 2)
    yaws: np.ndarray  # (T,)
    valid: np.ndarray  # (T,) bool

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        yaws = np.asarray(self.yaws, dtype=float).reshape(-1)
        valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if not (len(pos) == len(yaws) == len(valid)):
            raise InvalidInput(f"agent {self.agent_id}: poses and valid mask lengths differ")
        if len(self.extent) != 2 or min(self.extent) <= 0:
            raise InvalidInput(f"agent {self.agent_id}: extent must be two positive numbers")
        _finite(pos, "positions")
        _finite(yaws, "yaws")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "yaws", normalize_yaw(yaws))
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))

    def __len__(self):
        return len(self.positions)

    def pose(self, t: int) -> Pose:
        return Pose(self.positions[t, 0], self.positions[t, 1], self.yaws[t])


@dataclass(frozen=True, eq=False)
class DrivableArea:
    """Union of simple polygons minus optional holes."""

    polygons: tuple = ()
    holes: tuple = ()

    def __post_init__(self):
        polys = tuple(_check_polygon(p) for p in self.polygons)
        holes = tuple(_check_polygon(p) for p in self.holes)
        object.__setattr__(self, "polygons", polys)
        object.__setattr__(self, "holes", holes)

    @property
    def empty(self) -> bool:
        return not self.polygons

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """All boundary segments (outer and hole) as ``(starts, ends)``."""
        rings = self.polygons + self.holes
        if not rings:
            return np.zeros((0, 2)), np.zeros((0, 2))
        starts = np.concatenate(rings)
        ends = np.concatenate([np.roll(r, -1, axis=0) for r in rings])
        return starts, ends


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    agents: list
    dt: float
    drivable: DrivableArea = field(default_factory=DrivableArea)
    history_len: int = 0
    future_len: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidInput("dt must be positive")
        if not self.agents or self.agents[0].agent_id != 0:
            raise InvalidInput("ego (id 0) absent")
        lengths = {len(a) for a in self.agents}
        if len(lengths) != 1:
            raise InvalidInput("tracks do not share one timeline length")
        (T,) = lengths
        if self.history_len + self.future_len != T:
            raise InvalidInput(
                f"history_len + future_len = {self.history_len + self.future_len} "
                f"but tracks have {T} steps"
            )
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise InvalidInput("agent ids are not unique")

    @property
    def ego(self) -> AgentTrack:
        return self.agents[0]

    @property
    def num_steps(self) -> int:
        return len(self.agents[0])

    def agent(self, agent_id: int) -> AgentTrack:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    def index_of(self, agent_id: int) -> int:
        for i, a in enumerate(self.agents):
            if a.agent_id == agent_id:
                return i
        raise KeyError(agent_id)


class KinematicsProfile(NamedTuple):
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray


def kinematics(positions, dt: float) -> KinematicsProfile:
    """Forward-difference velocity, acceleration and jerk.

    Series that need more samples than are available come back empty
    (shape ``(0, 2)``).
    """
    pos = _finite(positions, "positions").reshape(-1, 2)
    if dt <= 0:
        raise InvalidInput("dt must be positive")
    if len(pos) < 2:
        raise EmptyProfile("need at least 2 positions")
    vel = (pos[1:] - pos[:-1]) / dt
    acc = (vel[1:] - vel[:-1]) / dt
    jerk = (acc[1:] - acc[:-1]) / dt
    return KinematicsProfile(vel, acc, jerk)


def local_to_world(local_positions, anchor: Pose) -> np.ndarray:
    pts = _finite(local_positions, "positions")
    return pts @ rotation(anchor.yaw).T + anchor.position


def world_to_local(world_positions, anchor: Pose) -> np.ndarray:
    pts = _finite(world_positions, "positions")
    return (pts - anchor.position) @ rotation(anchor.yaw)


# ---------------------------------------------------------------- boxes


def box_corners(center, yaw, extent) -> np.ndarray:
    """Corners (counter-clockwise) of one box, shape ``(4, 2)``."""
    hl, hw = extent[0] / 2.0, extent[1] / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ rotation(yaw).T + np.asarray(center, float)


def obb_overlap_arrays(ca, yaw_a, ext_a, cb, yaw_b, ext_b) -> np.ndarray:
    """Vectorised separating-axis test; all arguments broadcast.

    ``ca``/``cb`` have a trailing axis of 2, ``ext_*`` a trailing axis of
    (length, width).  Touching boxes count as overlapping.
    """
    ca, cb = np.asarray(ca, float), np.asarray(cb, float)
    ext_a, ext_b = np.asarray(ext_a, float), np.asarray(ext_b, float)
    yaw_a, yaw_b = np.asarray(yaw_a, float), np.asarray(yaw_b, float)
    d = cb - ca
    ua = np.stack([np.cos(yaw_a), np.sin(yaw_a)], -1)
    va = np.stack([-np.sin(yaw_a), np.cos(yaw_a)], -1)
    ub = np.stack([np.cos(yaw_b), np.sin(yaw_b)], -1)
    vb = np.stack([-np.sin(yaw_b), np.cos(yaw_b)], -1)
    hla, hwa = ext_a[..., 0] / 2, ext_a[..., 1] / 2
    hlb, hwb = ext_b[..., 0] / 2, ext_b[..., 1] / 2

    def dot(p, q):
        return p[..., 0] * q[..., 0] + p[..., 1] * q[..., 1]

    overlap = np.ones(np.broadcast_shapes(d.shape[:-1], hla.shape, hlb.shape), bool)
    for axis in (ua, va, ub, vb):
        ra = hla * np.abs(dot(ua, axis)) + hwa * np.abs(dot(va, axis))
        rb = hlb * np.abs(dot(ub, axis)) + hwb * np.abs(dot(vb, axis))
        overlap &= np.abs(dot(d, axis)) <= ra + rb
    return overlap


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    return bool(obb_overlap_arrays(a.center, a.yaw, a.extent, b.center, b.yaw, b.extent))


# ------------------------------------------------------------- polygons


def _check_polygon(poly) -> np.ndarray:
    pts = _finite(poly, "polygon").reshape(-1, 2)
    if len(pts) >= 2 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise InvalidInput("polygon needs at least 3 vertices")
    nxt = np.roll(pts, -1, axis=0)
    area2 = np.sum(pts[:, 0] * nxt[:, 1] - nxt[:, 0] * pts[:, 1])
    if abs(area2) <= 1e-12:
        raise InvalidInput("polygon vertices are collinear")
    if _self_intersects(pts):
        raise InvalidInput("polygon self-intersects")
    return pts


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(p1, p2, q1, q2) -> bool:
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True

    def on(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    return (
        (d1 == 0 and on(q1, q2, p1))
        or (d2 == 0 and on(q1, q2, p2))
        or (d3 == 0 and on(p1, p2, q1))
        or (d4 == 0 and on(p1, p2, q2))
    )


def _self_intersects(pts: np.ndarray) -> bool:
    n = len(pts)
    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            # adjacent edges share a vertex by construction
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(a1, a2, pts[j], pts[(j + 1) % n]):
                return True
    return False


def _segment_distance(points, starts, ends):
    """Distance from each point to each segment: ``(..., E)`` plus nearest points."""
    p = np.asarray(points, float)[..., None, :]
    ab = ends - starts
    ap = p - starts
    denom = np.sum(ab * ab, -1)
    t = np.clip(np.sum(ap * ab, -1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    nearest = starts + t[..., None] * ab
    diff = p - nearest
    return np.sqrt(np.sum(diff * diff, -1)), nearest


def _ring_parity(points, ring) -> np.ndarray:
    px, py = points[..., 0:1], points[..., 1:2]
    a, b = ring, np.roll(ring, -1, axis=0)
    ax, ay, by = a[:, 0], a[:, 1], b[:, 1]
    dy = by - ay
    # horizontal edges never straddle, so their slope is never used
    slope = (b[:, 0] - ax) / np.where(dy == 0, 1.0, dy)
    straddle = (ay > py) != (by > py)
    crossings = straddle & (px < ax + (py - ay) * slope)
    return (np.count_nonzero(crossings, axis=-1) % 2) == 1


def _on_ring(points, ring) -> np.ndarray:
    d, _ = _segment_distance(points, ring, np.roll(ring, -1, axis=0))
    return np.any(d <= BOUNDARY_TOL, axis=-1)


def _refine(mask, pts, fn, where):
    """Evaluate ``fn`` only on the points selected by ``where``."""
    flat_mask = mask.reshape(-1).copy()
    sel = where.reshape(-1)
    if sel.any():
        flat_mask[sel] = fn(pts.reshape(-1, 2)[sel])
    return flat_mask.reshape(mask.shape)


def points_in_polygon(points, polygon) -> np.ndarray:
    """Even-odd membership of ``points`` (``(..., 2)``); boundary counts as inside."""
    pts = np.asarray(points, float)
    ring = np.asarray(polygon, float)
    parity = _ring_parity(pts, ring)
    return _refine(parity, pts, lambda q: _on_ring(q, ring), ~parity)


def points_in_drivable(points, area: DrivableArea) -> np.ndarray:
    pts = np.asarray(points, float)
    inside = np.zeros(pts.shape[:-1], bool)
    for ring in area.polygons:
        inside |= points_in_polygon(pts, ring)
    for ring in area.holes:
        # strictly inside a hole: odd parity and not on its boundary
        strict = _ring_parity(pts, ring) & inside
        strict = _refine(strict, pts, lambda q: ~_on_ring(q, ring), strict)
        inside &= ~strict
    return inside


def point_in_drivable(p, area: DrivableArea) -> bool:
    return bool(points_in_drivable(np.asarray(p, float), area))


def offroad_distance(points, area: DrivableArea):
    """Distance of each point to the drivable area (0 when on it).

    Returns ``(distance, nearest_boundary_point)``; the nearest point is
    the query point itself wherever the distance is 0.
    """
    pts = np.asarray(points, float)
    off = ~points_in_drivable(pts, area)
    dist = np.zeros(pts.shape[:-1])
    near = pts.copy()
    if off.any():
        starts, ends = area.edges
        q = pts[off]
        d, nearest = _segment_distance(q, starts, ends)
        k = np.argmin(d, axis=-1)
        dist[off] = d[np.arange(len(q)), k]
        near[off] = nearest[np.arange(len(q)), k]
    return dist, near


def as_positions(seq: Sequence) -> np.ndarray:
    return _finite(seq, "positions").reshape(-1, 2)
