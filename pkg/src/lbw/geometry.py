"""Planar geometry: poses, frame changes and convex-polygon predicates.

Conventions
-----------
World frame: x east, y north, heading counter-clockwise from +x.
Agent frame: x to the agent's right, y forward.  Both frames are right
handed, so a positive rotation is a left turn in either.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    if isinstance(a, float):
        w = math.fmod(a + math.pi, 2.0 * math.pi)
        w = w + 2.0 * math.pi if w < 0 else w
        w -= math.pi
        return math.pi if w == -math.pi else w
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.x, self.y, self.heading))


def world_to_local(points, pose: Pose2D) -> np.ndarray:
    """Express world points (..., 2) in the agent frame of ``pose``."""
    p = np.asarray(points, dtype=float)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    dx = p[..., 0] - pose.x
    dy = p[..., 1] - pose.y
    return np.stack([dx * s - dy * c, dx * c + dy * s], axis=-1)


def local_to_world(points, pose: Pose2D) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    x, y = p[..., 0], p[..., 1]
    return np.stack([pose.x + x * s + y * c, pose.y - x * c + y * s], axis=-1)


def relative_pose(ego: Pose2D, observed: Pose2D) -> tuple[float, float, float]:
    """Location ``l`` and heading ``alpha`` of ``observed`` in the ego frame."""
    lx, ly = world_to_local(np.array([observed.x, observed.y]), ego)
    alpha = wrap_angle(observed.heading - ego.heading)
    return float(lx), float(ly), alpha


def agent_frame_matrix(ego: Pose2D, observed: Pose2D) -> np.ndarray:
    """Homogeneous 3x3 map from ego-frame to observed-agent-frame coordinates.

    The matrix is the product ``R(alpha) @ T(l)``: first translate so the
    observed agent sits at the origin, then rotate its heading onto +y.
    """
    lx, ly, alpha = relative_pose(ego, observed)
    c, s = math.cos(alpha), math.sin(alpha)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    trans = np.array([[1.0, 0.0, -lx], [0.0, 1.0, -ly], [0.0, 0.0, 1.0]])
    return rot @ trans


def transform_to_agent_frame(points, ego: Pose2D, observed: Pose2D) -> np.ndarray:
    """Map ego-frame positions (..., 2) into the observed agent's frame."""
    p = np.asarray(points, dtype=float)
    lx, ly, alpha = relative_pose(ego, observed)
    c, s = math.cos(alpha), math.sin(alpha)
    dx = p[..., 0] - lx
    dy = p[..., 1] - ly
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def transform_from_agent_frame(points, ego: Pose2D, observed: Pose2D) -> np.ndarray:
    """Inverse of :func:`transform_to_agent_frame`."""
    p = np.asarray(points, dtype=float)
    lx, ly, alpha = relative_pose(ego, observed)
    c, s = math.cos(alpha), math.sin(alpha)
    x, y = p[..., 0], p[..., 1]
    return np.stack([c * x - s * y + lx, s * x + c * y + ly], axis=-1)


def box_corners(cx: float, cy: float, heading: float, half_length: float, half_width: float) -> np.ndarray:
    """Counter-clockwise corners (4, 2) of an oriented rectangle in world coordinates."""
    c, s = math.cos(heading), math.sin(heading)
    f = np.array([c, s]) * half_length
    l = np.array([-s, c]) * half_width
    ctr = np.array([cx, cy])
    return np.array([ctr + f - l, ctr + f + l, ctr - f + l, ctr - f - l])


def polygon_is_convex_ccw(poly: np.ndarray) -> bool:
    p = np.asarray(poly, dtype=float)
    e = np.roll(p, -1, axis=0) - p
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return bool(np.all(cross > 0))


def points_in_convex_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Closed point-in-polygon test for a CCW convex polygon, vectorised over points."""
    p = np.asarray(points, dtype=float)
    inside = np.ones(p.shape[:-1], dtype=bool)
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        cross = (b[0] - a[0]) * (p[..., 1] - a[1]) - (b[1] - a[1]) * (p[..., 0] - a[0])
        inside &= cross >= 0.0
    return inside


def point_segment_distance(points: np.ndarray, a, b) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    a = np.asarray(a, dtype=float)
    ab = np.asarray(b, dtype=float) - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(p[..., 0] - a[0], p[..., 1] - a[1])
    t = ((p[..., 0] - a[0]) * ab[0] + (p[..., 1] - a[1]) * ab[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(p[..., 0] - (a[0] + t * ab[0]), p[..., 1] - (a[1] + t * ab[1]))


def segments_hit_convex_polygon(origin, targets: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Closed test of segments ``origin -> targets[i]`` against a convex polygon.

    A segment hits the polygon when an endpoint lies inside it or the
    segment properly or improperly crosses one of its edges.
    """
    o = np.asarray(origin, dtype=float)
    t = np.asarray(targets, dtype=float)
    hit = points_in_convex_polygon(t, poly)
    if points_in_convex_polygon(o[None], poly)[0]:
        hit[...] = True
        return hit
    dx = t[..., 0] - o[0]
    dy = t[..., 1] - o[1]
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        # orientation of edge endpoints relative to the segment
        d1 = dx * (a[1] - o[1]) - dy * (a[0] - o[0])
        d2 = dx * (b[1] - o[1]) - dy * (b[0] - o[0])
        # orientation of segment endpoints relative to the edge
        d3 = ex * (o[1] - a[1]) - ey * (o[0] - a[0])
        d4 = ex * (t[..., 1] - a[1]) - ey * (t[..., 0] - a[0])
        hit |= (d1 * d2 <= 0.0) & (d3 * d4 <= 0.0) & ~((d1 == 0.0) & (d2 == 0.0))
    return hit


def convex_polygons_overlap(p: np.ndarray, q: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons (touching counts as overlap)."""
    for poly in (p, q):
        n = len(poly)
        for k in range(n):
            e = poly[(k + 1) % n] - poly[k]
            axis = np.array([-e[1], e[0]])
            pa = p @ axis
            qa = q @ axis
            if pa.max() < qa.min() or qa.max() < pa.min():
                return False
    return True


def disc_polygon_overlap(center, radius: float, poly: np.ndarray) -> bool:
    c = np.asarray(center, dtype=float)
    if points_in_convex_polygon(c[None], poly)[0]:
        return True
    n = len(poly)
    d = min(float(point_segment_distance(c[None], poly[k], poly[(k + 1) % n])[0]) for k in range(n))
    return d <= radius
