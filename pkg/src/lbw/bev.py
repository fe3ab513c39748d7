"""Bird's-eye-view rasterisation, ray-cast visibility and agent-centric re-projection.

Grids are stored channel-first, ``data[c, i, j]``, with row 0 the far
(forward) edge.  Cell ``(i, j)`` has its centre at agent-frame

    x = (j - W // 2) * res,   y = (H - 1 - rows_behind - i) * res

so the viewer sits in the bottom-middle cell facing up-grid.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import BevConfig
from .geometry import (Pose2D, box_corners, local_to_world, point_segment_distance,
                       points_in_convex_polygon, segments_hit_convex_polygon,
                       transform_from_agent_frame, transform_to_agent_frame, world_to_local,
                       wrap_angle)
from .world.roadmap import GREEN, RED, YELLOW, RoadMap

ROAD, LANE_MARK, PEDESTRIAN, VEHICLE_CH, LIGHT_GREEN, LIGHT_YELLOW, LIGHT_RED = range(7)
N_CHANNELS = 7
CHANNEL_NAMES = ("road", "lane_marks", "pedestrians", "vehicles", "green", "yellow", "red")
_LIGHT_CHANNEL = {GREEN: LIGHT_GREEN, YELLOW: LIGHT_YELLOW, RED: LIGHT_RED}


@dataclass(frozen=True)
class BevGeometry:
    width: int = 128
    height: int = 128
    resolution: float = 0.25
    rows_behind: int = 24

    def __post_init__(self):
        if self.resolution <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("grid dimensions and resolution must be positive")
        if not 0 <= self.rows_behind < self.height:
            raise ValueError("rows_behind must lie inside the grid")

    @classmethod
    def from_config(cls, cfg: BevConfig) -> "BevGeometry":
        return cls(cfg.width, cfg.height, cfg.resolution, cfg.rows_behind)

    @property
    def viewer_cell(self) -> tuple:
        return self.height - 1 - self.rows_behind, self.width // 2

    def cell_centers(self) -> np.ndarray:
        """Agent-frame centres of all cells, shape (H, W, 2)."""
        return _centers(self).copy()

    def cell_of(self, xy) -> tuple:
        p = np.asarray(xy, dtype=float)
        j = np.floor(p[..., 0] / self.resolution + 0.5).astype(np.int64) + self.width // 2
        i = self.height - 1 - self.rows_behind - np.floor(p[..., 1] / self.resolution + 0.5).astype(np.int64)
        return i, j

    def in_grid(self, i, j):
        return (i >= 0) & (i < self.height) & (j >= 0) & (j < self.width)

    @property
    def max_range(self) -> float:
        r = self.resolution
        fx = (self.width // 2 + 1) * r
        fy = max(self.height - self.rows_behind, self.rows_behind + 1) * r
        return math.hypot(fx, fy)


@functools.lru_cache(maxsize=16)
def _centers(g: BevGeometry) -> np.ndarray:
    j = np.arange(g.width)
    i = np.arange(g.height)
    x = (j - g.width // 2) * g.resolution
    y = (g.height - 1 - g.rows_behind - i) * g.resolution
    xx, yy = np.meshgrid(x, y)
    out = np.stack([xx, yy], axis=-1)
    out.flags.writeable = False
    return out


@dataclass
class BevGrid:
    data: np.ndarray
    geometry: BevGeometry
    viewer_pose: Pose2D | None = None

    def __post_init__(self):
        g = self.geometry
        if self.data.shape != (N_CHANNELS, g.height, g.width):
            raise ValueError(f"grid shape {self.data.shape} does not match geometry")
        self.data = self.data.astype(bool, copy=False)

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNEL_NAMES.index(name)]

    def __eq__(self, other):
        return isinstance(other, BevGrid) and self.geometry == other.geometry and np.array_equal(self.data, other.data)


@dataclass
class VisibilityMap:
    data: np.ndarray
    geometry: BevGeometry
    viewer_pose: Pose2D | None = None

    def __post_init__(self):
        g = self.geometry
        if self.data.shape != (g.height, g.width):
            raise ValueError(f"visibility shape {self.data.shape} does not match geometry")
        self.data = self.data.astype(bool, copy=False)

    def __eq__(self, other):
        return (isinstance(other, VisibilityMap) and self.geometry == other.geometry
                and np.array_equal(self.data, other.data))

    def point_visible(self, xy) -> bool:
        """Visibility of the cell containing an agent-frame point; off-grid is invisible."""
        i, j = self.geometry.cell_of(np.asarray(xy, dtype=float))
        if not self.geometry.in_grid(i, j):
            return False
        return bool(self.data[i, j])


# ---------------------------------------------------------------------------
# static layers: rasterised once per map at a finer resolution, then sampled

class _StaticRaster:
    res = 0.125
    mark_half_width = 0.25

    def __init__(self, m: RoadMap):
        x0, y0, x1, y1 = m.bounds
        self.x0, self.y0 = x0, y0
        self.nx = int(math.ceil((x1 - x0) / self.res))
        self.ny = int(math.ceil((y1 - y0) / self.res))
        self.road = np.zeros((self.ny, self.nx), dtype=bool)
        self.mark = np.zeros((self.ny, self.nx), dtype=bool)
        lw = m.lane_width
        for a, b in m.roads:
            pa, pb = m.nodes[a].center, m.nodes[b].center
            self._capsule(self.road, pa, pb, lw, square=True)
            d = (pb - pa) / np.linalg.norm(pb - pa)
            self._capsule(self.mark, pa + d * m.nodes[a].radius, pb - d * m.nodes[b].radius,
                          self.mark_half_width, square=True)
        for node in m.nodes.values():
            self._disc(self.road, node.center, node.radius)
        for link in m.links.values():
            pts = link.points
            for k in range(len(pts) - 1):
                self._capsule(self.road, pts[k], pts[k + 1], lw / 2)
        for poly in m.buildings:
            self._polygon_clear(self.road, poly)
            self._polygon_clear(self.mark, poly)

    def _window(self, lo, hi):
        i0 = max(int(math.floor((lo[1] - self.y0) / self.res)), 0)
        i1 = min(int(math.ceil((hi[1] - self.y0) / self.res)) + 1, self.ny)
        j0 = max(int(math.floor((lo[0] - self.x0) / self.res)), 0)
        j1 = min(int(math.ceil((hi[0] - self.x0) / self.res)) + 1, self.nx)
        ys = self.y0 + (np.arange(i0, i1) + 0.5) * self.res
        xs = self.x0 + (np.arange(j0, j1) + 0.5) * self.res
        xx, yy = np.meshgrid(xs, ys)
        return (slice(i0, i1), slice(j0, j1)), np.stack([xx, yy], axis=-1)

    def _capsule(self, layer, a, b, half, square=False):
        a, b = np.asarray(a, float), np.asarray(b, float)
        lo = np.minimum(a, b) - half - self.res
        hi = np.maximum(a, b) + half + self.res
        win, pts = self._window(lo, hi)
        if square:
            d = b - a
            length = np.linalg.norm(d)
            u = d / length
            rel = pts - a
            along = rel[..., 0] * u[0] + rel[..., 1] * u[1]
            perp = np.abs(rel[..., 0] * -u[1] + rel[..., 1] * u[0])
            layer[win] |= (along >= 0) & (along <= length) & (perp <= half)
        else:
            layer[win] |= point_segment_distance(pts, a, b) <= half

    def _disc(self, layer, c, r):
        win, pts = self._window(c - r - self.res, c + r + self.res)
        layer[win] |= np.hypot(pts[..., 0] - c[0], pts[..., 1] - c[1]) <= r

    def _polygon_clear(self, layer, poly):
        win, pts = self._window(poly.min(axis=0), poly.max(axis=0))
        layer[win] &= ~points_in_convex_polygon(pts, poly)

    def sample(self, wxy: np.ndarray) -> tuple:
        j = np.floor((wxy[..., 0] - self.x0) / self.res).astype(np.int64)
        i = np.floor((wxy[..., 1] - self.y0) / self.res).astype(np.int64)
        ok = (i >= 0) & (i < self.ny) & (j >= 0) & (j < self.nx)
        i = np.clip(i, 0, self.ny - 1)
        j = np.clip(j, 0, self.nx - 1)
        return self.road[i, j] & ok, self.mark[i, j] & ok


def static_raster(m: RoadMap) -> _StaticRaster:
    cached = getattr(m, "_bev_static", None)
    if cached is None:
        cached = _StaticRaster(m)
        object.__setattr__(m, "_bev_static", cached)
    return cached


# ---------------------------------------------------------------------------
# primitive rasterisers (agent frame)

def _fill_polygon(plane: np.ndarray, g: BevGeometry, poly_local: np.ndarray) -> None:
    lo = poly_local.min(axis=0)
    hi = poly_local.max(axis=0)
    i_hi, j_lo = g.cell_of(lo)
    i_lo, j_hi = g.cell_of(hi)
    i0, i1 = max(int(i_lo) - 1, 0), min(int(i_hi) + 2, g.height)
    j0, j1 = max(int(j_lo) - 1, 0), min(int(j_hi) + 2, g.width)
    if i0 >= i1 or j0 >= j1:
        return
    pts = _centers(g)[i0:i1, j0:j1]
    plane[i0:i1, j0:j1] |= points_in_convex_polygon(pts, poly_local)


def _fill_disc(plane: np.ndarray, g: BevGeometry, c: np.ndarray, r: float) -> None:
    i_hi, j_lo = g.cell_of(c - r)
    i_lo, j_hi = g.cell_of(c + r)
    i0, i1 = max(int(i_lo) - 1, 0), min(int(i_hi) + 2, g.height)
    j0, j1 = max(int(j_lo) - 1, 0), min(int(j_hi) + 2, g.width)
    if i0 >= i1 or j0 >= j1:
        return
    pts = _centers(g)[i0:i1, j0:j1]
    plane[i0:i1, j0:j1] |= np.hypot(pts[..., 0] - c[0], pts[..., 1] - c[1]) <= r


def draw_vehicle(grid: BevGrid, viewer: Pose2D, pose: Pose2D, extent) -> None:
    """Rasterise one oriented vehicle rectangle into the vehicle channel."""
    corners = box_corners(pose.x, pose.y, pose.heading, *extent)
    _fill_polygon(grid.data[VEHICLE_CH], grid.geometry, world_to_local(corners, viewer))


def _resolve_lights(data: np.ndarray) -> None:
    # red wins over yellow wins over green where patches meet
    data[LIGHT_YELLOW] &= ~data[LIGHT_RED]
    data[LIGHT_GREEN] &= ~(data[LIGHT_RED] | data[LIGHT_YELLOW])


def _near(viewer: Pose2D, x: float, y: float, r: float) -> bool:
    return abs(x - viewer.x) <= r and abs(y - viewer.y) <= r


# ---------------------------------------------------------------------------
# public rendering

def render_static(roadmap: RoadMap, viewer: Pose2D, geometry: BevGeometry, light_phases: dict | None = None) -> BevGrid:
    g = geometry
    data = np.zeros((N_CHANNELS, g.height, g.width), dtype=bool)
    wxy = local_to_world(_centers(g), viewer)
    road, mark = static_raster(roadmap).sample(wxy)
    data[ROAD] = road
    data[LANE_MARK] = mark
    if light_phases:
        reach = g.max_range + 4.0
        for patch in roadmap.stop_patches:
            st = light_phases.get(patch.lane)
            if st is None:
                continue
            c = patch.polygon.mean(axis=0)
            if not _near(viewer, c[0], c[1], reach):
                continue
            _fill_polygon(data[_LIGHT_CHANNEL[st]], g, world_to_local(patch.polygon, viewer))
        _resolve_lights(data)
    return BevGrid(data, g, viewer)


def render_bev(world, roadmap: RoadMap, viewer: Pose2D, geometry: BevGeometry | None = None,
               exclude=(), gate: VisibilityMap | None = None) -> BevGrid:
    """Rasterise the scene around ``viewer``.

    ``exclude`` lists agent ids left out (typically the viewer itself).  With
    ``gate`` set, an agent is drawn only when the cell holding its centroid is
    visible in that map.
    """
    g = geometry or BevGeometry()
    if not viewer.is_finite():
        raise ValueError("viewer pose must be finite")
    grid = render_static(roadmap, viewer, g, world.light_phases)
    reach = g.max_range + 4.0
    for a in world.agents:
        if a.id in exclude or not _near(viewer, a.pose.x, a.pose.y, reach):
            continue
        if gate is not None and not gate.point_visible(world_to_local(np.array([a.pose.x, a.pose.y]), viewer)):
            continue
        if a.kind == "walker":
            c = world_to_local(np.array([a.pose.x, a.pose.y]), viewer)
            _fill_disc(grid.data[PEDESTRIAN], g, c, a.extent[0])
        else:
            draw_vehicle(grid, viewer, a.pose, a.extent)
    return grid


def occluders_for(world, roadmap: RoadMap, viewer: Pose2D, geometry: BevGeometry, viewer_id=None) -> list:
    """Occluding polygons in the viewer frame: other vehicles and buildings in range."""
    reach = geometry.max_range
    out = []
    for poly in roadmap.buildings:
        loc = world_to_local(poly, viewer)
        n = len(loc)
        if points_in_convex_polygon(np.zeros((1, 2)), loc)[0]:
            out.append(loc)
            continue
        d = min(float(point_segment_distance(np.zeros((1, 2)), loc[k], loc[(k + 1) % n])[0]) for k in range(n))
        if d <= reach:
            out.append(loc)
    for a in world.agents:
        if a.kind != "vehicle" or a.id == viewer_id:
            continue
        if not _near(viewer, a.pose.x, a.pose.y, reach + 4.0):
            continue
        out.append(world_to_local(a.corners(), viewer))
    return out


def visible_points(targets: np.ndarray, occluders: list) -> np.ndarray:
    """Line-of-sight from the origin to each agent-frame target.

    A target is hidden when the closed segment to it touches an occluder that
    does not itself contain the target.  Each occluder is first narrowed to
    the targets inside its angular span and beyond its nearest point; the
    exact segment test runs on that subset only.
    """
    t = np.asarray(targets, dtype=float).reshape(-1, 2)
    vis = np.ones(len(t), dtype=bool)
    if not occluders or len(t) == 0:
        return vis
    dist = np.hypot(t[:, 0], t[:, 1])
    origin = np.zeros(2)
    for poly in occluders:
        if points_in_convex_polygon(origin[None], poly)[0]:
            idx = np.nonzero(vis)[0]
        else:
            c = poly.mean(axis=0)
            rel = wrap_angle(np.arctan2(poly[:, 1], poly[:, 0]) - math.atan2(c[1], c[0]))
            right = poly[int(np.argmin(rel))]
            left = poly[int(np.argmax(rel))]
            n = len(poly)
            dmin = min(float(point_segment_distance(origin[None], poly[k], poly[(k + 1) % n])[0])
                       for k in range(n)) - 1e-7
            cand = vis & (dist >= dmin)
            tol = 1e-9 * dist * (abs(right[0]) + abs(right[1]) + abs(left[0]) + abs(left[1]) + 1.0)
            cand &= right[0] * t[:, 1] - right[1] * t[:, 0] >= -tol
            cand &= t[:, 0] * left[1] - t[:, 1] * left[0] >= -tol
            idx = np.nonzero(cand)[0]
        if len(idx) == 0:
            continue
        sub = t[idx]
        blocked = segments_hit_convex_polygon(origin, sub, poly) & ~points_in_convex_polygon(sub, poly)
        vis[idx[blocked]] = False
    return vis


def visibility_from_occluders(occluders: list, geometry: BevGeometry, viewer: Pose2D | None = None) -> VisibilityMap:
    g = geometry
    vis = visible_points(_centers(g).reshape(-1, 2), occluders).reshape(g.height, g.width)
    return VisibilityMap(vis, g, viewer)


def render_visibility(world, roadmap: RoadMap, ego: Pose2D, geometry: BevGeometry | None = None,
                      ego_id=None) -> VisibilityMap:
    g = geometry or BevGeometry()
    return visibility_from_occluders(occluders_for(world, roadmap, ego, g, ego_id), g, ego)


def render_ego_view(world, roadmap: RoadMap, ego_id: int, geometry: BevGeometry | None = None) -> tuple:
    """What the ego perceives: visibility map plus a BEV whose agents are visibility-gated."""
    g = geometry or BevGeometry()
    ego = world.agent(ego_id)
    vis = render_visibility(world, roadmap, ego.pose, g, ego_id)
    bev = render_bev(world, roadmap, ego.pose, g, exclude=(ego_id,), gate=vis)
    return bev, vis


# ---------------------------------------------------------------------------
# agent-centric re-projection

_SUB = np.array([[-0.25, -0.25], [-0.25, 0.25], [0.25, -0.25], [0.25, 0.25]])


def transform_bev(bev: BevGrid, vis: VisibilityMap, ego: Pose2D, observed: Pose2D) -> tuple:
    """Re-express an ego grid pair in the frame of an observed agent.

    Each set source cell is supersampled at four points, mapped into the
    observed frame and splatted into the target cell containing it.  Target
    cells whose centre maps back outside the source grid are zero in both
    outputs.
    """
    g = bev.geometry
    if vis.geometry != g:
        raise ValueError("grids must share one lattice")
    centers = _centers(g)
    offs = _SUB * g.resolution

    def splat(mask3: np.ndarray) -> np.ndarray:
        out = np.zeros_like(mask3, dtype=bool)
        cc, ii, jj = np.nonzero(mask3)
        if len(ii) == 0:
            return out
        p = (centers[ii, jj][:, None, :] + offs[None]).reshape(-1, 2)
        q = transform_to_agent_frame(p, ego, observed)
        ti, tj = g.cell_of(q)
        ok = g.in_grid(ti, tj)
        out[np.repeat(cc, 4)[ok], ti[ok], tj[ok]] = True
        return out

    back = transform_from_agent_frame(centers.reshape(-1, 2), ego, observed)
    si, sj = g.cell_of(back)
    inside = g.in_grid(si, sj).reshape(g.height, g.width)
    data = splat(bev.data) & inside[None]
    _resolve_lights(data)
    vdata = splat(vis.data[None])[0] & inside
    return BevGrid(data, g, observed), VisibilityMap(vdata, g, observed)


# ---------------------------------------------------------------------------
# debug image export

PALETTE = {
    "background": (30, 30, 30),
    "road": (90, 90, 90),
    "lane_marks": (230, 230, 230),
    "pedestrians": (150, 60, 200),
    "vehicles": (40, 90, 230),
    "green": (40, 200, 60),
    "yellow": (240, 210, 40),
    "red": (230, 40, 40),
    "ego": (230, 40, 230),
    "waypoint": (170, 140, 0),
    "visibility": (60, 200, 60),
}


def compose_image(bev: BevGrid, vis: VisibilityMap | None = None, waypoints=None,
                  draw_viewer: bool = True, extent=(2.2, 0.9)) -> np.ndarray:
    """RGB uint8 image (H, W, 3) of a grid pair in the debug palette."""
    g = bev.geometry
    img = np.empty((g.height, g.width, 3), dtype=float)
    img[:] = PALETTE["background"]
    for name in ("road", "lane_marks", "pedestrians", "vehicles", "green", "yellow", "red"):
        img[bev.channel(name)] = PALETTE[name]
    if vis is not None:
        img[vis.data] = 0.65 * img[vis.data] + 0.35 * np.array(PALETTE["visibility"])
    if draw_viewer:
        plane = np.zeros((g.height, g.width), dtype=bool)
        _fill_polygon(plane, g, box_corners(0.0, 0.0, math.pi / 2, *extent))
        img[plane] = PALETTE["ego"]
    if waypoints is not None:
        plane = np.zeros((g.height, g.width), dtype=bool)
        for w in np.asarray(waypoints, dtype=float).reshape(-1, 2):
            _fill_disc(plane, g, w, 0.4)
        img[plane] = PALETTE["waypoint"]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
            fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
