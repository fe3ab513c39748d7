"""Road network: map files, compiled lanes/links, intersections and lights.

A map file is JSON with author-level entries (nodes, two-way roads,
buildings, light timing, sidewalks).  :func:`compile_map` derives the
directed lanes, the per-node connector links with their maneuver labels,
light groups, stop-line patches and spawn points.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path

import numpy as np

from ..geometry import Pose2D, polygon_is_convex_ccw, wrap_angle

GREEN, YELLOW, RED = 0, 1, 2

# maneuvers whose heading change falls in this band are ambiguous
AMBIGUOUS_BAND_DEG = (25.0, 55.0)
MAX_TURN_DEG = 150.0


class Command(IntEnum):
    FOLLOW = 0
    LEFT = 1
    RIGHT = 2
    STRAIGHT = 3


def classify_turn(delta: float, threshold_deg: float = 40.0) -> Command:
    t = math.radians(threshold_deg)
    if delta > t:
        return Command.LEFT
    if delta < -t:
        return Command.RIGHT
    return Command.STRAIGHT


@dataclass
class Node:
    id: str
    x: float
    y: float
    radius: float
    roundabout: bool = False
    ring_radius: float = 5.5

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class Lane:
    id: str
    from_node: str
    to_node: str
    points: np.ndarray
    width: float

    @property
    def heading(self) -> float:
        d = self.points[-1] - self.points[0]
        return math.atan2(d[1], d[0])

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass
class Link:
    id: str
    node: str
    in_lane: str
    out_lane: str
    points: np.ndarray
    maneuver: Command
    heading_change: float


@dataclass
class LightGroup:
    node: str
    approaches: list
    green: float
    yellow: float
    all_red: float
    offset: float = 0.0

    @property
    def slot(self) -> float:
        return self.green + self.yellow + self.all_red

    @property
    def cycle(self) -> float:
        return self.slot * len(self.approaches)

    def states(self, t: float) -> np.ndarray:
        """Light state per approach at time ``t`` (GREEN/YELLOW/RED)."""
        out = np.full(len(self.approaches), RED, dtype=np.int8)
        if self.cycle <= 0 or self.green + self.yellow <= 0:
            return out
        tau = math.fmod(t + self.offset, self.cycle)
        k = min(int(tau // self.slot), len(self.approaches) - 1)
        within = tau - k * self.slot
        if within < self.green:
            out[k] = GREEN
        elif within < self.green + self.yellow:
            out[k] = YELLOW
        return out


@dataclass
class Intersection:
    node: str
    center: np.ndarray
    radius: float
    zone_radius: float
    approaches: list
    links: list


@dataclass
class StopPatch:
    lane: str
    node: str
    polygon: np.ndarray


@dataclass
class SpawnPoint:
    lane: str
    s: float
    pose: Pose2D


@dataclass
class RoadMap:
    name: str
    lane_width: float
    nodes: dict
    roads: list
    lanes: dict
    links: dict
    intersections: dict
    lights: dict
    buildings: list
    stop_patches: list
    spawn_points: list
    sidewalks: list
    source: dict = field(default_factory=dict, repr=False)

    # -- queries ---------------------------------------------------------
    def links_from(self, lane_id: str) -> list:
        return [l for l in self._out_links.get(lane_id, [])]

    def link_between(self, in_lane: str, out_lane: str) -> Link:
        return self.links[f"{in_lane}|{out_lane}"]

    def light_states(self, t: float) -> dict:
        """Map approach lane id -> light state at time ``t``."""
        out = {}
        for group in self.lights.values():
            for lane, st in zip(group.approaches, group.states(t)):
                out[lane] = int(st)
        return out

    @property
    def bounds(self) -> tuple:
        pts = np.array([[n.x, n.y] for n in self.nodes.values()])
        lo = pts.min(axis=0) - 40.0
        hi = pts.max(axis=0) + 40.0
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1

    @property
    def total_lane_km(self) -> float:
        return sum(l.length for l in self.lanes.values()) / 1000.0

    def __post_init__(self):
        self._out_links = {}
        for link in self.links.values():
            self._out_links.setdefault(link.in_lane, []).append(link)
        for v in self._out_links.values():
            v.sort(key=lambda l: l.id)


# ---------------------------------------------------------------------------
# connector geometry

def _bezier(p0, d0, p3, d3, turn: float, n: int = 24) -> np.ndarray:
    chord = float(np.linalg.norm(p3 - p0))
    half = abs(turn) / 2.0
    if half < 1e-6:
        k = chord / 3.0
    else:
        k = (4.0 / 3.0) * math.tan(abs(turn) / 4.0) * chord / (2.0 * math.sin(half))
    p1 = p0 + d0 * k
    p2 = p3 - d3 * k
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def _unit(a: float) -> np.ndarray:
    return np.array([math.cos(a), math.sin(a)])


def _connector(node: Node, lane_in: Lane, lane_out: Lane) -> np.ndarray:
    p0, p3 = lane_in.points[-1], lane_out.points[0]
    h0, h3 = lane_in.heading, lane_out.heading
    if not node.roundabout:
        return _bezier(p0, _unit(h0), p3, _unit(h3), wrap_angle(h3 - h0))
    # counter-clockwise ring: enter on the approach's ccw side, exit on the cw side
    c = node.center
    a_arm_in = h0 + math.pi
    a_arm_out = h3
    enter = a_arm_in + math.radians(40.0)
    leave = a_arm_out - math.radians(40.0)
    sweep = (leave - enter) % (2 * math.pi)
    n_knots = max(1, int(math.ceil(sweep / math.radians(60.0))))
    knots = [(p0, h0)]
    for i in range(n_knots + 1):
        ang = enter + sweep * i / n_knots
        knots.append((c + node.ring_radius * _unit(ang), ang + math.pi / 2))
    knots.append((p3, h3))
    pieces = []
    for (q0, g0), (q1, g1) in zip(knots[:-1], knots[1:]):
        seg = _bezier(q0, _unit(g0), q1, _unit(g1), wrap_angle(g1 - g0))
        pieces.append(seg if not pieces else seg[1:])
    return np.concatenate(pieces)


def resample_polyline(points: np.ndarray, step: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(2, int(math.ceil(s[-1] / step)) + 1)
    q = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(q, s, points[:, 0]), np.interp(q, s, points[:, 1])], axis=1)


# ---------------------------------------------------------------------------
# compilation

def compile_map(src: dict) -> RoadMap:
    lw = float(src.get("lane_width", 3.5))
    nodes = {}
    for n in src["nodes"]:
        nodes[n["id"]] = Node(n["id"], float(n["x"]), float(n["y"]), float(n.get("radius", 7.0)),
                              bool(n.get("roundabout", False)), float(n.get("ring_radius", 5.5)))
    roads = []
    lanes = {}
    degree = {k: 0 for k in nodes}
    for r in src["roads"]:
        a, b = nodes[r["from"]], nodes[r["to"]]
        roads.append((a.id, b.id))
        degree[a.id] += 1
        degree[b.id] += 1
        for u, v in ((a, b), (b, a)):
            d = v.center - u.center
            length = float(np.linalg.norm(d))
            d = d / length
            right = np.array([d[1], -d[0]]) * lw / 2.0
            start = u.center + d * u.radius + right
            end = v.center - d * v.radius + right
            if length <= u.radius + v.radius + 5.0:
                raise ValueError(f"road {u.id}-{v.id} too short for its junctions")
            lid = f"{u.id}>{v.id}"
            lanes[lid] = Lane(lid, u.id, v.id, np.array([start, end]), lw)
    for k, deg in degree.items():
        if deg < 2:
            raise ValueError(f"node {k} is a dead end")

    thr = 40.0
    links = {}
    intersections = {}
    lights = {}
    light_cfg = src.get("lights", {})
    overrides = light_cfg.get("overrides", {})
    offsets = light_cfg.get("offsets", {})
    for nid, node in nodes.items():
        incoming = sorted([l for l in lanes.values() if l.to_node == nid],
                          key=lambda l: wrap_angle(l.heading + math.pi))
        outgoing = [l for l in lanes.values() if l.from_node == nid]
        is_junction = degree[nid] >= 3
        node_links = []
        for li in incoming:
            chosen = {}
            for lo in outgoing:
                if lo.to_node == li.from_node:
                    continue
                delta = wrap_angle(lo.heading - li.heading)
                adeg = abs(math.degrees(delta))
                if adeg > MAX_TURN_DEG:
                    continue
                if not is_junction:
                    man = Command.FOLLOW
                else:
                    if AMBIGUOUS_BAND_DEG[0] <= adeg <= AMBIGUOUS_BAND_DEG[1]:
                        continue
                    man = classify_turn(delta, thr)
                canon = {Command.LEFT: math.pi / 2, Command.RIGHT: -math.pi / 2}.get(man, 0.0)
                key = (abs(delta - canon), abs(delta), lo.id)
                if man not in chosen or key < chosen[man][0]:
                    chosen[man] = (key, lo, delta)
            for man, (_, lo, delta) in sorted(chosen.items()):
                pts = resample_polyline(_connector(node, li, lo), 0.5)
                link = Link(f"{li.id}|{lo.id}", nid, li.id, lo.id, pts, Command(man), delta)
                links[link.id] = link
                node_links.append(link.id)
        if is_junction:
            reached = {links[k].out_lane for k in node_links}
            for lo in outgoing:
                if lo.id not in reached:
                    raise ValueError(f"exit lane {lo.id} unreachable at junction {nid}")
            approaches = [l.id for l in incoming]
            intersections[nid] = Intersection(nid, node.center, node.radius, node.radius + 1.0,
                                              approaches, node_links)
            o = overrides.get(nid, {})
            lights[nid] = LightGroup(nid, approaches,
                                     float(o.get("green", light_cfg.get("green", 6.0))),
                                     float(o.get("yellow", light_cfg.get("yellow", 2.5))),
                                     float(o.get("all_red", light_cfg.get("all_red", 1.5))),
                                     float(offsets.get(nid, 0.0)))
    buildings = []
    for poly in src.get("buildings", []):
        p = np.asarray(poly, dtype=float)
        if not polygon_is_convex_ccw(p):
            raise ValueError("buildings must be convex counter-clockwise polygons")
        buildings.append(p)
    for nid, node in nodes.items():
        if node.roundabout:
            ang = np.arange(8) * math.pi / 4
            isl = node.ring_radius - 1.9
            buildings.append(node.center + isl * np.stack([np.cos(ang), np.sin(ang)], axis=1))

    stop_patches = []
    for inter in intersections.values():
        for lid in inter.approaches:
            lane = lanes[lid]
            end = lane.points[-1]
            d = end - lane.points[0]
            d = d / np.linalg.norm(d)
            left = np.array([-d[1], d[0]]) * lane.width / 2.0
            back = end - d * 1.0
            stop_patches.append(StopPatch(lid, inter.node, np.array([back - left, end - left, end + left, back + left])))

    spawn_points = []
    for lane in sorted(lanes.values(), key=lambda l: l.id):
        s = 12.0
        while s <= lane.length - 12.0:
            p = lane.points[0] + (lane.points[-1] - lane.points[0]) * s / lane.length
            spawn_points.append(SpawnPoint(lane.id, s, Pose2D(float(p[0]), float(p[1]), lane.heading)))
            s += 10.0

    sidewalks = [np.asarray(p, dtype=float) for p in src.get("sidewalks", [])]
    m = RoadMap(src.get("name", "map"), lw, nodes, roads, lanes, links, intersections, lights,
                buildings, stop_patches, spawn_points, sidewalks, src)
    return m


def load_map(name_or_path) -> RoadMap:
    """Load a shipped map by name (``town-a``) or a JSON map file by path."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        return compile_map(json.loads(p.read_text()))
    text = resources.files("lbw.world").joinpath("maps", f"{name_or_path}.json").read_text()
    return compile_map(json.loads(text))


def save_map_source(src: dict, path) -> None:
    Path(path).write_text(json.dumps(src, indent=1, sort_keys=True))
