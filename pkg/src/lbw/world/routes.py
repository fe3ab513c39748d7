"""Routes and their centreline geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .roadmap import Command, RoadMap


@dataclass
class Route:
    """Lane sequence; ``maneuvers[i]`` is taken between ``lanes[i]`` and ``lanes[i+1]``."""

    lanes: list
    maneuvers: list = field(default_factory=list)
    start_s: float = 0.0
    goal_s: float | None = None

    @classmethod
    def from_lanes(cls, roadmap: RoadMap, lanes, start_s: float = 0.0, goal_s=None) -> "Route":
        mans = [roadmap.link_between(a, b).maneuver for a, b in zip(lanes[:-1], lanes[1:])]
        return cls(list(lanes), mans, start_s, goal_s)

    def commands(self, roadmap: RoadMap) -> list:
        """Turn-by-turn commands at real intersections (bends excluded)."""
        out = []
        for a, b in zip(self.lanes[:-1], self.lanes[1:]):
            link = roadmap.link_between(a, b)
            if link.node in roadmap.intersections:
                out.append(link.maneuver)
        return out


@dataclass
class JunctionEvent:
    node: str
    maneuver: Command
    approach: str
    s_stop: float
    s_exit: float
    signalized: bool


class RoutePath:
    """Dense centreline of a route with arc length, curvature and junction events."""

    def __init__(self, roadmap: RoadMap, lanes):
        self.roadmap = roadmap
        self.lanes = []
        self.events = []
        self._pts = []
        self._len = 0.0
        self.points = np.zeros((0, 2))
        self._cache_n = -1
        self.s = np.zeros(0)
        for lane in lanes:
            self.append_lane(lane)

    def _add(self, pts: np.ndarray) -> None:
        if self._pts:
            last = self._pts[-1][-1]
            if np.allclose(pts[0], last):
                pts = pts[1:]
        if len(pts) == 0:
            return
        self._pts.append(pts)

    def append_lane(self, lane_id: str) -> None:
        m = self.roadmap
        if self.lanes:
            prev = self.lanes[-1]
            link = m.link_between(prev, lane_id)
            self._rebuild()
            s_stop = float(self.s[-1])
            self._add(link.points)
            self._rebuild()
            self.events.append(JunctionEvent(link.node, link.maneuver, prev, s_stop, float(self.s[-1]),
                                             link.node in m.intersections))
        lane = m.lanes[lane_id]
        n = max(2, int(math.ceil(lane.length / 0.5)) + 1)
        self._add(np.linspace(lane.points[0], lane.points[-1], n))
        self.lanes.append(lane_id)
        self._rebuild()

    def _rebuild(self) -> None:
        pts = np.concatenate(self._pts) if self._pts else np.zeros((0, 2))
        if len(pts) == len(self.points):
            return
        self.points = pts
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        d = np.diff(pts, axis=0)
        h = np.arctan2(d[:, 1], d[:, 0])
        self.headings = np.concatenate([h, h[-1:]]) if len(h) else np.zeros(len(pts))
        hu = np.unwrap(self.headings)
        ds = np.maximum(np.gradient(self.s), 1e-6) if len(pts) > 1 else np.ones(len(pts))
        kappa = np.abs(np.gradient(hu) / ds) if len(pts) > 1 else np.zeros(len(pts))
        # max over a +-1.5 m window so the speed profile sees the whole bend
        w = 3
        padded = np.pad(kappa, w, mode="edge")
        self.curvature = np.max(np.stack([padded[i:i + len(kappa)] for i in range(2 * w + 1)]), axis=0)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = min(max(int(np.searchsorted(self.s, s)), 1), len(self.s) - 1)
        s0, s1 = self.s[i - 1], self.s[i]
        t = (s - s0) / (s1 - s0) if s1 > s0 else 0.0
        return self.points[i - 1] + t * (self.points[i] - self.points[i - 1])

    def heading_at(self, s: float) -> float:
        i = min(int(np.searchsorted(self.s, s)), len(self.s) - 1)
        return float(self.headings[i])

    def project(self, xy, s_hint: float, back: float = 1.0, ahead: float = 4.0) -> tuple:
        """Nearest centreline point within a window around ``s_hint``: (s, lateral distance)."""
        sl = self.s
        lo = min(max(int(np.searchsorted(sl, s_hint - back)) - 1, 0), len(sl) - 2)
        hi = int(np.searchsorted(sl, s_hint + ahead)) + 1
        hi = min(max(hi, lo + 2), len(sl))
        if self._cache_n != len(sl):
            self._xs, self._ys, self._sl = self.points[:, 0].tolist(), self.points[:, 1].tolist(), sl.tolist()
            self._cache_n = len(sl)
        xs, ys, ss = self._xs, self._ys, self._sl
        px, py = float(xy[0]), float(xy[1])
        best = (math.inf, 0.0)
        for i in range(lo, hi - 1):
            ax, ay = xs[i], ys[i]
            abx, aby = xs[i + 1] - ax, ys[i + 1] - ay
            den = max(abx * abx + aby * aby, 1e-12)
            t = min(max(((px - ax) * abx + (py - ay) * aby) / den, 0.0), 1.0)
            d = math.hypot(ax + abx * t - px, ay + aby * t - py)
            if d < best[0]:
                best = (d, ss[i] + t * (ss[i + 1] - ss[i]))
        return best[1], best[0]

    def window(self, s0: float, s1: float, step: float = 1.0) -> tuple:
        """Sampled points between arc lengths ``s0`` and ``s1``."""
        s1 = min(s1, self.length)
        if s1 <= s0:
            return np.zeros((0, 2)), np.zeros(0)
        q = np.arange(s0, s1, step)
        pts = np.stack([np.interp(q, self.s, self.points[:, 0]), np.interp(q, self.s, self.points[:, 1])], axis=1)
        return pts, q

    def event_at(self, s: float):
        """The junction event whose connector contains ``s``, if any."""
        for ev in self.events:
            if ev.s_stop <= s <= ev.s_exit:
                return ev
        return None

    def next_event(self, s: float):
        for ev in self.events:
            if ev.s_exit >= s:
                return ev
        return None
