"""Noisy perception of surrounding agents: detection, tracking, speed and command estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bev import VisibilityMap
from .config import NoiseConfig, TrackerConfig
from .geometry import Pose2D, world_to_local, wrap_angle
from .world.roadmap import Command, RoadMap, classify_turn
from .world.sim import zone_update


@dataclass(frozen=True)
class DetectedAgent:
    track_id: int
    pose_estimate: Pose2D
    speed_estimate: float
    extent_estimate: tuple
    visible: bool
    timestamp: int
    kind: str = "vehicle"
    truth_id: int | None = None  # simulator id, for evaluation only


def detect(world, ego_id: int, vis: VisibilityMap, noise: NoiseConfig, rng: np.random.Generator) -> list:
    """One noisy detection per non-ego agent whose centroid cell is visible.

    Four normal draws are consumed per emitted detection, in agent order.
    """
    ego = world.agent(ego_id)
    out = []
    for a in world.agents:
        if a.id == ego_id:
            continue
        if not vis.point_visible(world_to_local(np.array([a.pose.x, a.pose.y]), ego.pose)):
            continue
        z = rng.standard_normal(4)
        pose = Pose2D(a.pose.x + noise.sxy * z[0], a.pose.y + noise.sxy * z[1],
                      a.pose.heading + noise.sheading * z[2])
        speed = max(0.0, a.speed + noise.sv * z[3])
        out.append(DetectedAgent(-1, pose, speed, tuple(a.extent), True, world.tick, a.kind, a.id))
    return out


@dataclass
class Track:
    track_id: int
    kind: str
    history: list = field(default_factory=list)
    misses: int = 0

    @property
    def last(self) -> DetectedAgent:
        return self.history[-1]

    def predict(self, tick: int) -> np.ndarray:
        """Constant-velocity position prediction at ``tick``."""
        p = np.array([self.last.pose_estimate.x, self.last.pose_estimate.y])
        if len(self.history) < 2:
            return p
        prev = self.history[-2]
        dt_ticks = self.last.timestamp - prev.timestamp
        vel = (p - np.array([prev.pose_estimate.x, prev.pose_estimate.y])) / dt_ticks
        return p + vel * (tick - self.last.timestamp)


@dataclass
class TrackerState:
    active: list = field(default_factory=list)
    finished: list = field(default_factory=list)
    next_id: int = 0
    config: TrackerConfig = field(default_factory=TrackerConfig)
    dt: float = 0.1

    def all_tracks(self) -> list:
        return sorted(self.finished + self.active, key=lambda t: t.track_id)


def _speed_estimate(track: Track, window: int, dt: float) -> float | None:
    h = track.history
    if len(h) < 2:
        return None
    last = h[-1]
    for ref in h[:-1]:
        if last.timestamp - ref.timestamp <= window:
            break
    span = (last.timestamp - ref.timestamp) * dt
    d = math.hypot(last.pose_estimate.x - ref.pose_estimate.x, last.pose_estimate.y - ref.pose_estimate.y)
    return d / span


def update_tracks(state: TrackerState, detections: list, tick: int | None = None) -> TrackerState:
    """Greedy nearest-neighbour association on constant-velocity predictions.

    Candidate pairs inside the gate are taken in order of distance, then
    lower track id, then detection order.  Unmatched detections open new
    tracks; a track missing more than ``max_miss`` consecutive ticks ends.
    """
    cfg = state.config
    if tick is None:
        tick = detections[0].timestamp if detections else (
            max((t.last.timestamp for t in state.active), default=-1) + 1)
    pairs = []
    for t in state.active:
        pred = t.predict(tick)
        for k, d in enumerate(detections):
            if d.kind != t.kind:
                continue
            dist = math.hypot(d.pose_estimate.x - pred[0], d.pose_estimate.y - pred[1])
            if dist <= cfg.gate_radius:
                pairs.append((dist, t.track_id, k, t))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    used_t, used_d = set(), set()
    for dist, tid, k, t in pairs:
        if tid in used_t or k in used_d:
            continue
        used_t.add(tid)
        used_d.add(k)
        _append(state, t, detections[k])
    survivors = []
    for t in state.active:
        if t.track_id in used_t:
            t.misses = 0
            survivors.append(t)
            continue
        t.misses += 1
        if t.misses > cfg.max_miss:
            state.finished.append(t)
        else:
            survivors.append(t)
    for k, d in enumerate(detections):
        if k in used_d:
            continue
        t = Track(state.next_id, d.kind)
        state.next_id += 1
        _append(state, t, d)
        survivors.append(t)
    state.active = survivors
    return state


def _append(state: TrackerState, track: Track, det: DetectedAgent) -> None:
    det = replace(det, track_id=track.track_id)
    track.history.append(det)
    v = _speed_estimate(track, state.config.speed_window, state.dt)
    if v is not None:
        track.history[-1] = replace(det, speed_estimate=v)


def close_tracks(state: TrackerState) -> list:
    """End every active track and return all tracks by id."""
    state.finished.extend(state.active)
    state.active = []
    return state.all_tracks()


# ---------------------------------------------------------------------------
# command inference

def infer_commands(track: Track, roadmap: RoadMap, cfg: TrackerConfig | None = None) -> list:
    """Per-entry commands for a whole track, resolved retrospectively.

    Outside intersection zones the command is follow-lane.  For each zone
    traversal the heading change from the entry pose is classified once the
    agent leaves the zone or has moved ``commit_distance`` from its entry;
    the result is back-filled to every entry of that traversal.  A traversal
    still undecided when the track ends stays ``None``.
    """
    cfg = cfg or TrackerConfig()
    n = len(track.history)
    out: list = [Command.FOLLOW] * n
    zone = None
    entry = None
    start = 0
    decided = None
    for k, det in enumerate(track.history):
        p = det.pose_estimate
        new_zone = zone_update((p.x, p.y), roadmap, zone, cfg.zone_hysteresis)
        if zone is not None and new_zone != zone:
            if decided is None:
                decided = classify_turn(wrap_angle(p.heading - entry.heading), cfg.turn_threshold_deg)
            for q in range(start, k):
                out[q] = decided
            zone = None
            new_zone = zone_update((p.x, p.y), roadmap, None, cfg.zone_hysteresis)
        if zone is None and new_zone is not None:
            zone, entry, start, decided = new_zone, p, k, None
        if zone is not None and decided is None:
            if math.hypot(p.x - entry.x, p.y - entry.y) > cfg.commit_distance:
                decided = classify_turn(wrap_angle(p.heading - entry.heading), cfg.turn_threshold_deg)
    if zone is not None:
        for q in range(start, n):
            out[q] = decided
    return out


def infer_command(track: Track, roadmap: RoadMap, cfg: TrackerConfig | None = None):
    """Command at the latest entry of ``track`` (``None`` while unresolved)."""
    if len(track.history) < 2:
        raise ValueError("command inference needs at least two history entries")
    return infer_commands(track, roadmap, cfg)[-1]
