"""Ego and watched-agent demonstration datasets, refurbishment and file I/O."""
from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bev import (N_CHANNELS, VEHICLE_CH, BevGeometry, BevGrid, VisibilityMap, draw_vehicle, occluders_for,
                  render_bev, transform_bev, visibility_from_occluders, visible_points)
from .config import Config, NoiseConfig
from .geometry import Pose2D, world_to_local
from .perception import TrackerState, close_tracks, detect, infer_commands, update_tracks
from .world.roadmap import Command, RoadMap
from .world.sim import VEHICLE, World

MAGIC = b"LBWD"
SCHEMA_VERSION = 1
EGO, WATCHED = "ego", "watched"


@dataclass(eq=False)
class Sample:
    """One (state, waypoints) pair; grids are kept bit-packed."""

    bev_bits: np.ndarray
    vis_bits: np.ndarray
    speed: float
    command: Command
    waypoints: np.ndarray
    source: str = EGO
    track_id: int = -1
    refurbished: bool = False
    episode_id: int = 0
    tick: int = 0
    pooled: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.source not in (EGO, WATCHED):
            raise ValueError(f"unknown sample source {self.source!r}")
        if self.source == EGO and self.refurbished:
            raise ValueError("ego samples are never refurbished")
        self.command = Command(int(self.command))
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if not np.all(np.isfinite(self.waypoints)):
            raise ValueError("waypoints must be finite")

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (np.array_equal(self.bev_bits, other.bev_bits) and np.array_equal(self.vis_bits, other.vis_bits)
                and np.array_equal(self.waypoints, other.waypoints)
                and (self.speed, self.command, self.source, self.track_id, self.refurbished, self.episode_id,
                     self.tick) == (other.speed, other.command, other.source, other.track_id, other.refurbished,
                                    other.episode_id, other.tick))

    @classmethod
    def from_grids(cls, bev: BevGrid, vis: VisibilityMap, **kw) -> "Sample":
        return cls(np.packbits(bev.data.ravel()), np.packbits(vis.data.ravel()), **kw)

    def bev(self, g: BevGeometry) -> BevGrid:
        n = N_CHANNELS * g.height * g.width
        return BevGrid(np.unpackbits(self.bev_bits, count=n).astype(bool).reshape(N_CHANNELS, g.height, g.width), g)

    def vis(self, g: BevGeometry) -> VisibilityMap:
        n = g.height * g.width
        return VisibilityMap(np.unpackbits(self.vis_bits, count=n).astype(bool).reshape(g.height, g.width), g)


@dataclass
class Dataset:
    map_id: str
    config_hash: str
    geometry: BevGeometry = field(default_factory=BevGeometry)
    num_waypoints: int = 5
    samples: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def n_ego(self) -> int:
        return sum(s.source == EGO for s in self.samples)

    @property
    def n_watched(self) -> int:
        return sum(s.source == WATCHED for s in self.samples)

    def empty_like(self) -> "Dataset":
        return Dataset(self.map_id, self.config_hash, self.geometry, self.num_waypoints, [], self.schema_version)

    def with_samples(self, samples) -> "Dataset":
        return replace(self, samples=list(samples))

    def by_source(self, source: str) -> "Dataset":
        return self.with_samples(s for s in self.samples if s.source == source)

    def waypoints(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.num_waypoints, 2))
        return np.stack([s.waypoints for s in self.samples])

    def commands(self) -> np.ndarray:
        return np.array([int(s.command) for s in self.samples], dtype=np.int64)

    def speeds(self) -> np.ndarray:
        return np.array([s.speed for s in self.samples], dtype=np.float64)

    def pooled(self, pool: int) -> np.ndarray:
        """Per-sample 4x4-style block counts of the 7 BEV planes + visibility, uint8 (n, 8, H/p, W/p)."""
        g = self.geometry
        out = np.zeros((len(self.samples), N_CHANNELS + 1, g.height // pool, g.width // pool), dtype=np.uint8)
        for k, s in enumerate(self.samples):
            if s.pooled is None or s.pooled.shape != out.shape[1:]:
                s.pooled = pool_counts(np.concatenate([s.bev(g).data, s.vis(g).data[None]]), pool)
            out[k] = s.pooled
        return out


def pool_counts(planes: np.ndarray, pool: int) -> np.ndarray:
    c, h, w = planes.shape
    if h % pool or w % pool:
        raise ValueError("grid size must be divisible by the pooling factor")
    return planes.reshape(c, h // pool, pool, w // pool, pool).sum(axis=(2, 4), dtype=np.uint8)


# ---------------------------------------------------------------------------
# binary format

_HEAD = struct.Struct("<4sHIII16sHHdHH")
_REC = struct.Struct("<BiBBqqd")


def _encode_sample(s: Sample) -> bytes:
    src = 0 if s.source == EGO else 1
    return b"".join([_REC.pack(src, s.track_id, s.refurbished, int(s.command), s.episode_id, s.tick, s.speed),
                     s.waypoints.astype("<f8").tobytes(), s.bev_bits.tobytes(), s.vis_bits.tobytes()])


def dataset_to_bytes(ds: Dataset) -> bytes:
    g = ds.geometry
    mid = ds.map_id.encode()
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, ds.schema_version, ds.count, ds.n_ego, ds.n_watched,
                         ds.config_hash.encode().ljust(16, b"\0")[:16], len(mid), g.width, g.resolution, g.height,
                         g.rows_behind) + struct.pack("<H", ds.num_waypoints))
    buf.write(mid)
    for s in ds.samples:
        rec = _encode_sample(s)
        buf.write(struct.pack("<I", len(rec)))
        buf.write(rec)
    return buf.getvalue()


def dataset_from_bytes(raw: bytes) -> Dataset:
    try:
        return _decode(raw)
    except struct.error as exc:
        raise ValueError(f"truncated dataset file: {exc}") from exc


def _decode(raw: bytes) -> Dataset:
    if raw[:4] != MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    magic, version, n, n_ego, n_w, chash, mlen, width, res, height, rows_behind = _HEAD.unpack_from(raw, 0)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {version}")
    off = _HEAD.size
    (k,) = struct.unpack_from("<H", raw, off)
    off += 2
    map_id = raw[off:off + mlen].decode()
    off += mlen
    g = BevGeometry(width, height, res, rows_behind)
    nb = (N_CHANNELS * g.height * g.width + 7) // 8
    nv = (g.height * g.width + 7) // 8
    samples = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", raw, off)
        off += 4
        rec = raw[off:off + length]
        off += length
        if len(rec) != length or length != _REC.size + 16 * k + nb + nv:
            raise ValueError("truncated or malformed sample record")
        src, tid, refurb, cmd, ep, tick, speed = _REC.unpack_from(rec, 0)
        p = _REC.size
        wp = np.frombuffer(rec, dtype="<f8", count=2 * k, offset=p).reshape(k, 2).astype(np.float64)
        p += 16 * k
        bev = np.frombuffer(rec, dtype=np.uint8, count=nb, offset=p).copy()
        p += nb
        vis = np.frombuffer(rec, dtype=np.uint8, count=nv, offset=p).copy()
        samples.append(Sample(bev, vis, speed, Command(cmd), wp, EGO if src == 0 else WATCHED, tid, bool(refurb),
                              ep, tick))
    if off != len(raw):
        raise ValueError(f"{len(raw) - off} trailing bytes after the last sample")
    ds = Dataset(map_id, chash.rstrip(b"\0").decode(), g, k, samples, version)
    if ds.n_ego != n_ego or ds.n_watched != n_w:
        raise ValueError("header counts do not match samples")
    return ds


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: Dataset, path) -> None:
    atomic_write(path, dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# drive recording

@dataclass
class _Snapshot:
    tick: int
    ego_pose: Pose2D
    ego_extent: tuple
    base_bits: np.ndarray
    vis_bits: np.ndarray
    vehicles: list  # (truth id, pose, extent) of vehicles drawn in the ego view


@dataclass
class DriveRecord:
    """Everything one ego drive leaves behind for dataset construction."""

    map_id: str
    episode_id: int
    geometry: BevGeometry
    ego_poses: list
    ego_speeds: list
    ego_commands: list
    snapshots: dict
    tracks: list
    truth: dict = field(default_factory=dict)  # vehicle id -> list of (tick, pose, command)

    @property
    def n_ticks(self) -> int:
        return len(self.ego_poses)


class _LazyVisibility(VisibilityMap):
    """Visibility map that only ray-casts the cells it is asked about."""

    def __init__(self, occluders, geometry: BevGeometry):
        self.geometry = geometry
        self.occluders = occluders
        self.viewer_pose = None

    def point_visible(self, xy) -> bool:
        g = self.geometry
        i, j = g.cell_of(np.asarray(xy, dtype=float))
        if not g.in_grid(i, j):
            return False
        c = np.array([(j - g.width // 2) * g.resolution, (g.height - 1 - g.rows_behind - i) * g.resolution])
        return bool(visible_points(c[None], self.occluders)[0])


def record_drive(roadmap: RoadMap, config: Config | None = None, seed: int = 0, ticks: int = 1200,
                 density: str | None = None, noise: NoiseConfig | None = None, episode_id: int = 0,
                 record_truth: bool = False, world: World | None = None, ego_avoid: tuple = ()) -> DriveRecord:
    """Drive the expert ego for ``ticks`` steps while perceiving the other agents."""
    cfg = config or Config()
    noise = noise if noise is not None else cfg.noise
    g = BevGeometry.from_config(cfg.bev)
    world = world or World(roadmap, cfg, seed=seed, density=density, ego_avoid=ego_avoid)
    rng = np.random.default_rng([seed, 7919])
    tracker = TrackerState(config=cfg.tracker, dt=cfg.world.dt)
    every = cfg.dataset.sample_every
    rec = DriveRecord(roadmap.name, episode_id, g, [], [], [], {}, [])
    ego_id = 0
    for step in range(ticks):
        if step:
            world.step()
        st = world.state
        ego = st.agent(ego_id)
        occ = occluders_for(st, roadmap, ego.pose, g, ego_id)
        dets = detect(st, ego_id, _LazyVisibility(occ, g), noise, rng)
        update_tracks(tracker, dets, st.tick)
        rec.ego_poses.append(ego.pose)
        rec.ego_speeds.append(ego.speed)
        rec.ego_commands.append(world.ground_truth_command(ego_id))
        if record_truth:
            for a in st.agents:
                if a.kind == VEHICLE:
                    rec.truth.setdefault(a.id, []).append((st.tick, a.pose, world.ground_truth_command(a.id)))
        if st.tick % every == 0:
            vis = visibility_from_occluders(occ, g, ego.pose)
            excluded = tuple(a.id for a in st.agents if a.kind == VEHICLE)
            base = render_bev(st, roadmap, ego.pose, g, exclude=excluded, gate=vis)
            vehicles = []
            for a in st.agents:
                if a.kind != VEHICLE or a.id == ego_id:
                    continue
                if vis.point_visible(world_to_local(np.array([a.pose.x, a.pose.y]), ego.pose)):
                    vehicles.append((a.id, a.pose, a.extent))
            rec.snapshots[st.tick] = _Snapshot(st.tick, ego.pose, ego.extent, np.packbits(base.data.ravel()),
                                               np.packbits(vis.data.ravel()), vehicles)
    rec.tracks = close_tracks(tracker)
    return rec


def _snapshot_grids(snap: _Snapshot, g: BevGeometry, skip_id=None, draw_ego=False) -> tuple:
    n = N_CHANNELS * g.height * g.width
    bev = BevGrid(np.unpackbits(snap.base_bits, count=n).astype(bool).reshape(N_CHANNELS, g.height, g.width), g,
                  snap.ego_pose)
    for vid, pose, ext in snap.vehicles:
        if vid != skip_id:
            draw_vehicle(bev, snap.ego_pose, pose, ext)
    if draw_ego:
        draw_vehicle(bev, snap.ego_pose, snap.ego_pose, snap.ego_extent)
    vis = VisibilityMap(np.unpackbits(snap.vis_bits, count=g.height * g.width).astype(bool).reshape(g.height, g.width),
                        g, snap.ego_pose)
    return bev, vis


def _future_offsets(cfg: Config) -> int:
    step = cfg.dataset.waypoint_dt / cfg.world.dt
    if abs(step - round(step)) > 1e-9:
        raise ValueError("waypoint spacing must be a whole number of ticks")
    return int(round(step))


def collect_ego(record: DriveRecord, config: Config | None = None) -> Dataset:
    """Ego samples at every snapshot tick with K future positions available."""
    cfg = config or Config()
    g = record.geometry
    k = cfg.dataset.num_waypoints
    stride = _future_offsets(cfg)
    ds = Dataset(record.map_id, cfg.hash(), g, k)
    for t, snap in sorted(record.snapshots.items()):
        if t + k * stride >= record.n_ticks:
            continue
        pose = record.ego_poses[t]
        fut = np.array([[record.ego_poses[t + i * stride].x, record.ego_poses[t + i * stride].y]
                        for i in range(1, k + 1)])
        bev, vis = _snapshot_grids(snap, g)
        ds.samples.append(Sample.from_grids(bev, vis, speed=record.ego_speeds[t], command=record.ego_commands[t],
                                            waypoints=world_to_local(fut, pose), source=EGO,
                                            episode_id=record.episode_id, tick=t))
    return ds


def collect_watched(record: DriveRecord, config: Config | None = None, roadmap: RoadMap | None = None) -> Dataset:
    """Pseudo-demonstrations of tracked vehicles, re-expressed in their own frames.

    A track yields a sample at a snapshot tick when it has entries at that
    tick and at each of the K future waypoint ticks, and its command there
    is resolved.  The observed vehicle is removed from the ego grid and the
    ego is drawn in before re-projection.
    """
    from .world.roadmap import load_map

    cfg = config or Config()
    roadmap = roadmap or load_map(record.map_id)
    g = record.geometry
    k = cfg.dataset.num_waypoints
    stride = _future_offsets(cfg)
    ds = Dataset(record.map_id, cfg.hash(), g, k)
    for track in record.tracks:
        if track.kind != VEHICLE or len(track.history) < 2:
            continue
        by_tick = {d.timestamp: i for i, d in enumerate(track.history)}
        commands = infer_commands(track, roadmap, cfg.tracker)
        for t, snap in sorted(record.snapshots.items()):
            if t not in by_tick:
                continue
            idx = [by_tick.get(t + i * stride) for i in range(k + 1)]
            if any(i is None for i in idx):
                continue
            cmd = commands[idx[0]]
            if cmd is None:
                continue
            det = track.history[idx[0]]
            obs = det.pose_estimate
            fut = np.array([[track.history[i].pose_estimate.x, track.history[i].pose_estimate.y] for i in idx[1:]])
            bev, vis = _snapshot_grids(snap, g, skip_id=det.truth_id, draw_ego=True)
            bev_hat, vis_hat = transform_bev(bev, vis, snap.ego_pose, obs)
            ds.samples.append(Sample.from_grids(bev_hat, vis_hat, speed=det.speed_estimate, command=cmd,
                                                waypoints=world_to_local(fut, obs), source=WATCHED,
                                                track_id=track.track_id, episode_id=record.episode_id, tick=t))
    return ds


def collect(roadmap: RoadMap, config: Config | None = None, minutes: float = 10.0, seed: int = 0,
            density: str | None = None, noise: NoiseConfig | None = None, episode_ticks: int = 1200,
            watched: bool = True, ego_avoid: tuple = ()) -> tuple:
    """Drive ``minutes`` of simulated ego time in fixed-length episodes; return (ego, lbw) datasets.

    ``ego_avoid`` keeps the ego out of the named junctions, so maneuvers there
    reach the datasets only through watched vehicles.
    """
    if minutes <= 0:
        raise ValueError("budget must be positive")
    cfg = config or Config()
    total = int(round(minutes * 60.0 / cfg.world.dt))
    ego = Dataset(roadmap.name, cfg.hash(), BevGeometry.from_config(cfg.bev), cfg.dataset.num_waypoints)
    lbw = ego.empty_like()
    ep = 0
    while total > 0:
        n = min(episode_ticks, total)
        rec = record_drive(roadmap, cfg, seed=seed * 1000 + ep, ticks=n, density=density, noise=noise,
                           episode_id=ep, ego_avoid=ego_avoid)
        ego.samples.extend(collect_ego(rec, cfg).samples)
        if watched:
            lbw.samples.extend(collect_watched(rec, cfg, roadmap).samples)
        total -= n
        ep += 1
    return ego, lbw


# ---------------------------------------------------------------------------
# dataset algebra

def refurbish(lbw: Dataset, baseline_predictor, beta: float) -> Dataset:
    """Blend watched waypoints with a clean baseline: beta * w + (1 - beta) * f(s)."""
    if not 0.0 <= beta <= 1.0 or beta != beta:
        raise ValueError(f"refurbishment confidence must lie in [0, 1], got {beta}")
    idx = [i for i, s in enumerate(lbw.samples) if s.source == WATCHED]
    out = list(lbw.samples)
    if idx:
        pred = np.asarray(baseline_predictor(lbw.with_samples([lbw.samples[i] for i in idx])), dtype=np.float64)
        for row, i in enumerate(idx):
            s = lbw.samples[i]
            out[i] = replace(s, waypoints=beta * s.waypoints + (1.0 - beta) * pred[row], refurbished=True)
    return lbw.with_samples(out)


def merge(ego: Dataset, lbw: Dataset) -> Dataset:
    for name in ("schema_version", "geometry", "num_waypoints"):
        if getattr(ego, name) != getattr(lbw, name):
            raise ValueError(f"cannot merge datasets with different {name}")
    if ego.count and lbw.count and ego.map_id != lbw.map_id:
        raise ValueError("cannot merge datasets from different maps")
    chash = ego.config_hash if ego.config_hash == lbw.config_hash or not lbw.count else (
        hashlib.sha256((ego.config_hash + lbw.config_hash).encode()).hexdigest()[:16])
    return replace(ego, map_id=ego.map_id if ego.count else lbw.map_id, config_hash=chash,
                   samples=list(ego.samples) + list(lbw.samples))


def inject_waypoint_noise(ds: Dataset, sigma: float, rng: np.random.Generator) -> Dataset:
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    if sigma == 0:
        return ds.with_samples(ds.samples)
    out = []
    for s in ds.samples:
        out.append(replace(s, waypoints=s.waypoints + sigma * rng.standard_normal(s.waypoints.shape)))
    return ds.with_samples(out)
