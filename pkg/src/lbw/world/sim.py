"""Fixed-step multi-agent world with a rule-based expert driver."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ..config import Config
from ..control import Action
from ..geometry import (Pose2D, box_corners, convex_polygons_overlap, disc_polygon_overlap,
                        world_to_local, wrap_angle)
from .roadmap import GREEN, RED, YELLOW, Command, RoadMap
from .routes import Route, RoutePath

VEHICLE = "vehicle"
WALKER = "walker"


@dataclass(frozen=True)
class AgentState:
    id: int
    kind: str
    pose: Pose2D
    speed: float
    extent: tuple
    route: Route | None = None
    stuck: bool = False

    def corners(self) -> np.ndarray:
        return box_corners(self.pose.x, self.pose.y, self.pose.heading, *self.extent)


@dataclass(frozen=True)
class WorldState:
    tick: int
    sim_time: float
    agents: tuple
    light_phases: dict

    def agent(self, agent_id: int) -> AgentState:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    def to_bytes(self) -> bytes:
        out = [struct.pack("<qd", self.tick, self.sim_time)]
        for a in self.agents:
            out.append(struct.pack("<qB6d?", a.id, a.kind == VEHICLE, a.pose.x, a.pose.y, a.pose.heading,
                                   a.speed, a.extent[0], a.extent[1], a.stuck))
        for k in sorted(self.light_phases):
            out.append(k.encode() + struct.pack("<b", self.light_phases[k]))
        return b"".join(out)


# ---------------------------------------------------------------------------
# zone membership shared by ground truth and command inference

def zone_update(xy, roadmap: RoadMap, current: str | None, hysteresis: float) -> str | None:
    """Intersection zone containing ``xy``; leaving needs ``hysteresis`` extra metres."""
    if current is not None:
        inter = roadmap.intersections[current]
        if math.hypot(xy[0] - inter.center[0], xy[1] - inter.center[1]) <= inter.zone_radius + hysteresis:
            return current
    for nid, inter in roadmap.intersections.items():
        if math.hypot(xy[0] - inter.center[0], xy[1] - inter.center[1]) < inter.zone_radius:
            return nid
    return None


@dataclass
class _Vehicle:
    path: RoutePath
    s: float
    rng: np.random.Generator
    fixed: bool
    external: bool = False
    zone: str | None = None


@dataclass
class _Walker:
    a: np.ndarray
    b: np.ndarray
    u: float
    direction: float


class World:
    """Deterministic driving world.

    Vehicle 0 is the ego by convention.  When ``ego_route`` is given the ego
    follows that fixed route; otherwise it drives a random route like the
    background traffic.  ``external_ego`` hands its control to the caller of
    :meth:`step`.  ``ego_avoid`` names junctions the randomly driving ego
    never enters (other traffic still does).
    """

    def __init__(self, roadmap: RoadMap, config: Config | None = None, seed: int = 0,
                 density: str | None = None, n_vehicles: int | None = None, n_walkers: int | None = None,
                 ego_route: Route | None = None, external_ego: bool = False,
                 spawn_clearance: float = 12.0, ego_avoid: tuple = ()):
        self.map = roadmap
        self.ego_avoid = frozenset(ego_avoid)
        if self.ego_avoid - set(roadmap.nodes):
            raise ValueError(f"unknown junctions to avoid: {sorted(self.ego_avoid - set(roadmap.nodes))}")
        self.cfg = config or Config()
        self.seed = seed
        self.dt = self.cfg.world.dt
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        density = density or self.cfg.world.density
        wc = self.cfg.world
        km = roadmap.total_lane_km
        if n_vehicles is None:
            per_km = wc.dense_vehicles_per_km if density == "dense" else wc.regular_vehicles_per_km
            n_vehicles = max(1, int(round(per_km * km)))
        if n_walkers is None:
            per_km = wc.dense_walkers_per_km if density == "dense" else wc.regular_walkers_per_km
            n_walkers = int(round(per_km * km))
        self.rng = np.random.default_rng(seed)
        self._veh: dict[int, _Vehicle] = {}
        self._walk: dict[int, _Walker] = {}
        vc = self.cfg.vehicle
        ext = (vc.half_length, vc.half_width)
        agents = []
        taken = []
        if ego_route is not None:
            path = RoutePath(roadmap, ego_route.lanes)
            s0 = ego_route.start_s
            p = path.point_at(s0)
            pose = Pose2D(float(p[0]), float(p[1]), path.heading_at(s0))
            self._veh[0] = _Vehicle(path, s0, np.random.default_rng([seed, 0]), True, external_ego)
            agents.append(AgentState(0, VEHICLE, pose, 0.0, ext, ego_route))
            taken.append(np.array([pose.x, pose.y]))
            n_bg = n_vehicles
            first = 1
        else:
            n_bg = n_vehicles
            first = 0
        order = self.rng.permutation(len(roadmap.spawn_points))
        vid = first
        for k in order:
            if vid >= first + n_bg:
                break
            sp = roadmap.spawn_points[int(k)]
            xy = np.array([sp.pose.x, sp.pose.y])
            if any(np.hypot(*(xy - t)) < spawn_clearance for t in taken):
                continue
            if vid == 0 and roadmap.lanes[sp.lane].to_node in self.ego_avoid:
                continue
            taken.append(xy)
            vrng = np.random.default_rng([seed, vid])
            path = RoutePath(roadmap, [sp.lane])
            self._veh[vid] = _Vehicle(path, sp.s, vrng, False, external_ego and vid == 0)
            self._extend(vid)
            agents.append(AgentState(vid, VEHICLE, sp.pose, 0.0, ext, None))
            vid += 1
        wid = 1000
        if roadmap.sidewalks:
            for _ in range(n_walkers):
                walk = roadmap.sidewalks[int(self.rng.integers(len(roadmap.sidewalks)))]
                u = float(self.rng.uniform(0.0, 1.0))
                direction = 1.0 if self.rng.uniform() < 0.5 else -1.0
                self._walk[wid] = _Walker(walk[0], walk[-1], u, direction)
                agents.append(self._walker_state(wid, 0.0))
                wid += 1
        for a in agents:
            if a.kind == VEHICLE:
                self._veh[a.id].zone = zone_update((a.pose.x, a.pose.y), roadmap, None,
                                                   self.cfg.tracker.zone_hysteresis)
        self.state = WorldState(0, 0.0, tuple(agents), roadmap.light_states(0.0))

    # -- helpers -----------------------------------------------------------
    def path_of(self, agent_id: int) -> RoutePath:
        return self._veh[agent_id].path

    def progress(self, agent_id: int) -> float:
        return self._veh[agent_id].s

    def vehicle_ids(self) -> list:
        return sorted(self._veh)

    def _extend(self, vid: int) -> None:
        ctl = self._veh[vid]
        if ctl.fixed:
            return
        while ctl.path.length - ctl.s < 100.0:
            options = self.map.links_from(ctl.path.lanes[-1])
            if vid == 0 and self.ego_avoid:
                options = [o for o in options if self.map.lanes[o.out_lane].to_node not in self.ego_avoid] or options
            link = options[int(ctl.rng.integers(len(options)))]
            ctl.path.append_lane(link.out_lane)

    def _walker_state(self, wid: int, speed: float) -> AgentState:
        w = self._walk[wid]
        p = w.a + (w.b - w.a) * w.u
        d = (w.b - w.a) * w.direction
        r = self.cfg.vehicle.walker_radius
        return AgentState(wid, WALKER, Pose2D(float(p[0]), float(p[1]), math.atan2(d[1], d[0])), speed, (r, r))

    def ground_truth_command(self, agent_id: int) -> Command:
        """Maneuver of the junction whose zone the vehicle is in, else follow-lane."""
        ctl = self._veh[agent_id]
        if ctl.zone is None:
            return Command.FOLLOW
        for ev in ctl.path.events:
            if ev.node == ctl.zone and ev.s_stop - 15.0 <= ctl.s <= ev.s_exit + 15.0:
                return ev.maneuver
        return Command.FOLLOW

    # -- expert ------------------------------------------------------------
    def expert_action(self, agent: AgentState, state: WorldState | None = None) -> Action:
        state = state or self.state
        ctl = self._veh.get(agent.id)
        if ctl is None or agent.kind != VEHICLE:
            return Action.stop()
        e, vc = self.cfg.expert, self.cfg.vehicle
        path, s, v = ctl.path, ctl.s, agent.speed
        hl, hw = agent.extent

        # pure pursuit on the route centreline
        ld = max(e.min_lookahead, e.lookahead_time * v + 2.0)
        tx, ty = path.point_at(s + ld)
        dx, dy = tx - agent.pose.x, ty - agent.pose.y
        ch, sh = math.cos(agent.pose.heading), math.sin(agent.pose.heading)
        lx, ly = dx * sh - dy * ch, dx * ch + dy * sh
        alpha = math.atan2(-lx, ly)
        dist = max(math.hypot(lx, ly), 1e-3)
        delta = math.atan2(2.0 * vc.wheelbase * math.sin(alpha), dist)
        steer = delta / math.radians(vc.max_steer_deg)

        b = e.comfort_decel
        horizon = self._horizon(v)
        v_des = e.target_speed
        stops = []

        i0 = int(np.searchsorted(path.s, s))
        i1 = int(np.searchsorted(path.s, s + horizon))
        if i1 > i0:
            # squared curvature speed limit, braking-reachable from here
            vc2 = e.lateral_accel / np.maximum(path.curvature[i0:i1], 1e-6)
            ahead = np.maximum(path.s[i0:i1] - s - 1.0, 0.0)
            v_des = min(v_des, math.sqrt(float(np.min(vc2 + 2 * b * ahead))))

        front = s + hl
        for ev in path.events:
            if ev.s_stop - front > horizon:
                break
            if not ev.signalized or front > ev.s_stop:
                continue
            light = state.light_phases.get(ev.approach, RED)
            d = ev.s_stop - e.stop_line_margin - front
            if light == RED or (light == YELLOW and d >= v * v / (2 * b) - 0.5):
                stops.append(d)
                break
            if light == GREEN or light == YELLOW:
                continue

        gap_info = self._path_obstacle(agent, path, s, horizon, state)
        if gap_info is not None:
            gap, v_lead = gap_info
            d_follow = gap - e.standstill_gap + v_lead * v_lead / (2 * b) - e.time_gap * v
            stops.append(d_follow)

        for d in stops:
            v_des = min(v_des, math.sqrt(2 * b * max(d, 0.0)))

        a_des = e.speed_gain * (v_des - v)
        for d in stops:
            if d <= 0.05:
                a_des = -vc.max_decel if v > 0.0 or d < 0 else min(a_des, 0.0)
                if d <= 0.05 and v == 0.0:
                    a_des = min(a_des, 0.0)
            else:
                need = v * v / (2 * d)
                if need >= 0.4 * b:
                    a_des = min(a_des, -need)
        if v_des < 0.05 and v < 0.5:
            a_des = -vc.max_decel if v > 0 else min(a_des, 0.0)
        if a_des >= 0:
            return Action(steer, min(a_des / vc.max_accel, 1.0), 0.0)
        return Action(steer, 0.0, min(-a_des / vc.max_decel, 1.0))

    def _agent_arrays(self, state: WorldState):
        cached = getattr(self, "_arrays", None)
        if cached is not None and cached[0] is state:
            return cached[1]
        ag = state.agents
        arr = (np.array([a.id for a in ag]), np.array([a.pose.x for a in ag]), np.array([a.pose.y for a in ag]),
               np.array([a.pose.heading for a in ag]), np.array([a.speed for a in ag]),
               np.array([a.extent[0] for a in ag]), np.array([a.extent[1] for a in ag]),
               np.array([a.kind == WALKER for a in ag]))
        self._arrays = (state, arr)
        return arr

    def _horizon(self, v: float) -> float:
        return min(max(v * v / (2 * self.cfg.expert.comfort_decel) + 25.0, 20.0), 50.0)

    def _path_obstacle(self, agent, path, s, horizon, state):
        """Nearest agent footprint within the path corridor ahead: (gap, speed along path)."""
        cached = getattr(self, "_obstacles", None)
        if cached is not None and cached[0] is state and agent.id in cached[1]:
            return cached[1][agent.id]
        return self._path_obstacles([(agent, path, s, horizon)], state)[0]

    def _path_obstacles(self, queries, state) -> list:
        """Batched corridor search; ``queries`` holds (agent, path, s, horizon) tuples."""
        out = [None] * len(queries)
        windows = [path.window(s + 0.5, s + horizon, 0.5) for _, path, s, horizon in queries]
        live = [i for i, (pts, _) in enumerate(windows) if len(pts)]
        if not live:
            return out
        ids, xs, ys, hs, vs, hl, hw, walker = self._agent_arrays(state)
        n_pts = max(len(windows[i][1]) for i in live)
        px = np.full((len(live), n_pts), np.nan)
        py = np.full((len(live), n_pts), np.nan)
        lo = np.empty((len(live), 2))
        hi = np.empty((len(live), 2))
        me = np.empty(len(live), dtype=ids.dtype)
        r = np.empty(len(live))
        for row, i in enumerate(live):
            pts = windows[i][0]
            px[row, :len(pts)] = pts[:, 0]
            py[row, :len(pts)] = pts[:, 1]
            agent = queries[i][0]
            pad = 6.0 + agent.extent[1] + self.cfg.expert.path_margin
            lo[row] = pts.min(axis=0) - pad
            hi[row] = pts.max(axis=0) + pad
            me[row] = agent.id
            r[row] = agent.extent[1] + self.cfg.expert.path_margin
        cand = ((xs >= lo[:, :1]) & (xs <= hi[:, :1]) & (ys >= lo[:, 1:]) & (ys <= hi[:, 1:])
                & (ids != me[:, None]))
        rows, cols = np.nonzero(cand)
        if len(rows) == 0:
            return out
        c, sn = np.cos(hs[cols])[:, None], np.sin(hs[cols])[:, None]
        dx = px[rows] - xs[cols][:, None]
        dy = py[rows] - ys[cols][:, None]
        lx = dx * sn - dy * c
        ly = dx * c + dy * sn
        rr = r[rows][:, None] ** 2
        ex = np.maximum(np.abs(lx) - hw[cols][:, None], 0.0)
        ey = np.maximum(np.abs(ly) - hl[cols][:, None], 0.0)
        hit = ex * ex + ey * ey < rr
        wk = np.nonzero(walker[cols])[0]
        if len(wk):
            rw = r[rows[wk]][:, None] + hl[cols[wk]][:, None]
            hit[wk] = lx[wk] ** 2 + ly[wk] ** 2 < rw * rw
        any_hit = hit.any(axis=1)
        first = np.where(any_hit, hit.argmax(axis=1), n_pts)
        best = {}
        for k in np.nonzero(any_hit)[0]:
            row = int(rows[k])
            if row not in best or first[k] < first[best[row]]:
                best[row] = k
        for row, k in best.items():
            i = live[row]
            agent, path, s, _ = queries[i]
            q = windows[i][1][int(first[k])]
            j = int(cols[k])
            hdg = path.heading_at(float(q))
            out[i] = (float(q - s - agent.extent[0]), max(0.0, float(vs[j] * math.cos(hs[j] - hdg))))
        return out

    # -- integration -------------------------------------------------------
    def step(self, actions: dict | None = None) -> WorldState:
        actions = actions or {}
        st = self.state
        vc = self.cfg.vehicle
        dt = self.dt
        max_steer = math.radians(vc.max_steer_deg)
        new_agents = []
        driven = [a for a in st.agents if a.kind == VEHICLE and not self._veh[a.id].external]
        found = self._path_obstacles([(a, self._veh[a.id].path, self._veh[a.id].s, self._horizon(a.speed))
                                      for a in driven], st)
        self._obstacles = (st, {a.id: f for a, f in zip(driven, found)})
        for a in st.agents:
            if a.kind == WALKER:
                w = self._walk[a.id]
                length = float(np.linalg.norm(w.b - w.a))
                u = w.u + w.direction * vc.walker_speed * dt / max(length, 1e-6)
                if u > 1.0 or u < 0.0:
                    w.direction = -w.direction
                    u = min(max(u, 0.0), 1.0)
                w.u = u
                new_agents.append(self._walker_state(a.id, vc.walker_speed))
                continue
            ctl = self._veh[a.id]
            if ctl.external:
                act = actions.get(a.id, Action.stop())
            else:
                act = self.expert_action(a, st)
            acc = act.throttle * vc.max_accel - act.brake * vc.max_decel
            v1 = min(max(a.speed + acc * dt, 0.0), vc.v_max)
            vm = 0.5 * (a.speed + v1)
            delta = act.steer * max_steer
            h0 = a.pose.heading
            h1 = h0 + vm * math.tan(delta) / vc.wheelbase * dt
            hm = 0.5 * (h0 + h1)
            pose = Pose2D(a.pose.x + vm * math.cos(hm) * dt, a.pose.y + vm * math.sin(hm) * dt, h1)
            s_new, lat = ctl.path.project(np.array([pose.x, pose.y]), ctl.s, 1.0, vm * dt + 3.0)
            ctl.s = s_new
            ctl.zone = zone_update((pose.x, pose.y), self.map, ctl.zone, self.cfg.tracker.zone_hysteresis)
            stuck = a.stuck or lat > self.cfg.world.stuck_lateral_m
            new_agents.append(replace(a, pose=pose, speed=v1, stuck=stuck))
            self._extend(a.id)
        tick = st.tick + 1
        t = tick * dt
        self.state = WorldState(tick, t, tuple(new_agents), self.map.light_states(t))
        return self.state


def expert_action(agent: AgentState, world: World) -> Action:
    return world.expert_action(agent)


# ---------------------------------------------------------------------------
# collisions

def agent_collisions(state: WorldState, roadmap: RoadMap, agent_id: int) -> list:
    """Things overlapping the footprint of ``agent_id``: agent ids and ``'building'``."""
    me = state.agent(agent_id)
    mc = me.corners()
    hits = []
    reach = me.extent[0] + 4.0
    for o in state.agents:
        if o.id == agent_id:
            continue
        if abs(o.pose.x - me.pose.x) > reach or abs(o.pose.y - me.pose.y) > reach:
            continue
        if o.kind == WALKER:
            if disc_polygon_overlap((o.pose.x, o.pose.y), o.extent[0], mc):
                hits.append(o.id)
        elif convex_polygons_overlap(mc, o.corners()):
            hits.append(o.id)
    for poly in roadmap.buildings:
        if np.min(np.hypot(poly[:, 0] - me.pose.x, poly[:, 1] - me.pose.y)) > 200:
            continue
        if convex_polygons_overlap(mc, poly):
            hits.append("building")
            break
    return hits


def vehicle_collisions(state: WorldState, roadmap: RoadMap) -> list:
    """All colliding (vehicle id, other) pairs in a state."""
    out = []
    for a in state.agents:
        if a.kind != VEHICLE:
            continue
        for h in agent_collisions(state, roadmap, a.id):
            if h == "building" or h not in [p[0] for p in out if p[1] == a.id]:
                out.append((a.id, h))
    return out
