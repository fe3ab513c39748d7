"""Closed-loop benchmarks: suites, drivers, episode evaluation and the experiment matrix."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .bev import BevGeometry, compose_image, render_ego_view, write_ppm
from .config import Config
from .control import Action, PidState, control
from .dataset import (Dataset, Sample, WATCHED, atomic_write, collect, dataset_from_bytes, dataset_to_bytes,
                      inject_waypoint_noise, merge)
from .policy import ModelParams, adapt, forward, train, train_lbw_pipeline
from .world.roadmap import RED, RoadMap, compile_map, load_map
from .world.routes import Route, RoutePath
from .world.sim import World, agent_collisions

GOAL_RADIUS = 3.5
OFF_ROUTE = 6.0


# ---------------------------------------------------------------------------
# suites

@dataclass
class BenchmarkSuite:
    name: str
    map_id: str
    density: str
    routes: list
    timeout_ticks: list
    terminate_on_collision: bool = True

    def to_json(self) -> str:
        d = {"name": self.name, "map": self.map_id, "density": self.density,
             "terminate_on_collision": self.terminate_on_collision,
             "routes": [{"lanes": r.lanes, "start_s": r.start_s, "goal_s": r.goal_s, "timeout": t,
                         "commands": [int(c) for c in r.maneuvers]}
                        for r, t in zip(self.routes, self.timeout_ticks)]}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkSuite":
        d = json.loads(text)
        m = load_map(d["map"])
        routes = [Route.from_lanes(m, r["lanes"], r["start_s"], r["goal_s"]) for r in d["routes"]]
        return cls(d["name"], d["map"], d["density"], routes, [int(r["timeout"]) for r in d["routes"]],
                   d.get("terminate_on_collision", True))

    def ob_variant(self) -> "BenchmarkSuite":
        """Same routes with collisions recorded but not terminating."""
        out = copy.copy(self)
        out.name = self.name + "-ob"
        out.terminate_on_collision = False
        return out


SHIPPED_SUITES = ("town-a-regular", "town-b-regular", "town-b-dense", "town-c-regular")


def load_suite(name_or_path) -> BenchmarkSuite:
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        return BenchmarkSuite.from_json(p.read_text())
    text = resources.files("lbw").joinpath("suites", f"{name_or_path}.json").read_text()
    return BenchmarkSuite.from_json(text)


def goal_point(m: RoadMap, route: Route) -> np.ndarray:
    path = RoutePath(m, route.lanes)
    goal = path.length if route.goal_s is None else route.goal_s
    return path.point_at(goal)


def random_route(m: RoadMap, rng: np.random.Generator, junctions=(2, 3), require=None) -> Route:
    """Random spawn point, then random links through ``junctions`` intersections.

    ``require`` names a node the route must pass through; draws that miss it are retried.
    """
    while True:
        n_target = int(rng.integers(junctions[0], junctions[1] + 1))
        sp = m.spawn_points[int(rng.integers(len(m.spawn_points)))]
        lanes = [sp.lane]
        nodes = []
        while len(nodes) < n_target:
            options = m.links_from(lanes[-1])
            link = options[int(rng.integers(len(options)))]
            lanes.append(link.out_lane)
            if link.node in m.intersections:
                nodes.append(link.node)
        if require is None or require in nodes:
            break
    path = RoutePath(m, lanes)
    last = m.lanes[lanes[-1]]
    goal_s = path.length - last.length + float(rng.uniform(10.0, max(10.0, last.length - 10.0)))
    return Route.from_lanes(m, lanes, sp.s, goal_s)


def route_timeout(m: RoadMap, route: Route, dt: float) -> int:
    path = RoutePath(m, route.lanes)
    length = (route.goal_s if route.goal_s is not None else path.length) - route.start_s
    return int(math.ceil((length / 3.0 + 30.0) / dt))


# ---------------------------------------------------------------------------
# drivers

class ExpertDriver:
    label = "expert"

    def reset(self):
        pass

    def act(self, world: World, ego_id: int):
        return world.expert_action(world.state.agent(ego_id)), None


class ZeroDriver:
    """Always predicts the all-zero waypoint set."""

    label = "zero"

    def __init__(self, cfg: Config | None = None):
        self.cfg = cfg or Config()
        self.pid = PidState(gains=self.cfg.controller)

    def reset(self):
        self.pid = PidState(gains=self.cfg.controller)

    def act(self, world: World, ego_id: int):
        wp = np.zeros((self.cfg.dataset.num_waypoints, 2))
        a, self.pid = control(wp, world.state.agent(ego_id).speed, self.pid, self.cfg.world.dt,
                              self.cfg.dataset.waypoint_dt)
        return a, wp


class ModelDriver:
    """Render the ego view, predict waypoints, track them with the PID controller."""

    def __init__(self, params: ModelParams, cfg: Config, roadmap: RoadMap, label: str = "model"):
        self.params, self.cfg, self.map, self.label = params, cfg, roadmap, label
        self.geometry = BevGeometry.from_config(cfg.bev)
        self.pid = PidState(gains=cfg.controller)
        self.last_view = None

    def reset(self):
        self.pid = PidState(gains=self.cfg.controller)

    def act(self, world: World, ego_id: int):
        st = world.state
        bev, vis = render_ego_view(st, self.map, ego_id, self.geometry)
        ego = st.agent(ego_id)
        wp = forward(self.params, self.cfg, bev, vis, ego.speed, world.ground_truth_command(ego_id))
        self.last_view = (bev, vis)
        a, self.pid = control(wp, ego.speed, self.pid, self.cfg.world.dt, self.cfg.dataset.waypoint_dt)
        return a, wp


# ---------------------------------------------------------------------------
# episodes

@dataclass
class EpisodeResult:
    route: int
    seed: int
    success: bool
    reason: str
    collisions: int
    red_lights: int
    ticks: int


@dataclass
class EpisodeLog:
    dataset: Dataset
    actions: list = field(default_factory=list)

    def save(self, stem) -> None:
        stem = Path(stem)
        atomic_write(stem.with_suffix(".lbwd"), dataset_to_bytes(self.dataset))
        arr = np.array([[a.steer, a.throttle, a.brake] for a in self.actions], dtype="<f8").reshape(-1, 3)
        atomic_write(stem.with_suffix(".actions"), arr.tobytes())

    @classmethod
    def load(cls, stem) -> "EpisodeLog":
        stem = Path(stem)
        ds = dataset_from_bytes(stem.with_suffix(".lbwd").read_bytes())
        raw = np.frombuffer(stem.with_suffix(".actions").read_bytes(), dtype="<f8").reshape(-1, 3)
        return cls(ds, [Action(float(s), float(t), float(b)) for s, t, b in raw])


def run_episode(m: RoadMap, route: Route, driver, cfg: Config, seed: int, density: str, timeout: int,
                terminate_on_collision: bool = True, log: EpisodeLog | None = None) -> EpisodeResult:
    world = World(m, cfg, seed=seed, density=density, ego_route=route, external_ego=True)
    driver.reset()
    goal = goal_point(m, route)
    path = world.path_of(0)
    hl = cfg.vehicle.half_length
    collisions = 0
    reds = 0
    touching = set()
    for tick in range(timeout):
        st = world.state
        ego = st.agent(0)
        if math.hypot(ego.pose.x - goal[0], ego.pose.y - goal[1]) <= GOAL_RADIUS:
            return EpisodeResult(-1, seed, collisions == 0, "goal", collisions, reds, tick)
        action, wp = driver.act(world, 0)
        if log is not None:
            # drivers without their own view (expert, zero) are logged from a fresh render
            bev, vis = getattr(driver, "last_view", None) or render_ego_view(st, m, 0, log.dataset.geometry)
            wp = np.zeros((log.dataset.num_waypoints, 2)) if wp is None else wp
            log.dataset.samples.append(Sample.from_grids(bev, vis, speed=ego.speed,
                                                         command=world.ground_truth_command(0),
                                                         waypoints=wp, tick=tick))
            log.actions.append(action)
        s_before = world.progress(0)
        lights = st.light_phases
        world.step({0: action})
        s_after = world.progress(0)
        for ev in path.events:
            if ev.signalized and s_before + hl < ev.s_stop <= s_after + hl and lights.get(ev.approach) == RED:
                reds += 1
        hits = set(agent_collisions(world.state, m, 0))
        new = hits - touching
        collisions += len(new)
        touching = hits
        if new and terminate_on_collision:
            return EpisodeResult(-1, seed, False, "collision", collisions, reds, tick + 1)
        if path.project(np.array([world.state.agent(0).pose.x, world.state.agent(0).pose.y]),
                        s_after, 2.0, 2.0)[1] > OFF_ROUTE:
            return EpisodeResult(-1, seed, False, "off_route", collisions, reds, tick + 1)
    return EpisodeResult(-1, seed, False, "timeout", collisions, reds, timeout)


@dataclass
class SuccessReport:
    success: bool
    reason: str
    collisions: int
    red_light_violations: int
    ticks: int


def expert_route_success_check(m: RoadMap, route: Route, cfg: Config | None = None, seed: int = 0,
                               density: str = "regular", timeout: int | None = None) -> SuccessReport:
    cfg = cfg or Config()
    timeout = route_timeout(m, route, cfg.world.dt) if timeout is None else timeout
    r = run_episode(m, route, ExpertDriver(), cfg, seed, density, timeout)
    return SuccessReport(r.success, r.reason, r.collisions, r.red_lights, r.ticks)


def generate_suite(name: str, map_id: str, density: str, n_routes: int = 10, seed: int = 0,
                   check_seeds=(0, 1, 2, 3, 4), junctions=(1, 2), require=None, cfg: Config | None = None,
                   densities=None) -> BenchmarkSuite:
    """Draw random routes and keep those the expert solves on every check seed.

    ``densities`` lists the traffic levels a route must survive (default: the suite's own).
    """
    cfg = cfg or Config()
    m = load_map(map_id)
    rng = np.random.default_rng(seed)
    routes, timeouts = [], []
    while len(routes) < n_routes:
        route = random_route(m, rng, junctions, require)
        timeout = route_timeout(m, route, cfg.world.dt)
        if all(expert_route_success_check(m, route, cfg, s, d, timeout).success
               for d in (densities or [density]) for s in check_seeds):
            routes.append(route)
            timeouts.append(timeout)
    return BenchmarkSuite(name, map_id, density, routes, timeouts)


# ---------------------------------------------------------------------------
# evaluation reports

@dataclass
class EvalReport:
    suite: str
    label: str
    seeds: list
    outcomes: list
    config_hash: str = ""

    def per_seed_success(self) -> list:
        out = []
        for s in self.seeds:
            rows = [o for o in self.outcomes if o.seed == s]
            out.append(100.0 * sum(o.success for o in rows) / len(rows) if rows else 0.0)
        return out

    @property
    def success_rate(self) -> float:
        return 100.0 * sum(o.success for o in self.outcomes) / max(len(self.outcomes), 1)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed_success())) if self.seeds else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed_success())) if self.seeds else 0.0

    @property
    def collisions(self) -> int:
        return sum(o.collisions for o in self.outcomes)

    @property
    def timeouts(self) -> int:
        return sum(o.reason == "timeout" for o in self.outcomes)

    @property
    def red_lights(self) -> int:
        return sum(o.red_lights for o in self.outcomes)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "label": self.label, "seeds": list(self.seeds), "config_hash": self.config_hash,
                "success_rate": self.success_rate, "mean": self.mean, "std": self.std,
                "collisions": self.collisions, "timeouts": self.timeouts, "red_lights": self.red_lights,
                "outcomes": [asdict(o) for o in self.outcomes]}


def evaluate(driver, suite: BenchmarkSuite, seeds, cfg: Config | None = None, max_routes: int | None = None,
             log_dir=None) -> EvalReport:
    """Run every (route, seed) episode of a suite with one driver.

    ``driver`` may also be a :class:`ModelParams`, wrapped in a ModelDriver.
    With ``log_dir`` each episode is saved as ``route<i>_seed<k>`` for
    :func:`render_episode`.
    """
    cfg = cfg or Config()
    m = load_map(suite.map_id)
    if isinstance(driver, ModelParams):
        driver = ModelDriver(driver, cfg, m)
    outcomes = []
    routes = list(enumerate(zip(suite.routes, suite.timeout_ticks)))[:max_routes]
    for seed in seeds:
        for i, (route, timeout) in routes:
            log = None
            if log_dir is not None:
                log = EpisodeLog(Dataset(suite.map_id, cfg.hash(), BevGeometry.from_config(cfg.bev),
                                         cfg.dataset.num_waypoints))
            r = run_episode(m, route, driver, cfg, seed, suite.density, timeout, suite.terminate_on_collision, log)
            r.route = i
            if log is not None:
                Path(log_dir).mkdir(parents=True, exist_ok=True)
                log.save(Path(log_dir) / f"route{i:02d}_seed{seed}")
            outcomes.append(r)
    return EvalReport(suite.name, getattr(driver, "label", "model"), list(seeds), outcomes, cfg.hash())


def format_table(title: str, rows: list) -> str:
    """Plain-text table: rows of (method, {column: (mean, std)})."""
    cols = []
    for _, cells in rows:
        for c in cells:
            if c not in cols:
                cols.append(c)
    w0 = max([len("method")] + [len(r[0]) for r in rows])
    head = "method".ljust(w0) + "".join(f" | {c:>14}" for c in cols)
    lines = [title, head, "-" * len(head)]
    for name, cells in rows:
        line = name.ljust(w0)
        for c in cols:
            line += " | " + (f"{cells[c][0]:6.1f} ± {cells[c][1]:5.1f}" if c in cells else " " * 14)
        lines.append(line)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiment matrix

DEFAULT_MATRIX = {
    "train_map": "town-a",
    "budgets": [10, 30, 60],
    "methods": ["ego", "lbw", "lbw+early", "lbw+late"],
    "conditions": ["regular", "dense", "adaptation"],
    "noise": [False],
    "refurbish": [True],
    "beta": 0.5,
    "noise_sigma": 0.5,
    "adapt_map": "town-c",
    "adapt_minutes": 10,
    "adapt_avoid": ["hub"],
    "seeds": [0, 1, 2, 3, 4],
    "train_per_seed": True,
    "data_seed": 0,
    "max_routes": None,
    "suites": {"regular": "town-b-regular", "dense": "town-b-dense", "adaptation": "town-c-regular"},
}

_FUSION = {"ego": "none", "lbw": "none", "lbw+early": "early", "lbw+late": "late"}


class _Cache:
    def __init__(self):
        self.data = {}
        self.models = {}


def _data(cache: _Cache, map_id: str, minutes: float, seed: int, cfg: Config, avoid=()):
    key = (map_id, minutes, seed, tuple(avoid))
    if key not in cache.data:
        cache.data[key] = collect(load_map(map_id), cfg, minutes=minutes, seed=seed, ego_avoid=tuple(avoid))
    return cache.data[key]


def train_method(method: str, ego: Dataset, lbw: Dataset, cfg: Config, beta: float, refurb: bool,
                 noise_sigma: float | None, seed: int) -> ModelParams:
    cfg = cfg.replace(policy__fusion=_FUSION[method])
    if method == "ego":
        return train(cfg, ego, seed)[0]
    if noise_sigma:
        lbw = inject_waypoint_noise(lbw, noise_sigma, np.random.default_rng([seed, 31]))
    if refurb:
        return train_lbw_pipeline(cfg, ego, lbw, beta, seed)[0]
    return train(cfg, merge(ego, lbw), seed)[0]


def run_cell(cell: dict, spec: dict, cfg: Config, cache: _Cache | None = None) -> dict:
    """One (condition, budget, method, noise, refurbish) cell: collect, train, evaluate.

    With ``train_per_seed`` each seed is an independent run: the policy is trained
    (and adapted) with that seed and evaluated on traffic drawn from the same seed.
    Otherwise one model trained with ``policy.seed`` is evaluated on every seed.
    """
    cache = cache or _Cache()
    method = cell["method"]
    mcfg = cfg.replace(policy__fusion=_FUSION[method])
    ego, lbw = _data(cache, spec["train_map"], cell["budget"], spec["data_seed"], cfg)
    sigma = spec["noise_sigma"] if cell["noise"] else None
    per_seed = spec.get("train_per_seed", True)
    suite = load_suite(spec["suites"][cell["condition"]])
    roadmap = load_map(suite.map_id)
    outcomes = []
    for group in ([[s] for s in spec["seeds"]] if per_seed else [list(spec["seeds"])]):
        seed = group[0] if per_seed else mcfg.policy.seed
        key = (cell["budget"], method, cell["noise"], cell["refurbish"], seed)
        if key not in cache.models:
            cache.models[key] = train_method(method, ego, lbw, cfg, spec["beta"], cell["refurbish"], sigma, seed)
        params = cache.models[key]
        if cell["condition"] == "adaptation":
            a_ego, a_lbw = _data(cache, spec["adapt_map"], spec["adapt_minutes"], spec["data_seed"] + 100, cfg,
                                 spec.get("adapt_avoid", ()))
            akey = ("adapted",) + key
            if akey not in cache.models:
                adapt_set = a_ego if method == "ego" else merge(a_ego, a_lbw)
                cache.models[akey] = adapt(params, mcfg, adapt_set, seed)[0]
            params = cache.models[akey]
        rep = evaluate(ModelDriver(params, mcfg, roadmap, method), suite, group, mcfg, spec.get("max_routes"))
        outcomes.extend(rep.outcomes)
    return EvalReport(suite.name, method, list(spec["seeds"]), outcomes, mcfg.hash()).to_dict()


def cell_key(cell: dict) -> str:
    return (f"{cell['condition']}/{cell['budget']}min/{cell['method']}"
            f"/noise={'on' if cell['noise'] else 'off'}/refurb={'on' if cell['refurbish'] else 'off'}")


def run_experiment_matrix(spec: dict | None = None, cfg: Config | None = None) -> dict:
    """Every cell of the matrix; failures are recorded per cell and the run continues.

    Returns {"records": {cell key: record}, "tables": {condition: text}}.
    """
    spec = {**DEFAULT_MATRIX, **(spec or {})}
    cfg = cfg or Config()
    cache = _Cache()
    records = {}
    for condition in spec["conditions"]:
        for budget in spec["budgets"]:
            for noise in spec["noise"]:
                for refurb in spec["refurbish"]:
                    for method in spec["methods"]:
                        if method == "ego" and (noise or not refurb) and len(spec["refurbish"]) > 1:
                            continue
                        cell = {"condition": condition, "budget": budget, "method": method, "noise": noise,
                                "refurbish": refurb}
                        k = cell_key(cell)
                        try:
                            records[k] = {"cell": cell, "status": "ok", **run_cell(cell, spec, cfg, cache)}
                        except Exception as exc:  # recorded, matrix continues
                            records[k] = {"cell": cell, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
    tables = {}
    for condition in spec["conditions"]:
        rows = {}
        for k, rec in records.items():
            c = rec["cell"]
            if c["condition"] != condition:
                continue
            name = c["method"] + (" +noise" if c["noise"] else "") + ("" if c["refurbish"] else " -refurb")
            col = f"{c['budget']} min"
            rows.setdefault(name, {})[col] = (rec.get("mean", float("nan")), rec.get("std", float("nan")))
        tables[condition] = format_table(f"Success rate (%) on {spec['suites'][condition]}", list(rows.items()))
    return {"spec": spec, "records": records, "tables": tables}


def bundle_bytes(bundle: dict) -> bytes:
    return json.dumps(bundle, sort_keys=True, indent=1, default=str).encode()


def write_bundle(bundle: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "records.json", bundle_bytes(bundle))
    atomic_write(out / "tables.txt", "\n".join(bundle["tables"][c] for c in sorted(bundle["tables"])).encode())


# ---------------------------------------------------------------------------
# rendering

def render_episode(log: EpisodeLog, out_dir) -> list:
    """One numbered PPM per logged tick, waypoints drawn as dark yellow discs."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = []
    g = log.dataset.geometry
    for k, s in enumerate(log.dataset.samples):
        p = out / f"frame_{k:05d}.ppm"
        write_ppm(p, compose_image(s.bev(g), s.vis(g), s.waypoints))
        paths.append(p)
    return paths
