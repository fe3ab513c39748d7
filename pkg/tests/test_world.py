import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbw.geometry import polygon_is_convex_ccw
from lbw.world.roadmap import GREEN, RED, Command, classify_turn, compile_map, load_map
from lbw.world.routes import Route, RoutePath
from lbw.world.sim import VEHICLE, World, agent_collisions, vehicle_collisions, zone_update

from conftest import add_vehicle, fixture_source

TOWNS = ["town-a", "town-b", "town-c"]


def segments_cross(p, q):
    # proper crossing of two segments
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return (orient(p[0], p[1], q[0]) * orient(p[0], p[1], q[1]) < 0
            and orient(q[0], q[1], p[0]) * orient(q[0], q[1], p[1]) < 0)


@pytest.mark.parametrize("name", TOWNS)
def test_map_invariants(name):
    m = load_map(name)
    for inter in m.intersections.values():
        outs = {m.links[k].out_lane for k in inter.links}
        assert outs == {l.id for l in m.lanes.values() if l.from_node == inter.node}
    for lane in m.lanes.values():
        assert lane.width > 0
    for link in m.links.values():
        pts = link.points
        segs = list(zip(pts[:-1], pts[1:]))
        for i in range(len(segs)):
            for j in range(i + 2, len(segs)):
                assert not segments_cross(segs[i], segs[j])
    for b in m.buildings:
        assert polygon_is_convex_ccw(b)


def test_town_c_has_novel_junctions(town_c):
    degrees = {n: len(i.approaches) for n, i in town_c.intersections.items()}
    assert max(degrees.values()) == 5
    assert any(n.roundabout for n in town_c.nodes.values())
    diagonal = [l for l in town_c.links.values() if l.node == "hub"
                and 55 < abs(math.degrees(l.heading_change)) < 80]
    assert diagonal


@pytest.mark.parametrize("name", TOWNS)
@settings(max_examples=60, deadline=None)
@given(t=st.floats(0, 2000))
def test_light_exclusion(name, t):
    m = load_map(name)
    for g in m.lights.values():
        assert np.sum(g.states(t) == GREEN) <= 1


def test_lights_cycle_every_approach(town_a):
    g = next(iter(town_a.lights.values()))
    seen = set()
    for t in np.arange(0, g.cycle, 0.1):
        s = g.states(t)
        if (s == GREEN).any():
            seen.add(int(np.argmax(s == GREEN)))
    assert seen == set(range(len(g.approaches)))


def test_permanent_red(red_map):
    g = red_map.lights["n11"]
    assert all((g.states(t) == RED).all() for t in np.arange(0, 100, 0.7))


def test_classify_turn():
    assert classify_turn(math.radians(90)) == Command.LEFT
    assert classify_turn(math.radians(-90)) == Command.RIGHT
    assert classify_turn(0.1) == Command.STRAIGHT


def test_bad_maps_rejected():
    src = fixture_source()
    src["roads"] = [r for r in src["roads"] if "n00" not in (r["from"], r["to"])][:]
    src["roads"].append({"from": "n00", "to": "n10"})
    with pytest.raises(ValueError):
        compile_map(src)
    src = fixture_source()
    src["buildings"].append([[0, 0], [0, 1], [1, 1], [1, 0]])
    with pytest.raises(ValueError):
        compile_map(src)


def test_zone_hysteresis(town_a):
    inter = next(iter(town_a.intersections.values()))
    c = inter.center
    r = inter.zone_radius
    assert zone_update(c, town_a, None, 0.5) == inter.node
    edge = c + [r + 0.3, 0]
    assert zone_update(edge, town_a, None, 0.5) is None
    assert zone_update(edge, town_a, inter.node, 0.5) == inter.node
    assert zone_update(c + [r + 0.6, 0], town_a, inter.node, 0.5) is None


def test_determinism(town_b):
    a = World(town_b, seed=5)
    b = World(town_b, seed=5)
    for _ in range(60):
        assert a.step().to_bytes() == b.step().to_bytes()
    c = World(town_b, seed=6)
    assert c.step().to_bytes() != World(town_b, seed=5).step().to_bytes()


def test_kinematic_consistency_and_no_collisions(town_a, cfg):
    w = World(town_a, seed=1, density="dense")
    prev = w.state
    bound = cfg.vehicle.v_max * cfg.world.dt + 1e-9
    for _ in range(400):
        cur = w.step()
        for a, b in zip(prev.agents, cur.agents):
            assert math.hypot(b.pose.x - a.pose.x, b.pose.y - a.pose.y) <= bound
        assert vehicle_collisions(cur, town_a) == []
        prev = cur
    assert not any(a.stuck for a in cur.agents)


def test_free_road_acceleration(town_a):
    w = World(town_a, seed=0, n_vehicles=1, n_walkers=0)
    speeds = [w.step().agent(0).speed for _ in range(20)]
    assert speeds[-1] > speeds[0] > 0
    act = w.expert_action(w.state.agent(0))
    assert act.throttle > 0 and act.brake == 0


def straight_through(m, node="n11"):
    return ["n01>n11", "n11>n21"]


def test_red_light_stop(red_map, cfg):
    lanes = straight_through(red_map)
    w = World(red_map, seed=0, n_vehicles=0, n_walkers=0, ego_route=Route.from_lanes(red_map, lanes, 5.0))
    path = w.path_of(0)
    s_stop = path.events[0].s_stop
    hl = cfg.vehicle.half_length
    speeds, fronts = [], []
    for _ in range(300):
        st = w.step()
        speeds.append(st.agent(0).speed)
        fronts.append(w.progress(0) + hl)
    peak = int(np.argmax(speeds))
    assert speeds[peak] > 3.0
    assert np.all(np.diff(speeds[peak:]) <= 1e-12)
    assert speeds[-1] == 0.0
    assert max(fronts) <= s_stop
    assert s_stop - fronts[-1] < 2.0


def test_brakes_for_red_inside_envelope(red_map):
    lanes = straight_through(red_map)
    w = World(red_map, seed=0, n_vehicles=0, n_walkers=0)
    a = add_vehicle(w, 50, lanes, RoutePath(red_map, lanes).events[0].s_stop - 12.0, speed=7.0)
    act = w.expert_action(a)
    assert act.throttle == 0 and act.brake > 0


def test_stopped_leader(town_a, cfg):
    lanes = ["n00>n10", "n10>n20"]
    w = World(town_a, seed=0, n_vehicles=0, n_walkers=0)
    hl = cfg.vehicle.half_length
    add_vehicle(w, 1, lanes, 40.0, external=True)
    f = add_vehicle(w, 2, lanes, 40.0 - 2 * hl - 3.0, speed=3.0)
    act = w.expert_action(f)
    assert act.brake == 1.0 and act.throttle == 0.0
    for _ in range(80):
        st = w.step()
    gap = w.progress(1) - w.progress(2) - 2 * hl
    assert st.agent(2).speed == 0.0
    assert gap >= 0.5
    assert agent_collisions(st, town_a, 2) == []


def test_ground_truth_command(town_a):
    lanes = ["n00>n10", "n10>n11"]
    w = World(town_a, seed=0, n_vehicles=0, n_walkers=0, ego_route=Route.from_lanes(town_a, lanes))
    cmds = set()
    for _ in range(250):
        w.step()
        cmds.add(w.ground_truth_command(0))
    assert Command.LEFT in cmds and Command.FOLLOW in cmds
    assert Command.RIGHT not in cmds


def test_route_commands(town_b):
    lanes = ["n00>n10", "n10>n11", "n11>n12"]
    r = Route.from_lanes(town_b, lanes)
    assert r.commands(town_b) == [Command.LEFT, Command.STRAIGHT]


def test_invalid_dt(town_a, cfg):
    with pytest.raises(ValueError):
        World(town_a, cfg.replace(world__dt=0.0))


def corridor_oracle(world, agent):
    """Brute force: first window point within reach of any other footprint."""
    ctl = world._veh[agent.id]
    horizon = world._horizon(agent.speed)
    r = agent.extent[1] + world.cfg.expert.path_margin
    k, q = 0, ctl.s + 0.5
    while q < min(ctl.s + horizon, ctl.path.length):
        px, py = ctl.path.window(q, q + 0.25, 0.5)[0][0]
        for o in world.state.agents:
            if o.id == agent.id:
                continue
            dx, dy = px - o.pose.x, py - o.pose.y
            if o.kind == VEHICLE:
                f = (math.cos(o.pose.heading), math.sin(o.pose.heading))
                along, across = dx * f[0] + dy * f[1], dx * f[1] - dy * f[0]
                ex, ey = max(abs(across) - o.extent[1], 0.0), max(abs(along) - o.extent[0], 0.0)
                close = math.hypot(ex, ey) < r
            else:
                close = math.hypot(dx, dy) < r + o.extent[0]
            if close:
                lead = o.speed * math.cos(o.pose.heading - ctl.path.heading_at(q))
                return q - ctl.s - agent.extent[0], max(0.0, lead)
        k += 1
        q = ctl.s + 0.5 + 0.5 * k
    return None


def test_batched_corridor_matches_brute_force(town_b, cfg):
    world = World(town_b, cfg, seed=5, density="dense")
    checked = found = 0
    for tick in range(120):
        world.step()
        if tick % 30:
            continue
        st = world.state
        driven = [a for a in st.agents if a.kind == VEHICLE]
        got = world._path_obstacles([(a, world._veh[a.id].path, world._veh[a.id].s, world._horizon(a.speed))
                                     for a in driven], st)
        for a, g in zip(driven, got):
            want = corridor_oracle(world, a)
            assert (g is None) == (want is None)
            if g is not None:
                assert g[0] == pytest.approx(want[0], abs=1e-9) and g[1] == pytest.approx(want[1], abs=1e-9)
                found += 1
            checked += 1
    assert checked > 100 and found > 10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ego_avoids_named_junction(cfg, seed):
    m = load_map("town-c")
    w = World(m, cfg, seed=seed, ego_avoid=("hub",))
    hub_traffic = False
    for _ in range(600):
        w.step()
        hub_traffic |= any(m.lanes[l].to_node == "hub" for v in w.vehicle_ids()[1:] for l in w.path_of(v).lanes)
    assert all(m.lanes[l].to_node != "hub" for l in w.path_of(0).lanes)
    assert hub_traffic


def test_ego_avoid_unknown_node(cfg):
    with pytest.raises(ValueError, match="nowhere"):
        World(load_map("town-c"), cfg, ego_avoid=("nowhere",))
