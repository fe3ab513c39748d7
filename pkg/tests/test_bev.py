import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbw.bev import (
    LIGHT_GREEN, LIGHT_RED, LIGHT_YELLOW, N_CHANNELS, ROAD, VEHICLE_CH, BevGeometry, BevGrid,
    VisibilityMap, compose_image, read_ppm, render_bev, render_ego_view, render_static,
    render_visibility, transform_bev, visible_points, write_ppm,
)
from lbw.geometry import Pose2D, local_to_world, wrap_angle
from lbw.world.sim import VEHICLE, AgentState, World, WorldState

from oracles import random_scene, regular_polygon, scene_polygons, visibility_oracle

G64 = BevGeometry(64, 64, 0.25, 12)


def dilate(mask):
    out = mask.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            out |= np.roll(np.roll(mask, di, axis=-2), dj, axis=-1)
    return out


def lane_pose(m, lane_id, s):
    lane = m.lanes[lane_id]
    p = lane.points[0] + (lane.points[-1] - lane.points[0]) * s / lane.length
    return Pose2D(float(p[0]), float(p[1]), lane.heading)


def test_geometry_contract():
    g = BevGeometry()
    i, j = g.viewer_cell
    assert (i, j) == (103, 64)
    assert np.allclose(g.cell_centers()[i, j], [0, 0])
    assert g.cell_of(np.array([0.0, 5.0])) == (i - 20, j)
    assert g.cell_of(np.array([-0.25, 0.0])) == (i, j - 1)
    with pytest.raises(ValueError):
        BevGeometry(resolution=0.0)
    with pytest.raises(ValueError):
        BevGeometry(height=10, rows_behind=10)


def test_static_road_band(town_a):
    viewer = lane_pose(town_a, "n00>n10", 20.0)
    bev = render_bev(WorldState(0, 0.0, (), {}), town_a, viewer)
    g = bev.geometry
    i0 = g.viewer_cell[0]
    rows = bev.data[ROAD, i0 - 12:i0 + 12]
    assert rows.any(axis=1).all()
    assert all(np.array_equal(r, rows[0]) for r in rows)
    cols = np.nonzero(rows[0])[0]
    assert np.all(np.diff(cols) == 1)
    assert bev.data[2:].sum() == 0


def test_vehicle_five_metres_ahead():
    viewer = Pose2D(10.0, -3.0, 0.4)
    ahead = local_to_world(np.array([0.0, 5.0]), viewer)
    other = AgentState(1, VEHICLE, Pose2D(ahead[0], ahead[1], viewer.heading), 0.0, (2.2, 0.9))
    world = WorldState(0, 0.0, (other,), {})
    bev = render_bev(world, _empty_map(), viewer)
    c = bev.geometry.cell_centers()
    expect = (np.abs(c[..., 0]) <= 0.9) & (np.abs(c[..., 1] - 5.0) <= 2.2)
    assert np.array_equal(bev.data[VEHICLE_CH], expect)
    ii, jj = np.nonzero(expect)
    vi, vj = bev.geometry.viewer_cell
    assert ii.mean() == vi - 20 and jj.mean() == vj


def _empty_map():
    from lbw.world.roadmap import compile_map
    from conftest import fixture_source

    src = fixture_source()
    src["buildings"] = []
    m = compile_map(src)
    # push the whole network far away so only the vehicle is drawn
    return _shifted(m)


def _shifted(m):
    import copy

    from lbw.world.roadmap import compile_map

    src = copy.deepcopy(m.source)
    for n in src["nodes"]:
        n["x"] += 5000.0
    src["sidewalks"] = []
    return compile_map(src)


def test_binary_and_single_light(town_b):
    w = World(town_b, seed=2)
    for _ in range(30):
        w.step()
    for a in w.state.agents[:6]:
        bev = render_bev(w.state, town_b, a.pose, exclude=(a.id,))
        assert bev.data.dtype == bool and bev.data.shape[0] == N_CHANNELS
        assert bev.data[[LIGHT_GREEN, LIGHT_YELLOW, LIGHT_RED]].sum(axis=0).max() <= 1


def test_transform_identity(town_b):
    w = World(town_b, seed=0)
    bev, vis = render_ego_view(w.state, town_b, 0)
    p = w.state.agent(0).pose
    b2, v2 = transform_bev(bev, vis, p, p)
    assert b2 == bev and v2 == vis


def test_transform_quarter_turn(town_a):
    viewer = lane_pose(town_a, "n00>n10", 20.0)
    bev = render_static(town_a, viewer, BevGeometry())
    vis = VisibilityMap(np.ones((128, 128), bool), bev.geometry)
    turned = Pose2D(viewer.x, viewer.y, viewer.heading + math.pi / 2)
    b2, v2 = transform_bev(bev, vis, viewer, turned)
    i0, j0 = b2.geometry.viewer_cell
    # the band now runs left-right through the viewer row
    band = b2.data[ROAD, i0 - 3:i0 + 4, j0 - 20:j0 + 20]
    assert band.all()
    col = b2.data[ROAD, :, j0 - 20]
    assert col.sum() < 40
    # cells whose preimage is outside the source are invisible and empty
    c = b2.geometry.cell_centers()
    assert not v2.data[c[..., 0] < -6.2].any()
    assert v2.data[(c[..., 0] > -5.8) & (c[..., 1] < 15.8)].all()
    assert not v2.data[c[..., 1] > 16.2].any()


def test_transform_out_of_source():
    g = BevGeometry(32, 32, 0.5, 4)
    bev = BevGrid(np.ones((N_CHANNELS, 32, 32), bool), g)
    vis = VisibilityMap(np.ones((32, 32), bool), g)
    ego = Pose2D(0.0, 0.0, 0.0)
    far = Pose2D(100.0, 0.0, 0.0)
    b2, v2 = transform_bev(bev, vis, ego, far)
    assert not b2.data.any() and not v2.data.any()


def test_transform_matches_direct_render(town_b):
    w = World(town_b, seed=4, density="dense")
    for _ in range(40):
        w.step()
    st_ = w.state
    ego = st_.agent(0)
    g = BevGeometry()
    checked = 0
    for obs in st_.agents[1:]:
        if obs.kind != VEHICLE or math.hypot(obs.pose.x - ego.pose.x, obs.pose.y - ego.pose.y) > 15:
            continue
        ex = (ego.id, obs.id)
        src = render_bev(st_, town_b, ego.pose, g, exclude=ex)
        vis = VisibilityMap(np.ones((g.height, g.width), bool), g)
        moved, mvis = transform_bev(src, vis, ego.pose, obs.pose)
        direct = render_bev(st_, town_b, obs.pose, g, exclude=ex)
        mask = mvis.data[None] & np.ones((N_CHANNELS, 1, 1), bool)
        a, b = moved.data & mask, direct.data & mask
        assert not (a & ~dilate(b)).any()
        assert not (b & ~dilate(a) & dilate(mvis.data)[None] & mask).any()
        checked += 1
    assert checked


def test_open_field_all_visible():
    world, m, v = random_scene(np.random.default_rng(1), n_vehicles=0, n_buildings=0)
    vis = render_visibility(world, m, v, G64, ego_id=0)
    assert vis.data.all()


def test_vehicle_shadow():
    viewer = Pose2D(0.0, 0.0, math.pi / 2)
    other = AgentState(1, VEHICLE, Pose2D(0.0, 6.0, 0.0), 0.0, (2.2, 0.9))
    world = WorldState(0, 0.0, (AgentState(0, VEHICLE, viewer, 0.0, (2.2, 0.9)), other), {})
    vis = render_visibility(world, SimpleNamespace(buildings=[]), viewer, G64, ego_id=0)
    assert vis.point_visible([0.0, 4.0])
    assert vis.point_visible([0.0, 6.0])  # the car itself is seen
    assert not vis.point_visible([0.0, 8.0])
    assert not vis.point_visible([1.5, 12.0])
    assert vis.point_visible([-6.0, 8.0])
    assert vis.point_visible(vis.geometry.cell_centers()[vis.geometry.viewer_cell])


def test_building_corner():
    viewer = Pose2D(0.0, 0.0, math.pi / 2)
    square = np.array([[2.0, 4.0], [6.0, 4.0], [6.0, 8.0], [2.0, 8.0]])
    world = WorldState(0, 0.0, (AgentState(0, VEHICLE, viewer, 0.0, (2.2, 0.9)),), {})
    vis = render_visibility(world, SimpleNamespace(buildings=[square]), viewer, G64, ego_id=0)
    # world (x, y) -> agent frame (x right = world -y ... ) for heading pi/2: agent x = world x
    assert not vis.point_visible([4.0, 10.0])
    assert vis.point_visible([-4.0, 10.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_visibility_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    world, m, v = random_scene(rng, cover_viewer=bool(seed % 7 == 0))
    got = render_visibility(world, m, v, G64, ego_id=0)
    assert np.array_equal(got.data, visibility_oracle(v, scene_polygons(world, m), G64))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_visibility_monotone_along_rays(seed):
    rng = np.random.default_rng(seed)
    world, m, v = random_scene(rng)
    from lbw.bev import occluders_for
    occ = occluders_for(world, m, v, G64, 0)
    pts = rng.uniform(-10, 10, (400, 2))
    vis = visible_points(pts, occ)
    far = visible_points(pts * rng.uniform(1.0, 3.0, (400, 1)), occ)
    assert not (far & ~vis).any()


def test_ppm_round_trip(tmp_path, town_a):
    viewer = lane_pose(town_a, "n00>n10", 20.0)
    bev = render_static(town_a, viewer, BevGeometry())
    img = compose_image(bev, VisibilityMap(np.ones((128, 128), bool), bev.geometry), np.array([[0, 3.0], [0, 6.0]]))
    assert img.shape == (128, 128, 3) and img.dtype == np.uint8
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    with pytest.raises(OSError, match="nope"):
        write_ppm(tmp_path / "nope" / "a.ppm", img)
