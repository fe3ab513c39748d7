import pytest

from lbw.config import Config
from lbw.world.roadmap import load_map


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running closed-loop or training test")


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture(scope="session")
def town_a():
    return load_map("town-a")


@pytest.fixture(scope="session")
def town_b():
    return load_map("town-b")


@pytest.fixture(scope="session")
def town_c():
    return load_map("town-c")


def fixture_source(red_node=None):
    """3x3 grid town; ``red_node`` gets a light that never turns green."""
    from lbw.world.towns import grid_town

    src = grid_town("fixture", [0.0, 70.0, 140.0], [0.0, 70.0, 140.0], seed=3)
    if red_node is not None:
        src["lights"]["overrides"] = {red_node: {"green": 0.0, "yellow": 0.0}}
    return src


@pytest.fixture(scope="session")
def red_map():
    from lbw.world.roadmap import compile_map

    return compile_map(fixture_source("n11"))


def add_vehicle(world, vid, lanes, s, speed=0.0, external=False):
    """Insert a fixed-route vehicle into a live world (test scaffolding)."""
    import dataclasses

    import numpy as np

    from lbw.geometry import Pose2D
    from lbw.world.routes import Route, RoutePath
    from lbw.world.sim import VEHICLE, AgentState, _Vehicle

    path = RoutePath(world.map, lanes)
    p = path.point_at(s)
    world._veh[vid] = _Vehicle(path, s, np.random.default_rng(vid), True, external)
    vc = world.cfg.vehicle
    agent = AgentState(vid, VEHICLE, Pose2D(float(p[0]), float(p[1]), path.heading_at(s)), speed,
                       (vc.half_length, vc.half_width), Route(list(lanes), [], s))
    world.state = dataclasses.replace(world.state, agents=world.state.agents + (agent,))
    return agent
