"""Independent reference implementations used by the test-suite."""
import math
from types import SimpleNamespace

import numpy as np

from lbw.geometry import Pose2D
from lbw.world.sim import VEHICLE, AgentState, WorldState


def cell_centers_world(g, viewer):
    """World coordinates of every cell centre, built from unit vectors."""
    j = np.arange(g.width) - g.width // 2
    i = g.height - 1 - g.rows_behind - np.arange(g.height)
    x = j[None, :] * g.resolution + 0 * i[:, None]
    y = i[:, None] * g.resolution + 0 * j[None, :]
    f = np.array([math.cos(viewer.heading), math.sin(viewer.heading)])
    r = np.array([math.sin(viewer.heading), -math.cos(viewer.heading)])
    return viewer.position + x[..., None] * r + y[..., None] * f


def cyrus_beck_hits(o, t, poly):
    """Closed segment o->t[k] vs CCW convex polygon by parametric clipping."""
    t_enter = np.zeros(len(t))
    t_leave = np.ones(len(t))
    empty = np.zeros(len(t), dtype=bool)
    d = t - o
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        normal = np.array([-(b[1] - a[1]), b[0] - a[0]])  # inward for CCW
        num = normal @ (o - a)
        den = d @ normal
        par = den == 0
        empty |= par & (num < 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = -num / den
        t_enter = np.where(~par & (den > 0), np.maximum(t_enter, ts), t_enter)
        t_leave = np.where(~par & (den < 0), np.minimum(t_leave, ts), t_leave)
    return ~empty & (t_enter <= t_leave)


def inside(points, poly):
    ok = np.ones(len(points), dtype=bool)
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        ok &= (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0]) >= 0
    return ok


def visibility_oracle(viewer, polygons, g):
    pts = cell_centers_world(g, viewer).reshape(-1, 2)
    vis = np.ones(len(pts), dtype=bool)
    for poly in polygons:
        vis &= ~(cyrus_beck_hits(viewer.position, pts, poly) & ~inside(pts, poly))
    return vis.reshape(g.height, g.width)


def regular_polygon(c, radius, n, rot):
    ang = rot + 2 * math.pi * np.arange(n) / n
    return np.asarray(c) + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def random_scene(rng, extent=20.0, n_vehicles=None, n_buildings=None, cover_viewer=False):
    """A world state, a map stub with buildings, and the viewer id 0."""
    viewer = Pose2D(*rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi))
    agents = [AgentState(0, VEHICLE, viewer, 0.0, (2.2, 0.9))]
    nv = rng.integers(0, 7) if n_vehicles is None else n_vehicles
    for k in range(nv):
        p = Pose2D(*(viewer.position + rng.uniform(-extent, extent, 2)), rng.uniform(-math.pi, math.pi))
        agents.append(AgentState(k + 1, VEHICLE, p, 0.0, (rng.uniform(1, 3), rng.uniform(0.5, 1.2))))
    nb = rng.integers(0, 4) if n_buildings is None else n_buildings
    buildings = [regular_polygon(viewer.position + rng.uniform(-extent, extent, 2), rng.uniform(1, 6),
                                 int(rng.integers(3, 8)), rng.uniform(0, 2 * math.pi)) for _ in range(nb)]
    if cover_viewer:
        buildings.append(regular_polygon(viewer.position + rng.uniform(-1, 1, 2), 3.0, 6, 0.3))
    world = WorldState(0, 0.0, tuple(agents), {})
    return world, SimpleNamespace(buildings=buildings), viewer


def scene_polygons(world, roadmap, viewer_id=0):
    return list(roadmap.buildings) + [a.corners() for a in world.agents if a.id != viewer_id]


def central_difference(fn, theta, coords, eps=1e-4):
    """Numerical partial derivatives of a scalar ``fn(theta)`` at ``coords``."""
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        t = theta.copy()
        t[i] = theta[i] + eps
        up = fn(t)
        t[i] = theta[i] - eps
        down = fn(t)
        out[n] = (up - down) / (2 * eps)
    return out


def relative_error(analytic, numeric, floor=1e-7):
    a, b = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(cfg, fusion, seed=0, n_probe=200, eps=1e-4, batch=6):
    """Max relative error between the analytic WBC gradient and central differences.

    Probes whose +-eps perturbation flips the sign of any ReLU pre-activation
    or l1 residual straddle a kink, where no derivative exists; those are
    redrawn and counted.  Returns (max error, analytic, numeric, n_skipped).
    """
    from lbw.policy import Architecture, ModelParams, _forward, _inputs, init_params, unpack, wbc_loss

    c = cfg.replace(policy__fusion=fusion)
    arch = Architecture.from_config(c)
    rng = np.random.default_rng([seed, 99])
    p = init_params(c, seed)
    theta = p.theta.copy()
    # randomise the zero-initialised head so every layer carries gradient
    views = unpack(theta, arch)
    views["head.w"][...] = rng.normal(0, 0.3, views["head.w"].shape)
    views["head.b"][...] = rng.normal(0, 0.3, views["head.b"].shape)
    s = c.bev.width // c.policy.pool
    pooled = rng.integers(0, c.policy.pool ** 2 + 1, (batch, 8, s, s)).astype(np.uint8)
    speed = rng.uniform(0, 10, batch)
    cmd = rng.integers(0, 4, batch)
    target = rng.normal(0, 3, (batch, c.dataset.num_waypoints, 2))
    xm, xv = _inputs(arch, pooled)

    def signs(t):
        pred, (_, cache, _, z, _) = _forward(t, arch, xm, xv, speed, cmd)
        parts = [entry[4] > 0 for entry in cache] + [z > 0, pred > target.reshape(pred.shape)]
        return np.concatenate([q.ravel() for q in parts])

    def loss(t):
        return wbc_loss(ModelParams(t, p.fingerprint), c, pooled, speed, cmd, target)[0]

    base = signs(theta)
    coords, skipped = [], 0
    for i in rng.permutation(theta.size):
        t = theta.copy()
        t[i] += eps
        up = signs(t)
        t[i] = theta[i] - eps
        if np.array_equal(up, base) and np.array_equal(signs(t), base):
            coords.append(i)
        else:
            skipped += 1
        if len(coords) == n_probe:
            break
    coords = np.array(coords)
    _, grad = wbc_loss(ModelParams(theta, p.fingerprint), c, pooled, speed, cmd, target)
    num = central_difference(loss, theta, coords, eps)
    return float(np.max(relative_error(grad[coords], num))), grad[coords], num, skipped
