"""Authoring code for the shipped maps.

``python -m lbw.world.towns`` regenerates ``maps/*.json``.  Runtime code
only ever reads the JSON files.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

ROAD_HALF = 3.5
SIDEWALK_OFFSET = 5.0
BLOCK_INSET = 7.0


def inset_convex(poly, d: float) -> np.ndarray:
    """Shift every edge of a CCW convex polygon inward by ``d``."""
    p = np.asarray(poly, dtype=float)
    n = len(p)
    lines = []
    for k in range(n):
        a, b = p[k], p[(k + 1) % n]
        e = (b - a) / np.linalg.norm(b - a)
        inward = np.array([-e[1], e[0]])
        lines.append((a + inward * d, e))
    out = []
    for k in range(n):
        (p1, e1), (p2, e2) = lines[k - 1], lines[k]
        m = np.array([e1, -e2]).T
        t = np.linalg.solve(m, p2 - p1)
        out.append(p1 + e1 * t[0])
    return np.array(out)


def _sidewalks(nodes: dict, roads: list) -> list:
    walks = []
    for a, b in roads:
        pa = np.array([nodes[a]["x"], nodes[a]["y"]])
        pb = np.array([nodes[b]["x"], nodes[b]["y"]])
        d = pb - pa
        length = np.linalg.norm(d)
        d = d / length
        n = np.array([-d[1], d[0]])
        ra = nodes[a].get("radius", 7.0) + 3.0
        rb = nodes[b].get("radius", 7.0) + 3.0
        if length - ra - rb < 10.0:
            continue
        for side in (1.0, -1.0):
            off = n * SIDEWALK_OFFSET * side
            walks.append([list(pa + d * ra + off), list(pb - d * rb + off)])
    return walks


def _finish(name, nodes, roads, buildings, offsets, lights=None) -> dict:
    lookup = {n["id"]: n for n in nodes}
    src = {
        "name": name,
        "lane_width": 3.5,
        "nodes": nodes,
        "roads": [{"from": a, "to": b} for a, b in roads],
        "buildings": [[[round(float(x), 4), round(float(y), 4)] for x, y in poly] for poly in buildings],
        "sidewalks": [[[round(float(x), 4), round(float(y), 4)] for x, y in w] for w in _sidewalks(lookup, roads)],
        "lights": {"green": 6.0, "yellow": 2.5, "all_red": 1.5, "offsets": offsets, **(lights or {})},
    }
    return src


def grid_town(name: str, xs, ys, removed=(), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    nodes = []
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            nodes.append({"id": f"n{i}{j}", "x": float(x), "y": float(y), "radius": 7.0})
    removed = {tuple(sorted(e)) for e in removed}
    roads = []
    for j in range(len(ys)):
        for i in range(len(xs)):
            if i + 1 < len(xs):
                e = (f"n{i}{j}", f"n{i + 1}{j}")
                if tuple(sorted(e)) not in removed:
                    roads.append(e)
            if j + 1 < len(ys):
                e = (f"n{i}{j}", f"n{i}{j + 1}")
                if tuple(sorted(e)) not in removed:
                    roads.append(e)
    buildings = []
    merged = set()
    for j in range(len(ys) - 1):
        for i in range(len(xs) - 1):
            if (i, j) in merged:
                continue
            x0, x1, y0, y1 = xs[i], xs[i + 1], ys[j], ys[j + 1]
            top = tuple(sorted((f"n{i}{j + 1}", f"n{i + 1}{j + 1}")))
            if top in removed and j + 2 < len(ys):
                y1 = ys[j + 2]
                merged.add((i, j + 1))
            rect = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
            buildings.append(inset_convex(rect, BLOCK_INSET))
    offsets = {n["id"]: round(float(rng.uniform(0.0, 40.0)), 2) for n in nodes}
    return _finish(name, nodes, roads, buildings, offsets)


def town_c(seed: int = 2) -> dict:
    """Five-way hub, T-junction ring with bends, and one mini roundabout."""
    rng = np.random.default_rng(seed)
    arms = [0.0, 60.0, 120.0, 180.0, 270.0]
    r = 75.0
    nodes = [{"id": "hub", "x": 0.0, "y": 0.0, "radius": 9.0}]
    roads = []
    for k, a in enumerate(arms):
        t = math.radians(a)
        node = {"id": f"a{k}", "x": r * math.cos(t), "y": r * math.sin(t), "radius": 7.0}
        if a == 270.0:
            node.update(roundabout=True, radius=9.0, ring_radius=5.5)
        nodes.append(node)
        roads.append(("hub", f"a{k}"))
    quads = []
    for k, a in enumerate(arms):
        b = arms[(k + 1) % len(arms)] + (360.0 if k + 1 == len(arms) else 0.0)
        gap = math.radians(b - a)
        mid = math.radians(a) + gap / 2
        rb = r / math.cos(gap / 2)
        nodes.append({"id": f"b{k}", "x": rb * math.cos(mid), "y": rb * math.sin(mid), "radius": 7.0})
        roads.append((f"a{k}", f"b{k}"))
        roads.append((f"b{k}", f"a{(k + 1) % len(arms)}"))
        ta, tb = math.radians(a), math.radians(b)
        quads.append([[0.0, 0.0], [r * math.cos(ta), r * math.sin(ta)],
                      [rb * math.cos(mid), rb * math.sin(mid)], [r * math.cos(tb), r * math.sin(tb)]])
    buildings = [inset_convex(q, BLOCK_INSET) for q in quads]
    offsets = {n["id"]: round(float(rng.uniform(0.0, 40.0)), 2) for n in nodes}
    return _finish("town-c", nodes, roads, buildings, offsets)


def shipped_sources() -> dict:
    return {
        "town-a": grid_town("town-a", [0.0, 60.0, 120.0], [0.0, 60.0, 120.0], seed=0),
        "town-b": grid_town("town-b", [0.0, 55.0, 120.0, 175.0], [0.0, 65.0, 125.0],
                            removed=[("n11", "n21")], seed=1),
        "town-c": town_c(),
    }


def main() -> None:
    out = Path(__file__).parent / "maps"
    out.mkdir(exist_ok=True)
    for name, src in shipped_sources().items():
        (out / f"{name}.json").write_text(json.dumps(src, indent=1))


if __name__ == "__main__":
    main()
