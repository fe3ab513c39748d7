"""Regenerate the shipped benchmark suites under src/lbw/suites/.

Every kept route is solved by the expert on seeds 0-4 at the suite's density.
"""
import sys
import time
from pathlib import Path

from lbw.bench import generate_suite

OUT = Path(__file__).resolve().parents[1] / "src" / "lbw" / "suites"

PLAN = [
    ("town-a-regular", "town-a", "regular", 10, {}),
    ("town-b-regular", "town-b", "regular", 11, {}),
    ("town-b-dense", "town-b", "dense", 12, {}),
    ("town-c-regular", "town-c", "regular", 13, {"require": "hub"}),
]


def main(names):
    for name, map_id, density, seed, extra in PLAN:
        if names and name not in names:
            continue
        t = time.time()
        suite = generate_suite(name, map_id, density, seed=seed, **extra)
        (OUT / f"{name}.json").write_text(suite.to_json() + "\n")
        print(f"{name}: {len(suite.routes)} routes in {time.time() - t:.0f} s", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
