"""
Learning from other cars
========================

Drive the expert ego for two simulated minutes, track the cars it sees,
and turn their motion into pseudo-demonstrations.  Then blend noisy
labels with a baseline model's prediction; this only pays off when the
label noise is larger than the baseline's own error.
"""

import numpy as np

from lbw.config import Config
from lbw.dataset import collect, inject_waypoint_noise, refurbish
from lbw.policy import baseline_predictor, train
from lbw.world.roadmap import Command, load_map

cfg = Config()
town = load_map("town-a")

ego, watched = collect(town, cfg, minutes=2, seed=0)
print(f"ego samples {ego.count}, watched samples {watched.count}")

# commands inferred for the watched cars
names = {int(c): c.name for c in Command}
counts = np.bincount([s.command for s in watched.samples], minlength=4)
print({names[i]: int(n) for i, n in enumerate(counts)})

# corrupt the watched labels, then refurbish them with a model trained on ego data only
base, _ = train(cfg, ego, seed=0)
predict = baseline_predictor(base, cfg)


def err(ds):
    return float(np.mean(np.abs(ds.waypoints() - watched.waypoints())))


print(f"baseline error on the watched states {err(refurbish(watched, predict, 0.0)):.3f} m")
for sigma in (0.5, 2.0):
    noisy = inject_waypoint_noise(watched, sigma, np.random.default_rng(1))
    fixed = refurbish(noisy, predict, beta=0.5)
    print(f"sigma {sigma}: noisy labels {err(noisy):.3f} m, refurbished {err(fixed):.3f} m")
