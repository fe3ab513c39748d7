"""
Closed-loop driving
===================

Train an ego-only policy and a learning-by-watching policy on the same
drive, then let each one drive a few benchmark routes in a town it has
never seen.
"""

from lbw.bench import ModelDriver, evaluate, load_suite
from lbw.config import Config
from lbw.dataset import collect
from lbw.policy import train, train_lbw_pipeline
from lbw.world.roadmap import load_map

cfg = Config()
ego, watched = collect(load_map("town-a"), cfg, minutes=5, seed=0)

ego_only, _ = train(cfg, ego, seed=0)
lbw, _, _ = train_lbw_pipeline(cfg, ego, watched, beta=0.5, seed=0)

suite = load_suite("town-b-regular")
town_b = load_map(suite.map_id)
for label, params in (("ego", ego_only), ("lbw", lbw)):
    rep = evaluate(ModelDriver(params, cfg, town_b, label), suite, seeds=[0, 1, 2], cfg=cfg, max_routes=4)
    print(f"{label:4s} success {rep.mean:5.1f} ± {rep.std:4.1f} %   collisions {rep.collisions}   "
          f"timeouts {rep.timeouts}")
