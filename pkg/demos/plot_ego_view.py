"""
What the ego sees
=================

Render one bird's-eye view of a town from the ego car, together with the
visibility map, and write both as a PPM image.
"""


from lbw.bev import CHANNEL_NAMES, compose_image, render_ego_view, write_ppm
from lbw.world.roadmap import load_map
from lbw.world.sim import World

# a town with regular traffic; let it run for a few seconds so cars spread out
town = load_map("town-a")
world = World(town, seed=2)
for _ in range(100):
    world.step()

ego = world.vehicle_ids()[0]
bev, vis = render_ego_view(world.state, town, ego)

# per-channel occupancy, and how much of the grid the ego can actually see
for k, name in enumerate(CHANNEL_NAMES):
    print(f"{name:12s} {int(bev.data[k].sum()):6d} cells")
print(f"visible      {vis.data.mean():6.1%}")

write_ppm("ego_view.ppm", compose_image(bev, vis))
print("wrote ego_view.ppm")
