"""How much work the occupancy cache saves, and what it can cost.

Trains the grid model briefly, then renders held-out views with and
without culling.  For every pixel, the change caused by culling is
compared with the bound ``1 - exp(-tau)``, where ``tau`` is the optical
thickness of the samples that were skipped.
"""
import numpy as np

from tinerf.autodiff import Graph, ParameterTape
from tinerf.data import SynthSpec, synthesize
from tinerf.hashgrid import HashGridConfig
from tinerf.models import GridConfig, build_model
from tinerf.render import skip_bound
from tinerf.training import TrainConfig, train

tr, te = synthesize(SynthSpec(n_frames=6, train_views=8, test_views=2, size=32))
cfg = GridConfig(hash=HashGridConfig(levels=6, table_size=2 ** 12), width=32, color_width=32,
                 occupancy_res=32)
tape = ParameterTape()
model = build_model("grid", cfg, tape, tr.aabb, tr.n_frames, np.random.default_rng(1),
                    tr.background, tr.near, tr.far)
train(model, tape, tr, TrainConfig(iters=800, rays_per_batch=128, occupancy_warmup=128))
print(f"after training, {100 * model.occupancy.occupancy:.1f}% of {cfg.occupancy_res}^3 cells are occupied")

n_full = n_kept = 0
worst = []
for v in range(len(te)):
    rays = te.rays(v)
    g = Graph(tape, track=False)
    full = model.render(g, rays, None, use_occupancy=False)
    kept = model.render(g, rays, None, use_occupancy=True)
    s = full.samples
    sigma = model.density_np(s.positions, rays.times[s.ray])
    skipped = ~model.occupancy.occupied(s.positions)
    tau = np.bincount(s.ray, sigma * s.deltas * skipped, minlength=len(rays))
    change = np.abs(kept.color.value - full.color.value).max(axis=1)
    worst.append((change - skip_bound(tau)).max())
    n_full += full.n_evals
    n_kept += kept.n_evals

print(f"samples evaluated: {n_full} without culling, {n_kept} with ({100 * (1 - n_kept / n_full):.1f}% fewer)")
print(f"largest (change - bound) over all pixels: {max(worst):.2e}  (zero or below, up to round-off)")
