"""What the temporal smoothness term measures on the two representations.

Neither model is trained here; the point is the arithmetic.

1. A keyframe bank blends two neighbouring MLPs linearly in time, so the
   feature moves along a straight segment between keyframes.
2. For a hash level, the feature difference between adjacent frames that
   share a temporal cell is the plane difference scaled by the frame
   step in cell units.  The squared version is what the grid penalty sums.
"""
import numpy as np

from tinerf.autodiff import Graph, ParameterTape
from tinerf.hashgrid import HashGridConfig, HashGridSet
from tinerf.keyframes import BankConfig, KeyframeBank

rng = np.random.default_rng(0)

# -- keyframe bank ------------------------------------------------------------
tape = ParameterTape()
bank = KeyframeBank(BankConfig(slots=(2, 5), level_dim=4, static_dim=4), tape, n_frames=6, rng=rng)
g = Graph(tape, track=False)
x = rng.random((1, 3))
inp = bank.dynamic_input(g, x, bank.embed(g, [0]))
print("level 1 (5 slots): feature along t, first two channels")
for t in np.linspace(0.0, 0.4, 9):
    v = bank.dynamic_feature_level(g, 1, inp, np.array([t])).value[0]
    print(f"  t={t:.2f}  {v[0]:+.5f} {v[1]:+.5f}")
print("  (straight segments, kinks only at t = 0.2, 0.4)")

# -- hash grid ----------------------------------------------------------------
tape = ParameterTape()
grid = HashGridSet(HashGridConfig(levels=2, table_size=2 ** 10), tape, rng)
tape.values[:] = rng.normal(size=len(tape))
n_f = 20
sres, tres = grid.resolutions[0]
eps = tres / (n_f - 1)
x = rng.random((5, 3))
f = np.array([1, 3, 4, 11, 15])  # f and f+1 in the same temporal cell
ta, tb = f / (n_f - 1), (f + 1) / (n_f - 1)
d_frames = grid.interp_4d(x, ta, 0)[0] - grid.interp_4d(x, tb, 0)[0]
k = np.floor(ta * tres)
d_planes = grid.interp_4d(x, k / tres, 0)[0] - grid.interp_4d(x, (k + 1) / tres, 0)[0]
print(f"\nhash level 0 ({sres}^3 x {tres} cells), {n_f} frames, eps = {eps:.4f}")
print("  |frame diff|^2        eps^2 |plane diff|^2")
for a, b in zip((d_frames ** 2).sum(1), eps ** 2 * (d_planes ** 2).sum(1)):
    print(f"  {a:.12f}   {b:.12f}")
