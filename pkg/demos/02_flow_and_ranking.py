"""
A few steps along a straight line, and ranking by nearest clips
===============================================================
"""

import numpy as np

from phiaqa import diffcore as dc
from phiaqa import gmf, lcr

rng = np.random.default_rng(0)

# start and end features for one video: 4 clips of width 8
H0 = rng.normal(size=(4, 8))
H1 = rng.normal(size=(4, 8))

# the gap network predicts one increment per step; P steps should land on H1
P = 4
store = dc.ParamStore()
gmf.init_gapnet(store, 8, 16, rng)
opt = dc.OptimizerState.for_params(store, momentum=0.9, weight_decay=0.0)

def loss(p):
    return gmf.flow_loss(gmf.rollout(gmf.GapNetParams.from_store(p), H0, P), H0, H1, P)

for step in range(1500):
    value, grads = dc.gradient_of(loss, store)
    dc.sgd_step(store, grads, opt, 0.002)
    if step % 300 == 0:
        print(f"step {step:4d}  flow loss {value:.5f}")

# each intermediate state should sit on the segment between H0 and H1
traj = gmf.rollout(gmf.GapNetParams.from_store(store), H0, P)
for j, state in enumerate(traj.states):
    target = gmf.interpolate_target(H0, H1, j, P)
    print(f"state {j}: distance to the line point {np.linalg.norm(state.data - target):.4f}")

# nearest-clip distance between two tiny sequences; note that it is directed
a = np.array([[0.0], [2.0]])
b = np.array([[1.0], [5.0]])
print("a -> b:", lcr.action_distance(a, b), "  b -> a:", lcr.action_distance(b, a))

# a batch whose feature distances follow the score distances gets a small
# ranking penalty; shuffling the scores raises it
scores = np.array([0.1, 0.4, 0.5, 0.9])
feats = scores[:, None, None] * np.ones((4, 3, 2)) + rng.normal(size=(4, 3, 2)) * 0.01
D = lcr.distance_matrix(feats)
print("aligned scores:  ", lcr.lcr_loss(D, lcr.score_distance_matrix(scores)).item())
print("shuffled scores: ", lcr.lcr_loss(D, lcr.score_distance_matrix(scores[[3, 0, 2, 1]])).item())
