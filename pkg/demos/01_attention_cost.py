"""
Prototype attention versus full self-attention
==============================================

Full self-attention compares every clip with every other clip, so its core
cost grows with M squared. The prototype variant routes clips through d_t
learned prototypes instead, and its core cost grows linearly in M.
"""

import time

import numpy as np

from phiaqa import attention as A

# feature width and key width of the real backbone features
D, d_k, d_t = 1024, 128, 32

# multiply-accumulate counts of the core product, for a few sequence lengths
for M in (64, 128, 256, 512):
    v = A.mac_count("vanilla", M, D, d_k, core_only=True)
    t = A.mac_count("tesa", M, D, d_k, d_t, core_only=True)
    print(f"M={M:4d}  vanilla core={v:>12,d}  prototype core={t:>12,d}  ratio={v / t:5.1f}")

# the same comparison with the projections included
M = 68   # clips in a rhythmic gymnastics routine
print("whole layer at M=68:", A.mac_count("vanilla", M, D, d_k), "vs", A.mac_count("tesa", M, D, d_k, d_t))

# both attentions on one random sequence
rng = np.random.default_rng(0)
s = 1 / np.sqrt(D)
wq, wk, wv = rng.normal(size=(D, d_k)) * s, rng.normal(size=(D, d_k)) * s, rng.normal(size=(D, D)) * s
vanilla = A.AttentionParams(wq, wk, wv, None, "vanilla")
proto = A.AttentionParams(wq, wk, wv, rng.normal(size=(d_t, d_k)), "tesa")

H = rng.normal(size=(1024, D))
t0 = time.perf_counter(); out_v = A.vanilla_attention(H, vanilla); t_v = time.perf_counter() - t0
t0 = time.perf_counter(); out_t = A.tesa_attention(H, proto); t_t = time.perf_counter() - t0
print(f"M=1024 wall time: vanilla {t_v * 1e3:.0f} ms, prototype {t_t * 1e3:.0f} ms")

# every prototype output is a convex mix of d_t prototype values, so the rows
# of the result span at most d_t directions
print("rank of prototype output:", np.linalg.matrix_rank(out_t.data), "of", D)
print("rank of vanilla output:  ", np.linalg.matrix_rank(out_v.data))
