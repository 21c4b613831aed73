"""Walk through one shared-A adapter site.

Shows the pieces that make up a site: the shared general-feature matrix
A, the per-expert specific matrices B_k, the router, weight dropout on
A, and the merged-weight view of the whole thing.
"""

import numpy as np

from mosld import Rng
from mosld.adapters import (AdapterHyper, Mode, adapter_delta, dropped_a,
                            init_shared_layer, merge_check, mosld_forward)
from mosld.routing import gate
from mosld.tape import Tensor, constant

rng = Rng(2024)
hyper = AdapterHyper(rank=4, alpha=8.0, drop_p=0.2)
layer = init_shared_layer(d_in=16, d_out=16, hyper=hyper, n_experts=3,
                          rng=rng.split(0))

print("one site holds:")
print(f"  shared A      {layer.a_shared.shape}   (general features)")
for i, b in enumerate(layer.experts):
    print(f"  expert B_{i}    {b.shape}   (zero at init)")
print(f"  router        {layer.router_w.shape}")

# B starts at zero, so the adapted projection equals the frozen one
x = constant(rng.split(1).normal((16,), 1.0))
w0 = constant(rng.split(2).normal((16, 16), 0.25))
g = gate(layer.router_w, x, k=2)
base_out = w0.value @ x.value
adapted = mosld_forward(w0, layer, x, g, Mode.EVAL, None)
print("\nzero-delta at init:",
      float(np.max(np.abs(adapted.value - base_out))))

# the gate picks 2 of 3 experts and renormalizes their weights
print("gate picked experts", g.indices.tolist(),
      "with weights", np.round(g.scores.value, 4).tolist(),
      "summing to", float(g.scores.value.sum()))

# weight dropout scales the kept entries of A by 1/(1-p), so the
# masked matrix is unbiased; evaluation mode never masks
dropped = dropped_a(layer, Mode.TRAIN, rng.split(3))
kept = dropped.value != 0
print("\ntrain-mode dropout kept "
      f"{kept.mean():.2%} of A entries (p={hyper.drop_p}), "
      f"kept entries scaled by {1 / (1 - hyper.drop_p):.3f}")
print("eval mode returns A itself:",
      dropped_a(layer, Mode.EVAL, None) is layer.a_shared)

# after training (simulated by nudging each B), the adapter is
# equivalent to adding a low-rank update to the frozen weight
b_rng = rng.split(4)
for i, b in enumerate(layer.experts):
    b.value = b_rng.split(i).normal(b.shape, 0.1)
delta_w = merge_check(layer, g)
direct = adapter_delta(layer, x, g, Mode.EVAL, None)
via_merge = delta_w @ x.value
print("\nmerged-weight view agrees with the live forward:",
      float(np.max(np.abs(direct.value - via_merge))))
# sharing A caps the merged rank at `rank` no matter how many experts
# are mixed: the update factors as (sum_k S_k B_k) A
print(f"merged update rank = {np.linalg.matrix_rank(delta_w)} "
      f"(= rank of the shared A, not k*rank = {2 * hyper.rank})")
