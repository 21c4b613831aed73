"""Gate mechanics and the load-balancing loss.

Routes a batch of tokens through a top-K gate, shows the tie-breaking
rule, and evaluates the balance loss on uniform, skewed, and collapsed
routing patterns.
"""

import numpy as np

from mosld import Rng
from mosld.ops import softmax, topk_renorm
from mosld.routing import (gate, gate_rows, load_balance_loss,
                           stats_from_rows)
from mosld.tape import Tensor, constant

rng = Rng(7)
n_experts, d = 5, 12
router = constant(rng.split(0).normal((n_experts, d), 0.3))

# one token: softmax over expert logits, keep the top 2, renormalize
x = constant(rng.split(1).normal((d,), 1.0))
g = gate(router, x, k=2)
print("full probs:", np.round(g.full_probs.value, 4))
print("selected  :", g.indices.tolist(),
      "renormalized to", np.round(g.scores.value, 4).tolist(),
      f"(sum {g.scores.value.sum():.1f})")

# exact ties go to the lowest expert index
tied = constant(np.array([1.0, 2.0, 2.0, 2.0]))
idx, scores = topk_renorm(softmax(tied), 2)
print("\ntie among experts 1, 2, 3 with k=2 selects:", idx.tolist())

# batched routing agrees with the per-token gate row by row
xs = constant(rng.split(2).normal((64, d), 1.0))
indices, weights, probs = gate_rows(router, xs, 2)
row0 = gate(router, constant(xs.value[0]), 2)
assert np.array_equal(indices[0], row0.indices)
print("\nbatched gate row 0 matches the single-token gate")

# balance loss: N * sum_k f_k P_k, where f counts hard assignments and
# P averages the soft probabilities
stats = stats_from_rows(indices, probs)
print("token fractions:", np.round(stats.token_fraction, 3))
print("mean soft probs:", np.round(stats.mean_prob_values(), 3))
print("balance loss   :", f"{load_balance_loss(stats).item():.4f}")

# calibration: exactly 1.0 when routing is perfectly uniform, rising
# toward N as all tokens collapse onto one expert
uniform = np.full((200, n_experts), 1.0 / n_experts)
u_idx = np.stack([np.arange(200) % n_experts,
                  (np.arange(200) + 1) % n_experts], axis=1)
u_stats = stats_from_rows(u_idx, constant(uniform))
print("\nuniform routing  ->", f"{load_balance_loss(u_stats).item():.4f}")

hot = np.zeros((200, n_experts))
hot[:, 3] = 1.0
c_idx = np.full((200, 2), 3)
c_stats = stats_from_rows(c_idx, constant(hot))
print("total collapse   ->", f"{load_balance_loss(c_stats).item():.4f}",
      f"(= n_experts = {n_experts})")
