"""Top-K expert gating and the load-balancing auxiliary loss.

A router is a linear map from a token's hidden vector to one logit per
expert. The gate softmaxes the logits, keeps the K largest probabilities
(ties to the lowest expert index), and renormalizes the survivors to sum
to one. The balance loss pushes the batch toward spreading tokens evenly
across experts: it multiplies the hard assignment fractions (constants)
by the mean soft probabilities (differentiable) so routing collapse is
penalized through the probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, require
from .tape import Tensor

__all__ = ["GateResult", "LoadBalanceStats", "ExpertAllocation", "gate",
           "gate_rows", "accumulate_stats", "stats_from_rows",
           "load_balance_loss", "ALLOCATION_PRESETS", "resolve_allocation"]


@dataclass
class GateResult:
    """One token's routing decision.

    indices: selected expert ids, ascending; scores: the renormalized gate
    weights aligned with indices (a Tensor so gradients reach the router);
    full_probs: the complete softmax output, kept for the balance loss.
    """
    indices: np.ndarray
    scores: Tensor
    full_probs: Tensor

    @property
    def n_experts(self) -> int:
        return self.full_probs.value.shape[0]


@dataclass
class LoadBalanceStats:
    """Batch routing statistics for one adapter site.

    token_fraction[k] is the fraction of (token, slot) assignments that
    went to expert k; it always sums to one and is a plain constant.
    mean_prob[k] is the batch mean of the full softmax probability of
    expert k; it is a Tensor so the balance loss can differentiate
    through it.
    """
    token_fraction: np.ndarray
    mean_prob: Tensor
    n_experts: int
    n_tokens: int

    def mean_prob_values(self) -> np.ndarray:
        return self.mean_prob.value


@dataclass(frozen=True)
class ExpertAllocation:
    """Per-layer expert counts plus the global top-K."""
    per_layer: tuple[int, ...]
    top_k: int = 2

    def __post_init__(self):
        require(len(self.per_layer) >= 1, ConfigError,
                "allocation needs at least one layer")
        require(all(n >= 1 for n in self.per_layer), ConfigError,
                f"every layer needs at least one expert, got {self.per_layer}")
        require(self.top_k >= 1, ConfigError,
                f"top_k must be >= 1, got {self.top_k}")
        require(self.top_k <= max(self.per_layer), ConfigError,
                f"top_k {self.top_k} exceeds every layer's expert count "
                f"{self.per_layer}")

    def site_k(self, layer: int) -> int:
        """Effective K at a layer: the global K clamped to that layer's
        expert count."""
        return min(self.top_k, self.per_layer[layer])


# Named allocation schedules. Lengths are stretched or cut to the actual
# layer count when resolved.
ALLOCATION_PRESETS: dict[str, tuple[int, ...]] = {
    "ascending": (2, 4, 6, 8),
    "uniform": (5, 5, 5, 5),
    "descending": (8, 6, 4, 2),
}


def resolve_allocation(spec, n_layers: int, top_k: int = 2) -> ExpertAllocation:
    """Build an ExpertAllocation from a preset name or explicit counts."""
    if isinstance(spec, str):
        require(spec in ALLOCATION_PRESETS, ConfigError,
                f"unknown allocation preset {spec!r}; "
                f"known: {sorted(ALLOCATION_PRESETS)}")
        base = ALLOCATION_PRESETS[spec]
        if n_layers <= len(base):
            counts = base[:n_layers]
        else:
            # repeat the last count for extra layers
            counts = base + (base[-1],) * (n_layers - len(base))
        return ExpertAllocation(tuple(counts), top_k)
    counts = tuple(int(n) for n in spec)
    require(len(counts) == n_layers, ConfigError,
            f"allocation length {len(counts)} does not match "
            f"{n_layers} layers")
    return ExpertAllocation(counts, top_k)


def gate(router_w: Tensor, x: Tensor, k: int) -> GateResult:
    """Route one token: softmax the router logits, keep the k largest
    probabilities, renormalize them to sum to one.

    Gradients flow to router_w through the selected probabilities; the
    unselected ones still matter via the softmax coupling, and the
    renormalization is differentiated exactly.
    """
    n_experts = router_w.value.shape[0]
    require(k <= n_experts, ConfigError,
            f"k={k} exceeds the {n_experts} experts this router serves")
    logits = ops.matmul(router_w, x)
    probs = ops.softmax(logits)
    indices, scores = ops.topk_renorm(probs, k)
    return GateResult(indices=indices, scores=scores, full_probs=probs)


def gate_rows(router_w: Tensor, x_rows: Tensor,
              k: int) -> tuple[np.ndarray, Tensor, Tensor]:
    """Batched gate over (tokens, d_in) rows.

    Returns (indices (tokens, k), weights (tokens, n) with structural
    zeros at unselected experts, full probs (tokens, n)). Row t of
    weights agrees exactly with gate() on row t of x_rows.
    """
    n_experts = router_w.value.shape[0]
    require(k <= n_experts, ConfigError,
            f"k={k} exceeds the {n_experts} experts this router serves")
    logits = ops.linear(x_rows, router_w)
    probs = ops.softmax_rows(logits)
    indices, weights = ops.topk_renorm_rows(probs, k)
    return indices, weights, probs


def accumulate_stats(gates: Sequence[GateResult],
                     n_experts: Optional[int] = None) -> LoadBalanceStats:
    """Aggregate per-token gate results into batch routing statistics."""
    require(len(gates) > 0, ConfigError, "empty gate batch")
    if n_experts is None:
        n_experts = gates[0].n_experts
    counts = np.zeros(n_experts, dtype=np.float64)
    total = None
    slots = 0
    for g in gates:
        require(g.n_experts == n_experts, ConfigError,
                "gate results disagree on expert count")
        np.add.at(counts, g.indices, 1.0)
        slots += len(g.indices)
        total = g.full_probs if total is None else ops.add(total, g.full_probs)
    mean_prob = ops.scale(total, 1.0 / len(gates))
    return LoadBalanceStats(token_fraction=counts / slots,
                            mean_prob=mean_prob,
                            n_experts=n_experts,
                            n_tokens=len(gates))


def stats_from_rows(indices: np.ndarray, probs: Tensor) -> LoadBalanceStats:
    """Batched form of accumulate_stats for gate_rows outputs."""
    n_tokens, n_experts = probs.value.shape
    require(n_tokens > 0, ConfigError, "empty gate batch")
    counts = np.zeros(n_experts, dtype=np.float64)
    np.add.at(counts, indices.ravel(), 1.0)
    mean_prob = ops.scale(ops.sum_axis0(probs), 1.0 / n_tokens)
    return LoadBalanceStats(token_fraction=counts / indices.size,
                            mean_prob=mean_prob,
                            n_experts=n_experts,
                            n_tokens=n_tokens)


def load_balance_loss(stats: LoadBalanceStats) -> Tensor:
    """N * sum_k f_k * P_k.

    Exactly 1 under perfectly uniform routing, approaching N under total
    collapse onto one expert. f_k is a dispatch count, held constant;
    the gradient flows through the mean probabilities P_k only.
    """
    weights = stats.n_experts * stats.token_fraction
    return ops.sum_all(ops.mul_const(stats.mean_prob, weights))
