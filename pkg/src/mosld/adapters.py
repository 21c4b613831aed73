"""Low-rank adapter mixtures around a frozen projection.

The central object is SharedLoraLayer: one general-feature matrix A
(rank x d_in, Gaussian init) shared by all experts at a site, one
specific-feature matrix B per expert (d_out x rank, zero init), and a
router. A expert's contribution is B_k applied to the shared code A*x,
so A accumulates gradient from every selected expert while each B_k
specializes. Weight dropout masks entries of A during training (inverted
scaling keeps the expectation equal to A), which discourages expert-
specific features from settling into the shared matrix.

Two baseline site types live here as well: PlainLoraSite (single
adapter, no router; coded independently of the mixture path on purpose)
and UnsharedMixtureLayer (per-expert private A_k, the no-sharing
ablation).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, require
from .rng import Rng, gaussian_matrix
from .routing import GateResult, gate, gate_rows
from .tape import Tensor, constant, parameter

__all__ = ["AdapterHyper", "Mode", "SharedLoraLayer", "PlainLoraSite",
           "UnsharedMixtureLayer", "init_shared_layer", "dropped_a",
           "adapter_delta", "mosld_forward", "merge_check"]

VALID_TARGETS = ("q", "v")


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class AdapterHyper:
    """Adapter hyperparameters shared by every site in a model."""
    rank: int = 8
    alpha: float = 16.0
    drop_p: float = 0.1
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        require(self.rank >= 1, ConfigError,
                f"rank must be >= 1, got {self.rank}")
        require(self.alpha > 0, ConfigError,
                f"alpha must be > 0, got {self.alpha}")
        require(0.0 <= self.drop_p < 1.0, ConfigError,
                f"drop_p must be in [0, 1), got {self.drop_p}")
        require(len(self.targets) > 0, ConfigError, "targets is empty")
        for t in self.targets:
            require(t in VALID_TARGETS, ConfigError,
                    f"unknown target {t!r}; valid: {VALID_TARGETS}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class SharedLoraLayer:
    """One adapter site: shared A, per-expert Bs, router.

    a_shared is a single Tensor; every expert's forward reads the same
    object, which is what makes the gradient accumulation on A the sum
    of all selected experts' contributions.
    """

    def __init__(self, a_shared: Tensor, experts: list[Tensor],
                 router_w: Tensor, hyper: AdapterHyper):
        self.a_shared = a_shared
        self.experts = experts
        self.router_w = router_w
        self.hyper = hyper

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_in(self) -> int:
        return self.a_shared.value.shape[1]

    @property
    def d_out(self) -> int:
        return self.experts[0].value.shape[0]

    def trainable(self) -> list[Tensor]:
        return [self.a_shared, *self.experts, self.router_w]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"a": self.a_shared, "router": self.router_w}
        for i, b in enumerate(self.experts):
            out[f"b{i}"] = b
        return out

    def delta_rows(self, x_rows: Tensor, k: int, mode: "Mode", rng: Optional[Rng]):
        """Adapter delta for a batch of row vectors.

        Returns (delta (rows, d_out), gate indices (rows, k), full gate
        probs (rows, n_experts)). The shared code A~ x is computed once
        per token and reused by every selected expert.
        """
        a_t = dropped_a(self, mode, rng)
        code = ops.linear(x_rows, a_t)
        idx, weights, probs = gate_rows(self.router_w, x_rows, k)
        delta = ops.expert_mix(code, weights, self.experts)
        return ops.scale(delta, self.hyper.scaling), idx, probs


class PlainLoraSite:
    """Single low-rank adapter, no router, no mixture.

    Written as its own minimal path (down-projection then up-projection,
    scaled) so the mixture code can be validated against it.
    """

    def __init__(self, a: Tensor, b: Tensor, hyper: AdapterHyper):
        self.a = a
        self.b = b
        self.hyper = hyper

    @property
    def n_experts(self) -> int:
        return 1

    def trainable(self) -> list[Tensor]:
        return [self.a, self.b]

    def named_tensors(self) -> dict[str, Tensor]:
        return {"a": self.a, "b0": self.b}

    def delta_rows(self, x_rows: Tensor, k: int, mode: "Mode", rng: Optional[Rng]):
        delta = ops.scale(ops.linear(ops.linear(x_rows, self.a), self.b),
                          self.hyper.scaling)
        return delta, None, None


class UnsharedMixtureLayer:
    """Mixture site where every expert owns a private (A_k, B_k) pair.

    Identical routing and scaling to SharedLoraLayer; the only
    structural difference is the absence of sharing, which is exactly
    what the sharing ablation needs.
    """

    def __init__(self, a_mats: list[Tensor], experts: list[Tensor],
                 router_w: Tensor, hyper: AdapterHyper):
        require(len(a_mats) == len(experts), ConfigError,
                "one A per expert required")
        self.a_mats = a_mats
        self.experts = experts
        self.router_w = router_w
        self.hyper = hyper

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def trainable(self) -> list[Tensor]:
        return [*self.a_mats, *self.experts, self.router_w]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"router": self.router_w}
        for i, (a, b) in enumerate(zip(self.a_mats, self.experts)):
            out[f"a{i}"] = a
            out[f"b{i}"] = b
        return out

    def delta_rows(self, x_rows: Tensor, k: int, mode: "Mode", rng: Optional[Rng]):
        idx, weights, probs = gate_rows(self.router_w, x_rows, k)
        delta = None
        for e, (a, b) in enumerate(zip(self.a_mats, self.experts)):
            w_e = ops.reshape(ops.take_col(weights, e), (-1, 1))
            term = ops.mul(w_e, ops.linear(ops.linear(x_rows, a), b))
            delta = term if delta is None else ops.add(delta, term)
        return ops.scale(delta, self.hyper.scaling), idx, probs


def init_shared_layer(d_in: int, d_out: int, hyper: AdapterHyper,
                      n_experts: int, rng: Rng) -> SharedLoraLayer:
    """Fresh site: A ~ N(0, 1/rank), every B exactly zero, router
    ~ N(0, 1/d_in). Zero B guarantees the adapter contributes nothing
    until the first update."""
    require(n_experts >= 1, ConfigError,
            f"n_experts must be >= 1, got {n_experts}")
    require(hyper.rank <= min(d_in, d_out), ConfigError,
            f"rank {hyper.rank} exceeds min(d_in={d_in}, d_out={d_out})")
    a = parameter(gaussian_matrix(hyper.rank, d_in,
                                  1.0 / np.sqrt(hyper.rank), rng.split(0)),
                  name="a_shared")
    experts = [parameter(np.zeros((d_out, hyper.rank)), name=f"b{k}")
               for k in range(n_experts)]
    router = parameter(gaussian_matrix(n_experts, d_in,
                                       1.0 / np.sqrt(d_in), rng.split(1)),
                       name="router")
    return SharedLoraLayer(a, experts, router, hyper)


def init_plain_lora(d_in: int, d_out: int, hyper: AdapterHyper,
                    rng: Rng) -> PlainLoraSite:
    require(hyper.rank <= min(d_in, d_out), ConfigError,
            f"rank {hyper.rank} exceeds min(d_in={d_in}, d_out={d_out})")
    a = parameter(gaussian_matrix(hyper.rank, d_in,
                                  1.0 / np.sqrt(hyper.rank), rng.split(0)),
                  name="a")
    b = parameter(np.zeros((d_out, hyper.rank)), name="b")
    return PlainLoraSite(a, b, hyper)


def init_unshared_layer(d_in: int, d_out: int, hyper: AdapterHyper,
                        n_experts: int, rng: Rng) -> UnsharedMixtureLayer:
    require(n_experts >= 1, ConfigError,
            f"n_experts must be >= 1, got {n_experts}")
    require(hyper.rank <= min(d_in, d_out), ConfigError,
            f"rank {hyper.rank} exceeds min(d_in={d_in}, d_out={d_out})")
    a_rng = rng.split(0)
    a_mats = [parameter(gaussian_matrix(hyper.rank, d_in,
                                        1.0 / np.sqrt(hyper.rank),
                                        a_rng.split(k)), name=f"a{k}")
              for k in range(n_experts)]
    experts = [parameter(np.zeros((d_out, hyper.rank)), name=f"b{k}")
               for k in range(n_experts)]
    router = parameter(gaussian_matrix(n_experts, d_in,
                                       1.0 / np.sqrt(d_in), rng.split(1)),
                       name="router")
    return UnsharedMixtureLayer(a_mats, experts, router, hyper)


def dropped_a(layer: SharedLoraLayer, mode: Mode,
              rng: Optional[Rng]) -> Tensor:
    """The shared matrix as the forward pass sees it.

    Train with drop_p > 0: a fresh Bernoulli mask (keep probability
    1 - drop_p) zeroes entries and the survivors are scaled by
    1/(1 - drop_p), so the expectation stays A. Eval, or drop_p = 0,
    returns A itself and consumes no randomness.
    """
    p = layer.hyper.drop_p
    if mode is Mode.EVAL or p == 0.0:
        return layer.a_shared
    require(rng is not None, ConfigError,
            "training with dropout requires an rng")
    keep = 1.0 - p
    mask = rng.bernoulli_mask(layer.a_shared.value.shape, keep)
    return ops.mask_scale(layer.a_shared, mask, keep)


def adapter_delta(layer: SharedLoraLayer, x: Tensor, gate_result: GateResult,
                  mode: Mode, rng: Optional[Rng]) -> Tensor:
    """Mixture delta for one token: (alpha/rank) * sum_k S_k * B_k (A~ x).

    The shared code A~ x is computed once and reused by all selected
    experts; only experts named by the gate contribute.
    """
    n = layer.n_experts
    if np.any(gate_result.indices < 0) or np.any(gate_result.indices >= n):
        raise RuntimeError(
            f"gate indices {gate_result.indices} outside [0, {n}); "
            "router contract violated")
    a_t = dropped_a(layer, mode, rng)
    code = ops.matmul(a_t, x)
    delta = None
    for slot, e in enumerate(gate_result.indices):
        s = ops.take_scalar(gate_result.scores, slot)
        term = ops.mul(s, ops.matmul(layer.experts[e], code))
        delta = term if delta is None else ops.add(delta, term)
    return ops.scale(delta, layer.hyper.scaling)


def mosld_forward(w0: Tensor, layer: SharedLoraLayer, x: Tensor,
                  gate_result: GateResult, mode: Mode,
                  rng: Optional[Rng]) -> Tensor:
    """Adapted projection of one token: W0 x + adapter delta.

    W0 stays frozen; gradients reach A (through the dropout mask), the
    selected B_k, and the router via the gate scores.
    """
    require(w0.value.ndim == 2 and w0.value.shape[1] == x.value.shape[0],
            ConfigError,
            f"shape mismatch: w0 {w0.shape} applied to x {x.shape}")
    base = ops.matmul(w0, x)
    return ops.add(base, adapter_delta(layer, x, gate_result, mode, rng))


def merge_check(layer: SharedLoraLayer, gate_result: GateResult,
                mode: Mode = Mode.EVAL) -> np.ndarray:
    """The effective dense update the mixture currently realizes:
    (alpha/rank) * sum_k S_k * (B_k A). Evaluation-mode values only.

    Applying the returned matrix to any x reproduces adapter_delta(x).
    """
    require(mode is Mode.EVAL, ConfigError,
            "merge_check is defined for evaluation mode")
    a = layer.a_shared.value
    out = np.zeros((layer.d_out, layer.d_in))
    for slot, e in enumerate(gate_result.indices):
        s = float(gate_result.scores.value[slot])
        out += s * (layer.experts[e].value @ a)
    return layer.hyper.scaling * out
