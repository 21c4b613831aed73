"""A tiny decoder-only transformer that hosts adapter sites.

Pre-norm blocks: x += Wo*attn(rmsnorm(x)); x += FFN(rmsnorm(x)). The
attention Q and V projections are the adaptation points: a site attached
at (layer, target) adds its delta to that projection's output. Base
weights are plain Tensors; during adapter fine-tuning they are frozen
(requires_grad off) so the tape treats them as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .adapters import (AdapterHyper, Mode, PlainLoraSite, SharedLoraLayer,
                       UnsharedMixtureLayer, init_plain_lora,
                       init_shared_layer, init_unshared_layer)
from .errors import ConfigError, DataError, require
from .rng import Rng, gaussian_matrix
from .routing import ExpertAllocation, load_balance_loss, stats_from_rows
from .tape import Tensor, constant, parameter

__all__ = ["BackboneConfig", "Backbone", "AdaptedModel", "build_backbone",
           "attach_adapters", "SITE_KINDS"]

# Adapter wiring per method arm.
SITE_KINDS = ("fp", "lora", "unshared", "shared")


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab: int = 64
    context: int = 32
    ffn_mult: int = 4

    def __post_init__(self):
        require(all(v >= 1 for v in (self.n_layers, self.d_model,
                                     self.n_heads, self.vocab,
                                     self.context, self.ffn_mult)),
                ConfigError, "all backbone dimensions must be >= 1")
        require(self.d_model % self.n_heads == 0, ConfigError,
                f"d_model {self.d_model} not divisible by "
                f"n_heads {self.n_heads}")


class Backbone:
    """Frozen-able transformer parameters plus their configuration."""

    def __init__(self, cfg: BackboneConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def tensors(self) -> dict[str, Tensor]:
        return self.params

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.params.items()}

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def forward(self, tokens) -> Tensor:
        """Logits of the bare backbone (no adapters), evaluation mode."""
        logits, _, _ = _model_forward(self, {}, None, None, tokens,
                                      Mode.EVAL, None)
        return logits


def build_backbone(cfg: BackboneConfig, rng: Rng,
                   trainable: bool = True) -> Backbone:
    """Deterministic Gaussian init; norm gains start at one."""
    d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
    shapes: list[tuple[str, tuple[int, ...], float]] = [
        ("tok_emb", (cfg.vocab, d), 1.0 / np.sqrt(d)),
        ("pos_emb", (cfg.context, d), 1.0 / np.sqrt(d)),
    ]
    for i in range(cfg.n_layers):
        shapes += [
            (f"l{i}.wq", (d, d), 1.0 / np.sqrt(d)),
            (f"l{i}.wk", (d, d), 1.0 / np.sqrt(d)),
            (f"l{i}.wv", (d, d), 1.0 / np.sqrt(d)),
            (f"l{i}.wo", (d, d), 1.0 / np.sqrt(d)),
            (f"l{i}.w_up", (h, d), 1.0 / np.sqrt(d)),
            (f"l{i}.w_down", (d, h), 1.0 / np.sqrt(h)),
        ]
    shapes.append(("head", (cfg.vocab, d), 1.0 / np.sqrt(d)))

    params: dict[str, Tensor] = {}
    for idx, (name, shape, sigma) in enumerate(shapes):
        value = gaussian_matrix(shape[0], shape[1], sigma, rng.split(idx))
        params[name] = Tensor(value, requires_grad=trainable, name=name)
    for i in range(cfg.n_layers):
        for gain in (f"l{i}.attn_norm", f"l{i}.ffn_norm"):
            params[gain] = Tensor(np.ones(d), requires_grad=trainable,
                                  name=gain)
    params["out_norm"] = Tensor(np.ones(d), requires_grad=trainable,
                                name="out_norm")
    return Backbone(cfg, params)


class AdaptedModel:
    """A backbone plus adapter sites at the Q and V projections.

    kind selects the wiring: "fp" has no sites and a trainable base;
    "lora" has one router-free adapter per site; "unshared" gives every
    expert a private A; "shared" is the shared-A mixture.
    """

    def __init__(self, base: Backbone, sites: dict, kind: str,
                 allocation: Optional[ExpertAllocation],
                 hyper: Optional[AdapterHyper]):
        self.base = base
        self.sites = sites
        self.kind = kind
        self.allocation = allocation
        self.hyper = hyper

    def trainable(self) -> list[Tensor]:
        if self.kind == "fp":
            return list(self.base.params.values())
        out = []
        for key in sorted(self.sites):
            out.extend(self.sites[key].trainable())
        return out

    def site_named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (layer, target), site in sorted(self.sites.items()):
            for name, t in site.named_tensors().items():
                out[f"site.l{layer}.{target}.{name}"] = t
        return out

    def forward(self, tokens, mode: Mode = Mode.EVAL,
                rng: Optional[Rng] = None):
        """Returns (logits (batch, time, vocab), aux balance loss scalar,
        per-site routing stats {(layer, target): (indices, probs)})."""
        return _model_forward(self.base, self.sites, self.allocation,
                              self.hyper, tokens, mode, rng)


def attach_adapters(base: Backbone, allocation: Optional[ExpertAllocation],
                    hyper: Optional[AdapterHyper], rng: Optional[Rng],
                    kind: str = "shared") -> AdaptedModel:
    """Create adapter sites at every (layer, target) and freeze the base.

    kind "fp" attaches nothing and leaves the base trainable; every other
    kind freezes the base so only adapter parameters can move.
    """
    require(kind in SITE_KINDS, ConfigError,
            f"unknown site kind {kind!r}; valid: {SITE_KINDS}")
    cfg = base.cfg
    if kind == "fp":
        base.set_trainable(True)
        return AdaptedModel(base, {}, kind, None, None)

    require(hyper is not None, ConfigError, "adapter arms need hyper")
    require(rng is not None, ConfigError, "adapter arms need an rng")
    d = cfg.d_model
    sites: dict[tuple[int, str], object] = {}
    if kind == "lora":
        for layer in range(cfg.n_layers):
            for t_idx, target in enumerate(hyper.targets):
                site_rng = rng.split(layer * len(hyper.targets) + t_idx)
                sites[(layer, target)] = init_plain_lora(d, d, hyper,
                                                         site_rng)
        base.set_trainable(False)
        return AdaptedModel(base, sites, kind, None, hyper)

    require(allocation is not None, ConfigError,
            "mixture arms need an expert allocation")
    require(len(allocation.per_layer) == cfg.n_layers, ConfigError,
            f"allocation covers {len(allocation.per_layer)} layers, "
            f"backbone has {cfg.n_layers}")
    maker = init_shared_layer if kind == "shared" else init_unshared_layer
    for layer in range(cfg.n_layers):
        n_l = allocation.per_layer[layer]
        for t_idx, target in enumerate(hyper.targets):
            site_rng = rng.split(layer * len(hyper.targets) + t_idx)
            sites[(layer, target)] = maker(d, d, hyper, n_l, site_rng)
    base.set_trainable(False)
    return AdaptedModel(base, sites, kind, allocation, hyper)


def _site_index(layer: int, target: str) -> int:
    return layer * 2 + (0 if target == "q" else 1)


def _model_forward(base: Backbone, sites: dict,
                   allocation: Optional[ExpertAllocation],
                   hyper: Optional[AdapterHyper], tokens, mode: Mode,
                   rng: Optional[Rng]):
    cfg = base.cfg
    p = base.params
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    require(tokens.ndim == 2, DataError,
            f"tokens must be (batch, time), got shape {tokens.shape}")
    b, t = tokens.shape
    require(1 <= t <= cfg.context, DataError,
            f"sequence length {t} outside [1, {cfg.context}]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise DataError(f"token id out of range [0, {cfg.vocab})")

    x = ops.add(ops.embedding(p["tok_emb"], tokens),
                ops.embedding(p["pos_emb"], np.arange(t)))
    aux = None
    route_stats: dict[tuple[int, str], tuple[np.ndarray, Tensor]] = {}

    def project(xn: Tensor, layer: int, target: str, weight: Tensor):
        nonlocal aux
        out = ops.linear(xn, weight)
        site = sites.get((layer, target))
        if site is None:
            return out
        site_rng = (rng.split(_site_index(layer, target))
                    if rng is not None else None)
        k = allocation.site_k(layer) if allocation is not None else 1
        xf = ops.reshape(xn, (b * t, cfg.d_model))
        delta, idx, probs = site.delta_rows(xf, k, mode, site_rng)
        out = ops.add(out, ops.reshape(delta, (b, t, cfg.d_model)))
        if probs is not None:
            route_stats[(layer, target)] = (idx, probs)
            term = load_balance_loss(stats_from_rows(idx, probs))
            aux = term if aux is None else ops.add(aux, term)
        return out

    for layer in range(cfg.n_layers):
        xn = ops.rmsnorm(x, p[f"l{layer}.attn_norm"])
        q = project(xn, layer, "q", p[f"l{layer}.wq"])
        k_proj = ops.linear(xn, p[f"l{layer}.wk"])
        v = project(xn, layer, "v", p[f"l{layer}.wv"])
        attn = ops.causal_attention(q, k_proj, v, cfg.n_heads)
        x = ops.add(x, ops.linear(attn, p[f"l{layer}.wo"]))
        xn2 = ops.rmsnorm(x, p[f"l{layer}.ffn_norm"])
        ff = ops.linear(ops.silu(ops.linear(xn2, p[f"l{layer}.w_up"])),
                        p[f"l{layer}.w_down"])
        x = ops.add(x, ff)

    xn = ops.rmsnorm(x, p["out_norm"])
    logits = ops.linear(xn, p["head"])
    if aux is None:
        aux = constant(np.asarray(0.0))
    return logits, aux, route_stats
