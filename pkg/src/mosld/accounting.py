"""Trainable- and forward-parameter bookkeeping per adaptation method.

Counts are exact integers computed from closed-form expressions, never
from floats. A companion oracle (count_from_model) walks a constructed
model's trainable set so the formulas can be cross-checked against the
real thing at desk scale.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .backbone import BackboneConfig
from .errors import ConfigError, require

METHODS = ("fp", "lora", "mola", "mosl", "mosld")

DISPLAY_NAMES = {
    "fp": "FP",
    "lora": "LoRA",
    "mola": "MoLA",
    "mosl": "MoSL",
    "mosld": "MoSLD",
}

# method name -> adapter site kind used by the backbone
SITE_KIND_FOR = {
    "fp": "fp",
    "lora": "lora",
    "mola": "unshared",
    "mosl": "shared",
    "mosld": "shared",
}


@dataclass(frozen=True)
class GeometrySpec:
    """Adapter geometry: layer count, projection dims, rank, experts."""

    n_layers: int
    d_in: int
    d_out: int
    rank: int
    targets: int = 2
    experts: tuple[int, ...] = ()
    top_k: int = 2

    def __post_init__(self):
        for field in ("n_layers", "d_in", "d_out", "rank", "targets",
                      "top_k"):
            require(getattr(self, field) >= 1, ConfigError,
                    f"{field} must be a positive integer")
        if isinstance(self.experts, int):
            object.__setattr__(
                self, "experts", (self.experts,) * self.n_layers)
        else:
            object.__setattr__(self, "experts", tuple(self.experts))
        require(len(self.experts) == self.n_layers, ConfigError,
                "need one expert count per layer")
        require(all(isinstance(e, int) and e >= 1 for e in self.experts),
                ConfigError, "expert counts must be positive integers")

    @property
    def uniform_experts(self) -> int | None:
        """The common per-layer expert count, or None if they vary."""
        counts = set(self.experts)
        return self.experts[0] if len(counts) == 1 else None

    def label(self) -> str:
        e = self.uniform_experts
        experts = str(e) if e is not None else "/".join(
            str(c) for c in self.experts)
        return (f"L{self.n_layers} d{self.d_in}x{self.d_out} "
                f"r{self.rank} T{self.targets} E{experts} K{self.top_k}")


# Headline geometry for the published parameter-ratio comparison.
REFERENCE_GEOMETRY = GeometrySpec(n_layers=32, d_in=4096, d_out=4096,
                                  rank=8, targets=2, experts=5)


@dataclass(frozen=True)
class ParamReport:
    method: str
    trainable: int
    formula: str
    forward: int | None = None


def _expert_trace(geom: GeometrySpec, n_a: str) -> str:
    e = geom.uniform_experts
    n_b = str(e) if e is not None else "[" + ",".join(
        str(c) for c in geom.experts) + "]"
    a = "1" if n_a == "one" else n_b
    return f"({a}A+{n_b}B)*{geom.n_layers}"


def _check_method(method: str) -> None:
    require(method in METHODS, ConfigError,
            f"unknown method {method!r}; expected one of {METHODS}")


def count_trainable(geom: GeometrySpec, method: str,
                    base_params: int | None = None) -> ParamReport:
    """Exact trainable-parameter count for one method at a geometry.

    Per adapted site (layer x target):
      lora        rank*(d_in + d_out)
      mola        N_l*rank*(d_in + d_out) + d_in*N_l   (router included)
      mosl/mosld  rank*d_in + N_l*rank*d_out + d_in*N_l
      fp          the supplied base size (base_params required)
    """
    _check_method(method)
    L, T, r = geom.n_layers, geom.targets, geom.rank
    d_in, d_out = geom.d_in, geom.d_out
    if method == "fp":
        require(base_params is not None and base_params > 0, ConfigError,
                "fp counting needs base_params")
        return ParamReport("fp", base_params, "all base weights")
    if method == "lora":
        total = L * T * r * (d_in + d_out)
        formula = (f"{_expert_trace(GeometrySpec(L, d_in, d_out, r, T, 1), 'one')}"
                   f" per target; A={r}x{d_in}, B={d_out}x{r}")
        return ParamReport("lora", total, formula)
    if method == "mola":
        total = T * sum(n * r * (d_in + d_out) + d_in * n
                        for n in geom.experts)
        formula = (f"{_expert_trace(geom, 'per-expert')} per target; "
                   f"A={r}x{d_in}, B={d_out}x{r}, router {d_in} per expert")
        return ParamReport("mola", total, formula)
    # mosl / mosld: one shared A per site, per-expert B, a router
    total = T * sum(r * d_in + n * r * d_out + d_in * n
                    for n in geom.experts)
    formula = (f"{_expert_trace(geom, 'one')} per target; "
               f"A={r}x{d_in} shared, B={d_out}x{r}, "
               f"router {d_in} per expert")
    return ParamReport(method, total, formula)


def count_forward(geom: GeometrySpec, method: str,
                  base_params: int) -> ParamReport:
    """Parameters touched in one forward pass (selected-expert count).

    The base contributes in full; routed methods touch the router, the
    shared/selected A matrices, and min(top_k, N_l) expert B matrices
    per site.
    """
    _check_method(method)
    require(base_params > 0, ConfigError, "base_params must be positive")
    trainable = count_trainable(geom, method, base_params)
    if method == "fp":
        return ParamReport("fp", base_params, trainable.formula,
                           forward=base_params)
    T, r = geom.targets, geom.rank
    d_in, d_out = geom.d_in, geom.d_out
    if method == "lora":
        touched = trainable.trainable
    elif method == "mola":
        touched = T * sum(min(geom.top_k, n) * r * (d_in + d_out)
                          + d_in * n for n in geom.experts)
    else:
        touched = T * sum(r * d_in + min(geom.top_k, n) * r * d_out
                          + d_in * n for n in geom.experts)
    return ParamReport(method, trainable.trainable, trainable.formula,
                       forward=base_params + touched)


def count_from_model(model) -> int:
    """Oracle: trainable size found by walking an actual model."""
    return sum(t.value.size for t in model.trainable())


def base_param_count(cfg: BackboneConfig) -> int:
    """Closed-form base size for the desk-scale transformer."""
    d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
    per_layer = 4 * d * d + 2 * d + 2 * h * d
    return (cfg.vocab * d + cfg.context * d
            + cfg.n_layers * per_layer + d + cfg.vocab * d)


def geometry_for(cfg: BackboneConfig, per_layer_experts, rank: int,
                 targets: int, top_k: int) -> GeometrySpec:
    """Geometry of adapters attached to q/v projections of a backbone."""
    return GeometrySpec(cfg.n_layers, cfg.d_model, cfg.d_model, rank,
                        targets, tuple(per_layer_experts), top_k)


def report_table(geoms, methods, base_params: int | None = None,
                 fmt: str = "markdown") -> str:
    """Rows per (geometry, method) in markdown or CSV, same numbers."""
    require(fmt in ("markdown", "csv"), ConfigError,
            f"fmt must be markdown or csv, got {fmt!r}")
    rows = []
    for geom in geoms:
        for method in methods:
            if base_params is not None:
                rep = count_forward(geom, method, base_params)
                fwd = str(rep.forward)
            else:
                require(method != "fp", ConfigError,
                        "fp rows need base_params")
                rep = count_trainable(geom, method)
                fwd = ""
            rows.append((geom.label(), DISPLAY_NAMES[rep.method],
                         str(rep.trainable), fwd, rep.formula))
    header = ("geometry", "method", "trainable", "forward", "formula")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    widths = [max(len(row[i]) for row in [header, *rows])
              for i in range(len(header))]
    def fmt_row(row):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt_row(header), sep, *map(fmt_row, rows)]) + "\n"
