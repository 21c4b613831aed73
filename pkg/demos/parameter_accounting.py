"""Closed-form parameter counts for every adaptation method.

Prints the trainable-parameter table at the large reference geometry,
derives the headline efficiency ratios, and cross-checks the formulas
against parameters counted by walking actually constructed models.
"""

from fractions import Fraction

from mosld import Rng
from mosld.accounting import (DISPLAY_NAMES, REFERENCE_GEOMETRY,
                              GeometrySpec, base_param_count,
                              count_from_model, count_trainable,
                              geometry_for, report_table)
from mosld.adapters import AdapterHyper
from mosld.backbone import BackboneConfig, attach_adapters, build_backbone
from mosld.routing import ExpertAllocation

geom = REFERENCE_GEOMETRY
print(f"reference geometry: {geom.n_layers} layers, "
      f"d={geom.d_in}, rank={geom.rank}, "
      f"{geom.uniform_experts} experts, {geom.targets} targets/layer\n")
print(report_table([geom], ("lora", "mola", "mosl", "mosld")))

# sharing one A per site removes (E-1) A matrices relative to MoLA
counts = {m: count_trainable(geom, m).trainable
          for m in ("lora", "mola", "mosld")}
for top, bottom in (("mola", "lora"), ("mosld", "lora"), ("mosld", "mola")):
    r = Fraction(counts[top], counts[bottom])
    print(f"{DISPLAY_NAMES[top]}/{DISPLAY_NAMES[bottom]} = "
          f"{float(r):.4f}  ({r.numerator}/{r.denominator})")

# the formulas agree exactly with parameters counted from real models
cfg = BackboneConfig()
alloc = ExpertAllocation((2, 4, 6, 8), top_k=2)
hyper = AdapterHyper(rank=8)
rng = Rng(5)
print(f"\ndesk-scale check (d={cfg.d_model}, {cfg.n_layers} layers, "
      f"experts {alloc.per_layer}):")
for method, kind in (("lora", "lora"), ("mola", "unshared"),
                     ("mosld", "shared")):
    base = build_backbone(cfg, rng.split(0))
    model = attach_adapters(base, alloc, hyper, rng.split(1), kind)
    g = geometry_for(cfg, alloc.per_layer, hyper.rank,
                     len(hyper.targets), alloc.top_k)
    walked = count_from_model(model)
    formula = count_trainable(g, method).trainable
    print(f"  {DISPLAY_NAMES[method]:6} walked {walked:6d}  "
          f"formula {formula:6d}  match={walked == formula}")

base = build_backbone(cfg, rng.split(0))
n_base = sum(t.value.size for t in base.params.values())
print(f"\nbackbone closed form {base_param_count(cfg)} "
      f"== constructed {n_base}")
