"""
Counting parameters and FLOPs
=============================

The cost walker follows the forward pass symbolically, so the full-size
model is accounted instantly at any resolution.
"""

from mirnetv2.config import ModelConfig
from mirnetv2.costs import analytic_params, count_costs, fusion_table

full = ModelConfig()  # 4 groups x 2 blocks, streams 80/120/180, 2 shared columns
report = count_costs(full, 256, 256)
print(f"params      {report.params:,}")
print(f"FLOPs       {report.flops / 1e9:.1f} G  (one multiply-accumulate = one FLOP)")
print(f"convs       {report.conv_count}")
print(f"activations {report.activation_count / 1e6:.0f} M")
print("closed-form parameter count agrees:", analytic_params(full) == report.params)

# where the compute goes
by_kind = {}
for r in report.records:
    by_kind[r.kind] = by_kind.get(r.kind, 0) + r.flops
for kind, f in sorted(by_kind.items(), key=lambda kv: -kv[1]):
    print(f"  {kind:12s} {100 * f / report.flops:5.1f} %")

# fusion parameter cost for two 64-channel inputs
print("fusion params at C=64:", fusion_table(64, 2))

# a few ablations
for label, cfg in [("groups=1", ModelConfig(groups=1)), ("no transform", ModelConfig(rcb_variant="no_transform")),
                   ("sum fusion", ModelConfig(fusion="sum")), ("concat fusion", ModelConfig(fusion="concat"))]:
    r = count_costs(cfg, 256, 256)
    print(f"{label:14s} params {r.params / 1e6:5.2f} M  FLOPs {r.flops / 1e9:6.1f} G")
