"""
What the attention gates cost
=============================

Parameter and multiply-accumulate counts for a single 384x144 image, with
and without the four gates.
"""
from wrimnet.backbone import NetworkConfig, build_wrimnet
from wrimnet.complexity import count_flops_params, count_trainable

full = build_wrimnet(NetworkConfig(num_classes=395))
plain = build_wrimnet(NetworkConfig(num_classes=395, use_miim=False))

for name, model in (("with MIIM", full), ("trunk only", plain)):
    rep = count_flops_params(model)
    print(f"{name:<11} params {rep.params / 1e6:6.2f}M   MACs {rep.macs / 1e9:5.2f}B   "
          f"flops {rep.flops / 1e9:5.2f}B")

# training holds more than the inference path: both per-modality gates, classifiers, projection head
print("trainable in total:", round(count_trainable(full) / 1e6, 2), "M")

# the per-gate rows
rep = count_flops_params(full)
for row in rep.layers:
    if row.kind == "MIIM":
        print(row.name, "extra elementwise flops", row.elementwise)
