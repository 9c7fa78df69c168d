"""
MIIM, one stage at a time
=========================

Walks a random Block1-sized feature map through the three stages of the
attention gate and prints what comes out of each.
"""
import torch

from wrimnet.miim import MIIM, MIIMConfig

torch.manual_seed(0)

# the first placement: 256 channels at 96x36, squeezed 4x in space and 2x in channels
cfg = MIIMConfig(in_channels=256, in_height=96, in_width=36, r_s=4, r_c=2, k_s=3, heads=8)
print("compressed map", cfg.mid_channels, "x", cfg.compressed_size)   # 128 x (24, 9)
print("pooled keys   ", cfg.mid_channels, "x", cfg.pooled_size)       # 128 x (8, 3)

m = MIIM(cfg).eval()
x = torch.randn(2, 256, 96, 36)

# SCC: strided conv, then average pooling of that result
f2, f3 = m.scc_forward(x)
print("F2", tuple(f2.shape), "F3", tuple(f3.shape))

# GRI: every compressed position attends over the pooled grid
f4, weights = m.gri_forward(f2, f3, return_weights=True)
print("F4", tuple(f4.shape), "attention", tuple(weights.shape))
print("attention rows sum to", weights.sum(-1).mean().item())

# SCR: back to C1 channels, squashed into a (0, 1) gate
gate = m.gate(f4)
print("gate range", gate.min().item(), gate.max().item())

out = m(x)
print("output keeps the input shape:", tuple(out.shape) == tuple(x.shape))
