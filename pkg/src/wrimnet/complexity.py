"""Per-layer parameter and FLOP accounting for one single-image forward pass.

Counting convention:

* conv / linear: ``MACs = out_elements * in_channels_per_group * kernel_area``;
  they contribute ``2 * MACs`` flops.
* attention matrix products (``QK^T`` and ``AV``) contribute ``2 * MACs``.
* element-wise work (BN, activations, pooling, residual adds, gating,
  positional-embedding adds, softmax) costs one flop per output element.
* parameters are the trainable scalars of the modules the pass visits,
  each module counted once. In a single-image pass only the MIIM gate of
  the image's modality runs, and eval-mode inference skips the classifiers
  and the projection head.

Bias adds are folded into the MAC count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torchvision.models.resnet import Bottleneck

from .miim import MIIM, MultiHeadAttention

__all__ = ["LayerCost", "ComplexityReport", "count_flops_params", "count_trainable"]


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int = 0
    elementwise: int = 0
    params: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise


@dataclass
class ComplexityReport:
    layers: list = field(default_factory=list)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    def table(self) -> str:
        rows = [f"{'layer':<48} {'kind':<18} {'params':>12} {'MACs':>15} {'flops':>15}"]
        for l in self.layers:
            rows.append(f"{l.name:<48} {l.kind:<18} {l.params:>12,d} {l.macs:>15,d} {l.flops:>15,d}")
        rows.append(f"{'TOTAL':<48} {'':<18} {self.params:>12,d} {self.macs:>15,d} {self.flops:>15,d}")
        return "\n".join(rows)


def count_trainable(module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def _own_params(module):
    return sum(p.numel() for p in module.parameters(recurse=False) if p.requires_grad)


def _conv_cost(m, inp, out):
    kh, kw = m.kernel_size
    return out.numel() * (m.in_channels // m.groups) * kh * kw, 0


def _linear_cost(m, inp, out):
    return out.numel() * m.in_features, 0


def _elementwise_cost(m, inp, out):
    return 0, out.numel()


def _attention_cost(m, inp, out):
    # projections are counted by their own Linear hooks
    q, k = inp[0], inp[1]
    b, lq, c = q.shape
    lk = k.shape[1]
    matmul = 2 * b * lq * lk * c
    softmax = b * m.heads * lq * lk
    return matmul, softmax


def _miim_cost(m, inp, out):
    # not covered by child hooks: pos-embedding adds, upsample, gate multiply
    x = inp[0]
    b = x.shape[0]
    c2 = m.cfg.mid_channels
    h2, w2 = m.cfg.compressed_size
    h3, w3 = m.cfg.pooled_size
    extra = 0
    if m.use_pos_embed:
        extra += b * c2 * (h2 * w2 + h3 * w3)
    if m.cfg.r_s > 1:
        extra += x.numel()
    extra += x.numel()
    return 0, extra


def _bottleneck_cost(m, inp, out):
    return 0, out.numel()  # residual add; the final ReLU reuses self.relu


_LEAF_COSTS = {
    nn.Conv2d: _conv_cost,
    nn.Linear: _linear_cost,
    nn.BatchNorm1d: _elementwise_cost,
    nn.BatchNorm2d: _elementwise_cost,
    nn.ReLU: _elementwise_cost,
    nn.Sigmoid: _elementwise_cost,
    nn.MaxPool2d: _elementwise_cost,
    nn.AvgPool2d: _elementwise_cost,
}
_EXTRA_COSTS = {
    MultiHeadAttention: _attention_cost,
    MIIM: _miim_cost,
    Bottleneck: _bottleneck_cost,
}


@torch.no_grad()
def count_flops_params(model, input_shape=None, modality="VIS") -> ComplexityReport:
    """Count params/MACs/flops of one eval-mode inference pass of one image.

    ``input_shape`` is ``(3, H, W)``; defaults to the model's configured input.
    Returns a report whose per-layer rows sum exactly to its totals.
    """
    if input_shape is None:
        input_shape = (3, model.cfg.input_height, model.cfg.input_width)
    report = ComplexityReport()
    seen = set()
    names = {m: n for n, m in model.named_modules()}
    handles = []

    def hook(m, inp, out):
        cost = _LEAF_COSTS.get(type(m)) or _EXTRA_COSTS[type(m)]
        macs, elem = cost(m, inp, out)
        params = 0
        if id(m) not in seen:
            seen.add(id(m))
            params = _own_params(m)
        report.layers.append(LayerCost(names[m], type(m).__name__, int(macs), int(elem), int(params)))

    for m in model.modules():
        if type(m) in _LEAF_COSTS or type(m) in _EXTRA_COSTS:
            handles.append(m.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        p = next(model.parameters())
        x = torch.zeros((1, *input_shape), dtype=p.dtype, device=p.device)
        model.forward(x, [modality], heads=False)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return report
