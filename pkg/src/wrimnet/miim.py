"""Multi-dimension interactive information mining (MIIM) gate.

Pipeline per placement::

    F1 --BN--> conv(k=s=r_s, C1->C2) = F2 --avgpool(k_s)--> F3
    F4 = MHA(Q=F2 + pos, K=F3 + pos, V=F3)
    M1 = sigmoid(W F4) ; M2 = nearest_upsample(M1, r_s)
    F6 = BN(ReLU(F1 * M2))

Tensors are NCHW throughout; token sequences are flattened row-major.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "MIIMConfig",
    "MIIM",
    "MultiHeadAttention",
    "sincos_positional_embedding",
    "DEFAULT_SPATIAL_RATIOS",
    "DEFAULT_CHANNEL_RATIOS",
]

# optimum schedules for placements after Block1..Block4
DEFAULT_SPATIAL_RATIOS = (4, 2, 1, 1)
DEFAULT_CHANNEL_RATIOS = (2, 2, 4, 4)


@dataclass(frozen=True)
class MIIMConfig:
    in_channels: int
    in_height: int
    in_width: int
    r_s: int = 1
    r_c: int = 1
    k_s: int = 3
    heads: int = 8

    def __post_init__(self):
        for name in ("in_channels", "in_height", "in_width", "r_s", "r_c", "k_s", "heads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"MIIMConfig.{name} must be a positive integer")
        if self.in_channels % self.r_c:
            raise ValueError(f"in_channels={self.in_channels} not divisible by r_c={self.r_c}")
        if self.mid_channels % self.heads:
            raise ValueError(f"compressed width {self.mid_channels} not divisible by heads={self.heads}")
        if self.mid_channels % 4:
            raise ValueError(f"compressed width {self.mid_channels} must be divisible by 4 (2-D sin-cos embedding)")
        if self.in_height % self.r_s or self.in_width % self.r_s:
            raise ValueError(
                f"input {self.in_height}x{self.in_width} not divisible by r_s={self.r_s}")
        if self.pooled_size[0] < 1 or self.pooled_size[1] < 1:
            raise ValueError(
                f"k_s={self.k_s} too large for compressed map {self.compressed_size}")

    @property
    def mid_channels(self) -> int:
        return self.in_channels // self.r_c

    @property
    def compressed_size(self) -> tuple[int, int]:
        return self.in_height // self.r_s, self.in_width // self.r_s

    @property
    def pooled_size(self) -> tuple[int, int]:
        h2, w2 = self.compressed_size
        return h2 // self.k_s, w2 // self.k_s

    def to_dict(self) -> dict:
        return asdict(self)


def _sincos_1d(positions: torch.Tensor, dim: int) -> torch.Tensor:
    # interleaved: even columns sin, odd columns cos, geometric frequencies
    i = torch.arange(dim // 2, dtype=torch.float64)
    freq = 1.0 / (10000.0 ** (2.0 * i / dim))
    angles = positions.to(torch.float64)[:, None] * freq[None, :]
    out = torch.empty(positions.numel(), dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out


def sincos_positional_embedding(height: int, width: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine table of shape ``(height * width, dim)``.

    The first ``dim // 2`` columns encode the row index and the remaining
    columns the column index, each with the transformer sinusoid scheme.
    Rows follow row-major token order. Returned in float64; callers cast.
    """
    if height < 1 or width < 1:
        raise ValueError("height and width must be positive")
    if dim % 4:
        raise ValueError(f"dim={dim} must be divisible by 4")
    rows = torch.arange(height).repeat_interleave(width)
    cols = torch.arange(width).repeat(height)
    return torch.cat([_sincos_1d(rows, dim // 2), _sincos_1d(cols, dim // 2)], dim=1)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections.

    Inputs are ``(B, L, C)``. Scaling is ``1 / sqrt(C / heads)``; no dropout.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} not divisible by heads={heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value, return_weights=False):
        b, lq, c = query.shape
        lk = key.shape[1]
        dh = c // self.heads
        q = self.q_proj(query).view(b, lq, self.heads, dh).transpose(1, 2)
        k = self.k_proj(key).view(b, lk, self.heads, dh).transpose(1, 2)
        v = self.v_proj(value).view(b, lk, self.heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(dh)
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, lq, c)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class MIIM(nn.Module):
    """Shape-preserving attention gate inserted after a backbone block."""

    def __init__(self, cfg: MIIMConfig, use_pos_embed: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_pos_embed = use_pos_embed
        c1, c2 = cfg.in_channels, cfg.mid_channels
        self.pre_bn = nn.BatchNorm2d(c1)
        self.compress_conv = nn.Conv2d(c1, c2, kernel_size=cfg.r_s, stride=cfg.r_s)
        self.pool = nn.AvgPool2d(cfg.k_s, stride=cfg.k_s)
        self.attn = MultiHeadAttention(c2, cfg.heads)
        self.restore_linear = nn.Linear(c2, c1)
        self.sigmoid = nn.Sigmoid()
        self.relu = nn.ReLU()
        self.post_bn = nn.BatchNorm2d(c1)

        h2, w2 = cfg.compressed_size
        h3, w3 = cfg.pooled_size
        self.register_buffer("pos_q", sincos_positional_embedding(h2, w2, c2).float(), persistent=False)
        self.register_buffer("pos_k", sincos_positional_embedding(h3, w3, c2).float(), persistent=False)

    def _check_input(self, x):
        cfg = self.cfg
        if x.dim() != 4 or tuple(x.shape[1:]) != (cfg.in_channels, cfg.in_height, cfg.in_width):
            raise ValueError(
                f"MIIM expects (B, {cfg.in_channels}, {cfg.in_height}, {cfg.in_width}), got {tuple(x.shape)}")

    def scc_forward(self, x):
        """BN then spatial-channel compression; returns ``(F2, F3)``."""
        self._check_input(x)
        f2 = self.compress_conv(self.pre_bn(x))
        f3 = self.pool(f2)
        return f2, f3

    def gri_forward(self, f2, f3, return_weights=False):
        """Cross-resolution attention, ``F2`` tokens attend to ``F3`` tokens.

        Returns ``(B, H2*W2, C2)`` (and the ``(B, heads, L2, L3)`` weights).
        """
        if f2.shape[1] % self.cfg.heads:
            raise ValueError("compressed channels not divisible by heads")
        q = f2.flatten(2).transpose(1, 2)
        kv = f3.flatten(2).transpose(1, 2)
        k = kv
        if self.use_pos_embed:
            q = q + self.pos_q.to(q.dtype)
            k = kv + self.pos_k.to(kv.dtype)
        return self.attn(q, k, kv, return_weights=return_weights)

    def gate(self, f4):
        """Restore channels and squash: ``M1`` as ``(B, C1, H2, W2)``."""
        h2, w2 = self.cfg.compressed_size
        if f4.shape[1] != h2 * w2:
            raise ValueError(f"expected {h2 * w2} tokens, got {f4.shape[1]}")
        m1 = self.sigmoid(self.restore_linear(f4))
        return m1.transpose(1, 2).reshape(f4.shape[0], -1, h2, w2)

    def scr_forward(self, x, f4):
        m1 = self.gate(f4)
        m2 = m1
        if self.cfg.r_s > 1:
            m2 = F.interpolate(m1, scale_factor=self.cfg.r_s, mode="nearest")
        return self.post_bn(self.relu(x * m2))

    def forward(self, x):
        f2, f3 = self.scc_forward(x)
        return self.scr_forward(x, self.gri_forward(f2, f3))
