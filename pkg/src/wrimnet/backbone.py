"""WRIM-Net assembly: shared ResNet50 trunk, routed MIIM gates, P4/P5 heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .miim import DEFAULT_CHANNEL_RATIOS, DEFAULT_SPATIAL_RATIOS, MIIM, MIIMConfig

__all__ = [
    "VIS",
    "IR",
    "NetworkConfig",
    "FeatureBundle",
    "BNNeck",
    "MLPHead",
    "WRIMNet",
    "build_wrimnet",
    "partition_and_pool",
    "modality_tensor",
]

VIS, IR = 0, 1
_MODALITY_NAMES = {"VIS": VIS, "IR": IR}

TRUNK_CHANNELS = (256, 512, 1024, 2048)


def modality_tensor(modality, batch_size=None, device=None):
    """Normalize modality tags (``"VIS"``/``"IR"`` strings or 0/1 ints) to a long tensor."""
    if isinstance(modality, torch.Tensor):
        t = modality.to(dtype=torch.long, device=device)
    else:
        if isinstance(modality, (str, int)):
            modality = [modality] * (batch_size or 1)
        vals = []
        for m in modality:
            if isinstance(m, str):
                if m not in _MODALITY_NAMES:
                    raise ValueError(f"unknown modality tag {m!r}")
                vals.append(_MODALITY_NAMES[m])
            else:
                vals.append(int(m))
        t = torch.tensor(vals, dtype=torch.long, device=device)
    if ((t != VIS) & (t != IR)).any():
        raise ValueError(f"unknown modality tag in {t.tolist()}")
    if batch_size is not None and t.numel() != batch_size:
        raise ValueError(f"{t.numel()} modality tags for batch of {batch_size}")
    return t


@dataclass
class NetworkConfig:
    num_classes: int
    input_height: int = 384
    input_width: int = 144
    n_local_p5: int = 2
    m_local_p4: int = 0
    last_stride: int = 1
    use_miim: bool = True
    r_s: tuple = DEFAULT_SPATIAL_RATIOS
    r_c: tuple = DEFAULT_CHANNEL_RATIOS
    k_s: int = 3
    heads: int = 8
    mlp_hidden: int = 2048
    mlp_out: int = 512
    pretrained_weights_path: str | None = None

    def __post_init__(self):
        self.r_s = tuple(int(v) for v in self.r_s)
        self.r_c = tuple(int(v) for v in self.r_c)
        if len(self.r_s) != 4 or len(self.r_c) != 4:
            raise ValueError("r_s and r_c need one entry per block (4)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.last_stride not in (1, 2):
            raise ValueError("last_stride must be 1 or 2")
        if self.n_local_p5 < 0 or self.m_local_p4 < 0:
            raise ValueError("local part counts must be non-negative")
        if self.input_height % 32 or self.input_width % 16:
            raise ValueError("input height must be a multiple of 32 and width of 16")
        (h3, _), (h4, _) = self.block_sizes[2], self.block_sizes[3]
        if self.n_local_p5 and h4 % self.n_local_p5:
            raise ValueError(f"Block4 height {h4} not divisible by N={self.n_local_p5}")
        if self.m_local_p4 and h3 % self.m_local_p4:
            raise ValueError(f"Block3 height {h3} not divisible by M={self.m_local_p4}")
        if self.use_miim:
            self.miim_configs()

    @property
    def block_sizes(self):
        h, w = self.input_height, self.input_width
        last = 16 if self.last_stride == 1 else 32
        return [(h // 4, w // 4), (h // 8, w // 8), (h // 16, w // 16), (h // last, w // last)]

    def miim_configs(self) -> list[MIIMConfig]:
        return [
            MIIMConfig(in_channels=c, in_height=hw[0], in_width=hw[1],
                       r_s=rs, r_c=rc, k_s=self.k_s, heads=self.heads)
            for c, hw, rs, rc in zip(TRUNK_CHANNELS, self.block_sizes, self.r_s, self.r_c)
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r_s"], d["r_c"] = list(self.r_s), list(self.r_c)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FeatureBundle:
    """Batched per-sample features of one forward pass (leading dim = batch)."""

    p4: torch.Tensor
    p5: torch.Tensor
    rg: torch.Tensor
    r: list = field(default_factory=list)
    qg: torch.Tensor | None = None
    q: list = field(default_factory=list)
    z5: torch.Tensor | None = None
    z: torch.Tensor | None = None
    # post-BNNeck features and logits, ordered [global, locals...]
    p5_bn: list = field(default_factory=list)
    p5_logits: list = field(default_factory=list)
    p4_bn: list = field(default_factory=list)
    p4_logits: list = field(default_factory=list)

    def __len__(self):
        return self.rg.shape[0]


def partition_and_pool(p, n_parts):
    """Global average pool plus ``n_parts`` horizontal stripe pools.

    ``p`` is ``(B, C, H, W)``; returns ``(global (B, C), [local (B, C)] * n_parts)``.
    """
    if n_parts < 0:
        raise ValueError("n_parts must be non-negative")
    h = p.shape[2]
    if n_parts and h % n_parts:
        raise ValueError(f"height {h} not divisible into {n_parts} stripes")
    glob = p.mean(dim=(2, 3))
    if not n_parts:
        return glob, []
    step = h // n_parts
    locals_ = [p[:, :, i * step:(i + 1) * step].mean(dim=(2, 3)) for i in range(n_parts)]
    return glob, locals_


class BNNeck(nn.Module):
    """BN (shift frozen at zero) followed by a bias-free identity classifier."""

    def __init__(self, dim, num_classes):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.bn.bias.requires_grad_(False)
        self.classifier = nn.Linear(dim, num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def forward(self, feature, with_logits=True):
        bn_feature = self.bn(feature)
        if not with_logits:
            return bn_feature, None
        return bn_feature, self.classifier(bn_feature)


class MLPHead(nn.Module):
    """Projection ``z5 = W2(ReLU(BN(W1(Rg))))`` and its unit-norm version ``z``."""

    def __init__(self, in_dim, hidden, out_dim):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, bias=False)
        self.bn = nn.BatchNorm1d(hidden)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, rg):
        z5 = self.fc2(self.relu(self.bn(self.fc1(rg))))
        norms = z5.norm(dim=1, keepdim=True)
        if (norms == 0).any():
            raise ValueError("z5 has zero norm; cannot normalize")
        return z5, z5 / norms


def _resnet50_trunk(last_stride):
    net = torchvision.models.resnet50(weights=None)
    if last_stride == 1:
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    return stem, nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])


class WRIMNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.stem, self.blocks = _resnet50_trunk(cfg.last_stride)
        if cfg.use_miim:
            mc = cfg.miim_configs()
            # placements 1-2: one gate per modality, 3-4: shared
            self.miim = nn.ModuleList([
                nn.ModuleList([MIIM(mc[0]), MIIM(mc[0])]),
                nn.ModuleList([MIIM(mc[1]), MIIM(mc[1])]),
                nn.ModuleList([MIIM(mc[2])]),
                nn.ModuleList([MIIM(mc[3])]),
            ])
        else:
            self.miim = None
        self.necks_p5 = nn.ModuleList(BNNeck(2048, cfg.num_classes) for _ in range(1 + cfg.n_local_p5))
        self.necks_p4 = nn.ModuleList(BNNeck(1024, cfg.num_classes) for _ in range(1 + cfg.m_local_p4))
        self.mlp = MLPHead(2048, cfg.mlp_hidden, cfg.mlp_out)

    def trunk_parameters(self):
        return [p for m in (self.stem, self.blocks) for p in m.parameters()]

    def _apply_miim(self, stage, x, modality):
        gates = self.miim[stage]
        if len(gates) == 1:
            return gates[0](x)
        out = torch.zeros_like(x)
        for tag, gate in ((VIS, gates[0]), (IR, gates[1])):
            idx = (modality == tag).nonzero(as_tuple=True)[0]
            if idx.numel():
                out = out.index_copy(0, idx, gate(x.index_select(0, idx)))
        return out

    def backbone_maps(self, images, modality):
        """Run stem and blocks with gates; returns ``(P4, P5)``."""
        modality = modality_tensor(modality, images.shape[0], images.device)
        x = self.stem(images)
        maps = []
        for stage, block in enumerate(self.blocks):
            x = block(x)
            if self.miim is not None:
                x = self._apply_miim(stage, x, modality)
            maps.append(x)
        return maps[2], maps[3]

    def forward(self, images, modality, heads=True) -> FeatureBundle:
        p4, p5 = self.backbone_maps(images, modality)
        rg, r = partition_and_pool(p5, self.cfg.n_local_p5)
        qg, q = partition_and_pool(p4, self.cfg.m_local_p4)
        bundle = FeatureBundle(p4=p4, p5=p5, rg=rg, r=r, qg=qg, q=q)
        for feats, necks, bn_out, logit_out in (
            ([rg, *r], self.necks_p5, bundle.p5_bn, bundle.p5_logits),
            ([qg, *q], self.necks_p4, bundle.p4_bn, bundle.p4_logits),
        ):
            for f, neck in zip(feats, necks):
                bn_f, logits = neck(f, with_logits=heads)
                bn_out.append(bn_f)
                if heads:
                    logit_out.append(logits)
        if heads:
            bundle.z5, bundle.z = self.mlp(rg)
        return bundle

    def inference_features(self, images, modality):
        """Unit-norm retrieval descriptor: concat of post-BNNeck Rg, R*, Qg, Q*."""
        from .evaluation import inference_feature

        return inference_feature(self.forward(images, modality, heads=False))


def build_wrimnet(cfg: NetworkConfig) -> WRIMNet:
    model = WRIMNet(cfg)
    if cfg.pretrained_weights_path:
        from .checkpoint import load_pretrained_trunk

        load_pretrained_trunk(model, cfg.pretrained_weights_path)
    return model
