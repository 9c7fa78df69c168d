"""AICL objectives: cross-modality key-instance contrastive loss plus ID losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .backbone import IR, VIS, modality_tensor

__all__ = [
    "LossConfig",
    "select_key_instances",
    "cmkic_directional",
    "cmkic_loss",
    "check_cmkic_batch",
    "cls_loss",
    "triplet_batch_hard",
    "id_loss_p4",
    "total_loss",
]


@dataclass
class LossConfig:
    tau: float = 0.1
    top_k: int = 4
    lambda1: float = 0.5
    lambda2: float = 0.1
    margin: float = 0.3
    label_smoothing: float = 0.0
    cmkic_mean: bool = False  # average over anchors instead of summing

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.margin < 0:
            raise ValueError("lambda1, lambda2 and margin must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def select_key_instances(anchor_z, candidate_z, candidate_ids, anchor_id, top_k):
    """Indices of the ``top_k`` same-identity candidates least similar to the anchor.

    Similarity is the dot product. Ties go to the lower candidate index.
    Returned indices are ordered by increasing similarity.
    """
    candidate_z = torch.as_tensor(candidate_z)
    anchor_z = torch.as_tensor(anchor_z, dtype=candidate_z.dtype)
    ids = torch.as_tensor(candidate_ids)
    same = (ids == anchor_id).nonzero(as_tuple=True)[0]
    if same.numel() < top_k:
        raise ValueError(
            f"identity {anchor_id}: {same.numel()} cross-modality candidates, need top_k={top_k}")
    sims = (candidate_z[same] @ anchor_z).detach()
    order = torch.sort(sims, stable=True).indices[:top_k]
    return same[order]


def check_cmkic_batch(ids, modality, top_k, anchor_modalities=(VIS, IR)):
    """Raise unless every anchor identity has >= top_k samples in the opposite modality."""
    ids = torch.as_tensor(ids)
    modality = modality_tensor(modality, ids.numel())
    for tag in anchor_modalities:
        anchors = ids[modality == tag]
        others = ids[modality != tag]
        for pid in anchors.unique().tolist():
            n = int((others == pid).sum())
            if n < top_k:
                name = "IR" if tag == VIS else "VIS"
                raise ValueError(
                    f"identity {pid} has {n} {name} samples in the batch, top_k={top_k} required")


def cmkic_directional(z, ids, modality, anchor_modality, cfg: LossConfig):
    """Contrastive loss with anchors from one modality and candidates from the other.

    For anchor ``i`` the positives ``P(i)`` are its ``top_k`` least similar
    opposite-modality samples of the same identity; the denominator runs over
    ``P(i)`` plus every opposite-modality sample with a different identity.
    Summed over anchors (or averaged when ``cfg.cmkic_mean``).
    """
    ids = torch.as_tensor(ids, device=z.device)
    modality = modality_tensor(modality, z.shape[0], z.device)
    anchor_tag = modality_tensor(anchor_modality, 1).item()
    a_idx = (modality == anchor_tag).nonzero(as_tuple=True)[0]
    c_idx = (modality != anchor_tag).nonzero(as_tuple=True)[0]
    if a_idx.numel() == 0:
        raise ValueError("no anchors of the requested modality in the batch")
    check_cmkic_batch(ids, modality, cfg.top_k, (anchor_tag,))

    a_ids, c_ids = ids[a_idx], ids[c_idx]
    logits = z[a_idx] @ z[c_idx].T / cfg.tau
    same = a_ids[:, None] == c_ids[None, :]

    # rank same-id candidates by similarity; +inf pushes other ids to the end
    key = logits.detach().masked_fill(~same, math.inf)
    order = torch.sort(key, dim=1, stable=True).indices[:, :cfg.top_k]
    positive = torch.zeros_like(same).scatter_(1, order, True)
    denom_mask = positive | ~same

    log_denom = torch.logsumexp(logits.masked_fill(~denom_mask, -math.inf), dim=1)
    pos_logits = logits.gather(1, order)
    per_anchor = -(pos_logits - log_denom[:, None]).sum(dim=1) / cfg.top_k
    return per_anchor.mean() if cfg.cmkic_mean else per_anchor.sum()


def cmkic_loss(z, ids, modality, cfg: LossConfig):
    """Mean of the VIS-anchored and IR-anchored directional losses."""
    vi = cmkic_directional(z, ids, modality, VIS, cfg)
    iv = cmkic_directional(z, ids, modality, IR, cfg)
    return 0.5 * (iv + vi)


def cls_loss(logits_list, labels, label_smoothing=0.0):
    """Average over feature heads of the batch-mean cross-entropy."""
    labels = torch.as_tensor(labels, device=logits_list[0].device)
    n_classes = logits_list[0].shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    terms = [F.cross_entropy(lg, labels, label_smoothing=label_smoothing) for lg in logits_list]
    return torch.stack(terms).mean()


def triplet_batch_hard(features, ids, margin):
    """Batch-hard triplet loss with Euclidean distance, averaged over anchors."""
    ids = torch.as_tensor(ids, device=features.device)
    same = ids[:, None] == ids[None, :]
    eye = torch.eye(len(ids), dtype=torch.bool, device=features.device)
    pos_mask, neg_mask = same & ~eye, ~same
    if not pos_mask.any(1).all() or not neg_mask.any(1).all():
        raise ValueError("every identity needs >= 2 samples and the batch >= 2 identities")
    sq = (features[:, None, :] - features[None, :, :]).pow(2).sum(-1)
    dist = sq.clamp_min(1e-12).sqrt()
    hardest_pos = dist.masked_fill(~pos_mask, -math.inf).amax(dim=1)
    hardest_neg = dist.masked_fill(~neg_mask, math.inf).amin(dim=1)
    return F.relu(margin + hardest_pos - hardest_neg).mean()


def id_loss_p4(qg, logits_list, ids, cfg: LossConfig):
    """ID loss on the Block3 branch: CE over ``Qg`` and its stripes plus triplet on ``Qg``."""
    return cls_loss(logits_list, ids, cfg.label_smoothing) + triplet_batch_hard(qg, ids, cfg.margin)


def total_loss(cls5, cmkic5, id4, cfg: LossConfig):
    parts = [torch.as_tensor(v) for v in (cls5, cmkic5, id4)]
    if not all(torch.isfinite(p).all() for p in parts):
        raise FloatingPointError(f"non-finite loss term: {[float(p) for p in parts]}")
    return cls5 + cfg.lambda1 * cmkic5 + cfg.lambda2 * id4
