"""
Key instances in the cross-modality contrastive loss
=====================================================

Two people, three VIS and three IR shots each. For each VIS anchor the loss
keeps only the K IR shots of the same person that look least like it.
"""
import torch
import torch.nn.functional as F

from wrimnet.backbone import IR, VIS
from wrimnet.losses import LossConfig, cmkic_loss, select_key_instances

torch.manual_seed(1)
ids = torch.tensor([0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1])
mods = torch.tensor([VIS] * 6 + [IR] * 6)
z = F.normalize(torch.randn(12, 16), dim=1)

ir = (mods == IR).nonzero(as_tuple=True)[0]
anchor = 0
picked = select_key_instances(z[anchor], z[ir], ids[ir], int(ids[anchor]), top_k=2)
sims = z[ir] @ z[anchor]
print("similarity of anchor 0 to each IR sample:", [round(s, 3) for s in sims.tolist()])
print("key instances (IR positions):", picked.tolist())

# colder temperature -> sharper softmax -> larger penalty for the same geometry
for tau in (1.0, 0.5, 0.1, 0.05):
    print(f"tau={tau:<5} loss={cmkic_loss(z, ids, mods, LossConfig(tau=tau, top_k=2)).item():.3f}")

# pulling each IR sample onto its person's VIS mean drives the loss down
centres = torch.stack([z[(ids == p) & (mods == VIS)].mean(0) for p in (0, 1)])
aligned = z.clone()
aligned[ir] = F.normalize(centres[ids[ir]] + 0.05 * torch.randn(6, 16), dim=1)
aligned[:6] = F.normalize(centres[ids[:6]] + 0.05 * torch.randn(6, 16), dim=1)
print("after alignment:", round(cmkic_loss(aligned, ids, mods, LossConfig(top_k=2)).item(), 3))
