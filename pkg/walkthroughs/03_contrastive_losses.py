"""SupCon versus OoDCon on a small batch, with and without the noise mask."""

import torch
import torch.nn.functional as F

from oodseg import ContrastiveConfig, label_noise_mask, oodcon_loss, supcon_loss

torch.manual_seed(0)
z = F.normalize(torch.randn(10, 8, dtype=torch.float64), dim=1)
y = torch.tensor([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])

# make one OoD vector a near-copy of an in-dist one (a mislabelled sample)
z[9] = F.normalize(z[0] + 0.05 * torch.randn(8, dtype=torch.float64), dim=0)

cfg = ContrastiveConfig(temperature=0.1, rejection_ratio=0.2)
keep = label_noise_mask(z, y, cfg.rejection_ratio)
print("rejected OoD indices:", torch.nonzero(~keep).flatten().tolist())

print(f"SupCon                {supcon_loss(z, y, cfg).item():.4f}")
print(f"OoDCon, no mask       {oodcon_loss(z, y, ContrastiveConfig(0.1, 0.0)).item():.4f}")
masked = oodcon_loss(z, y, cfg)
print(f"OoDCon, R=0.2         {masked.item():.4f}  {masked.diagnostics}")
