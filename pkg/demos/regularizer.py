"""How the Epps-Pulley statistic and SIGReg react to non-Gaussian latents.

Run with ``python3 demos/regularizer.py``.
"""

import torch

from drivelatent.objectives import ep_statistic, sigreg

g = torch.Generator().manual_seed(0)

print("1-D Epps-Pulley statistic against N(0, 1), 512 samples")
base = torch.randn(512, generator=g, dtype=torch.float64)
for name, y in [("standard normal", base), ("shifted by 1", base + 1), ("scaled by 2", base * 2),
                ("uniform", torch.rand(512, generator=g, dtype=torch.float64) * 3.46 - 1.73)]:
    print(f"  {name:16s} {float(ep_statistic(y)):8.3f}")

print("\nSIGReg over 16 random directions, 1024 tokens in 32 dimensions")
tokens = torch.randn(1024, 32, generator=g, dtype=torch.float64)
collapsed = tokens.clone()
collapsed[:, 1:] = 0.0
collapsed[:, 0] *= 5.6   # same total variance, one direction only
for name, z in [("isotropic", tokens), ("mean shift", tokens + 0.5), ("collapsed", collapsed)]:
    stat = float(sigreg(z, 16, generator=torch.Generator().manual_seed(1)))
    print(f"  {name:10s} {stat:.5f}")
