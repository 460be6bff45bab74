"""
How the contrastive loss responds to geometry
=============================================

Three classes of unit vectors. We start with random directions, then pull
each class together and watch the loss fall. The temperature sharpens the
penalty on hard negatives.
"""

import numpy as np
import torch

from accovidnet.losses import supcon_loss

rng = np.random.default_rng(0)
labels = torch.tensor([0, 0, 0, 1, 1, 1, 2, 2, 2])
centres = rng.normal(size=(3, 16))
noise = rng.normal(size=(9, 16))


def embed(spread):
    z = centres[labels.numpy()] + spread * noise
    return torch.from_numpy(z / np.linalg.norm(z, axis=1, keepdims=True))


print("spread   tau=0.05   tau=0.1   tau=0.5")
for spread in (10.0, 3.0, 1.0, 0.3, 0.1, 0.0):
    z = embed(spread)
    row = [float(supcon_loss(z, labels, tau)) for tau in (0.05, 0.1, 0.5)]
    print(f"{spread:6.1f}  " + "  ".join(f"{v:9.4f}" for v in row))

# scaling before normalization changes nothing
z = torch.from_numpy(rng.normal(size=(9, 16)))
a = supcon_loss(z / z.norm(dim=1, keepdim=True), labels, 0.1)
b = supcon_loss(1e3 * z / (1e3 * z).norm(dim=1, keepdim=True), labels, 0.1)
print("rescaled inputs agree:", float(a), float(b))
