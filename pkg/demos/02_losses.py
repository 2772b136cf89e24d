# %% [markdown]
# # Loss terms on a tiny model
# Evaluate each generator-side objective term on random frames with a
# deliberately small model, then look at the contrastive pieces directly.

# %%
import math

import torch

from i2vgan import losses as L
from i2vgan.networks import ModelBundle, ModelConfig, gather_patches, grid_locations

cfg = ModelConfig(image_size=16, ngf=4, ndf=4, n_downsampling=1, n_blocks=1, d_layers=2,
                  head_hidden=16, embed_dim=8, perceptual="tiny", dtype="float64")
bundle = ModelBundle(cfg)
g = torch.Generator().manual_seed(0)
x = [torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1 for _ in range(3)]
E = bundle.perceptual

print("cycle    ", L.cycle_loss(bundle.G_X, bundle.G_Y, E, x[0]).item())
print("recurrent", L.recurrent_loss(bundle.P_X, E, *x).item())
print("recycle  ", L.recycle_loss(bundle.G_X, bundle.G_Y, bundle.P_Y, E, *x).item())

# %% [markdown]
# InfoNCE with one orthogonal negative at unit temperature is ln(1 + 1/e).

# %%
e = torch.eye(2, dtype=torch.float64)
print(float(L.info_nce(e[0], e[0], e[1:], 1.0)), math.log(1 + math.exp(-1)))

# %% [markdown]
# The motion degree of a static triplet is exactly one per layer; a triplet
# whose last frame changes has a larger second-pair discrepancy.

# %%
locs = grid_locations(bundle.tap_positions, 16)


def embed(frames, l):
    return bundle.heads_Y(gather_patches(bundle.G_Y.encode(frames, bundle.taps), l))


with torch.no_grad():
    still = L.motion_degree((x[0][0],) * 3, embed, locs)
    moving = L.motion_degree((x[0][0], x[0][0], x[1][0]), embed, locs)
print("static ", still.tolist())
print("changed", moving.tolist())
print("internal similarity between them", float(L.internal_similarity(still, moving)))
