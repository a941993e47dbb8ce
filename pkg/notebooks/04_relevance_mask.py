"""
Where does an instruction act?
==============================

Compare a denoiser's noise prediction with and without a text condition. The
toy denoiser only reacts to the instruction inside a known block, so the
thresholded relevance map should recover that block.
"""
import numpy as np

from sparsesplat.relevance import (NoiseSchedule, blend_latents, forward_noise, relevance_map, threshold_mask,
                                   toy_denoiser, upsample_mask)

rng = np.random.default_rng(0)
schedule = NoiseSchedule.linear(1000)
t_r = schedule.default_timestep()
print("timestep", t_r, "signal fraction", schedule[t_r])

z0 = rng.normal(size=(4, 32, 32))
z_t = forward_noise(z0, t_r, rng.normal(size=z0.shape), schedule)
den = toy_denoiser((8, 16, 12, 20), amplitude=0.7, baseline=0.1)

relevance = relevance_map(den, z_t, t_r, image_cond=None, text_cond="turn it blue")
mask = threshold_mask(relevance, 0.35)
rows, cols = np.nonzero(mask)
print("mask covers rows", rows.min(), "-", rows.max(), "cols", cols.min(), "-", cols.max())

# Blend an edited latent back in only where the mask is set.
z_edit = z0 + 1.0
out = blend_latents(z_edit, z0, mask)
print("changed entries:", int((out != z0).sum()), "=", 4 * mask.sum())

# Latents are 8x smaller than images; masks are upsampled by nearest neighbour.
print("image-space mask", upsample_mask(mask, 256, 256).shape)
