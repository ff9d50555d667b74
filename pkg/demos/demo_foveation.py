"""Foveated feature map construction, step by step.

Builds a relative resolution map for a pair of fixations, derives the
per-level blending weights, and renders a foveated version of a synthetic
image. Writes PNG figures next to this script.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fovsearch.core import Fixation
from fovsearch.foveation import (RetinaParams, foveate_image, gaussian_pyramid,
                                 half_max_resolution, resolution_map,
                                 transfer_amplitude, weight_maps)

OUT = os.path.dirname(os.path.abspath(__file__))

params = RetinaParams(alpha=2.5, sigma=0.3, p=4.57)
fixations = [Fixation(60, 50), Fixation(200, 110)]
dims = (160, 256)

# Relative resolution: 1 at the fixations, hyperbolic falloff with
# eccentricity, pointwise max across fixations.
R = resolution_map(fixations, params, dims)
print(f"resolution map: max={R.max():.3f} at fixations, min={R.min():.3f}")

# The transfer functions of the five pyramid levels cross half maximum at
# strictly decreasing resolutions -> four blending bins plus two clamps.
rs = np.linspace(0, 1.6, 400)
fig, ax = plt.subplots(figsize=(7, 4))
for lvl in range(1, 6):
    ax.plot(rs, [transfer_amplitude(lvl, r, params.sigma) for r in rs],
            label=f"level {lvl}")
    ax.axvline(half_max_resolution(lvl, params.sigma), ls=":", c="gray", lw=0.8)
ax.axhline(0.5, ls="--", c="k", lw=0.8)
ax.set_xlabel("relative resolution")
ax.set_ylabel("relative amplitude")
ax.legend()
fig.savefig(os.path.join(OUT, "transfer_functions.png"), dpi=110)

W = weight_maps(R, params.sigma)
fig, axes = plt.subplots(1, 6, figsize=(18, 2.6))
axes[0].imshow(R, cmap="magma")
axes[0].set_title("resolution")
for i, w in enumerate(W):
    img = np.broadcast_to(np.asarray(w, dtype=float), R.shape)
    axes[i + 1].imshow(img, vmin=0, vmax=1, cmap="viridis")
    axes[i + 1].set_title(f"W{i + 1}")
for ax in axes:
    ax.axis("off")
fig.savefig(os.path.join(OUT, "weight_maps.png"), dpi=110)

total = sum(np.broadcast_to(np.asarray(w, dtype=float), R.shape) for w in W)
print(f"weight normalization: max |sum - 1| = {np.abs(total - 1).max():.2e}")

# Image foveation: same weights over a Gaussian pyramid, upsampled back.
rng = np.random.default_rng(0)
yy, xx = np.indices((320, 512))
image = np.stack([
    0.5 + 0.5 * np.sin(xx / 6.0) * np.sin(yy / 6.0),
    ((yy // 16 + xx // 16) % 2).astype(float),
    np.linspace(0, 1, 512)[None, :].repeat(320, 0),
])
fov = foveate_image(image, [Fixation(256, 160)], RetinaParams(p=9.14))
fig, axes = plt.subplots(1, 2, figsize=(12, 4))
axes[0].imshow(np.moveaxis(image, 0, 2))
axes[0].set_title("input")
axes[1].imshow(np.moveaxis(fov, 0, 2))
axes[1].set_title("foveated at the center")
for ax in axes:
    ax.axis("off")
fig.savefig(os.path.join(OUT, "foveated_image.png"), dpi=110)

pyr = gaussian_pyramid(image)
print("gaussian pyramid levels:", [lvl.shape for lvl in pyr.levels])
print("figures written to", OUT)
