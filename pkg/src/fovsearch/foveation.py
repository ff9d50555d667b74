"""Retina-contingent resolution maps, level weights, and feature blending.

The resolution at a pixel decays hyperbolically with its distance (in degrees
of visual angle) from the nearest fixation.  Each pyramid level i carries a
Gaussian transfer function T_i(r) = exp(-(2^(i-3) r / sigma)^2 / 2) mapping
relative resolution to relative amplitude; the resolutions where consecutive
transfer functions cross half maximum partition resolution space into bins,
and within a bin the two adjacent levels are blended linearly in amplitude
space.  All formulas below accept plain numpy values or autodiff `Var`s, so
the same code serves both visualization and the learnable model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import FeaturePyramid, Fixation

SQRT_2LN2 = math.sqrt(2.0 * math.log(2.0))

N_LEVELS = 5


@dataclass
class RetinaParams:
    alpha: float = 2.5   # degrees; decay speed of resolution with eccentricity
    sigma: float = 0.3   # transfer-function bandwidth
    p: float = 4.57      # pixels per degree of visual angle at the working grid

    def __post_init__(self):
        if self.alpha <= 0 or self.sigma <= 0 or self.p <= 0:
            raise ValueError("alpha, sigma and p must all be positive")


def _exp(x):
    return ad.exp(x) if isinstance(x, ad.Var) else np.exp(x)


def min_distance_map(fixations: Sequence[Fixation], dims: tuple[int, int]) -> np.ndarray:
    """Distance from every grid point to its nearest fixation (grid units).

    Fixation coordinates must already be scaled to the map's resolution.
    """
    if len(fixations) == 0:
        raise ValueError("no fixations")
    h, w = dims
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    d2 = np.full((h, w), np.inf)
    for fx, fy in fixations:
        d2 = np.minimum(d2, (xs - fx) ** 2 + (ys - fy) ** 2)
    return np.sqrt(d2)


def resolution_from_distance(dmin: np.ndarray, alpha, p: float):
    """R = alpha / (alpha + d/p); `alpha` may be a Var for the learnable path."""
    return alpha / (alpha + dmin / p)


def resolution_map(fixations: Sequence[Fixation], params: RetinaParams,
                   dims: tuple[int, int]) -> np.ndarray:
    """Combined relative resolution map: pointwise max over per-fixation maps.

    The per-fixation map decreases with distance, so the max over fixations is
    the single-fixation map of the nearest one.
    """
    dmin = min_distance_map(fixations, dims)
    return resolution_from_distance(dmin, params.alpha, params.p)


def transfer_amplitude(level: int, r, sigma):
    """Relative amplitude passed by pyramid level `level` at resolution `r`."""
    z = (r * 2.0 ** (level - 3)) / sigma
    return _exp(-0.5 * (z * z))


def half_max_resolution(level: int, sigma):
    """The resolution R_i* where T_i crosses one half: 2^(3-i) * sigma * sqrt(2 ln 2)."""
    return (2.0 ** (3 - level) * SQRT_2LN2) * sigma


def weight_maps(R, sigma):
    """Per-level blending weights for a resolution map.

    Returns 5 maps that sum to one everywhere; at each location at most two
    consecutive levels are nonzero.  Out-of-range resolutions snap to the
    nearest pure level.  Bin membership is decided on numeric values and held
    fixed under differentiation.
    """
    rv = R.data if isinstance(R, ad.Var) else np.asarray(R, dtype=float)
    sv = float(sigma.data) if isinstance(sigma, ad.Var) else float(sigma)
    thr = [2.0 ** (3 - i) * SQRT_2LN2 * sv for i in range(1, N_LEVELS + 1)]

    weights = [0.0] * N_LEVELS
    weights[0] = weights[0] + (rv > thr[0]).astype(rv.dtype)
    weights[-1] = weights[-1] + (rv <= thr[-1]).astype(rv.dtype)

    for j in range(2, N_LEVELS + 1):  # bin between levels j-1 and j
        mask = ((rv <= thr[j - 2]) & (rv > thr[j - 1])).astype(rv.dtype)
        if not mask.any():
            continue
        # Evaluate the ratio on in-bin resolutions only; elsewhere substitute
        # the bin midpoint so the masked-out values stay finite.
        mid = 0.5 * (thr[j - 2] + thr[j - 1])
        r_safe = R * mask + mid * (1.0 - mask)
        t_hi = transfer_amplitude(j - 1, r_safe, sigma)
        t_lo = transfer_amplitude(j, r_safe, sigma)
        w_hi = (0.5 - t_lo) / (t_hi - t_lo)
        weights[j - 2] = weights[j - 2] + mask * w_hi
        weights[j - 1] = weights[j - 1] + mask * (1.0 - w_hi)
    return weights


def weight_maps_from_distance(dmin: np.ndarray, alpha, sigma, p: float):
    """Differentiable weight maps straight from a nearest-fixation distance field.

    Same math as `resolution_map` + `weight_maps`, but graph operations only
    touch in-bin pixels; the clamped periphery and fovea regions are constant
    masks carrying no gradient, matching the fixed-bin convention.
    """
    shape = dmin.shape
    flat_d = np.asarray(dmin, dtype=float).reshape(-1)
    av = float(alpha.data) if isinstance(alpha, ad.Var) else float(alpha)
    sv = float(sigma.data) if isinstance(sigma, ad.Var) else float(sigma)
    r_num = av / (av + flat_d / p)
    thr = [2.0 ** (3 - i) * SQRT_2LN2 * sv for i in range(1, N_LEVELS + 1)]
    dtype = dmin.dtype if dmin.dtype in (np.float32, np.float64) else np.float64

    bases = [None] * N_LEVELS
    bases[0] = (r_num > thr[0]).astype(dtype)
    bases[-1] = (r_num <= thr[-1]).astype(dtype)
    segments: list[list] = [[] for _ in range(N_LEVELS)]
    for j in range(2, N_LEVELS + 1):
        idx = np.flatnonzero((r_num <= thr[j - 2]) & (r_num > thr[j - 1]))
        if idx.size == 0:
            continue
        d_sub = flat_d[idx].astype(dtype)
        r_sub = alpha / (alpha + d_sub / p)
        t_hi = transfer_amplitude(j - 1, r_sub, sigma)
        t_lo = transfer_amplitude(j, r_sub, sigma)
        w_hi = (0.5 - t_lo) / (t_hi - t_lo)
        segments[j - 2].append((idx, w_hi))
        segments[j - 1].append((idx, 1.0 - w_hi))

    weights = []
    for i in range(N_LEVELS):
        has_var = any(isinstance(v, ad.Var) for _, v in segments[i])
        if has_var:
            flat = ad.scatter(segments[i], flat_d.size, base=bases[i], dtype=dtype)
            weights.append(ad.reshape(flat, shape))
        else:
            flat = np.zeros(flat_d.size, dtype=dtype) if bases[i] is None \
                else bases[i].copy()
            for idx, v in segments[i]:
                flat[idx] = np.asarray(v)
            weights.append(flat.reshape(shape))
    return weights


def blend(levels, weights):
    """Weighted spatial combination of equal-shaped level tensors.

    Each weight map broadcasts across the channel axis of its level.
    """
    out = None
    for lvl, w in zip(levels, weights):
        term = lvl * w
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# Gaussian image pyramid and RGB foveation (visualization path)
# ---------------------------------------------------------------------------

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur5(img: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur with reflect padding, per channel."""
    out = img.astype(np.float64, copy=True)
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (2, 2)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for k, coef in enumerate(_BINOMIAL5):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + out.shape[axis])
            acc += coef * padded[tuple(sl)]
        out = acc
    return out


def gaussian_pyramid(image: np.ndarray, levels: int = N_LEVELS) -> FeaturePyramid:
    """Blur-and-decimate pyramid of a (3, H, W) image at strides 2..32."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError("expected a (channels, H, W) image")
    out = []
    cur = image
    for _ in range(levels):
        cur = _blur5(cur)[:, ::2, ::2]
        out.append(cur.astype(np.float32))
    return FeaturePyramid(out, image_h=image.shape[1], image_w=image.shape[2])


def foveate_image(image: np.ndarray, fixations: Sequence[Fixation],
                  params: RetinaParams) -> np.ndarray:
    """Render a fixation-contingent multiresolution version of an RGB image.

    The Gaussian pyramid levels are resized back to the input resolution and
    blended with the same weight maps used for feature blending.  `params.p`
    is interpreted at the image's own pixel scale.
    """
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    pyr = gaussian_pyramid(image)
    ups = [ad.bilinear_resize(lvl.astype(np.float64), h, w) for lvl in pyr.levels]
    R = resolution_map(fixations, params, (h, w))
    W = weight_maps(R, params.sigma)
    out = blend(ups, W)
    return np.clip(out, 0.0, 1.0)
