"""Monocular-depth alignment and the two depth losses.

A monocular depth map is only defined up to an affine transform, so a
scale/shift pair (s, t) is fitted per image in closed form by least squares
on d_r = (rendered_depth_r, 1):

    (s, t) = (sum_r d_r d_r^T)^-1 (sum_r d_r * mono_r)

The 2-D loss penalizes (s * rendered + t - mono)^2.  The 3-D loss pushes
per-ray rendering weight mass into the k samples nearest the rescaled
monocular depth:

    sum_r [ (1 - sum_{i in K_r} w_i)^2 + (sum_{i not in K_r} w_i)^2 ]

Both losses reduce with a per-ray mean by default so loss weights stay
resolution independent; pass reduction="sum" for the summed convention.
Gradients never flow through (s, t): alignment is per-image preprocessing.

``mono_oracle`` stands in for a pretrained monocular estimator: it returns
an affinely corrupted (optionally noised) copy of the ground-truth depth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .grad import Tensor

NEAREST_K = 5


@dataclass
class ScaleShift:
    s: float
    t: float
    degenerate: bool = False


def align_scale_shift(rendered: np.ndarray, mono: np.ndarray) -> ScaleShift:
    """Closed-form least-squares fit of s*rendered + t ~= mono."""
    x = np.asarray(rendered, dtype=np.float64).ravel()
    y = np.asarray(mono, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two rays to fit scale and shift")
    n = float(x.size)
    sx = x.sum()
    sxx = (x * x).sum()
    det = n * sxx - sx * sx          # n^2 * var(x)
    if det <= 1e-12 * max(n * sxx, 1.0):
        return ScaleShift(0.0, float(y.mean()), degenerate=True)
    sy = y.sum()
    sxy = (x * y).sum()
    s = (n * sxy - sx * sy) / det
    t = (sxx * sy - sx * sxy) / det
    return ScaleShift(float(s), float(t))


def loss_depth_2d(rendered, mono: np.ndarray, ss: ScaleShift,
                  reduction: str = "mean") -> Tensor:
    """Squared error between affinely aligned rendered depth and mono depth."""
    rendered = G.astensor(rendered)
    mono = np.asarray(mono, dtype=np.float64)
    resid = G.sub(G.add(G.mul(rendered, ss.s), ss.t), mono)
    sq = G.mul(resid, resid)
    return G.tmean(sq) if reduction == "mean" else G.tsum(sq)


def nearest_k_mask(depths: np.ndarray, target: np.ndarray, k: int) -> np.ndarray:
    """Indicator (..., N) of the k samples nearest the target depth.

    Ties break toward the lower sample index (stable sort).
    """
    depths = np.asarray(depths, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = depths.shape[-1]
    if k > n:
        raise ValueError(f"k={k} exceeds sample count {n}")
    dist = np.abs(depths - target[..., None])
    order = np.argsort(dist, axis=-1, kind="stable")
    mask = np.zeros(dist.shape, dtype=np.float64)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def loss_depth_3d(weights, depths: np.ndarray, mono_rescaled: np.ndarray,
                  k: int = NEAREST_K, reduction: str = "mean") -> Tensor:
    """Weight-concentration loss around the rescaled monocular depth.

    ``weights`` (..., N) rendering weights, ``depths`` (N,) sample depths,
    ``mono_rescaled`` (...) per-ray target depth in camera units.
    """
    weights = G.astensor(weights)
    mask = nearest_k_mask(np.broadcast_to(depths, weights.shape),
                          mono_rescaled, k)
    inside = G.tsum(G.mul(weights, mask), axis=-1)
    outside = G.tsum(G.mul(weights, 1.0 - mask), axis=-1)
    miss = G.sub(1.0, inside)
    per_ray = G.add(G.mul(miss, miss), G.mul(outside, outside))
    return G.tmean(per_ray) if reduction == "mean" else G.tsum(per_ray)


def _smooth5(img: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur with edge clamping."""
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    pad = np.pad(img, ((2, 2), (2, 2)), mode="edge")
    tmp = sum(kernel[i] * pad[i:i + img.shape[0], 2:-2] for i in range(5))
    tmp = np.pad(tmp, ((0, 0), (2, 2)), mode="edge")
    return sum(kernel[i] * tmp[:, i:i + img.shape[1]] for i in range(5))


def mono_oracle(gt_depth: np.ndarray, rng: np.random.Generator,
                scale_range=(0.5, 2.0), shift_range=(-0.2, 0.2),
                noise_std: float = 0.0) -> np.ndarray:
    """Up-to-scale depth: a*GT + b with random per-image a, b, optional
    smoothed noise.  Output stays strictly positive."""
    gt = np.asarray(gt_depth, dtype=np.float64)
    a = rng.uniform(*scale_range)
    b = rng.uniform(*shift_range)
    out = a * gt + b
    if noise_std > 0.0:
        noise = rng.normal(0.0, noise_std, size=gt.shape[-2:])
        out = out + _smooth5(noise)
    return np.maximum(out, 1e-3)
