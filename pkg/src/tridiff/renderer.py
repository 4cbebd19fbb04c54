"""Volume rendering of triplane fields by alpha compositing.

Per ray with samples i = 1..N:
    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i
    f_r     = sum_i w_i f_i
    depth   = sum_i w_i t_i / sum_j w_j   (far-plane sentinel on empty rays)

Rays are mutually independent; everything here is vectorized over them with
a fixed per-ray reduction order, so batched evaluation is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera as cam
from . import grad as G
from . import triplane as tp
from .grad import Tensor
from .grad.checkpoint import save_arrays

EMPTY_RAY_EPS = 1e-8


@dataclass
class RenderOutput:
    feature_map: Tensor   # (B, F, h, w)
    rgb_low: Tensor       # (B, 3, h, w), first three feature channels
    depth_low: Tensor     # (B, 1, h, w), world units
    weights: Tensor       # (B, N, h, w)
    alpha_acc: Tensor     # (B, 1, h, w)


def composite(features: Tensor, density: Tensor, deltas: np.ndarray):
    """Alpha-composite per-ray samples.

    ``features`` (B, P, N, F), ``density`` (B, P, N), ``deltas`` (N,) with
    one interval per sample.  Returns (weights (B,P,N), feature (B,P,F),
    alpha_acc (B,P)).
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(deltas <= 0):
        raise ValueError("sample intervals must be positive")
    alpha = 1.0 - G.exp(G.neg(G.mul(density, deltas)))
    surv = 1.0 - alpha
    n = alpha.shape[-1]
    trans = G.concat([
        Tensor(np.ones(alpha.shape[:-1] + (1,))),
        G.cumprod(surv, axis=-1)[..., : n - 1],
    ], axis=-1)
    weights = G.mul(trans, alpha)
    feature = G.tsum(G.mul(G.reshape(weights, weights.shape + (1,)), features),
                     axis=-2)
    alpha_acc = G.tsum(weights, axis=-1)
    return weights, feature, alpha_acc


def render_depth(weights: Tensor, depths: np.ndarray, far: float = cam.FAR,
                 eps: float = EMPTY_RAY_EPS) -> Tensor:
    """Weight-normalized mean sample depth; empty rays return the far plane."""
    depths = np.asarray(depths, dtype=np.float64)
    wsum = G.tsum(weights, axis=-1)
    num = G.tsum(G.mul(weights, depths), axis=-1)
    filled = (wsum.data >= eps).astype(np.float64)
    denom = G.add(wsum, (1.0 - filled))
    return G.add(G.mul(G.div(num, denom), filled), (1.0 - filled) * far)


def render_view(planes: Tensor, mlp: tp.FieldMLP,
                poses, intrinsics: cam.Intrinsics,
                resolution: int | tuple[int, int], n_samples: int,
                contraction: tp.ContractionParams | None = None,
                near: float = cam.NEAR, far: float = cam.FAR,
                jitter: bool = False,
                rng: np.random.Generator | None = None) -> RenderOutput:
    """Render feature maps, low-res image channels, and depth.

    ``planes`` is (B, 3, C, R, R) or unbatched; ``poses`` a CameraPose or a
    list of length B.  The returned ``rgb_low`` is the first three feature
    channels (the low-res image convention of feature-field renderers).
    """
    if planes.ndim == 4:
        planes = G.reshape(planes, (1,) + planes.shape)
    B = planes.shape[0]
    if isinstance(poses, cam.CameraPose):
        poses = [poses] * B
    if len(poses) != B:
        raise ValueError("need one pose per triplane batch entry")
    if isinstance(resolution, int):
        h = w = resolution
    else:
        h, w = resolution

    origins = []
    dirs = []
    for pose in poses:
        bundle = cam.cast_rays(pose, intrinsics, (h, w), near=near, far=far)
        origins.append(bundle.origins)
        dirs.append(bundle.directions)
    origins = np.stack(origins)               # (B, P, 3)
    dirs = np.stack(dirs)
    samples = cam.sample_disparity(bundle, n_samples, jitter=jitter, rng=rng)
    t = samples.depths                        # (N,)
    deltas = np.append(samples.deltas, samples.deltas[-1])

    pts = origins[:, :, None, :] + dirs[:, :, None, :] * t[None, None, :, None]
    P = h * w
    feats, density = tp.query_field(
        planes, mlp, pts.reshape(B, P * n_samples, 3), contraction)
    F = feats.shape[-1]
    feats = G.reshape(feats, (B, P, n_samples, F))
    density = G.reshape(density, (B, P, n_samples))

    weights, feature, alpha_acc = composite(feats, density, deltas)
    depth = render_depth(weights, t, far=far)

    feature_map = G.reshape(G.transpose(feature, (0, 2, 1)), (B, F, h, w))
    weight_map = G.reshape(G.transpose(weights, (0, 2, 1)), (B, n_samples, h, w))
    depth_map = G.reshape(depth, (B, 1, h, w))
    alpha_map = G.reshape(alpha_acc, (B, 1, h, w))
    return RenderOutput(feature_map=feature_map,
                        rgb_low=feature_map[:, :3],
                        depth_low=depth_map,
                        weights=weight_map,
                        alpha_acc=alpha_map)


def dump_ray_debug(path, out: RenderOutput, sample_depths: np.ndarray):
    """Write per-ray weights and depths for offline oracle comparison."""
    save_arrays(path, {
        "weights": out.weights.data,
        "depth_low": out.depth_low.data,
        "alpha_acc": out.alpha_acc.data,
        "sample_depths": np.asarray(sample_depths, dtype=np.float64),
    })
