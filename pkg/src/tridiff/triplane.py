"""Triplane feature field.

World coordinates are squashed into the unit ball by a contraction that is
linear inside radius ``r`` (image radius ``r_in``) and maps all of space to
norm <= 1 outside, then projected onto three axis-aligned feature planes.
Plane features are bilinearly interpolated, averaged, and decoded by a
small MLP into a feature vector and a non-negative density.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .grad import Tensor
from .grad.nn import Module, Linear

CONTRACT_R = 1.3
CONTRACT_R_IN = 0.8


@dataclass
class ContractionParams:
    r: float = CONTRACT_R
    r_in: float = CONTRACT_R_IN

    def __post_init__(self):
        if not (0.0 < self.r_in < 1.0):
            raise ValueError("r_in must lie in (0, 1)")
        if self.r <= 0.0:
            raise ValueError("r must be positive")


def contract(x: np.ndarray, params: ContractionParams | None = None) -> np.ndarray:
    """Map points (..., 3) into the open unit ball.

    ||x|| <= r        ->  x * r_in / r
    ||x|| >  r        ->  ((1 - r_in) * (1 - 1/(||x|| - r + 1)) + r_in) * x/||x||
    """
    p = params or ContractionParams()
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    inside = x * (p.r_in / p.r)
    safe = np.maximum(norm, 1e-300)
    scale = ((1.0 - p.r_in) * (1.0 - 1.0 / (norm - p.r + 1.0)) + p.r_in) / safe
    outside = x * scale
    return np.where(norm <= p.r, inside, outside)


def plane_rows(planes: Tensor) -> tuple[Tensor, int]:
    """Flatten (B, 3, C, R, R) planes into (B*3*R*R, C) gather rows."""
    if planes.ndim == 4:
        planes = G.reshape(planes, (1,) + planes.shape)
    B, three, C, R, _ = planes.shape
    if three != 3:
        raise ValueError("expected three feature planes")
    flat = G.reshape(G.transpose(planes, (0, 1, 3, 4, 2)), (B * 3 * R * R, C))
    return flat, R


def _bilinear_taps(coords: np.ndarray, R: int, row_offset: np.ndarray):
    """Corner indices/weights for plane coords in [-1, 1].

    ``coords`` is (..., 2); ``row_offset`` broadcasts against coords[..., 0]
    and selects the (batch, plane) block of the flattened rows.
    """
    t = (coords + 1.0) * 0.5 * (R - 1)          # texel space [0, R-1]
    t = np.clip(t, 0.0, R - 1)
    i0 = np.floor(t).astype(np.intp)
    i0 = np.minimum(i0, R - 2) if R > 1 else i0
    f = t - i0
    a0, b0 = i0[..., 0], i0[..., 1]
    fa, fb = f[..., 0], f[..., 1]
    base = row_offset + a0 * R
    idx4 = np.stack([(base + b0).ravel(),
                     (base + b0 + 1).ravel(),
                     (base + R + b0).ravel(),
                     (base + R + b0 + 1).ravel()])
    w4 = np.stack([((1 - fa) * (1 - fb)).ravel(),
                   ((1 - fa) * fb).ravel(),
                   (fa * (1 - fb)).ravel(),
                   (fa * fb).ravel()])
    return idx4, w4


def lookup_planes(planes: Tensor, x_contracted: np.ndarray) -> Tensor:
    """Average of bilinear lookups on the xy/xz/yz planes.

    ``planes`` is (B, 3, C, R, R) or (3, C, R, R); ``x_contracted`` is
    (B, P, 3) or (P, 3) in [-1, 1].  Returns (B, P, C).
    """
    flat, R = plane_rows(planes)
    pts = np.asarray(x_contracted, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    B, P, _ = pts.shape
    # plane p gets coordinate pair: xy -> (x, y), xz -> (x, z), yz -> (y, z)
    pairs = np.stack([pts[..., [0, 1]], pts[..., [0, 2]], pts[..., [1, 2]]],
                     axis=1)                      # (B, 3, P, 2)
    block = (np.arange(B)[:, None, None] * 3 +
             np.arange(3)[None, :, None]) * (R * R)
    idx4, w4 = _bilinear_taps(pairs, R, np.broadcast_to(block, (B, 3, P)))
    sampled = G.plane_sample(flat, idx4, w4)      # (B*3*P, C)
    C = sampled.shape[-1]
    sampled = G.reshape(sampled, (B, 3, P, C))
    return G.tmean(sampled, axis=1)


class FieldMLP(Module):
    """(C,) triplane feature -> (feature vector, softplus density).

    The density bias starts positive so fresh fields render opaque; an
    empty field is a local trap for the reconstruction losses (features can
    grow to compensate vanishing weights, leaving depth unsupervised).
    """

    DENSITY_BIAS_INIT = 1.5

    def __init__(self, rng, in_channels: int, hidden: int, feat_channels: int):
        super().__init__()
        self.feat_channels = feat_channels
        self.l1 = self.add_child("l1", Linear(rng, in_channels, hidden))
        self.l2 = self.add_child("l2", Linear(rng, hidden, feat_channels + 1))
        self.l2.b.data[feat_channels] = self.DENSITY_BIAS_INIT

    def __call__(self, t: Tensor) -> tuple[Tensor, Tensor]:
        h = G.silu(self.l1(t))
        out = self.l2(h)
        features = out[..., : self.feat_channels]
        density = G.softplus(out[..., self.feat_channels])
        return features, density


def query_field(planes: Tensor, mlp: FieldMLP, x_world: np.ndarray,
                params: ContractionParams | None = None):
    """Feature/density at world points: contract, project, average, decode."""
    xc = contract(x_world, params)
    t = lookup_planes(planes, xc)
    return mlp(t)
