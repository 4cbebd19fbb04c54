"""3D-aware autoencoder.

Encoder: multi-scale conv pyramid (FPN-flavored lateral fusion) over the
image concatenated channel-wise with its up-to-scale depth, predicting the
mean and log-variance of a Gaussian posterior over a spatial latent grid.

Decoder: transformer blocks at latent resolution, grouped-convolution
upsampling (3 groups, one per triplane) and two attention blocks with
spatially reduced keys/values at triplane resolution.  The grouped segment
never mixes channels across the three plane groups before those final
attention blocks.

Superresolution: conv upsampler lifting the rendered feature map by 4x to
the output image, squashed to [0,1] by a sigmoid.

The perceptual term is the L2 distance between feature maps of a frozen,
seed-initialized 3-layer conv net; it plays the multi-scale structure role
of a pretrained perceptual loss with no external weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from . import depthsup as dsup
from . import camera as cam
from . import triplane as tp
from .grad import Tensor
from .grad.nn import (Module, Linear, Conv2d, LayerNorm, TransformerBlock,
                      upsample_nearest, resize_bilinear, avg_pool)

PROXY_SEED = 77003917


@dataclass
class ModelConfig:
    image_res: int = 64
    render_res: int = 16
    n_samples: int = 32
    latent_channels: int = 4
    latent_res: int = 8
    triplane_channels: int = 12
    triplane_res: int = 32
    feat_channels: int = 16
    mlp_hidden: int = 32
    heads: int = 4
    encode_depth: bool = True

    def __post_init__(self):
        if self.latent_res * 8 != self.image_res:
            raise ValueError("encoder downsamples by 8: latent_res must be "
                             "image_res / 8")
        if self.render_res * 4 != self.image_res:
            raise ValueError("superresolution is 4x: render_res must be "
                             "image_res / 4")

    @property
    def latent_shape(self):
        return (self.latent_channels, self.latent_res, self.latent_res)


@dataclass
class LossWeights:
    px: float = 10.0
    vgg: float = 10.0
    depth2d: float = 1.0
    depth3d: float = 1.0
    kl: float = 1e-4


@dataclass
class LatentPosterior:
    mu: Tensor
    log_var: Tensor

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(self.mu.shape)
        return G.add(self.mu, G.mul(G.exp(G.mul(self.log_var, 0.5)), eps))


def kl_loss(p: LatentPosterior) -> Tensor:
    """0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2) over latent entries."""
    var = G.exp(p.log_var)
    term = G.sub(G.add(G.mul(p.mu, p.mu), var), G.add(1.0, p.log_var))
    return G.mul(G.tsum(term), 0.5)


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.latent_channels
        self.c1 = self.add_child("c1", Conv2d(rng, 4, 24, stride=2))
        self.c2 = self.add_child("c2", Conv2d(rng, 24, 48, stride=2))
        self.c3 = self.add_child("c3", Conv2d(rng, 48, 64, stride=2))
        self.l1 = self.add_child("l1", Conv2d(rng, 24, 32, k=1))
        self.l2 = self.add_child("l2", Conv2d(rng, 48, 32, k=1))
        self.l3 = self.add_child("l3", Conv2d(rng, 64, 32, k=1))
        self.fuse = self.add_child("fuse", Conv2d(rng, 96, 64))
        self.head = self.add_child("head", Conv2d(rng, 64, 2 * c, zero=True))

    def __call__(self, image: Tensor, depth: Tensor) -> LatentPosterior:
        if image.shape[-2:] != (self.cfg.image_res, self.cfg.image_res):
            raise ValueError(f"expected {self.cfg.image_res}^2 images, "
                             f"got {image.shape}")
        if depth.shape[0] != image.shape[0] or depth.shape[-2:] != image.shape[-2:]:
            raise ValueError("depth map shape does not match image")
        x = G.concat([image, depth], axis=1)
        f1 = G.silu(self.c1(x))       # 32^2
        f2 = G.silu(self.c2(f1))      # 16^2
        f3 = G.silu(self.c3(f2))      # 8^2
        merged = G.concat([avg_pool(self.l1(f1), 4),
                           avg_pool(self.l2(f2), 2),
                           self.l3(f3)], axis=1)
        h = G.silu(self.fuse(merged))
        out = self.head(h)
        c = self.cfg.latent_channels
        return LatentPosterior(out[:, :c], out[:, c:])



class Decoder(Module):
    """Latent grid -> triplanes (3 groups of channels kept separate through
    the grouped upsampling path)."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d0, dg = 48, 72
        self.dg = dg
        r0 = cfg.latent_res
        self.embed = self.add_child("embed",
                                    Conv2d(rng, cfg.latent_channels, d0, k=1))
        self.pos0 = self.param("pos0", 0.02 * rng.standard_normal((r0 * r0, d0)))
        self.blocks0 = [
            self.add_child(f"block0_{i}", TransformerBlock(rng, d0, cfg.heads))
            for i in range(2)
        ]
        self.to_groups = self.add_child("to_groups", Conv2d(rng, d0, dg, k=1))
        ups = []
        res = r0
        while res < cfg.triplane_res:
            ups.append(Conv2d(rng, dg, dg, groups=3))
            res *= 2
        self.ups = [self.add_child(f"up{i}", m) for i, m in enumerate(ups)]
        rq = cfg.triplane_res
        self.pos1 = self.param("pos1", 0.02 * rng.standard_normal((rq * rq, dg)))
        self.blocks1 = [
            self.add_child(f"block1_{i}",
                           TransformerBlock(rng, dg, cfg.heads, kv_reduce=8,
                                            mlp_expand=1))
            for i in range(2)
        ]
        self.out = self.add_child(
            "out", Conv2d(rng, dg, 3 * cfg.triplane_channels, groups=3))

    def upsample_grouped(self, x: Tensor) -> Tensor:
        """Grouped-conv upsampling stage; no cross-group channel mixing."""
        for conv in self.ups:
            x = G.silu(conv(upsample_nearest(x, 2)))
        return x

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim == 3:
            z = G.reshape(z, (1,) + z.shape)
        B = z.shape[0]
        r0 = self.cfg.latent_res
        h = self.embed(z)
        tokens = G.add(G.reshape(G.transpose(h, (0, 2, 3, 1)),
                                 (B, r0 * r0, h.shape[1])), self.pos0)
        for blk in self.blocks0:
            tokens = blk(tokens, (r0, r0))
        h = G.transpose(G.reshape(tokens, (B, r0, r0, tokens.shape[-1])),
                        (0, 3, 1, 2))
        h = self.to_groups(h)
        h = self.upsample_grouped(h)
        rq = self.cfg.triplane_res
        tokens = G.add(G.reshape(G.transpose(h, (0, 2, 3, 1)),
                                 (B, rq * rq, self.dg)), self.pos1)
        for blk in self.blocks1:
            tokens = blk(tokens, (rq, rq))
        h = G.transpose(G.reshape(tokens, (B, rq, rq, self.dg)), (0, 3, 1, 2))
        planes = self.out(h)
        C = self.cfg.triplane_channels
        return G.reshape(planes, (B, 3, C, rq, rq))


class SuperResolver(Module):
    """Rendered feature map -> 4x-larger RGB image in [0,1]."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.c1 = self.add_child("c1", Conv2d(rng, cfg.feat_channels, 48))
        self.c2 = self.add_child("c2", Conv2d(rng, 48, 24))
        self.c3 = self.add_child("c3", Conv2d(rng, 24, 3))

    def __call__(self, feat: Tensor) -> Tensor:
        h = G.silu(self.c1(feat))
        h = resize_bilinear(h, (2 * h.shape[2], 2 * h.shape[3]))
        h = G.silu(self.c2(h))
        h = resize_bilinear(h, (2 * h.shape[2], 2 * h.shape[3]))
        return G.sigmoid(self.c3(h))


class PerceptualProxy(Module):
    """Frozen random 3-layer conv feature extractor (fixed seed)."""

    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(PROXY_SEED)
        self.c1 = self.add_child("c1", Conv2d(rng, 3, 8, stride=2))
        self.c2 = self.add_child("c2", Conv2d(rng, 8, 16, stride=2))
        self.c3 = self.add_child("c3", Conv2d(rng, 16, 16, stride=2))
        for p in self.params():
            p.requires_grad = False

    def features(self, x: Tensor) -> list[Tensor]:
        f1 = G.silu(self.c1(x))
        f2 = G.silu(self.c2(f1))
        f3 = G.silu(self.c3(f2))
        return [f1, f2, f3]

    def reference_features(self, image: np.ndarray) -> list[np.ndarray]:
        """Features of a fixed target image (no tape); cacheable."""
        with G.no_grad():
            return [f.data for f in self.features(Tensor(image))]

    def __call__(self, a: Tensor, b: Tensor, a_feats=None) -> Tensor:
        fa = a_feats if a_feats is not None else self.features(a)
        fb = self.features(b)
        total = None
        for x, y in zip(fa, fb):
            d = G.sub(y, G.astensor(x))
            term = G.tmean(G.mul(d, d))
            total = term if total is None else G.add(total, term)
        return G.mul(total, 1.0 / len(fb))


class Autoencoder(Module):
    """Bundled encoder / decoder / field MLP / superresolver."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = self.add_child("encoder", Encoder(rng, cfg))
        self.decoder = self.add_child("decoder", Decoder(rng, cfg))
        self.mlp = self.add_child(
            "mlp", tp.FieldMLP(rng, cfg.triplane_channels, cfg.mlp_hidden,
                               cfg.feat_channels))
        self.sr = self.add_child("sr", SuperResolver(rng, cfg))

    def encode(self, image: Tensor, mono_depth: np.ndarray) -> LatentPosterior:
        """Depth input is divided by the far plane; zeroed when the config
        disables depth conditioning (ablation path)."""
        if self.cfg.encode_depth:
            d = np.asarray(mono_depth, dtype=np.float64) / cam.FAR
        else:
            d = np.zeros(image.shape[:1] + (1,) + image.shape[2:])
        if d.ndim == 3:
            d = d[:, None]
        return self.encoder(image, G.astensor(d))

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)


def reconstruction_loss(image: Tensor, recon: Tensor, mono_depth: np.ndarray,
                        render, weights: LossWeights,
                        proxy: PerceptualProxy,
                        sample_depths: np.ndarray,
                        k_nearest: int = dsup.NEAREST_K,
                        image_feats=None):
    """Weighted sum of pixel, perceptual-proxy, and the two depth losses.

    Returns (scalar loss, report dict, fitted ScaleShift).  The scale/shift
    alignment is computed on values only; no gradient flows through it.
    ``image_feats`` optionally carries precomputed proxy features of the
    target image (it is fixed, so callers cache them).
    """
    diff = G.absolute(G.sub(recon, image))
    l_px = G.tmean(diff)
    l_vgg = proxy(image, recon, a_feats=image_feats)

    mono = np.asarray(mono_depth, dtype=np.float64)
    if mono.ndim == 2:
        mono = mono[None]
    rres = render.depth_low.shape[-1]
    mono_low = _downsample_depth(mono, rres)
    B = mono_low.shape[0]
    ss_list = [dsup.align_scale_shift(render.depth_low.data[b, 0], mono_low[b])
               for b in range(B)]

    l_2d = None
    targets = np.empty((B, rres * rres))
    for b, ss in enumerate(ss_list):
        rendered_b = G.reshape(render.depth_low[b], (rres * rres,))
        if _weak_fit(render.depth_low.data[b, 0], mono_low[b], ss):
            # flat renders carry no scale: supervise directly against the
            # min-max-anchored mono map until depth variation develops
            targets[b] = anchor_mono(mono_low[b]).ravel()
            resid = G.sub(rendered_b, targets[b])
            term = G.tmean(G.mul(resid, resid))
        else:
            targets[b] = mono_to_camera(mono_low[b], ss).ravel()
            term = dsup.loss_depth_2d(rendered_b, mono_low[b].ravel(), ss)
        l_2d = term if l_2d is None else G.add(l_2d, term)
    l_2d = G.mul(l_2d, 1.0 / B)

    n = render.weights.shape[1]
    w_rays = G.transpose(G.reshape(render.weights, (B, n, rres * rres)),
                         (0, 2, 1))
    l_3d = dsup.loss_depth_3d(w_rays, sample_depths, targets, k=k_nearest)

    total = G.add(G.add(G.mul(l_px, weights.px), G.mul(l_vgg, weights.vgg)),
                  G.add(G.mul(l_2d, weights.depth2d), G.mul(l_3d, weights.depth3d)))
    report = {"l_px": float(l_px.data), "l_vgg": float(l_vgg.data),
              "l_2d": float(l_2d.data), "l_3d": float(l_3d.data)}
    return total, report, ss_list, targets


WEAK_FIT_STD = 0.05    # world units of rendered-depth spread
WEAK_FIT_CORR = 0.3    # |pearson| between rendered and mono depth


def _weak_fit(rendered: np.ndarray, mono: np.ndarray,
              ss: dsup.ScaleShift) -> bool:
    """True when the affine fit carries no usable scale information:
    degenerate, (near-)flat renders, or renders uncorrelated with the mono
    structure (an untrained field produces noise depth, whose fitted slope
    is ~0 and silently switches depth supervision off)."""
    if ss.degenerate or float(np.std(rendered)) < WEAK_FIT_STD:
        return True
    r = rendered.ravel()
    m = mono.ravel()
    denom = r.std() * m.std()
    if denom < 1e-12:
        return True
    corr = float(((r - r.mean()) * (m - m.mean())).mean() / denom)
    return abs(corr) < WEAK_FIT_CORR


def anchor_mono(mono_low: np.ndarray) -> np.ndarray:
    """Min-max map of up-to-scale mono depth into the camera depth range.

    Used to bootstrap depth supervision while the rendered depth is still
    flat (an untrained field would otherwise sit in an equilibrium where
    the fitted scale/shift carries no gradient)."""
    mono = np.asarray(mono_low, dtype=np.float64)
    lo, hi = mono.min(), mono.max()
    if hi - lo < 1e-9:
        return np.full_like(mono, 0.5 * (cam.NEAR + cam.FAR))
    return cam.NEAR + (mono - lo) / (hi - lo) * (cam.FAR - cam.NEAR)


def mono_to_camera(mono_low: np.ndarray, ss: dsup.ScaleShift) -> np.ndarray:
    """Map mono-depth values into camera units by inverting the fitted
    rendered->mono affine pair; clamped into the ray depth range."""
    mono = np.asarray(mono_low, dtype=np.float64)
    if ss.degenerate or abs(ss.s) < 1e-9:
        return np.clip(anchor_mono(mono), cam.NEAR, cam.FAR)
    return np.clip((mono - ss.t) / ss.s, cam.NEAR, cam.FAR)


def _downsample_depth(depth: np.ndarray, res: int) -> np.ndarray:
    """Area-average a (B, H, W) depth map down to (B, res, res)."""
    B, H, W = depth.shape
    if H == res:
        return depth
    f = H // res
    if f * res != H:
        raise ValueError(f"depth resolution {H} not divisible by {res}")
    return depth.reshape(B, res, f, res, f).mean(axis=(2, 4))
