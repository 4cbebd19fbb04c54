"""Adversarial supervision of novel views.

A dual discriminator scores 6-channel pairs: the bilinearly upsampled
low-resolution render stacked with the high-resolution output (fake), or a
down-then-upsampled copy of a real image stacked with the original (real).
A second, smaller discriminator scores low-resolution depth maps normalized
to [0,1] by the far plane.

Objectives use f(x) = -log(1 + exp(-x)) = -softplus(-x):

    V_disc = f(-D(fake)) + f(D(real)) - lambda * ||grad_x D(real)||^2

``adv_objective`` returns the value the named role ascends (the
non-saturating readout: the generator ascends f(D(fake))); trainers negate
it into a loss.  R1 is computed as a double-backward penalty and applied
lazily every ``interval`` steps with the standard interval multiplier.
"""
from __future__ import annotations

import numpy as np

from . import grad as G
from .grad import Tensor, grad
from .grad.nn import Module, Conv2d, Linear, resize_bilinear

_MBSTD_EPS2 = 1e-16
_MBSTD_ROOT = float(np.sqrt(_MBSTD_EPS2))


def f_logistic(x):
    """f(x) = -log(1 + exp(-x)); monotone increasing, -> 0 as x -> +inf."""
    return G.neg(G.softplus(G.neg(G.astensor(x))))


def adv_objective(fake_logits, real_logits, role: str):
    """Mean objective ascended by ``role`` ('generator' or 'discriminator').

    Discriminator: f(-D(fake)) + f(D(real)); R1 is added separately.
    Generator (non-saturating): f(D(fake)).
    """
    if role == "discriminator":
        return G.add(G.tmean(f_logistic(G.neg(G.astensor(fake_logits)))),
                     G.tmean(f_logistic(real_logits)))
    if role == "generator":
        return G.tmean(f_logistic(fake_logits))
    raise ValueError(f"unknown role {role!r}")


def generator_loss(fake_logits) -> Tensor:
    """softplus(-D(fake)), the loss minimized by the generator."""
    return G.tmean(G.softplus(G.neg(G.astensor(fake_logits))))


def discriminator_loss(fake_logits, real_logits) -> Tensor:
    """softplus(D(fake)) + softplus(-D(real)), minimized by the critic."""
    return G.add(G.tmean(G.softplus(G.astensor(fake_logits))),
                 G.tmean(G.softplus(G.neg(G.astensor(real_logits)))))


def minibatch_std(x: Tensor) -> Tensor:
    """Append one channel holding the cross-batch feature std.

    A batch of identical samples appends exactly zero (the epsilon enters
    as sqrt(var + eps^2) - eps, which vanishes at var == 0).
    """
    ref = x.data[:1]                       # constant shift, cancellation-safe
    y = G.sub(x, ref)
    d = G.sub(y, G.tmean(y, axis=0, keepdims=True))
    var = G.tmean(G.mul(d, d), axis=0)
    std = G.sub(G.sqrt(G.add(var, _MBSTD_EPS2)), _MBSTD_ROOT)
    stat = G.tmean(std)
    B, _, H, W = x.shape
    chan = G.mul(Tensor(np.ones((B, 1, H, W))), stat)
    return G.concat([x, chan], axis=1)


class ImageDiscriminator(Module):
    """Conv stack on 6-channel image pairs with a minibatch-std layer."""

    def __init__(self, rng, image_res: int):
        super().__init__()
        if image_res % 16 != 0:
            raise ValueError("image resolution must be divisible by 16")
        self.image_res = image_res
        widths = [24, 48, 96, 96]
        cin = 6
        self.blocks = []
        for i, w in enumerate(widths):
            self.blocks.append(self.add_child(f"b{i}",
                                              Conv2d(rng, cin, w, stride=2)))
            cin = w
        self.post = self.add_child("post", Conv2d(rng, cin + 1, cin))
        bottom = image_res // 16
        self.fc = self.add_child("fc", Linear(rng, cin * bottom * bottom, 1))

    def __call__(self, pair: Tensor) -> Tensor:
        if pair.shape[1] != 6:
            raise ValueError("dual discriminator expects 6 input channels")
        h = pair
        for blk in self.blocks:
            h = G.silu(blk(h))
        h = minibatch_std(h)
        h = G.silu(self.post(h))
        B = h.shape[0]
        return self.fc(G.reshape(h, (B, -1)))


class DepthDiscriminator(Module):
    """Conv stack on 1-channel depth maps normalized to [0,1]."""

    def __init__(self, rng, depth_res: int):
        super().__init__()
        if depth_res % 8 != 0:
            raise ValueError("depth resolution must be divisible by 8")
        widths = [16, 32, 64]
        cin = 1
        self.blocks = []
        for i, w in enumerate(widths):
            self.blocks.append(self.add_child(f"b{i}",
                                              Conv2d(rng, cin, w, stride=2)))
            cin = w
        self.post = self.add_child("post", Conv2d(rng, cin + 1, cin))
        bottom = depth_res // 8
        self.fc = self.add_child("fc", Linear(rng, cin * bottom * bottom, 1))

    def __call__(self, depth01: Tensor) -> Tensor:
        if np.any(depth01.data < -1e-9) or np.any(depth01.data > 1.0 + 1e-9):
            raise ValueError("depth discriminator inputs must lie in [0,1]")
        h = depth01
        for blk in self.blocks:
            h = G.silu(blk(h))
        h = minibatch_std(h)
        h = G.silu(self.post(h))
        B = h.shape[0]
        return self.fc(G.reshape(h, (B, -1)))


def dual_disc_input(img_low: Tensor, img_high: Tensor) -> Tensor:
    """Stack the 4x-upsampled low-res render with the high-res image."""
    B, _, h, w = img_low.shape
    _, _, H, W = img_high.shape
    if H != 4 * h or W != 4 * w:
        raise ValueError(f"high res {H}x{W} must be 4x the low res {h}x{w}")
    return G.concat([resize_bilinear(img_low, (H, W)), img_high], axis=1)


def real_pair(image: Tensor) -> Tensor:
    """Down-then-upsampled copy stacked with the original real image."""
    B, _, H, W = image.shape
    low = resize_bilinear(image, (H // 4, W // 4))
    return G.concat([resize_bilinear(low, (H, W)), image], axis=1)


def r1_penalty(disc, real_input: Tensor, lam: float) -> Tensor:
    """lambda * mean_batch ||grad_input D||^2 via double backward.

    ``real_input`` must be a leaf with requires_grad=True.
    """
    if lam == 0.0:
        return Tensor(np.zeros(()))
    logits = disc(real_input)
    (gx,) = grad(G.tsum(logits), [real_input], create_graph=True)
    B = real_input.shape[0]
    per_sample = G.tsum(G.reshape(G.mul(gx, gx), (B, -1)), axis=1)
    return G.mul(G.tmean(per_sample), lam)
