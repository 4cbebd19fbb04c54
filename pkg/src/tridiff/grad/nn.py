"""Parameter containers, a few standard layers, and the Adam optimizer."""
from __future__ import annotations

import numpy as np

from . import engine as eg
from .engine import Tensor


class Module:
    """Minimal parameter registry with dotted-name traversal."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, v in self._params.items():
            out[prefix + k] = v
        for k, child in self._children.items():
            out.update(child.named_params(prefix + k + "."))
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def load_values(self, values: dict[str, np.ndarray], prefix: str = ""):
        named = self.named_params(prefix)
        missing = [k for k in named if k not in values]
        if missing:
            raise KeyError(f"missing parameters in checkpoint: {missing[:4]}...")
        for k, t in named.items():
            arr = values[k]
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint "
                                 f"{arr.shape} vs model {t.data.shape}")
            t.copy_(arr)

    def value_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_params(prefix).items()}


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, zero: bool = False):
        super().__init__()
        w = np.zeros((in_dim, out_dim)) if zero else he_init(rng, (in_dim, out_dim), in_dim)
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return eg.affine(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, groups: int = 1, zero: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        shape = (cout, cin // groups, k, k)
        w = np.zeros(shape) if zero else he_init(rng, shape, fan_in)
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return eg.conv2d(x, self.w, self.b, stride=self.stride,
                         padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    """Normalization over the last axis with learned affine."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.g = self.param("g", np.ones(dim))
        self.b = self.param("b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        xn = eg.layer_norm_core(x, self.eps)
        return eg.add(eg.mul(xn, self.g), self.b)


class GroupNorm(Module):
    """Channel-group normalization for (B, C, H, W) maps."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-6):
        super().__init__()
        if channels % groups != 0:
            raise ValueError("channels must divide evenly into groups")
        self.groups = groups
        self.eps = eps
        self.g = self.param("g", np.ones(channels))
        self.b = self.param("b", np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        r = eg.reshape(x, (B, self.groups, (C // self.groups) * H * W))
        mu = eg.tmean(r, axis=-1, keepdims=True)
        d = eg.sub(r, mu)
        var = eg.tmean(eg.mul(d, d), axis=-1, keepdims=True)
        xn = eg.reshape(eg.div(d, eg.sqrt(eg.add(var, self.eps))),
                        (B, C, H, W))
        gamma = eg.reshape(self.g, (1, C, 1, 1))
        beta = eg.reshape(self.b, (1, C, 1, 1))
        return eg.add(eg.mul(xn, gamma), beta)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """(B,C,H,W) -> (B,C,fH,fW) by index replication."""
    B, C, H, W = x.shape
    idx_h = np.repeat(np.arange(H), factor)
    idx_w = np.repeat(np.arange(W), factor)
    flat = eg.transpose(eg.reshape(x, (B * C, H * W)), (1, 0))
    src = (idx_h[:, None] * W + idx_w[None, :]).ravel()
    out = eg.gather_rows(flat, src)
    out = eg.transpose(out, (1, 0))
    return eg.reshape(out, (B, C, H * factor, W * factor))


def _bilinear_taps(in_h, in_w, out_h, out_w):
    """Align-corners=False sampling grid; returns (4,P) indices and weights."""
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    idx4 = np.stack([(Y0 * in_w + X0).ravel(), (Y0 * in_w + X1).ravel(),
                     (Y1 * in_w + X0).ravel(), (Y1 * in_w + X1).ravel()])
    w4 = np.stack([((1 - FY) * (1 - FX)).ravel(), ((1 - FY) * FX).ravel(),
                   (FY * (1 - FX)).ravel(), (FY * FX).ravel()])
    return idx4, w4


def resize_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """(B,C,H,W) -> (B,C,oh,ow) bilinear resampling (half-pixel centers)."""
    B, C, H, W = x.shape
    oh, ow = out_hw
    idx4, w4 = _bilinear_taps(H, W, oh, ow)
    flat = eg.transpose(eg.reshape(x, (B * C, H * W)), (1, 0))
    out = eg.plane_sample(flat, idx4, w4)
    out = eg.transpose(out, (1, 0))
    return eg.reshape(out, (B, C, oh, ow))


def avg_pool(x: Tensor, factor: int) -> Tensor:
    B, C, H, W = x.shape
    h, w = H // factor, W // factor
    r = eg.reshape(x, (B, C, h, factor, w, factor))
    return eg.tmean(r, axis=(3, 5))


class TransformerBlock(Module):
    """Pre-norm multi-head self-attention + MLP; optional kv pooling."""

    def __init__(self, rng, dim: int, heads: int, kv_reduce: int = 1,
                 mlp_expand: int = 2):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.kv_reduce = kv_reduce
        self.ln1 = self.add_child("ln1", LayerNorm(dim))
        self.q = self.add_child("q", Linear(rng, dim, dim))
        self.k = self.add_child("k", Linear(rng, dim, dim))
        self.v = self.add_child("v", Linear(rng, dim, dim))
        self.proj = self.add_child("proj", Linear(rng, dim, dim))
        self.ln2 = self.add_child("ln2", LayerNorm(dim))
        self.m1 = self.add_child("m1", Linear(rng, dim, mlp_expand * dim))
        self.m2 = self.add_child("m2", Linear(rng, mlp_expand * dim, dim))

    def _split(self, t: Tensor, tokens: int) -> Tensor:
        B = t.shape[0]
        dh = self.dim // self.heads
        return eg.transpose(eg.reshape(t, (B, tokens, self.heads, dh)),
                           (0, 2, 1, 3))

    def __call__(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        B, T, C = x.shape
        h = self.ln1(x)
        kv_src = h
        if self.kv_reduce > 1:
            grid = eg.transpose(eg.reshape(h, (B, hw[0], hw[1], C)), (0, 3, 1, 2))
            pooled = avg_pool(grid, self.kv_reduce)
            kv_src = eg.reshape(eg.transpose(pooled, (0, 2, 3, 1)),
                               (B, T // self.kv_reduce ** 2, C))
        tk = kv_src.shape[1]
        q = self._split(self.q(h), T)
        k = self._split(self.k(kv_src), tk)
        v = self._split(self.v(kv_src), tk)
        dh = C // self.heads
        att = eg.softmax(eg.mul(eg.matmul(q, eg.transpose(k, (0, 1, 3, 2))),
                              1.0 / np.sqrt(dh)), axis=-1)
        out = eg.matmul(att, v)
        out = eg.reshape(eg.transpose(out, (0, 2, 1, 3)), (B, T, C))
        x = eg.add(x, self.proj(out))
        return eg.add(x, self.m2(eg.silu(self.m1(self.ln2(x)))))


class Adam:
    """Adam over a named parameter dict; state round-trips exactly."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {prefix + "t": np.array([float(self.t)])}
        for k in self.params:
            out[prefix + "m." + k] = self.m[k].copy()
            out[prefix + "v." + k] = self.v[k].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str):
        self.t = int(arrays[prefix + "t"][0])
        for k in self.params:
            np.copyto(self.m[k], arrays[prefix + "m." + k])
            np.copyto(self.v[k], arrays[prefix + "v." + k])


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class EmaState:
    """Shadow copy of parameters updated as d*shadow + (1-d)*live."""

    def __init__(self, params: dict[str, Tensor], decay: float):
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]):
        d = self.decay
        for k, p in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.data

    def copy_to(self, params: dict[str, Tensor]):
        for k, p in params.items():
            p.copy_(self.shadow[k])

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {prefix + k: v.copy() for k, v in self.shadow.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str):
        for k in self.shadow:
            np.copyto(self.shadow[k], arrays[prefix + k])
