"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything downstream (rendering, networks, losses) is built from the
primitives in this file.  Design points:

* values are float64 numpy arrays, immutable by convention after creation;
* ops append nodes to the active ``Tape``; ``backward`` replays the tape in
  reverse execution order, which is a valid reverse topological order;
* each backward rule is itself written with tape ops, so gradients of
  gradients work (``create_graph=True``), which the R1 penalty needs;
* with ``create_graph=False`` the backward rules run inside ``no_grad`` and
  reduce to plain numpy work.

Non-smooth points use the subgradient-0 convention (``absolute`` at 0).
``cumprod`` backward assumes strictly nonzero inputs, which holds for
transmittance factors 1-alpha with finite density*delta.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "active_tape", "reset_tape", "no_grad", "enable_grad",
    "grad_enabled", "astensor", "backward", "grad",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "absolute", "softplus", "sigmoid", "matmul", "reshape", "transpose",
    "getitem", "embed", "concat", "tsum", "tmean", "cumprod",
    "gather_rows", "scatter_rows", "plane_sample", "plane_scatter",
    "conv2d", "softmax", "silu", "stack", "broadcast_to", "layer_norm_core",
    "affine", "retain_grads",
]


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        if x.dtype == np.float64:
            return x
        return x.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out, parents, bwd):
        self.out = out
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Ordered record of executed differentiable ops.

    Single-writer: one tape must never be mutated from two threads.
    Replaying it backward visits reachable nodes in reverse topological
    order exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        # break the Tensor <-> Node <-> closure cycles so plain reference
        # counting frees the graph without cyclic-gc sweeps
        for node in self.nodes:
            if node.out is not None:
                node.out._node = None
            node.out = None
            node.parents = ()
            node.bwd = None
        self.nodes.clear()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = [Tape()]
_GRAD_MODE: list[bool] = [True]
_RETAIN_INTERMEDIATE: list[bool] = [True]


class retain_grads:
    """Controls whether backward pins .grad on intermediate tensors.

    Leaves always receive gradients; training loops disable intermediate
    retention to keep the backward peak near the forward footprint.
    """

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        _RETAIN_INTERMEDIATE.append(self.enabled)
        return self

    def __exit__(self, *exc):
        _RETAIN_INTERMEDIATE.pop()
        return False


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


def reset_tape():
    """Drop all recorded nodes on the active tape (start of a new step)."""
    active_tape().clear()


def grad_enabled() -> bool:
    return _GRAD_MODE[-1]


class no_grad:
    def __enter__(self):
        _GRAD_MODE.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_MODE.pop()
        return False


class enable_grad:
    def __enter__(self):
        _GRAD_MODE.append(True)
        return self

    def __exit__(self, *exc):
        _GRAD_MODE.pop()
        return False


class Tensor:
    """Dense float64 array with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def copy_(self, array: np.ndarray):
        """In-place value update for parameters (optimizer use only)."""
        np.copyto(self.data, array)

    def backward(self, create_graph: bool = False):
        backward(self, create_graph=create_graph)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple, bwd) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, bwd)
        out._node = node
        active_tape().nodes.append(node)
    return out


def _run_backward(seed_map: dict[int, Tensor], create_graph: bool,
                  populate: bool) -> dict[int, Tensor]:
    """Replay the active tape in reverse, returning cotangents by id."""
    tape = active_tape()
    grads = dict(seed_map)
    holders: dict[int, Tensor] = {}
    keep_mid = _RETAIN_INTERMEDIATE[-1]
    mode = enable_grad() if create_graph else no_grad()
    nodes = tape.nodes
    with mode:
        for i in range(len(nodes) - 1, -1, -1):
            node = nodes[i]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if populate and keep_mid and node.out.requires_grad:
                if node.out.grad is None:
                    node.out.grad = g.data
                else:
                    node.out.grad = node.out.grad + g.data
            pgrads = node.bwd(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                holders[id(p)] = p
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    if populate:
        for key, g in grads.items():
            t = holders.get(key)
            if t is not None and t.requires_grad:
                if t.grad is None:
                    t.grad = g.data.copy()
                else:
                    t.grad = t.grad + g.data
    return grads


def backward(loss: Tensor, create_graph: bool = False):
    """Populate ``grad`` on every reachable requires_grad tensor.

    ``loss`` must be a scalar on the active tape.  Repeated calls without
    resetting grads accumulate.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    seed = Tensor(np.ones_like(loss.data))
    _run_backward({id(loss): seed}, create_graph, populate=True)


def grad(output: Tensor, inputs: list[Tensor], create_graph: bool = False):
    """Cotangents of a scalar output w.r.t. ``inputs``; ``.grad`` untouched."""
    if output.data.ndim != 0 and output.data.size != 1:
        raise ValueError("grad expects a scalar output")
    seed = Tensor(np.ones_like(output.data))
    grads = _run_backward({id(output): seed}, create_graph, populate=False)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# broadcasting helper

def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (trailing-dim rules)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} "
                         "are not broadcastable") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, out), b)), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = astensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        return (neg(g),)

    return _record(out, (a,), bwd)


def power(a, p: float) -> Tensor:
    """Elementwise power with a scalar (python float) exponent."""
    a = astensor(a)
    p = float(p)
    out = Tensor(a.data ** p)

    def bwd(g):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.exp(a.data))

    def bwd(g):
        return (mul(g, out),)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (div(g, a),)

    return _record(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.sqrt(a.data))

    def bwd(g):
        return (div(g, mul(out, 2.0)),)

    return _record(out, (a,), bwd)


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    a = astensor(a)
    out = Tensor(np.abs(a.data))

    def bwd(g):
        return (mul(g, np.sign(a.data)),)

    return _record(out, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated in the overflow-safe form."""
    a = astensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def bwd(g):
        return (mul(g, sigmoid(a)),)

    return _record(out, (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # overflow-free and a single fast ufunc pass
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a) -> Tensor:
    a = astensor(a)
    out = Tensor(_sigmoid_np(a.data))

    def bwd(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def bwd(g):
        gd = g
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            shape = list(a.shape)
            for ax in axes:
                shape[ax % a.ndim] = 1
            gd = reshape(g, tuple(shape))
        return (broadcast_to(gd, a.shape),)

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _cumsum(a, axis: int, reverse: bool = False) -> Tensor:
    """Cumulative sum; its adjoint is the reversed cumulative sum."""
    a = astensor(a)
    if reverse:
        flipped = np.flip(a.data, axis=axis)
        data = np.flip(np.cumsum(flipped, axis=axis), axis=axis)
    else:
        data = np.cumsum(a.data, axis=axis)
    out = Tensor(data)

    def bwd(g):
        return (_cumsum(g, axis, reverse=not reverse),)

    return _record(out, (a,), bwd)


def cumprod(a, axis: int) -> Tensor:
    """Cumulative product along ``axis``; backward needs nonzero inputs."""
    a = astensor(a)
    out = Tensor(np.cumprod(a.data, axis=axis))

    def bwd(g):
        return (div(_cumsum(mul(g, out), axis, reverse=True), a),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (reshape(g, a.shape),)

    return _record(out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    out = Tensor(np.transpose(a.data, axes))

    def bwd(g):
        if axes is None:
            return (transpose(g, None),)
        inv = np.argsort(axes)
        return (transpose(g, tuple(int(i) for i in inv)),)

    return _record(out, (a,), bwd)


def getitem(a, key) -> Tensor:
    """Basic slicing/integer indexing (no fancy or boolean indexing)."""
    a = astensor(a)
    out = Tensor(a.data[key])

    def bwd(g):
        return (embed(g, key, a.shape),)

    return _record(out, (a,), bwd)


def embed(a, key, shape) -> Tensor:
    """Adjoint of ``getitem``: place ``a`` into zeros of ``shape`` at ``key``."""
    a = astensor(a)
    buf = np.zeros(shape, dtype=np.float64)
    buf[key] = a.data
    out = Tensor(buf)

    def bwd(g):
        return (getitem(g, key),)

    return _record(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * out.ndim
            key[axis] = slice(int(lo), int(hi))
            outs.append(getitem(g, tuple(key)) if t.requires_grad else None)
        return tuple(outs)

    return _record(out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = astensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else axis + t.ndim + 1, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul requires at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: inner dimensions disagree "
                         f"({a.shape} @ {b.shape})")
    out = Tensor(a.data @ b.data)

    def _swap(t):
        axes = list(range(t.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(t, tuple(axes))

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = matmul(g, _swap(b)) if b.ndim > 1 else mul(
                reshape(g, g.shape + (1,)), b)
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = matmul(_swap(a), g) if a.ndim > 1 else mul(
                reshape(a, a.shape + (1,)), g)
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# gather / scatter

def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Rows ``a[idx]`` of a 2-D tensor; adjoint is a scatter-add."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bwd(g):
        return (scatter_rows(g, idx, a.shape[0]),)

    return _record(out, (a,), bwd)


def scatter_rows(a, idx: np.ndarray, nrows: int) -> Tensor:
    """Adjoint of ``gather_rows``: add rows of ``a`` into ``nrows`` slots."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    buf = np.zeros((nrows,) + a.shape[1:], dtype=np.float64)
    np.add.at(buf, idx, a.data)
    out = Tensor(buf)

    def bwd(g):
        return (gather_rows(g, idx),)

    return _record(out, (a,), bwd)


def plane_sample(a, idx4: np.ndarray, w4: np.ndarray) -> Tensor:
    """Weighted 4-tap gather: sum_c w4[c, :, None] * a[idx4[c]].

    ``a`` is (M, C) rows, ``idx4`` is (4, P) int, ``w4`` is (4, P).
    This is the bilinear-interpolation workhorse; keeping it a primitive
    avoids materializing the four corner gathers on the tape.
    """
    a = astensor(a)
    idx4 = np.asarray(idx4, dtype=np.intp)
    w4 = np.asarray(w4, dtype=np.float64)
    buf = np.empty((idx4.shape[1], a.shape[1]), dtype=np.float64)
    np.take(a.data, idx4[0], axis=0, out=buf)
    acc = buf * w4[0][:, None]
    for c in range(1, 4):
        np.take(a.data, idx4[c], axis=0, out=buf)
        buf *= w4[c][:, None]
        acc += buf
    out = Tensor(acc)

    def bwd(g):
        return (plane_scatter(g, idx4, w4, a.shape[0]),)

    return _record(out, (a,), bwd)


def plane_scatter(a, idx4: np.ndarray, w4: np.ndarray, nrows: int) -> Tensor:
    """Adjoint of ``plane_sample`` (per-channel weighted bincount)."""
    a = astensor(a)
    idx4 = np.asarray(idx4, dtype=np.intp)
    w4 = np.asarray(w4, dtype=np.float64)
    C = a.shape[1]
    flat_idx = idx4.reshape(-1)
    buf = np.empty((nrows, C), dtype=np.float64)
    weighted = np.empty((4 * idx4.shape[1],), dtype=np.float64)
    for c in range(C):
        col = a.data[:, c]
        for k in range(4):
            np.multiply(w4[k], col, out=weighted[k * col.size:(k + 1) * col.size])
        buf[:, c] = np.bincount(flat_idx, weights=weighted, minlength=nrows)
    out = Tensor(buf)

    def bwd(g):
        return (plane_sample(g, idx4, w4),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# 2-D convolution (stride, zero padding, groups)

# Channels-last GEMM formulation.  Padded inputs live as one contiguous
# (B*Hp*Wp + slack, C) row block; a kernel tap (i, j) is then a single
# contiguous row slice across the whole batch, and each tap is one BLAS
# dgemm accumulated in place (beta=1) -- no im2col buffer, no per-batch
# loop.  Output rows use the same per-batch block size; junk rows produced
# by horizontal wrap and cross-batch spill land exclusively in the wrap
# columns / tail rows that are discarded (forward) or zero in the embedded
# gradient (backward).

from scipy.linalg.blas import dgemm as _dgemm


def _gemm_acc(acc2d, a2d, b2d):
    """acc2d += a2d @ b2d in place; acc2d and b2d C-contiguous,
    a2d C-contiguous."""
    _dgemm(1.0, b2d.T, a2d.T, beta=1.0, c=acc2d.T, overwrite_c=True)


def _to_cl_padded(x, padding, slack):
    """(B, C, H, W) -> contiguous (B*(H+2p)*(W+2p) + slack, C) rows."""
    B, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    buf = np.zeros((B * Hp * Wp + slack, C), dtype=np.float64)
    core = buf[:B * Hp * Wp].reshape(B, Hp, Wp, C)
    core[:, padding:padding + H, padding:padding + W] = \
        x.transpose(0, 2, 3, 1)
    return buf, Hp, Wp


def _embed_gout_cl(gout, Hp, Wp, kh, kw, stride, slack):
    """(B, OC, OH, OW) -> zeros (B*Hp*Wp + slack, OC); gradient rows sit at
    their stride-spaced positions on the (Hp - kh + 1, Wp) output grid of
    each batch block, wrap columns and tail rows stay zero."""
    B, OC, OH, OW = gout.shape
    OHf = Hp - kh + 1
    buf = np.zeros((B * Hp * Wp + slack, OC), dtype=np.float64)
    core = buf[:B * Hp * Wp].reshape(B, Hp, Wp, OC)
    grid = core[:, :OHf]
    grid[:, ::stride, ::stride][:, :OH, :OW] = gout.transpose(0, 2, 3, 1)
    return buf


def _conv_fwd_np(x, w, stride, padding, groups):
    B, Cin, H, W = x.shape
    OC, IG, kh, kw = w.shape
    slack = (kh - 1) * (W + 2 * padding) + kw
    flat, Hp, Wp = _to_cl_padded(x, padding, slack)
    OHf, OWf = Hp - kh + 1, Wp - kw + 1
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    R = B * Hp * Wp
    ocg = OC // groups
    core = flat[:R].reshape(B, Hp, Wp, Cin)
    parts = []
    for g in range(groups):
        wg = w[g * ocg:(g + 1) * ocg]
        if stride == 1:
            src = flat if groups == 1 else \
                np.ascontiguousarray(flat[:, g * IG:(g + 1) * IG])
            acc = np.zeros((R, ocg), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    off = i * Wp + j
                    wij = np.ascontiguousarray(wg[:, :, i, j].T)
                    _gemm_acc(acc, src[off:off + R], wij)
            view = acc.reshape(B, Hp, Wp, ocg)[:, :OHf, :OWf]
            parts.append(view)
        else:
            acc = np.zeros((B * OH * OW, ocg), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    tap = core[:, i:i + stride * OH:stride,
                               j:j + stride * OW:stride,
                               g * IG:(g + 1) * IG]
                    a2d = np.ascontiguousarray(tap).reshape(-1, IG)
                    wij = np.ascontiguousarray(wg[:, :, i, j].T)
                    _gemm_acc(acc, a2d, wij)
            parts.append(acc.reshape(B, OH, OW, ocg))
    out = parts[0] if groups == 1 else np.concatenate(parts, axis=-1)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_dx_np(gout, w, x_shape, stride, padding, groups):
    B, Cin, H, W = x_shape
    OC, IG, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    _, _, OH, OW = gout.shape
    slack = (kh - 1) * Wp + kw
    R = B * Hp * Wp
    ocg = OC // groups
    if stride == 1:
        g_ext = _embed_gout_cl(gout, Hp, Wp, kh, kw, stride, slack)
    else:
        gcl = np.ascontiguousarray(gout.transpose(0, 2, 3, 1))
    parts = []
    for g in range(groups):
        wg = w[g * ocg:(g + 1) * ocg]
        if stride == 1:
            gg = g_ext if groups == 1 else \
                np.ascontiguousarray(g_ext[:, g * ocg:(g + 1) * ocg])
            dxg = np.zeros((R + slack, IG), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    off = i * Wp + j
                    wij = np.ascontiguousarray(wg[:, :, i, j])
                    _gemm_acc(dxg[off:off + R], gg[:R], wij)
            parts.append(dxg[:R].reshape(B, Hp, Wp, IG))
        else:
            g2d = gcl.reshape(-1, OC)[:, g * ocg:(g + 1) * ocg]
            g2d = np.ascontiguousarray(g2d) if groups > 1 else \
                gcl.reshape(-1, ocg)
            dxg = np.zeros((B, Hp, Wp, IG), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    part = (g2d @ wg[:, :, i, j]).reshape(B, OH, OW, IG)
                    dxg[:, i:i + stride * OH:stride,
                        j:j + stride * OW:stride] += part
            parts.append(dxg)
    dx = parts[0] if groups == 1 else np.concatenate(parts, axis=-1)
    valid = dx[:, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(valid.transpose(0, 3, 1, 2))


def _conv_dw_np(x, gout, w_shape, stride, padding, groups):
    OC, IG, kh, kw = w_shape
    B, Cin, H, W = x.shape
    slack = (kh - 1) * (W + 2 * padding) + kw
    flat, Hp, Wp = _to_cl_padded(x, padding, slack)
    _, _, OH, OW = gout.shape
    R = B * Hp * Wp
    gw = np.empty(w_shape, dtype=np.float64)
    ocg = OC // groups
    core = flat[:R].reshape(B, Hp, Wp, Cin)
    if stride == 1:
        g_ext = _embed_gout_cl(gout, Hp, Wp, kh, kw, stride, slack)
    else:
        gcl = np.ascontiguousarray(gout.transpose(0, 2, 3, 1))
    for g in range(groups):
        if stride == 1:
            src = flat if groups == 1 else \
                np.ascontiguousarray(flat[:, g * IG:(g + 1) * IG])
            gg = g_ext if groups == 1 else \
                np.ascontiguousarray(g_ext[:, g * ocg:(g + 1) * ocg])
            for i in range(kh):
                for j in range(kw):
                    off = i * Wp + j
                    gw[g * ocg:(g + 1) * ocg, :, i, j] = \
                        np.dot(gg[:R].T, src[off:off + R])
        else:
            g2d = gcl.reshape(-1, OC)[:, g * ocg:(g + 1) * ocg]
            g2d = np.ascontiguousarray(g2d) if groups > 1 else \
                gcl.reshape(-1, ocg)
            for i in range(kh):
                for j in range(kw):
                    tap = core[:, i:i + stride * OH:stride,
                               j:j + stride * OW:stride,
                               g * IG:(g + 1) * IG]
                    a2d = np.ascontiguousarray(tap).reshape(-1, IG)
                    gw[g * ocg:(g + 1) * ocg, :, i, j] = np.dot(g2d.T, a2d)
    return gw


def _conv_fwd(x: Tensor, w: Tensor, stride, padding, groups) -> Tensor:
    out = Tensor(_conv_fwd_np(x.data, w.data, stride, padding, groups))

    def bwd(g):
        gx = _conv_dx(g, w, x.shape, stride, padding, groups) \
            if x.requires_grad else None
        gw = _conv_dw(x, g, w.shape, stride, padding, groups) \
            if w.requires_grad else None
        return gx, gw

    return _record(out, (x, w), bwd)


def _conv_dx(gout: Tensor, w: Tensor, x_shape, stride, padding, groups) -> Tensor:
    out = Tensor(_conv_dx_np(gout.data, w.data, x_shape, stride, padding, groups))

    def bwd(g):
        # trilinear form <gout, conv(x, w)>: derivative w.r.t. gout is a conv
        gg = _conv_fwd(g, w, stride, padding, groups) \
            if gout.requires_grad else None
        gw = _conv_dw(g, gout, w.shape, stride, padding, groups) \
            if w.requires_grad else None
        return gg, gw

    return _record(out, (gout, w), bwd)


def _conv_dw(x: Tensor, gout: Tensor, w_shape, stride, padding, groups) -> Tensor:
    out = Tensor(_conv_dw_np(x.data, gout.data, w_shape, stride, padding, groups))

    def bwd(g):
        gx = _conv_dx(gout, g, x.shape, stride, padding, groups) \
            if x.requires_grad else None
        gg = _conv_fwd(x, g, stride, padding, groups) \
            if gout.requires_grad else None
        return gx, gg

    return _record(out, (x, gout), bwd)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D convolution; ``x`` (B,Cin,H,W), ``w`` (OC,Cin/groups,kh,kw)."""
    x, w = astensor(x), astensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if x.shape[1] != w.shape[1] * groups:
        raise ValueError(f"conv2d: input channels {x.shape[1]} do not match "
                         f"weight {w.shape[1]} x groups {groups}")
    out = _conv_fwd(x, w, stride, padding, groups)
    if b is not None:
        b = astensor(b)
        out = add(out, reshape(b, (1, b.shape[0], 1, 1)))
    return out


def broadcast_to(a, shape) -> Tensor:
    """Broadcast view (no copy); adjoint reduces back to the input shape."""
    a = astensor(a)
    out = Tensor(np.broadcast_to(a.data, shape))

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# fused primitives: single tape node each, backward rules built from ops so
# gradients of gradients still work

def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)   # constant shift
    e = np.exp(a.data - shift)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def bwd(g):
        gs = mul(g, out)
        return (sub(gs, mul(out, tsum(gs, axis=axis, keepdims=True))),)

    return _record(out, (a,), bwd)


def silu(a) -> Tensor:
    """x * sigmoid(x), fused."""
    a = astensor(a)
    out = Tensor(a.data * _sigmoid_np(a.data))

    def bwd(g):
        sig = sigmoid(a)
        slope = add(sig, mul(a, mul(sig, sub(1.0, sig))))
        return (mul(g, slope),)

    return _record(out, (a,), bwd)


def layer_norm_core(a, eps: float = 1e-6) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis, fused."""
    a = astensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    out = Tensor(xc * rstd)

    def bwd(g):
        # dx = rstd * (g - mean(g) - xn * mean(g * xn)), rebuilt from ops so
        # create_graph chains through a
        mu_t = tmean(a, axis=-1, keepdims=True)
        xc_t = sub(a, mu_t)
        var_t = tmean(mul(xc_t, xc_t), axis=-1, keepdims=True)
        rstd_t = div(1.0, sqrt(add(var_t, eps)))
        xn_t = mul(xc_t, rstd_t)
        term = sub(sub(g, tmean(g, axis=-1, keepdims=True)),
                   mul(xn_t, tmean(mul(g, xn_t), axis=-1, keepdims=True)))
        return (mul(term, rstd_t),)

    return _record(out, (a,), bwd)


def affine(x, w, b=None) -> Tensor:
    """Fused x @ w + b (one tape node)."""
    x, w = astensor(x), astensor(w)
    data = x.data @ w.data
    if b is not None:
        b = astensor(b)
        data = data + b.data
    out = Tensor(data)

    def _swap(t):
        axes = list(range(t.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(t, tuple(axes))

    def bwd(g):
        gx = _unbroadcast(matmul(g, _swap(w)), x.shape) \
            if x.requires_grad else None
        gw = _unbroadcast(matmul(_swap(x), g), w.shape) \
            if w.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b is not None and b.requires_grad \
            else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, bwd)
