"""Minimal reverse-mode automatic differentiation over 4-D arrays.

Every tensor is laid out as (batch, channel, height, width). Only the
primitives needed by the U-Nets and the semi-Lagrangian warp exist here;
there is no general broadcasting.
"""
from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


def _shape_error(op, *shapes):
    desc = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {desc}")


class DiffTensor:
    """A node in the computation graph.

    ``requires_grad`` is true for trainable leaves and anything computed
    from them; constants never receive gradients.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        values = np.asarray(values)
        if values.ndim != 4:
            raise ShapeError(f"DiffTensor needs 4 dims (B, C, H, W), got shape {values.shape}")
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(DEFAULT_DTYPE)
        self.values = values
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return DiffTensor(self.values)

    def numpy(self):
        return self.values

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, DiffTensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, DiffTensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, DiffTensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / other)

    def __getitem__(self, index):
        return slice_(self, index)


class Parameter(DiffTensor):
    """Trainable leaf with a stable name used for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, values, name):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None):
    if isinstance(x, DiffTensor):
        return x
    arr = np.asarray(x, dtype=dtype or DEFAULT_DTYPE)
    return DiffTensor(arr)


def _node(values, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return DiffTensor(values, requires_grad=req, _parents=parents if req else (),
                      _backward=backward if req else None, op=op)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise _shape_error(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    _check_same("add", a, b)

    def backward(g):
        return g, g

    return _node(a.values + b.values, (a, b), backward, "add")


def sub(a, b):
    _check_same("sub", a, b)

    def backward(g):
        return g, -g

    return _node(a.values - b.values, (a, b), backward, "sub")


def mul(a, b):
    _check_same("mul", a, b)

    def backward(g):
        return g * b.values, g * a.values

    return _node(a.values * b.values, (a, b), backward, "mul")


def add_scalar(a, c):
    def backward(g):
        return (g,)

    return _node(a.values + a.values.dtype.type(c), (a,), backward, "add_scalar")


def mul_scalar(a, c):
    c = a.values.dtype.type(c)

    def backward(g):
        return (g * c,)

    return _node(a.values * c, (a,), backward, "mul_scalar")


def square(a):
    def backward(g):
        return (2 * a.values * g,)

    return _node(a.values * a.values, (a,), backward, "square")


def relu(a):
    mask = a.values > 0

    def backward(g):
        return (g * mask,)

    return _node(a.values * mask, (a,), backward, "relu")


def leaky_relu(a, slope=0.1):
    slope = a.values.dtype.type(slope)
    factor = np.where(a.values > 0, a.values.dtype.type(1), slope)

    def backward(g):
        return (g * factor,)

    return _node(a.values * factor, (a,), backward, "leaky_relu")


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.values))

    def backward(g):
        return (g * out * (1 - out),)

    return _node(out, (a,), backward, "sigmoid")


def tanh(a):
    out = np.tanh(a.values)

    def backward(g):
        return (g * (1 - out * out),)

    return _node(out, (a,), backward, "tanh")


def abs_(a):
    sign = np.sign(a.values)  # subgradient 0 at exactly zero

    def backward(g):
        return (g * sign,)

    return _node(np.abs(a.values), (a,), backward, "abs")


def clamp_min(a, lo=0.0):
    mask = a.values >= lo

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, a.values, a.values.dtype.type(lo)), (a,), backward, "clamp_min")


# ---------------------------------------------------------------- reductions

def sum_(a):
    def backward(g):
        return (np.broadcast_to(g, a.shape),)

    return _node(a.values.sum(dtype=a.dtype).reshape(1, 1, 1, 1), (a,), backward, "sum")


def mean(a):
    n = a.values.size

    def backward(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _node((a.values.sum(dtype=a.dtype) / n).reshape(1, 1, 1, 1), (a,), backward, "mean")


# ---------------------------------------------------------------- structure

def concat(tensors):
    """Concatenate along the channel axis."""
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise _shape_error("concat", ref, t.shape)
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _node(np.concatenate([t.values for t in tensors], axis=1), tuple(tensors), backward, "concat")


def slice_(a, index):
    """Basic (non-fancy) slicing; the result keeps four dims."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, slice):
            raise TypeError("slice_ only supports slice objects; use a:b to keep dims")
    out = a.values[index]

    def backward(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return (full,)

    return _node(np.ascontiguousarray(out), (a,), backward, "slice")


def pad_replicate(a, p=1):
    """Pad height and width by ``p`` cells copying the edge values."""
    out = np.pad(a.values, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def backward(g):
        g = g.copy()
        g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
        g[:, :, -p - 1, :] += g[:, :, -p:, :].sum(axis=2)
        g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
        g[:, :, :, -p - 1] += g[:, :, :, -p:].sum(axis=3)
        return (g[:, :, p:-p, p:-p],)

    return _node(out, (a,), backward, "pad_replicate")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding; ``weight`` is (out, in, kh, kw)."""
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise _shape_error("conv2d", x.shape, weight.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd-sized, got {(kh, kw)}")
    if bias is not None and bias.shape != (1, O, 1, 1):
        raise _shape_error("conv2d(bias)", bias.shape, (1, O, 1, 1))
    s = stride
    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.values
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // s + 1
    Wo = (Wp - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise _shape_error("conv2d", x.shape, weight.shape)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    # cols: (B, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.values.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.values
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1))
        return tuple(grads)

    return _node(out, parents, backward, "conv2d")


def max_pool2d(a):
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    maximal element in row-major order."""
    B, C, H, W = a.shape
    if H % 2 or W % 2:
        raise _shape_error("max_pool2d", a.shape)
    blocks = a.values.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gb,)

    return _node(out, (a,), backward, "max_pool2d")


def upsample_nearest(a):
    """Nearest-neighbour upsampling by a factor of 2."""
    B, C, H, W = a.shape
    out = np.repeat(np.repeat(a.values, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _node(out, (a,), backward, "upsample_nearest")


# ---------------------------------------------------------------- sampling

def grid_sample_bilinear(inp, coords):
    """Sample ``inp`` (B, C, H, W) at absolute pixel positions.

    ``coords`` is (B, 2, Ho, Wo) with channel 0 the column (x) and channel 1
    the row (y) coordinate. Corners outside the grid read zero, so samples
    fully outside the domain give zero value and zero coordinate gradient.
    """
    B, C, H, W = inp.shape
    if coords.shape[0] != B or coords.shape[1] != 2:
        raise _shape_error("grid_sample_bilinear", inp.shape, coords.shape)
    dt = inp.dtype
    x = coords.values[:, 0]
    y = coords.values[:, 1]
    x0f = np.floor(x)
    y0f = np.floor(y)
    wx = (x - x0f).astype(dt)
    wy = (y - y0f).astype(dt)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    flat = inp.values.reshape(B, C, H * W)
    bidx = np.arange(B)[:, None, None]

    def corner(yi, xi):
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(valid, yi * W + xi, 0)
        vals = flat[bidx, :, idx]  # (B, Ho, Wo, C)
        vals = np.moveaxis(vals, -1, 1) * valid[:, None]
        return vals, valid, idx

    v00, m00, i00 = corner(y0, x0)
    v01, m01, i01 = corner(y0, x1)
    v10, m10, i10 = corner(y1, x0)
    v11, m11, i11 = corner(y1, x1)
    wx_ = wx[:, None]
    wy_ = wy[:, None]
    w00 = (1 - wx_) * (1 - wy_)
    w01 = wx_ * (1 - wy_)
    w10 = (1 - wx_) * wy_
    w11 = wx_ * wy_
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def backward(g):
        gin = None
        if inp.requires_grad:
            # scatter-add via one bincount per corner over flattened (b, c, cell)
            base = (np.arange(B * C).reshape(B, C, 1, 1) * (H * W))
            total = np.zeros(B * C * H * W)
            for w, m, idx in ((w00, m00, i00), (w01, m01, i01), (w10, m10, i10), (w11, m11, i11)):
                contrib = g * w * m[:, None]  # (B, C, Ho, Wo)
                target = base + idx[:, None]
                total += np.bincount(target.ravel(), weights=contrib.ravel(), minlength=total.size)
            gin = total.astype(dt).reshape(B, C, H, W)
        gcoord = None
        if coords.requires_grad:
            dx = (1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)
            dy = (1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)
            gcoord = np.stack([(g * dx).sum(axis=1), (g * dy).sum(axis=1)], axis=1).astype(coords.dtype)
        return gin, gcoord

    return _node(out.astype(dt, copy=False), (inp, coords), backward, "grid_sample_bilinear")


# ---------------------------------------------------------------- backward

def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``grad`` of every leaf requiring grad.

    Repeated calls accumulate. Intermediate gradients are freed afterwards.
    """
    if root.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward: root must have shape (1, 1, 1, 1), got {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
