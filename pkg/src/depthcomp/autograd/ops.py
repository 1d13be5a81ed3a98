"""Differentiable layer operations over (N, C, H, W) tensors.

Pixel centres sit at integer coordinates: column ``u`` in ``[0, W-1]`` and
row ``v`` in ``[0, H-1]``. Everything the geometry code feeds into
``bilinear_sample`` follows the same convention.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


def _shape_error(op_kind: str, a, b, detail: str = "") -> ShapeError:
    msg = f"{op_kind}: incompatible shapes {tuple(a)} and {tuple(b)}"
    if detail:
        msg += f" ({detail})"
    return ShapeError(msg)


@dataclass
class LayerParams:
    """Learned (and running) quantities of one layer.

    For convolutions ``weight`` is (C_out, C_in, k, k); transposed convolutions
    use (C_in, C_out, k, k). For batch norm ``weight``/``bias`` are the
    per-channel scale and shift, and the running statistics are tracked here.
    """
    weight: Tensor
    bias: Optional[Tensor] = None
    running_mean: Optional[Tensor] = None
    running_var: Optional[Tensor] = None
    eps: float = BN_EPS

    def tensors(self) -> dict:
        out = {"weight": self.weight}
        for key in ("bias", "running_mean", "running_var"):
            t = getattr(self, key)
            if t is not None:
                out[key] = t
        return out

    def trainable(self) -> list:
        return [t for t in (self.weight, self.bias) if t is not None and t.requires_grad]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _broadcast_shape(op_kind, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op_kind, a.shape, b.shape) from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors op_kind name
    xd = x.data
    # sign(0) == 0, so the subgradient at a kink is zero
    return Tensor.from_op(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean: empty tensor")
    shape, n = x.shape, x.size
    out = np.asarray(x.data.sum(dtype=x.dtype) / n, dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),))


def masked_select(x: Tensor, mask) -> Tensor:
    """Flat 1-D tensor of the entries where ``mask`` is true (row-major order)."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise _shape_error("masked_select", x.shape, mask.shape) from None
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[mask] = g
        return (full,)

    return Tensor.from_op(x.data[mask], (x,), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise _shape_error("concat_channels", ref, t.shape)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward)


# -- convolution -----------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, C*k*k, ho*wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    return out, cols, xp.shape


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray, x_shape: tuple, padded_shape: tuple,
                       stride: int, padding: int) -> np.ndarray:
    n, o, ho, wo = g.shape
    k = w.shape[2]
    dcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, ho * wo))
    dxp = _col2im(dcols, padded_shape, k, stride, ho, wo)
    h, wd = x_shape[2:]
    return dxp[:, :, padding:padding + h, padding:padding + wd]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise _shape_error("conv2d", x.shape, weight.shape, "expected (N,C,H,W) and (C_out,C,k,k)")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("conv2d", weight.shape, bias.shape, "bias must be (C_out,)")
    k = weight.shape[2]
    ho, wo = _conv_out(x.shape[2], k, stride, padding), _conv_out(x.shape[3], k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv2d", x.shape, weight.shape, "zero-size spatial output")
    out, cols, padded_shape = _conv2d_raw(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    xs, wd = x.shape, weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad

    def backward(g):
        n, o = g.shape[:2]
        g2 = g.reshape(n, o, -1)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        dx = _conv2d_input_grad(g, wd, xs, padded_shape, stride, padding) if need_x else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out.astype(x.dtype, copy=False), parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is (C_in, C_out, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0] or weight.shape[2] != weight.shape[3]:
        raise _shape_error("conv_transpose2d", x.shape, weight.shape, "expected (N,C,H,W) and (C,C_out,k,k)")
    if output_padding >= max(stride, 1) and output_padding > 0:
        raise ShapeError("conv_transpose2d: output_padding must be smaller than stride")
    n, c, h, wd = x.shape
    k, c_out = weight.shape[2], weight.shape[1]
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv_transpose2d", x.shape, weight.shape, "zero-size spatial output")
    # the output is the input-gradient of a conv2d whose input has shape (n, c_out, ho, wo)
    padded_shape = (n, c_out, ho + 2 * padding, wo + 2 * padding)
    # the conv2d output grid may not reach the far padded edge; any slack stays zero
    out = _conv2d_input_grad(x.data, weight.data, (n, c_out, ho, wo), padded_shape, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    wdata = weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _im2col(gp, k, stride, h, wd)  # (n, c_out*k*k, h*w)
        dx = np.matmul(wdata.reshape(c, -1), cols).reshape(n, c, h, wd)
        dw = np.matmul(x.data.reshape(n, c, -1), cols.transpose(0, 2, 1)).sum(axis=0).reshape(wdata.shape)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Tensor.from_op(np.ascontiguousarray(out, dtype=x.dtype), parents, backward)


# -- normalization / regularization ---------------------------------------

def batch_norm(x: Tensor, params: LayerParams, training: bool) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics and updates the running
    estimates by EMA (momentum 0.1, unbiased variance); eval mode uses the
    running estimates.
    """
    if x.ndim != 4 or params.weight.shape != (x.shape[1],):
        raise _shape_error("batch_norm", x.shape, params.weight.shape)
    gamma, beta = params.weight, params.bias
    c = x.shape[1]
    axes = (0, 2, 3)
    if training:
        m = x.size // c
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if params.running_mean is not None:
            unbiased = var.reshape(-1) * (m / max(m - 1, 1))
            rm, rv = params.running_mean.data, params.running_var.data
            rm *= (1 - BN_MOMENTUM)
            rm += BN_MOMENTUM * mu.reshape(-1).astype(rm.dtype)
            rv *= (1 - BN_MOMENTUM)
            rv += BN_MOMENTUM * unbiased.astype(rv.dtype)
    else:
        mu = params.running_mean.data.reshape(1, c, 1, 1)
        var = params.running_var.data.reshape(1, c, 1, 1)
        xc = x.data - mu
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = xc * inv_std
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    gd = gamma.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


# -- resampling --------------------------------------------------------------

def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise _shape_error("max_pool2d", x.shape, (size, size), "zero-size spatial output")
    blocks = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        onehot = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        onehot = onehot.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, :ho * size, :wo * size] = onehot.reshape(n, c, ho * size, wo * size)
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


def avg_pool_resize(x: Tensor, factor: int) -> Tensor:
    """Downsample by ``factor`` with block means; trailing rows/cols that do not
    fill a whole block are cropped first."""
    if int(factor) != factor or factor <= 0:
        raise ValueError(f"avg_pool_resize: factor must be a positive integer, got {factor}")
    s = int(factor)
    if s == 1:
        return x
    n, c, h, w = x.shape
    ho, wo = h // s, w // s
    if ho == 0 or wo == 0:
        raise _shape_error("avg_pool_resize", x.shape, (s, s), "zero-size spatial output")
    cropped = x.data[:, :, :ho * s, :wo * s]
    out = cropped.reshape(n, c, ho, s, wo, s).mean(axis=(3, 5))
    shape = x.shape

    def backward(g):
        up = np.repeat(np.repeat(g / (s * s), s, axis=2), s, axis=3)
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, :ho * s, :wo * s] = up
        return (full,)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x,), backward)


def bilinear_sample(image: Tensor, coords: Tensor):
    """Sample ``image`` at per-pixel source coordinates.

    ``coords`` is (N, 2, H', W') holding (u, v) = (column, row). Returns the
    sampled (N, C, H', W') tensor and a float (N, 1, H', W') validity mask.
    Samples outside ``[0, W-1] x [0, H-1]`` are 0, masked, and pass no gradient.
    """
    if image.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2 or coords.shape[0] != image.shape[0]:
        raise _shape_error("bilinear_sample", image.shape, coords.shape, "coords must be (N,2,H,W)")
    n, c, h, w = image.shape
    ho, wo = coords.shape[2:]
    u = coords.data[:, 0].astype(np.float64)
    v = coords.data[:, 1].astype(np.float64)
    with np.errstate(invalid="ignore"):
        valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = (u - u0).astype(image.dtype)
    b = (v - v0).astype(image.dtype)
    vm = valid.astype(image.dtype)

    flat = image.data.reshape(n, c, h * w)
    idx = [(v0 * w + u0), (v0 * w + u1), (v1 * w + u0), (v1 * w + u1)]

    def gather(ix):
        ix = ix.reshape(n, 1, ho * wo)
        return np.take_along_axis(flat, np.broadcast_to(ix, (n, c, ho * wo)), axis=2).reshape(n, c, ho, wo)

    i00, i01, i10, i11 = (gather(ix) for ix in idx)
    a4, b4, m4 = a[:, None], b[:, None], vm[:, None]
    w00, w01, w10, w11 = (1 - a4) * (1 - b4), a4 * (1 - b4), (1 - a4) * b4, a4 * b4
    out = (w00 * i00 + w01 * i01 + w10 * i10 + w11 * i11) * m4

    def backward(g):
        gm = g * m4
        dimg = np.zeros(n * c * h * w, dtype=g.dtype)
        base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
        for ix, wt in zip(idx, (w00, w01, w10, w11)):
            lin = (base + ix.reshape(n, 1, ho * wo)).reshape(-1)
            dimg += np.bincount(lin, weights=(gm * wt).reshape(-1), minlength=dimg.size).astype(g.dtype)
        du = ((1 - b4) * (i01 - i00) + b4 * (i11 - i10)) * gm
        dv = ((1 - a4) * (i10 - i00) + a4 * (i11 - i01)) * gm
        dcoords = np.stack([du.sum(axis=1), dv.sum(axis=1)], axis=1)
        return dimg.reshape(n, c, h, w), dcoords

    out_t = Tensor.from_op(out.astype(image.dtype, copy=False), (image, coords), backward)
    return out_t, vm[:, None].copy()


# -- dispatcher -------------------------------------------------------------

_UNARY = {"relu": relu, "abs": abs, "square": square, "sum": sum, "mean": mean}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def layer_forward(op_kind: str, inputs: Sequence[Tensor], params: Optional[LayerParams] = None,
                  **attrs) -> Tensor:
    """Uniform entry point: ``layer_forward("conv2d", [x], params, stride=2, padding=1)``."""
    if op_kind == "conv2d":
        return conv2d(inputs[0], params.weight, params.bias,
                      stride=attrs.get("stride", 1), padding=attrs.get("padding", 0))
    if op_kind == "conv_transpose2d":
        return conv_transpose2d(inputs[0], params.weight, params.bias,
                                stride=attrs.get("stride", 1), padding=attrs.get("padding", 0),
                                output_padding=attrs.get("output_padding", 0))
    if op_kind == "batch_norm":
        return batch_norm(inputs[0], params, training=attrs.get("training", True))
    if op_kind == "concat_channels":
        return concat_channels(inputs)
    if op_kind == "masked_select":
        return masked_select(inputs[0], attrs["mask"])
    if op_kind in _UNARY:
        return _UNARY[op_kind](inputs[0])
    if op_kind in _BINARY:
        return _BINARY[op_kind](inputs[0], inputs[1])
    raise ValueError(f"unknown op_kind {op_kind!r}")
