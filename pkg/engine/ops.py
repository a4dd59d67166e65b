"""
Differentiable primitives.

Layout is NCHW throughout. Reductions (sums, means, normalization moments)
accumulate in float64 and cast back to the working dtype; convolution and
dense contractions run through BLAS in the working dtype.
"""
from typing import List, Sequence

import numpy as np

from engine.tensor import Tensor, get_default_dtype, record
from models.errors import ShapeError


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor._wrap(np.asarray(value, dtype=dtype), kind="constant")


def _unbroadcast(g, shape):
    """Sums a broadcast gradient back down to the operand shape"""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as error:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from error


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return record("add", [a, b], out, backward_fn)


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return record("sub", [a, b], out, backward_fn)


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return record("mul", [a, b], out, backward_fn)


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )
    return record("div", [a, b], out, backward_fn)


def neg(x):
    return record("neg", [x], -x.data, lambda g: (-g,))


def power(x, exponent):
    exponent = float(exponent)
    out = np.power(x.data, exponent).astype(x.dtype)

    def backward_fn(g):
        if exponent == 0.0:
            return (np.zeros_like(g),)
        return (g * exponent * np.power(x.data, exponent - 1.0),)
    return record("power", [x], out, backward_fn)


def exp(x):
    out = np.exp(x.data)
    return record("exp", [x], out, lambda g: (g * out,))


def log(x):
    out = np.log(x.data)
    return record("log", [x], out, lambda g: (g / x.data,))


def abs(x):
    out = np.abs(x.data)
    return record("abs", [x], out, lambda g: (g * np.sign(x.data),))


def relu(x):
    out = np.maximum(x.data, 0).astype(x.dtype)
    return record("relu", [x], out, lambda g: (g * (x.data > 0),))


def leaky_relu(x, slope=0.2):
    out = np.where(x.data > 0, x.data, slope * x.data).astype(x.dtype)
    return record("leaky_relu", [x], out, lambda g: (g * np.where(x.data > 0, 1.0, slope).astype(x.dtype),))


def sigmoid(x):
    out = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(x.dtype)
    return record("sigmoid", [x], out, lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return record("tanh", [x], out, lambda g: (g * (1.0 - out * out),))


def clip_min(x, floor):
    """max(x, floor); no gradient where the floor is active"""
    out = np.maximum(x.data, floor).astype(x.dtype)
    return record("clip_min", [x], out, lambda g: (g * (x.data > floor),))


# ----------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)
    return record("sum", [x], out, backward_fn)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)
    return record("mean", [x], out, backward_fn)


# -------------------------------------------------------------- shape helpers

def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as error:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from error
    return record("reshape", [x], out, lambda g: (g.reshape(x.shape),))


def slice_axis(x, start, stop, axis):
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])

    def backward_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)
    return record("slice", [x], out, backward_fn)


def split(x, sections, axis=1) -> List[Tensor]:
    """Splits into equal sections along an axis"""
    if x.shape[axis] % sections != 0:
        raise ShapeError(f"split: axis {axis} of {x.shape} not divisible into {sections}")
    step = x.shape[axis] // sections
    return [slice_axis(x, i * step, (i + 1) * step, axis) for i in range(sections)]


def concat(tensors: Sequence[Tensor], axis=1):
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    if axis < -ndim or axis >= ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim:
            raise ShapeError("concat: ranks differ")
        for d in range(ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError(f"concat: ragged shapes {[t.shape for t in tensors]} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return np.split(g, bounds, axis=axis)
    return record("concat", list(tensors), out, backward_fn)


def reflect_pad(x, pad):
    """Mirror padding of the two spatial axes (edge pixel not repeated)"""
    if pad == 0:
        return x
    _, _, h, w = x.shape
    if pad >= h or pad >= w:
        raise ShapeError(f"reflect_pad: pad {pad} too large for {h}x{w}")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")

    def fold(g, axis, n):
        core = np.take(g, np.arange(pad, pad + n), axis=axis).copy()
        for i in range(pad):
            # padded index i mirrors source index pad - i, trailing pad mirrors n - 2 - i
            src_lead = [slice(None)] * 4
            src_lead[axis] = pad - i
            dst_lead = [slice(None)] * 4
            dst_lead[axis] = i
            core[tuple(src_lead)] += g[tuple(dst_lead)]
            src_trail = [slice(None)] * 4
            src_trail[axis] = n - 2 - i
            dst_trail = [slice(None)] * 4
            dst_trail[axis] = pad + n + i
            core[tuple(src_trail)] += g[tuple(dst_trail)]
        return core

    def backward_fn(g):
        g = fold(g, 3, w)
        g = fold(g, 2, h)
        return (g,)
    return record("reflect_pad", [x], out, backward_fn)


# -------------------------------------------------------------- convolutions

def _windows(xp, kh, kw, stride):
    """[N,C,Hp,Wp] -> strided view [N,C,Ho,Wo,kh,kw]"""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols, shape, kh, kw, stride, h, w):
    """Scatter-adds [N,h,w,C,kh,kw] patches into a zero [N,C,H,W] canvas"""
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """
    2-D cross-correlation with zero padding

    Args:
        x (Tensor): [N, C, H, W]
        weight (Tensor): [K, C, kh, kw]
        bias (Tensor, optional): [K]
        stride (int): Step between windows (>= 1)
        padding (int): Zero rows/columns added on every side

    Returns:
        Tensor: [N, K, floor((H + 2p - kh) / s) + 1, floor((W + 2p - kw) / s) + 1]
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: weight expects {wc} input channels, input has {c} (input {x.shape}, weight {weight.shape})")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gb = None if bias is None else np.sum(g, axis=(0, 2, 3), dtype=np.float64)
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("conv2d", inputs, out, backward_fn)


def conv2d_transpose(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """
    Transposed convolution, the adjoint of conv2d plus a bias

    Args:
        x (Tensor): [N, C, H, W]
        weight (Tensor): [C, K, kh, kw]
        bias (Tensor, optional): [K]
        output_padding (int): Extra rows/columns at the bottom/right, < stride

    Returns:
        Tensor: [N, K, (H - 1) * s - 2p + kh + output_padding, same for W]
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    wc, k, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d_transpose: weight expects {wc} input channels, input has {c}")
    if stride < 1 or not 0 <= output_padding < stride:
        raise ShapeError("conv2d_transpose: need stride >= 1 and 0 <= output_padding < stride")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} does not match {k} output channels")
    hf = (h - 1) * stride + kh + output_padding
    wf = (w - 1) * stride + kw + output_padding
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ShapeError("conv2d_transpose: padding removes the whole output")

    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))
    full = _col2im(cols, (n, k, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding:hf - padding, padding:wf - padding]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward_fn(g):
        gf = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _windows(gf, kh, kw, stride)[:, :, :h, :w]
        gx = np.tensordot(gcols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3]))
        gb = None if bias is None else np.sum(g, axis=(0, 2, 3), dtype=np.float64)
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("conv2d_transpose", inputs, out, backward_fn)


# ------------------------------------------------------------- normalization

def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-(sample, channel) plane standardization with an affine map"""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ShapeError("instance_norm: planes need at least two pixels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ShapeError("instance_norm: eps must be > 0")

    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=(2, 3), keepdims=True)
    centered = x64 - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g4 = gamma.data.astype(np.float64)[None, :, None, None]
    out = (xhat * g4 + beta.data[None, :, None, None]).astype(x.dtype)
    m = h * w

    def backward_fn(g):
        g64 = g.astype(np.float64)
        dgamma = (g64 * xhat).sum(axis=(0, 2, 3))
        dbeta = g64.sum(axis=(0, 2, 3))
        dxhat = g64 * g4
        dx = inv_std / m * (
            m * dxhat
            - dxhat.sum(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        )
        return dx.astype(x.dtype), dgamma, dbeta
    return record("instance_norm", [x, gamma, beta], out, backward_fn)


# -------------------------------------------------------------------- pooling

def max_pool2d(x, size=2):
    """
    Non-overlapping max pooling, window = stride = size

    Ceil mode: a trailing odd row/column is pooled on its own, so a 1x1 map
    stays 1x1.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = -(-h // size), -(-w // size)
    hp, wp = ho * size, wo * size
    if (hp, wp) != (h, w):
        xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
        xp[:, :, :h, :w] = x.data
    else:
        xp = x.data
    blocks = xp.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp)
        return (gx[:, :, :h, :w],)
    return record("max_pool2d", [x], np.ascontiguousarray(out), backward_fn)


def global_avg_pool(x):
    """[N,C,H,W] -> [N,C] plane means"""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [N,C,H,W], got {x.shape}")
    m = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / m, x.shape).astype(x.dtype),)
    return record("global_avg_pool", [x], out, backward_fn)


# ---------------------------------------------------------------------- dense

def fully_connected(x, weight, bias=None):
    """x [N,D] @ weight [D,O] + bias [O]"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: cannot apply {weight.shape} to {x.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.astype(x.dtype)

    def backward_fn(g):
        gb = None if bias is None else np.sum(g, axis=0, dtype=np.float64)
        return g @ weight.data.T, x.data.T @ g, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("fully_connected", inputs, out, backward_fn)


def log_softmax(x):
    """Log-probabilities along the last axis via log-sum-exp"""
    x64 = x.data.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out64 = shifted - lse
    probs = np.exp(out64)

    def backward_fn(g):
        return ((g - probs * g.sum(axis=-1, keepdims=True)).astype(x.dtype),)
    return record("log_softmax", [x], out64.astype(x.dtype), backward_fn)


def pick(x, index):
    """Row-wise gather: out[i] = x[i, index[i]]"""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick: need [N,K] input and N indices, got {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError(f"pick: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[rows, index] = g
        return (gx,)
    return record("pick", [x], np.ascontiguousarray(out), backward_fn)
