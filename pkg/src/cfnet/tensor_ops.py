"""Dense NCHW tensor kernels.

Tensors are plain ``numpy.ndarray`` values: rank 1..4, float32 or float64,
row-major.  Activations use the batch x channel x height x width layout.

Every kernel here is a pure function and bit-reproducible: reductions go
through numpy, which traverses buffers in row-major order with a fixed
pairwise blocking, so identical inputs always produce identical output bits
on a given platform.  Convolution is evaluated as im2col + matmul; the test
suite checks it against an independent nested-loop reference.
"""

from __future__ import annotations

import numpy as np

MAX_RANK = 4
SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def check_shape(shape):
    """Validate and normalize a tensor shape (rank 1..4, extents >= 1)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("empty shape")
    if len(shape) > MAX_RANK:
        raise ValueError(f"rank {len(shape)} exceeds maximum rank {MAX_RANK}")
    for extent in shape:
        if extent < 1:
            raise ValueError(f"shape {shape} has an extent < 1")
    return shape


def _check_dtype(dtype):
    dtype = np.dtype(dtype)
    if dtype not in SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype} (float32/float64 only)")
    return dtype


def create(shape, fill="zeros", *, value=0.0, seed=None, lo=0.0, hi=1.0,
           dtype=np.float32):
    """Create a tensor filled with zeros, a constant, or seeded uniform noise.

    ``fill="uniform"`` draws from a PCG64 generator seeded with ``seed``, so
    the same arguments always reproduce the same buffer.
    """
    shape = check_shape(shape)
    dtype = _check_dtype(dtype)
    if fill == "zeros":
        return np.zeros(shape, dtype=dtype)
    if fill == "constant":
        return np.full(shape, value, dtype=dtype)
    if fill == "uniform":
        if seed is None:
            raise ValueError("uniform fill requires a seed")
        rng = np.random.Generator(np.random.PCG64(seed))
        return rng.uniform(lo, hi, size=shape).astype(dtype)
    raise ValueError(f"unknown fill kind {fill!r}")


def elementwise(op, a, b=None):
    """Pointwise add / mul / scale / relu.

    ``add`` and ``mul`` require identical shapes; ``scale`` takes a scalar
    second operand; ``relu`` ignores ``b``.
    """
    a = np.asarray(a)
    if op == "relu":
        return np.maximum(a, 0)
    if op == "scale":
        if b is None or np.ndim(b) != 0:
            raise ValueError("scale expects a scalar second operand")
        return a * a.dtype.type(b)
    if op in ("add", "mul"):
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        return a + b if op == "add" else a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def conv_output_extent(extent, k, stride, pad):
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"non-integral output extent for input {extent}, kernel {k}, "
            f"stride {stride}, pad {pad}")
    return span // stride + 1


def _conv2d_geometry(x, kernel, bias, stride, pad):
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be rank 4, got shape {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"kernel size must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    if x.dtype != kernel.dtype or x.dtype != bias.dtype:
        raise ValueError("conv2d input, kernel and bias must share one dtype")
    hout = conv_output_extent(x.shape[2], kh, stride, pad)
    wout = conv_output_extent(x.shape[3], kw, stride, pad)
    return cout, cin, kh, kw, hout, wout


def _im2col(xp, kh, kw, stride, hout, wout):
    n, cin = xp.shape[:2]
    cols = np.empty((n, cin, kh, kw, hout, wout), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * hout:stride,
                                    kx:kx + stride * wout:stride]
    return cols.reshape(n, cin * kh * kw, hout * wout)


def _col2im(dcols, x_shape, kh, kw, stride, pad, hout, wout):
    n, cin, h, w = x_shape
    dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dc = dcols.reshape(n, cin, kh, kw, hout, wout)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + stride * hout:stride,
                kx:kx + stride * wout:stride] += dc[:, :, ky, kx]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def conv2d_with_cols(x, kernel, bias, stride=1, pad=0):
    """Forward convolution returning the im2col matrix for reuse in backward."""
    cout, cin, kh, kw, hout, wout = _conv2d_geometry(x, kernel, bias, stride, pad)
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, hout, wout)
    kmat = kernel.reshape(cout, cin * kh * kw)
    out = np.matmul(kmat[None], cols).reshape(x.shape[0], cout, hout, wout)
    out += bias[None, :, None, None]
    return out, cols, (hout, wout)


def conv2d(x, kernel, bias, stride=1, pad=0):
    """Cross-correlate an [N,Cin,H,W] input with [Cout,Cin,kh,kw] kernels.

    kh = kw in {1, 3}; the per-channel bias is added to every output cell.
    """
    out, _, _ = conv2d_with_cols(x, kernel, bias, stride, pad)
    return out


def maxpool2d(x, window=2, stride=2):
    """Max over pooling windows, plus the argmax map needed by backward.

    The argmax map stores, per output cell, the winning offset inside the
    window in row-major scan order; ties pick the first (lowest) offset.
    """
    if x.ndim != 4:
        raise ValueError(f"maxpool2d input must be rank 4, got shape {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"window {window} larger than input {h}x{w}")
    if (h - window) % stride != 0 or (w - window) % stride != 0:
        raise ValueError(
            f"input {h}x{w} not divisible by stride {stride} after windowing")
    hout = (h - window) // stride + 1
    wout = (w - window) // stride + 1
    cand = np.empty((window * window, n, c, hout, wout), dtype=x.dtype)
    for wy in range(window):
        for wx in range(window):
            cand[wy * window + wx] = x[:, :, wy:wy + stride * hout:stride,
                                       wx:wx + stride * wout:stride]
    arg = cand.argmax(axis=0)
    out = np.take_along_axis(cand, arg[None], axis=0)[0]
    return out, arg


def maxpool2d_unpool(dout, arg, x_shape, window=2, stride=2):
    """Scatter an upstream gradient back to the argmax cells of maxpool2d."""
    n, c, hout, wout = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for idx in range(window * window):
        wy, wx = divmod(idx, window)
        dx[:, :, wy:wy + stride * hout:stride,
           wx:wx + stride * wout:stride] += dout * (arg == idx)
    return dx


def reduce_mean_spatial(x):
    """Spatial mean over H and W: [N,K,H,W] -> [N,K]."""
    if x.ndim != 4:
        raise ValueError(f"reduce_mean_spatial input must be rank 4, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    return x.sum(axis=(2, 3)) / x.dtype.type(h * w)
