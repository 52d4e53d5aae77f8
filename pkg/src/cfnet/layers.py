"""Layer primitives: each forward pass returns the output plus a backward
closure over the saved activations it needs.

Backward closures take the upstream gradient and return gradients for the
layer inputs followed by its parameters.  The ReLU subgradient at exactly
zero is zero, and maxpool routes the full upstream gradient to the stored
argmax cell of each window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import (
    conv2d_with_cols,
    _col2im,
    maxpool2d,
    maxpool2d_unpool,
    reduce_mean_spatial,
)


@dataclass
class LossValue:
    """Scalar mean loss plus the per-sample class probabilities [N,C]."""

    value: float
    probs: np.ndarray


def fc_fb(x, weight, bias):
    """Affine layer ``out = x @ weight.T + bias`` for x [N,K], weight [C,K]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fc shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"fc bias shape {bias.shape} does not match weight {weight.shape}")
    out = x @ weight.T + bias

    def backward(dout):
        dx = dout @ weight
        dw = dout.T @ x
        db = dout.sum(axis=0)
        return dx, dw, db

    return out, backward


def gap_fb(x):
    """Global average pooling [N,K,H,W] -> [N,K]; backward spreads grad/(H*W)."""
    out = reduce_mean_spatial(x)
    h, w = x.shape[2], x.shape[3]

    def backward(dout):
        if dout.shape != out.shape:
            raise ValueError(f"gap upstream shape {dout.shape}, expected {out.shape}")
        scale = dout / x.dtype.type(h * w)
        return np.ascontiguousarray(
            np.broadcast_to(scale[:, :, None, None], x.shape))

    return out, backward


def relu_fb(x):
    out = np.maximum(x, 0)

    def backward(dout):
        return dout * (x > 0)

    return out, backward


def conv2d_fb(x, kernel, bias, stride=1, pad=0):
    """Convolution forward plus gradients for input, kernel, and bias."""
    out, cols, (hout, wout) = conv2d_with_cols(x, kernel, bias, stride, pad)
    cout, cin, kh, kw = kernel.shape
    kmat = kernel.reshape(cout, cin * kh * kw)

    def backward(dout):
        n = dout.shape[0]
        dmat = dout.reshape(n, cout, hout * wout)
        db = dout.sum(axis=(0, 2, 3))
        dk = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dcols = np.matmul(kmat.T[None], dmat)
        dx = _col2im(dcols, x.shape, kh, kw, stride, pad, hout, wout)
        return dx, dk, db

    return out, backward


def maxpool2d_fb(x, window=2, stride=2):
    out, arg = maxpool2d(x, window, stride)

    def backward(dout):
        return maxpool2d_unpool(dout, arg, x.shape, window, stride)

    return out, backward


def softmax_ce_fb(logits, labels):
    """Mean softmax cross-entropy over the batch.

    Returns a LossValue and a backward closure producing
    ``(softmax - onehot) / N`` for the logits.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [N,C], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0,{c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    probs = np.exp(logprobs)
    loss = float(-logprobs[np.arange(n), labels].mean())

    def backward():
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return d / logits.dtype.type(n)

    return LossValue(loss, probs), backward
