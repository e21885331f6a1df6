"""Differentiable layer operations on N x C x H x W tensors.

Parameters may be passed as raw arrays (treated as constants) or as
:class:`~hmvgg.autograd.Variable` objects on the same tape as the input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .autograd import Variable, lift, reduce_mean, tape_of
from .errors import ShapeError

ArrayOrVar = Union[np.ndarray, Variable]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Variable) else T.as_tensor(x)


@dataclass
class ConvParams:
    weight: ArrayOrVar  # C_out x C_in x k x k
    bias: ArrayOrVar  # C_out
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    @property
    def kernel_size(self) -> int:
        return _value(self.weight).shape[-1]


@dataclass
class BatchNormState:
    gamma: ArrayOrVar
    beta: ArrayOrVar
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, mode: str = "train") -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), mode=mode)


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: ArrayOrVar, p: ConvParams) -> Variable:
    """Cross-correlation with stride, zero padding and dilation, plus per-channel bias."""
    tape = tape_of(x, p.weight, p.bias)
    x, w, b = lift(x, tape), lift(p.weight, tape), lift(p.bias, tape)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {xv.shape} and {wv.shape}")
    n, c, h, wd = xv.shape
    co, ci, k, k2 = wv.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if bv.shape != (co,):
        raise ShapeError(f"bias shape {bv.shape} does not match {co} output channels")
    s, pad, d = p.stride, p.padding, p.dilation
    if s < 1 or d < 1 or pad < 0:
        raise ShapeError("stride and dilation must be >= 1 and padding >= 0")
    ho, wo = conv_output_size(h, k, s, pad, d), conv_output_size(wd, k, s, pad, d)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} is degenerate for input {h}x{wd}")

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv

    def window(i, j):
        r0, c0 = i * d, j * d
        return (slice(None), slice(None),
                slice(r0, r0 + s * (ho - 1) + 1, s), slice(c0, c0 + s * (wo - 1) + 1, s))

    # im2col: (N, C*k*k, Ho*Wo), channel-major then kernel row/col, matching the kernel layout
    wins = [window(i, j) for i in range(k) for j in range(k)]
    cols = np.stack([xp[win] for win in wins], axis=2).reshape(n, c * k * k, ho * wo)
    wmat = wv.reshape(co, c * k * k)
    out = (np.matmul(wmat, cols) + bv[None, :, None]).reshape(n, co, ho, wo)

    def back(g):
        g2 = g.reshape(n, co, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wv.shape)
        gcols = np.matmul(wmat.T, g2).reshape(n, c, k * k, ho, wo)
        gx = np.zeros_like(xp)
        for t, win in enumerate(wins):
            gx[win] += gcols[:, :, t]
        if pad:
            gx = gx[:, :, pad:pad + h, pad:pad + wd]
        return gx, gw, g.sum(axis=(0, 2, 3))

    return tape.record("conv2d", out, (x, w, b), back)


def maxpool2d(x: ArrayOrVar, k: int = 2, stride: int = 2) -> Variable:
    """2x2/stride-2 max pooling; ties route the gradient to the first element in row-major order."""
    if k != 2 or stride != 2:
        raise ShapeError("only 2x2 pooling with stride 2 is supported")
    tape = tape_of(x)
    x = lift(x, tape)
    xv = x.value
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    win = xv.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return tape.record("maxpool2d", out, (x,), back)


def gap(x: ArrayOrVar) -> Variable:
    """Per-channel spatial mean, N x C x H x W -> N x C x 1 x 1."""
    tape = tape_of(x)
    x = lift(x, tape)
    if x.value.ndim != 4:
        raise ShapeError(f"gap expects a 4-d tensor, got {x.shape}")
    return reduce_mean(x, axes=(2, 3), keep=True)


def batchnorm(x: ArrayOrVar, state: BatchNormState) -> Variable:
    """Batch normalization over N, H, W per channel.

    Train mode normalizes with the biased batch variance and updates the
    running statistics in ``state`` (unbiased variance); eval mode uses the
    running statistics.
    """
    tape = tape_of(x, state.gamma, state.beta)
    x, gamma, beta = lift(x, tape), lift(state.gamma, tape), lift(state.beta, tape)
    xv, gv, bv = x.value, gamma.value, beta.value
    if xv.ndim != 4:
        raise ShapeError(f"batchnorm expects a 4-d tensor, got {x.shape}")
    c = xv.shape[1]
    if gv.shape != (c,) or bv.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeError(f"batchnorm state has wrong channel count for input with {c} channels")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)

    if state.mode == "train":
        m = xv.size // c
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        unbiased = var * m / (m - 1) if m > 1 else var
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
        state.running_var = (1.0 - mom) * state.running_var + mom * unbiased
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (xv - mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = gv.reshape(bshape) * xhat + bv.reshape(bshape)

        def back(g):
            dxhat = g * gv.reshape(bshape)
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif state.mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = gv.reshape(bshape) * xhat + bv.reshape(bshape)

        def back(g):
            gx = g * (gv * inv_std).reshape(bshape)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")

    return tape.record("batchnorm", out, (x, gamma, beta), back)


def fc(x: ArrayOrVar, weight: ArrayOrVar, bias: ArrayOrVar) -> Variable:
    """Fully connected layer: x @ weight.T + bias for x of shape N x D_in."""
    tape = tape_of(x, weight, bias)
    x, w, b = lift(x, tape), lift(weight, tape), lift(bias, tape)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"fc shape mismatch: input {xv.shape}, weight {wv.shape}")
    if bv.shape != (wv.shape[0],):
        raise ShapeError(f"fc bias shape {bv.shape} does not match weight {wv.shape}")
    out = T.matmul(xv, wv.T) + bv
    return tape.record("fc", out, (x, w, b), lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)))


def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    return (np.arange(out_size) * in_size) // out_size


def upsample_nearest(x: ArrayOrVar, out_h: int, out_w: int) -> Variable:
    """Nearest-neighbour resize: output (i, j) copies source (floor(i*H/out_h), floor(j*W/out_w))."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample target {out_h}x{out_w} must be positive")
    tape = tape_of(x)
    x = lift(x, tape)
    xv = x.value
    n, c, h, w = xv.shape
    rows, cols = _nearest_index(out_h, h), _nearest_index(out_w, w)
    out = xv[:, :, rows][:, :, :, cols]

    def back(g):
        gr = np.zeros((n, c, h, out_w))
        np.add.at(gr, (slice(None), slice(None), rows), g)
        gx = np.zeros((n, c, h, w))
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
        return (gx,)

    return tape.record("upsample_nearest", out, (x,), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: ArrayOrVar, labels: Sequence[int]) -> Variable:
    """Mean softmax cross-entropy over the batch."""
    tape = tape_of(logits)
    logits = lift(logits, tape)
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeError(f"logits must be N x K, got {lv.shape}")
    n, k = lv.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = lv - lv.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = max(float(np.mean(logsum - z[np.arange(n), labels])), 0.0)
    probs = softmax(lv)

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g.reshape(())) / n),)

    return tape.record("softmax_ce", np.array(loss), (logits,), back)
