"""Differentiable primitives used by the translation networks and the detector."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor

PAD_MODES = ("zero", "reflect")


def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, width)
    if mode == "reflect":
        if pad >= x.shape[2] or pad >= x.shape[3]:
            raise ShapeError(f"reflect pad {pad} needs spatial size > pad, got {x.shape[2:]}")
        return np.pad(x, width, mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}; expected one of {PAD_MODES}")


def _unpad(g: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad`."""
    if pad == 0:
        return g
    if mode == "zero":
        return g[:, :, pad:-pad, pad:-pad]
    # reflect: fold the mirrored borders back onto their sources, columns then rows
    w = g.shape[3] - 2 * pad
    cols = g[:, :, :, pad:pad + w].copy()
    for k in range(1, pad + 1):
        cols[:, :, :, k] += g[:, :, :, pad - k]
        cols[:, :, :, w - 1 - k] += g[:, :, :, pad + w - 1 + k]
    h = g.shape[2] - 2 * pad
    out = cols[:, :, pad:pad + h, :].copy()
    for k in range(1, pad + 1):
        out[:, :, k, :] += cols[:, :, pad - k, :]
        out[:, :, h - 1 - k, :] += cols[:, :, pad + h - 1 + k, :]
    return out


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (B, C, H', W', kh, kw) over a padded input."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, out_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Scatter-add columns of shape (B, C, kh, kw, H', W') onto a (B, C, H, W) grid."""
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c) + out_hw, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """2-D cross-correlation on (B, Cin, H, W) with weight (Cout, Cin, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"weight expects {weight.shape[1]} input channels, input has {x.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cout, _, kh, kw = weight.shape
    xp = _pad(x.data, padding, pad_mode)
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = _windows(xp, kh, kw, stride)
    b, cin, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    padded_hw = xp.shape[2:]
    wshape = weight.shape

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(wshape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gx = _unpad(_col2im(gcols, padded_hw, stride), padding, pad_mode)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor.from_op(out, parents, backward)


def conv2d_transpose(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weight is (Cin, Cout, kh, kw).

    Output size is (H - 1) * stride + kh - 2 * padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"weight expects {weight.shape[0]} input channels, input has {x.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _, cout, kh, kw = weight.shape
    h, wd = x.shape[2:]
    full = ((h - 1) * stride + kh, (wd - 1) * stride + kw)
    if full[0] - 2 * padding < 1 or full[1] - 2 * padding < 1:
        raise ShapeError("padding removes the whole output")
    b = x.shape[0]
    cin = x.shape[1]
    wmat = weight.data.reshape(cin, -1)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = (xm @ wmat).reshape(b, h, wd, cout, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = _col2im(cols, full, stride)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    wshape = weight.shape

    def backward(g):
        win = _windows(_pad(g, padding, "zero"), kh, kw, stride)
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, cout * kh * kw)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(b, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (xm.T @ gcols).reshape(wshape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor.from_op(out, parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(kind: str, x, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def instance_norm(x, gain, bias_term, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over spatial positions."""
    x, gain, bias_term = as_tensor(x), as_tensor(gain), as_tensor(bias_term)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias_term.shape != (c,):
        raise ShapeError(f"gain/bias must have shape ({c},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[2] * x.shape[3]
    centered = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = centered * inv_std
    gview = gain.data[None, :, None, None]
    out = gview * xhat + bias_term.data[None, :, None, None]

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gview
            gx = inv_std / n * (
                n * dxhat
                - dxhat.sum(axis=(2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, (x, gain, bias_term), backward)


def l1_loss(a, b) -> Tensor:
    """Mean absolute difference; the subgradient at ties is 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sign = np.sign(diff)
    n = diff.size

    def backward(g):
        ga = g * sign / n
        return ga, -ga

    return Tensor.from_op(np.abs(diff).mean(), (a, b), backward)


def bce_from_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.

    Uses max(l, 0) - l*t + log1p(exp(-|l|)), finite for every finite logit.
    """
    logits = as_tensor(logits)
    t = np.broadcast_to(np.asarray(target, dtype=logits.data.dtype), logits.shape)
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce targets must be 0 or 1")
    l = logits.data
    per = np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l)))
    n = l.size
    return Tensor.from_op(per.mean(), (logits,), lambda g: (g * (_sigmoid(l) - t) / n,))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of rows of ``logits`` (N, C) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(len(labels))
    n = len(labels)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (g * grad / n,)

    return Tensor.from_op(-logp[rows, labels].mean(), (logits,), backward)
