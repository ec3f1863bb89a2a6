"""Differentiable primitives used by the segmentation and attention networks.

Every function takes and returns :class:`~fedmla.tensor.core.Tensor` objects and
registers a hand-written backward rule. Layouts are NCHW for images and NC for
feature rows.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, as_tensor, make_result

DICE_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
IN_EPS = 1e-12
PROB_FLOOR = 1e-12


def _check_ndim(x: Tensor, ndim: int, op: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{op} expects a {ndim}-d input, got shape {x.shape}")


def pad_edge(x: Tensor, padding: int) -> Tensor:
    """Replicate the outermost rows and columns ``padding`` times."""
    x = as_tensor(x)
    _check_ndim(x, 4, "pad_edge")
    if padding < 0:
        raise ShapeError("pad_edge: padding must be >= 0")
    if padding == 0:
        return x
    h, w = x.shape[2], x.shape[3]
    ri = np.clip(np.arange(h + 2 * padding) - padding, 0, h - 1)
    ci = np.clip(np.arange(w + 2 * padding) - padding, 0, w - 1)
    out = x.data[:, :, ri][:, :, :, ci]
    # gather matrices: out = R @ x @ C, so grad = R^T @ g @ C^T
    rmat = np.zeros((h + 2 * padding, h))
    rmat[np.arange(len(ri)), ri] = 1.0
    cmat = np.zeros((w, w + 2 * padding))
    cmat[ci, np.arange(len(ci))] = 1.0
    return make_result(out, (x,), lambda g: (rmat.T @ g @ cmat.T,), "pad_edge")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           padding: int = 0, stride: int = 1, pad_mode: str = "zeros") -> Tensor:
    """2-d cross-correlation of an NCHW batch with an (O, C, kh, kw) kernel.

    ``pad_mode`` is "zeros" or "edge" (replicate border values).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if pad_mode == "edge":
        x, padding = pad_edge(x, padding), 0
    elif pad_mode != "zeros":
        raise ValueError(f"conv2d: unknown pad_mode {pad_mode!r}")
    _check_ndim(x, 4, "conv2d")
    _check_ndim(weight, 4, "conv2d weight")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if stride == 1 and c * kh * kw > 16:
        out, backward_core = _conv_shifted(x.data, weight.data, padding)
    else:
        out, backward_core = _conv_im2col(x.data, weight.data, padding, stride, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gx, gw = backward_core(g, x.requires_grad, weight.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def _conv_im2col(xd, wd, padding, stride, ho, wo):
    n, c, h, w = xd.shape
    o, _, kh, kw = wd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = wd.reshape(o, c * kh * kw)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward_core(g, need_x, need_w):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(wd.shape) if need_w else None
        gx = None
        if need_x:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        return gx, gw

    return out, backward_core


def _conv_shifted(xd, wd, padding):
    # Stride-1 path without im2col: on a zero-padded NHWC image flattened to
    # rows, tap (i, j) of the kernel is a contiguous row offset i*wp + j.
    n, c, h, w = xd.shape
    o, _, kh, kw = wd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    rows = n * hp * wp
    span = rows - (kh - 1) * wp - (kw - 1)
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    taps = [np.ascontiguousarray(wd[:, :, i, j]) for i in range(kh) for j in range(kw)]

    xp = np.zeros((n, hp, wp, c))
    xp[:, padding:padding + h, padding:padding + w, :] = xd.transpose(0, 2, 3, 1)
    xf = xp.reshape(rows, c)
    acc = np.zeros((rows, o))
    head = acc[:span]
    for off, tap in zip(offsets, taps):
        head += xf[off:off + span] @ tap.T
    out = np.ascontiguousarray(acc.reshape(n, hp, wp, o)[:, :ho, :wo, :].transpose(0, 3, 1, 2))

    def backward_core(g, need_x, need_w):
        gp = np.zeros((n, hp, wp, o))
        gp[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        gf = gp.reshape(rows, o)[:span]
        gw = None
        if need_w:
            gw = np.empty_like(wd)
            for (off, (i, j)) in zip(offsets, np.ndindex(kh, kw)):
                gw[:, :, i, j] = gf.T @ xf[off:off + span]
        gx = None
        if need_x:
            gxf = np.zeros((rows, c))
            for off, tap in zip(offsets, taps):
                gxf[off:off + span] += gf @ tap
            gx = np.ascontiguousarray(
                gxf.reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
        return gx, gw

    return out, backward_core


def _standardize(xd: np.ndarray, axes: tuple, eps: float):
    mean = xd.mean(axis=axes, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, mean, var, inv_std


def _standardize_backward(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes: tuple) -> np.ndarray:
    # d/dx of (x - mean) / sqrt(var + eps) with biased batch statistics
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g - gm - xhat * gxm)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Optional[np.ndarray], running_var: Optional[np.ndarray],
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W) with affine output.

    In training mode batch statistics normalize the input and the running
    buffers (plain arrays, updated in place) move toward them. In eval mode
    the running buffers are used and must exist.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_ndim(x, 4, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must have shape ({c},)")
    g4 = gamma.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ShapeError("batch_norm: training mode needs at least 2 values per channel")
        xhat, mean, var, inv_std = _standardize(x.data, axes, eps)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.reshape(c)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c)

        def backward(g):
            gx = _standardize_backward(g * g4, xhat, inv_std, axes) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        if running_mean is None or running_var is None:
            raise RuntimeError("batch_norm: eval mode requires initialized running statistics")
        if np.shape(running_mean) != (c,) or np.shape(running_var) != (c,):
            raise ShapeError(f"batch_norm: running stats must have shape ({c},)")
        inv_std = (1.0 / np.sqrt(np.asarray(running_var) + eps)).reshape(1, c, 1, 1)
        xhat = (x.data - np.asarray(running_mean).reshape(1, c, 1, 1)) * inv_std

        def backward(g):
            gx = g * g4 * inv_std if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)
    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def instance_norm(x: Tensor, eps: float = IN_EPS) -> Tensor:
    """Standardize each (instance, channel) plane; no learnable affine."""
    x = as_tensor(x)
    _check_ndim(x, 4, "instance_norm")
    if x.shape[2] * x.shape[3] < 2:
        raise ShapeError("instance_norm needs at least 2 spatial positions")
    axes = (2, 3)
    xhat, _, _, inv_std = _standardize(x.data, axes, eps)
    return make_result(
        xhat, (x,), lambda g: (_standardize_backward(g, xhat, inv_std, axes),), "instance_norm"
    )


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route gradient to the first element in
    row-major scan order of the window."""
    x = as_tensor(x)
    _check_ndim(x, 4, "max_pool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward, "max_pool2x2")


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_ndim(x, 4, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest2x")


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_ndim(x, 4, "global_avg_pool")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of NC rows: ``x @ weight.T + bias`` with weight (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_ndim(x, 2, "fully_connected")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "fully_connected")


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_ndim(x, 2, "softmax")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 2 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), lambda g: (g[:, :ca].copy(), g[:, ca:].copy()), "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {x.shape[1]} channels")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


def dice_loss(pred: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss ``1 - (2 sum(P*G) + eps) / (sum P + sum G + eps)``."""
    pred = as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} and target {tgt.shape} differ")
    num = 2.0 * float((pred.data * tgt).sum()) + eps
    den = float(pred.data.sum()) + float(tgt.sum()) + eps
    loss = 1.0 - num / den

    def backward(g):
        # d/dP_i [-(num/den)] = -(2 G_i den - num) / den^2
        return (g * (num - 2.0 * tgt * den) / (den * den),)

    return make_result(np.asarray(loss), (pred,), backward, "dice_loss")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the labelled class; probabilities are
    floored at 1e-12."""
    probs = as_tensor(probs)
    _check_ndim(probs, 2, "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = probs.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    rows = np.arange(n)
    p = probs.data[rows, labels]
    clipped = np.maximum(p, PROB_FLOOR)
    loss = -np.log(clipped).mean()

    def backward(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(p > PROB_FLOOR, -1.0 / (n * clipped), 0.0)
        return (g * gp,)

    return make_result(np.asarray(loss), (probs,), backward, "cross_entropy")
