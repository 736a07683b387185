"""Differentiable primitives: convolution, normalization, activations, losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dmeta.errors import InvalidArgumentError
from dmeta.tensor.tape import Tensor, as_tensor, make_output

PROB_FLOOR = 1e-8
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _check(cond, msg):
    if not cond:
        raise InvalidArgumentError(msg)


# -- elementwise helpers ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    return make_output(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, factor):
    x = as_tensor(x)
    f = x.data.dtype.type(factor)
    return make_output(x.data * f, (x,), lambda g: (g * f,))


def reshape(x, shape):
    orig = x.shape
    return make_output(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def mean(x):
    n = x.data.size
    return make_output(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


# -- layout ------------------------------------------------------------------


def transpose(x, axes):
    inv = np.argsort(axes)
    return make_output(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def to_channels_last(x):
    return transpose(x, (0, 2, 3, 1))


def to_channels_first(x):
    return transpose(x, (0, 3, 1, 2))


def _layout_wrapped(fn_nhwc, x, *args, layout="NCHW", **kw):
    if layout == "NHWC":
        return fn_nhwc(x, *args, **kw)
    _check(layout == "NCHW", f"unknown layout {layout!r}")
    _check(x.data.ndim == 4, f"expected 4-d input, got {x.shape}")
    return to_channels_first(fn_nhwc(to_channels_last(x), *args, **kw))


# -- convolution -------------------------------------------------------------


def _same_padding(size, stride, k):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv2d_nhwc(x, kernel, bias, stride):
    _check(x.data.ndim == 4, f"conv2d: expected 4-d input, got {x.shape}")
    _check(kernel.data.ndim == 4, f"conv2d: expected 4-d kernel, got {kernel.shape}")
    B, H, W, C = x.shape
    F, Ck, kh, kw = kernel.shape
    _check(C == Ck, f"conv2d: input has {C} channels, kernel expects {Ck}")
    _check(bias.shape == (F,), f"conv2d: bias shape {bias.shape} != ({F},)")
    oh, pt, pb = _same_padding(H, stride, kh)
    ow, pl, pr = _same_padding(W, stride, kw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    # [B, oh, ow, C, kh, kw] windows -> rows of the im2col matrix
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = win.reshape(B * oh * ow, C * kh * kw)
    wmat = kernel.data.reshape(F, -1)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(B, oh, ow, F)

    def backward(g):
        gf = g.reshape(-1, F)
        gk = (gf.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gf.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gf @ wmat).reshape(B, oh, ow, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = stride * oh, stride * ow
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + hs : stride, j : j + ws : stride, :] += gcols[..., i, j]
            gx = gxp[:, pt : pt + H, pl : pl + W, :]
        return gx, gk, gb

    return make_output(out, (x, kernel, bias), backward)


def conv2d(x, kernel, bias, stride=1, layout="NCHW"):
    """3x3 'same'-padded convolution; ``kernel`` is [filters, channels, 3, 3].

    Output extent is ceil(size/stride); odd padding goes to the bottom/right
    edge. ``layout="NHWC"`` skips the internal transposes.
    """
    return _layout_wrapped(_conv2d_nhwc, x, kernel, bias, stride, layout=layout)


# -- normalization ----------------------------------------------------------


def _batchnorm_nhwc(x, gamma, beta, running_mean, running_var, use_batch_stats, update_stats, eps, momentum,
                    unbiased):
    _check(x.data.ndim == 4, f"batchnorm: expected 4-d input, got {x.shape}")
    B, H, W, F = x.shape
    _check(gamma.shape == (F,) and beta.shape == (F,), "batchnorm: gamma/beta must have one entry per channel")
    xd = x.data
    n = B * H * W
    if use_batch_stats:
        _check(n >= 2, "batchnorm: batch statistics need at least 2 values per channel")
        mu = xd.mean(axis=(0, 1, 2))
        var = xd.var(axis=(0, 1, 2))
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var * (n / (n - 1) if unbiased else 1.0)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 1, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 1, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if use_batch_stats:
                s1 = gxhat.sum(axis=(0, 1, 2))
                s2 = (gxhat * xhat).sum(axis=(0, 1, 2))
                gx = (gxhat - s1 / n - xhat * (s2 / n)) * inv_std
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_output(out, (x, gamma, beta), backward)


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, use_batch_stats=True,
              update_stats=False, eps=BN_EPS, momentum=BN_MOMENTUM, unbiased=True, layout="NCHW"):
    """Per-channel batch normalization.

    With ``use_batch_stats`` the batch mean/variance normalize the input and,
    if ``update_stats`` is set, the running buffers are updated in place.
    Otherwise the running buffers are used as fixed statistics. Running
    variance uses the unbiased batch estimate unless ``unbiased=False``.
    """
    if update_stats or not use_batch_stats:
        _check(running_mean is not None and running_var is not None, "batchnorm: running buffers required")
    return _layout_wrapped(_batchnorm_nhwc, x, gamma, beta, running_mean, running_var,
                           use_batch_stats, update_stats, eps, momentum, unbiased, layout=layout)


# -- activations and pooling ------------------------------------------------


def relu(x):
    mask = (x.data > 0).astype(x.dtype)
    return make_output(x.data * mask, (x,), lambda g: (g * mask,))


def _maxpool_nhwc(x):
    _check(x.data.ndim == 4, f"maxpool2x2: expected 4-d input, got {x.shape}")
    B, H, W, C = x.shape
    oh, ow = -(-H // 2), -(-W // 2)
    xp = x.data
    if (2 * oh, 2 * ow) != (H, W):
        xp = np.pad(xp, ((0, 0), (0, 2 * oh - H), (0, 2 * ow - W), (0, 0)), constant_values=-np.inf)
    blocks = xp.reshape(B, oh, 2, ow, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, oh, ow, C, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, oh, ow, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * oh, 2 * ow, C)
        return (gx[:, :H, :W, :],)

    return make_output(out, (x,), backward)


def maxpool2x2(x, layout="NCHW"):
    """2x2 max pooling, stride 2; odd extents are padded so the output is ceil(size/2).

    The adjoint goes to the first maximal element of each window.
    """
    return _layout_wrapped(_maxpool_nhwc, x, layout=layout)


def fully_connected(x, weight, bias):
    """Affine map ``x @ weight + bias`` with ``weight`` of shape [in, out]."""
    _check(x.data.ndim == 2, f"fully_connected: expected 2-d input, got {x.shape}")
    _check(weight.data.ndim == 2 and weight.shape[0] == x.shape[1],
           f"fully_connected: weight {weight.shape} incompatible with input {x.shape}")
    _check(bias.shape == (weight.shape[1],), f"fully_connected: bias shape {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_output(out, (x, weight, bias), backward)


def softmax(x):
    _check(x.data.ndim == 2, f"softmax: expected [batch, classes], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_output(s, (x,), backward)


def dropout(x, rate, rng):
    """Zero each element with probability ``rate``; survivors scaled by 1/(1-rate)."""
    _check(0.0 <= rate < 1.0, f"dropout: rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_output(x.data * keep, (x,), lambda g: (g * keep,))


# -- losses -----------------------------------------------------------------


def cross_entropy(probs, target):
    """Mean over the batch of ``-sum(target * log(probs))``.

    ``target`` is a constant array of row-normalized distributions.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    _check(probs.data.ndim == 2 and target.shape == probs.shape,
           f"cross_entropy: shapes {probs.shape} and {target.shape} differ")
    sums = target.sum(axis=1)
    _check(np.all(np.abs(sums - 1.0) <= 1e-4), "cross_entropy: target rows must sum to 1")
    target = target.astype(probs.dtype, copy=False)
    p = probs.data
    pc = np.maximum(p, PROB_FLOOR)
    B = p.shape[0]
    loss = -(target * np.log(pc)).sum() / B

    def backward(g):
        return (g * (-target / pc) * (p > PROB_FLOOR) / B,)

    return make_output(np.asarray(loss, dtype=p.dtype), (probs,), backward)


def js_divergence(p, q):
    """Mean over the batch of the Jensen-Shannon divergence (natural log).

    Both arguments are floored at 1e-8 before the mixture and logs, so the
    value lies in [0, ln 2].
    """
    p, q = as_tensor(p), as_tensor(q)
    _check(p.data.ndim == 2 and p.shape == q.shape, f"js_divergence: shapes {p.shape} and {q.shape} differ")
    pc = np.maximum(p.data, PROB_FLOOR)
    qc = np.maximum(q.data, PROB_FLOOR)
    m = 0.5 * (pc + qc)
    lp = np.log(pc / m)
    lq = np.log(qc / m)
    B = pc.shape[0]
    val = 0.5 * ((pc * lp).sum() + (qc * lq).sum()) / B

    def backward(g):
        gp = g * 0.5 * lp * (p.data > PROB_FLOOR) / B if p.requires_grad else None
        gq = g * 0.5 * lq * (q.data > PROB_FLOOR) / B if q.requires_grad else None
        return gp, gq

    return make_output(np.asarray(val, dtype=pc.dtype), (p, q), backward)


def one_hot(indices, num_classes, dtype=np.float32):
    out = np.zeros((len(indices), num_classes), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1
    return out
