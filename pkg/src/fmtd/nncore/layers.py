"""Forward and backward passes for the layer vocabulary.

All arithmetic runs in float64 (parameters are stored as float32 and cast
on entry); reductions therefore accumulate in 64-bit.  Layouts are
channels-last: images are ``(n, h, w, c)``.

Convolutions are valid-padding, stride 1, implemented as im2col plus one
matmul.  Max pooling uses stride == pool size and drops trailing rows and
columns that do not fill a window; gradient is routed to the first maximum
of each window (deterministic tie-break).  Dropout is inverted dropout:
active only when a mask generator is supplied, identity otherwise.
"""

from __future__ import annotations

import numpy as np


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patch matrix of shape (n, oh, ow, kh*kw*c) for valid stride-1 windows."""
    n, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, oh, ow, kh, kw, c), strides=(s0, s1, s2, s1, s2, s3), writeable=False
    )
    return np.ascontiguousarray(view).reshape(n, oh, ow, kh * kw * c)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, relu: bool):
    """w has shape (kh, kw, c_in, filters); returns (out, cache)."""
    kh, kw, cin, f = w.shape
    cols = _im2col(x, kh, kw)
    n, oh, ow, k = cols.shape
    out = cols.reshape(n * oh * ow, k) @ w.reshape(k, f)
    out += b
    out = out.reshape(n, oh, ow, f)
    mask = None
    if relu:
        mask = out > 0.0
        out = np.where(mask, out, 0.0)
    cache = (x, w, mask)
    return out, cache


def conv_backward(dout: np.ndarray, cache):
    x, w, mask = cache
    if mask is not None:
        dout = np.where(mask, dout, 0.0)
    kh, kw, cin, f = w.shape
    cols = _im2col(x, kh, kw)
    n, oh, ow, k = cols.shape
    dflat = dout.reshape(n * oh * ow, f)
    dw = (cols.reshape(n * oh * ow, k).T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    # Scatter dcols back onto the input: one shifted slab per kernel offset.
    dcols = (dflat @ w.reshape(k, f).T).reshape(n, oh, ow, kh, kw, cin)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + oh, j : j + ow, :] += dcols[:, :, :, i, j, :]
    return dw, db, dx


def conv_backward_input(dout: np.ndarray, cache) -> np.ndarray:
    """Input gradient only; skips the dw/db matmuls."""
    x, w, mask = cache
    if mask is not None:
        dout = np.where(mask, dout, 0.0)
    kh, kw, cin, f = w.shape
    n, oh, ow, _ = dout.shape
    k = kh * kw * cin
    dcols = (dout.reshape(n * oh * ow, f) @ w.reshape(k, f).T).reshape(n, oh, ow, kh, kw, cin)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + oh, j : j + ow, :] += dcols[:, :, :, i, j, :]
    return dx


def pool_forward(x: np.ndarray, ph: int, pw: int):
    n, h, w, c = x.shape
    oh, ow = h // ph, w // pw
    xc = x[:, : oh * ph, : ow * pw, :]
    windows = (
        xc.reshape(n, oh, ph, ow, pw, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, oh, ow, ph * pw, c)
    )
    idx = windows.argmax(axis=3)
    out = np.take_along_axis(windows, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    cache = (x.shape, ph, pw, idx)
    return out, cache


def pool_backward(dout: np.ndarray, cache):
    shape, ph, pw, idx = cache
    n, h, w, c = shape
    oh, ow = h // ph, w // pw
    dwindows = np.zeros((n, oh, ow, ph * pw, c), dtype=dout.dtype)
    np.put_along_axis(dwindows, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, : oh * ph, : ow * pw, :] = (
        dwindows.reshape(n, oh, ow, ph, pw, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, oh * ph, ow * pw, c)
    )
    return dx


def dense_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    relu: bool,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
):
    """Flattens the input if needed; dropout fires only when a generator is given."""
    x2 = x.reshape(x.shape[0], -1)
    out = x2 @ w + b
    mask = None
    if relu:
        mask = out > 0.0
        out = np.where(mask, out, 0.0)
    drop = None
    if dropout_rng is not None and dropout_rate > 0.0:
        keep = 1.0 - dropout_rate
        drop = (dropout_rng.random(out.shape) < keep).astype(np.float64) / keep
        out = out * drop
    cache = (x.shape, x2, w, mask, drop)
    return out, cache


def dense_backward(dout: np.ndarray, cache):
    shape, x2, w, mask, drop = cache
    if drop is not None:
        dout = dout * drop
    if mask is not None:
        dout = np.where(mask, dout, 0.0)
    dw = x2.T @ dout
    db = dout.sum(axis=0)
    dx = (dout @ w.T).reshape(shape)
    return dw, db, dx


def dense_backward_input(dout: np.ndarray, cache) -> np.ndarray:
    shape, x2, w, mask, drop = cache
    if drop is not None:
        dout = dout * drop
    if mask is not None:
        dout = np.where(mask, dout, 0.0)
    return (dout @ w.T).reshape(shape)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
