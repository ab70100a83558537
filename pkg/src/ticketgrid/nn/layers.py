"""Layer kernels: convolution (im2col), 2x2 max pooling, dense, ReLU and
softmax cross-entropy.

All kernels take batched NCHW (or N,D for dense) arrays; a single sample
without the batch axis is accepted and the output keeps that shape. Kernels
compute in the dtype of their inputs, so gradient checks can run the same
code at float64 while the engine trains at float32.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def _batched(x: np.ndarray, want_ndim: int) -> tuple[np.ndarray, bool]:
    # Accept a single sample (one axis short) and remember to squeeze later.
    if x.ndim == want_ndim - 1:
        return x[None], True
    if x.ndim == want_ndim:
        return x, False
    raise ShapeError(f"expected {want_ndim - 1}D or {want_ndim}D input, got shape {x.shape}")


def im2col(x: np.ndarray, fh: int, fw: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (N*OH*OW, C*fh*fw) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - fh) // stride + 1
    ow = (w + 2 * pad - fw) // stride + 1
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((n, c, fh, fw, oh, ow), dtype=x.dtype)
    for i in range(fh):
        i_max = i + stride * oh
        for j in range(fw):
            j_max = j + stride * ow
            col[:, :, i, j] = img[:, :, i:i_max:stride, j:j_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)


def col2im(
    col: np.ndarray, x_shape: tuple, fh: int, fw: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (N,C,H,W)."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - fh) // stride + 1
    ow = (w + 2 * pad - fw) // stride + 1
    col = col.reshape(n, oh, ow, c, fh, fw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(fh):
        i_max = i + stride * oh
        for j in range(fw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j]
    return img[:, :, pad : pad + h, pad : pad + w]


# -- convolution --------------------------------------------------------------


def conv_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 2
) -> tuple[np.ndarray, tuple]:
    """Cross-correlate x (N,C,H,W or C,H,W) with filters w (F,C,fh,fw)."""
    x4, squeeze = _batched(x, 4)
    fn, c, fh, fw = w.shape
    n, xc, h, wd = x4.shape
    if xc != c:
        raise ShapeError(f"input has {xc} channels, filters expect {c}")
    if b.shape != (fn,):
        raise ShapeError(f"bias shape {b.shape} != ({fn},)")
    oh = (h + 2 * pad - fh) // stride + 1
    ow = (wd + 2 * pad - fw) // stride + 1
    col = im2col(x4, fh, fw, stride, pad)
    w2d = w.reshape(fn, -1)
    out = col @ w2d.T + b
    y = out.reshape(n, oh, ow, fn).transpose(0, 3, 1, 2)
    cache = (x4.shape, col, w, stride, pad, squeeze)
    return (y[0] if squeeze else y), cache


def conv_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_shape, col, w, stride, pad, squeeze = cache
    fn, c, fh, fw = w.shape
    dy4, _ = _batched(dy, 4)
    dy2d = dy4.transpose(0, 2, 3, 1).reshape(-1, fn)
    db = dy2d.sum(axis=0)
    dw = (col.T @ dy2d).T.reshape(fn, c, fh, fw)
    dcol = dy2d @ w.reshape(fn, -1)
    dx = col2im(dcol, x_shape, fh, fw, stride, pad)
    return (dx[0] if squeeze else dx), dw, db


# -- max pooling ---------------------------------------------------------------


def maxpool_forward(x: np.ndarray, window: int = 2, stride: int = 2) -> tuple[np.ndarray, tuple]:
    """2x2/2 max pooling; spatial dims must divide evenly by the window."""
    if window != stride:
        raise ShapeError("only non-overlapping pooling (window == stride) is supported")
    x4, squeeze = _batched(x, 4)
    n, c, h, w = x4.shape
    if h % window or w % window:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by window {window}")
    oh, ow = h // stride, w // stride
    # (N,C,OH,window,OW,window) view; argmax over the window picks the first
    # maximum in row-major order, which fixes tie-breaking deterministically.
    win = x4.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (x4.shape, arg, window, stride, squeeze)
    return (y[0] if squeeze else y), cache


def maxpool_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    x_shape, arg, window, stride, squeeze = cache
    n, c, h, w = x_shape
    oh, ow = h // stride, w // stride
    dflat = np.zeros((n, c, oh, ow, window * window), dtype=dy.dtype)
    dy4, _ = _batched(dy, 4)
    np.put_along_axis(dflat, arg[..., None], dy4[..., None], axis=-1)
    dx = (
        dflat.reshape(n, c, oh, ow, window, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
    return dx[0] if squeeze else dx


# -- dense ---------------------------------------------------------------------


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Affine map y = x @ w.T + b with w (out_dim, in_dim); input of any rank
    is flattened per sample."""
    out_dim, in_dim = w.shape
    if b.shape != (out_dim,):
        raise ShapeError(f"bias shape {b.shape} != ({out_dim},)")
    # NCHW convention: ndim 1 (D,) and 3 (C,H,W) are single samples,
    # ndim 2 (N,D) and 4 (N,C,H,W) are batches.
    single = x.ndim in (1, 3)
    x2d = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if x2d.shape[1] != in_dim:
        raise ShapeError(f"input flattens to {x2d.shape[1]}, weights expect {in_dim}")
    y = x2d @ w.T + b
    cache = (x.shape, x2d, w, single)
    return (y[0] if single else y), cache


def fc_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_shape, x2d, w, single = cache
    dy2d = dy.reshape(1, -1) if single else dy
    db = dy2d.sum(axis=0)
    dw = dy2d.T @ x2d
    dx = (dy2d @ w).reshape(x_shape)
    return dx, dw, db


# -- activation ------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


# -- loss -------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Accepts a single logit vector with a scalar label or an (N,K) batch with
    N labels. dlogits = (softmax - onehot)/N, the gradient of the mean loss.
    """
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"{n} samples but {y.shape} labels")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    p = softmax(z)
    # log-sum-exp form keeps the loss exact even when p underflows
    m = z.max(axis=-1)
    logp = z[np.arange(n), y] - m - np.log(np.exp(z - m[:, None]).sum(axis=-1))
    loss = float(-logp.mean())
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, (dlogits[0] if single else dlogits)


# -- layer objects ----------------------------------------------------------------
#
# Thin stateful wrappers over the kernels; a Network composes them. Parameters
# live in .params, gradients of the last backward in .grads.


class Layer:
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 2):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.params = {"w": w, "b": b}

    def forward(self, x):
        y, self._cache = conv_forward(x, self.params["w"], self.params["b"], self.stride, self.pad)
        return y

    def backward(self, dy):
        dx, dw, db = conv_backward(dy, self._cache)
        self.grads = {"w": dw, "b": db}
        return dx

    def out_shape(self, in_shape):
        fn, c, fh, fw = self.params["w"].shape
        ci, h, w = in_shape
        if ci != c:
            raise ShapeError(f"conv expects {c} channels, got input shape {in_shape}")
        oh = (h + 2 * self.pad - fh) // self.stride + 1
        ow = (w + 2 * self.pad - fw) // self.stride + 1
        return (fn, oh, ow)


class MaxPool(Layer):
    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        self.window = window
        self.stride = stride

    def forward(self, x):
        y, self._cache = maxpool_forward(x, self.window, self.stride)
        return y

    def backward(self, dy):
        return maxpool_backward(dy, self._cache)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.window or w % self.window:
            raise ShapeError(f"pool window {self.window} does not divide {in_shape}")
        return (c, h // self.stride, w // self.stride)


class Relu(Layer):
    def forward(self, x):
        y, self._cache = relu_forward(x)
        return y

    def backward(self, dy):
        return relu_backward(dy, self._cache)

    def out_shape(self, in_shape):
        return in_shape


class Dense(Layer):
    def __init__(self, w: np.ndarray, b: np.ndarray):
        super().__init__()
        self.params = {"w": w, "b": b}

    def forward(self, x):
        y, self._cache = fc_forward(x, self.params["w"], self.params["b"])
        return y

    def backward(self, dy):
        dx, dw, db = fc_backward(dy, self._cache)
        self.grads = {"w": dw, "b": db}
        return dx

    def out_shape(self, in_shape):
        out_dim, in_dim = self.params["w"].shape
        if int(np.prod(in_shape)) != in_dim:
            raise ShapeError(f"dense expects {in_dim} inputs, got shape {in_shape}")
        return (out_dim,)
