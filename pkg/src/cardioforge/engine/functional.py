"""Differentiable layer functions over [N, C, T] and [N, F] tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, add, as_tensor, make_node, matmul


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. weight is [C_out, C_in, K]."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d input {x.shape} vs weight {weight.shape}")
    N, C, T = x.shape
    O, _, K = weight.shape
    Tp = T + 2 * padding
    if Tp < K:
        raise ShapeError(f"kernel {K} longer than padded input {Tp}")
    T_out = (Tp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :T_out]  # [N, C, T_out, K]
    cols = cols.transpose(0, 2, 1, 3).reshape(N * T_out, C * K)
    w2 = weight.data.reshape(O, C * K)
    out = (cols @ w2.T).reshape(N, T_out, O).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(N * T_out, O)
        gw = (g2.T @ cols).reshape(O, C, K)
        gcols = (g2 @ w2).reshape(N, T_out, C, K)
        gxp = np.zeros(xp.shape)
        span = stride * (T_out - 1) + 1
        for k in range(K):
            gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + T] if padding else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, bw)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of conv1d). weight is [C_in, C_out, K]."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose1d input {x.shape} vs weight {weight.shape}")
    N, C, T = x.shape
    _, O, K = weight.shape
    full_len = (T - 1) * stride + K
    T_out = full_len - 2 * padding
    if T_out < 1:
        raise ShapeError("transposed convolution output would be empty")
    span = stride * (T - 1) + 1
    xt = x.data.transpose(0, 2, 1).reshape(N * T, C)
    w2 = weight.data.reshape(C, O * K)
    y = (xt @ w2).reshape(N, T, O, K)
    full = np.zeros((N, O, full_len))
    for k in range(K):
        full[:, :, k : k + span : stride] += y[:, :, :, k].transpose(0, 2, 1)
    out = full[:, :, padding : padding + T_out]
    if bias is not None:
        out = out + bias.data[None, :, None]

    def bw(g):
        gfull = np.zeros((N, O, full_len))
        gfull[:, :, padding : padding + T_out] = g
        G = np.empty((N, T, O, K))
        for k in range(K):
            G[:, :, :, k] = gfull[:, :, k : k + span : stride].transpose(0, 2, 1)
        G2 = G.reshape(N * T, O * K)
        gx = (G2 @ w2.T).reshape(N, T, C).transpose(0, 2, 1)
        gw = (xt.T @ G2).reshape(C, O, K)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over batch (and time) axes.

    In training mode the running buffers are updated in place; the running
    variance uses the unbiased batch estimate.
    """
    if x.ndim not in (2, 3):
        raise ShapeError(f"batch_norm expects [N, C] or [N, C, T], got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            m = x.size // x.shape[1]
            gx = (inv.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(shape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, slope * x.data), (x,), lambda g: (np.where(mask, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return make_node(out, (x,), lambda g: (g * (1.0 - _sigmoid(v)),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return make_node(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight shaped [out, in]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input {x.shape} vs weight {weight.shape}")
    out = make_node(x.data @ weight.data.T, (x, weight), lambda g: (g @ weight.data, g.T @ x.data))
    return add(out, bias) if bias is not None else out


def max_pool1d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or size
    N, C, T = x.shape
    T_out = (T - size) // stride + 1
    if T_out < 1:
        raise ShapeError(f"pool size {size} longer than input {T}")
    win = sliding_window_view(x.data, size, axis=2)[:, :, ::stride][:, :, :T_out]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    src = arg + stride * np.arange(T_out)[None, None, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        n_idx, c_idx, _ = np.indices(src.shape)
        np.add.at(gx, (n_idx, c_idx, src), g)
        return (gx,)

    return make_node(out, (x,), bw)


def crop(x: Tensor, length: int) -> Tensor:
    """Keep the first ``length`` samples along the last axis."""
    if x.shape[-1] == length:
        return x
    return x[..., :length]


def binary_cross_entropy_logits(logits: Tensor, target: float) -> Tensor:
    """Mean of -log p (target 1) or -log(1 - p) (target 0) with p = sigmoid(logits)."""
    from .tensor import mean, neg

    if target == 1:
        return neg(mean(log_sigmoid(logits)))
    if target == 0:
        return neg(mean(log_sigmoid(neg(as_tensor(logits)))))
    raise ValueError("target must be 0 or 1")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    from .tensor import mean, neg

    lp = log_softmax(logits, axis=1)
    picked = lp[np.arange(len(labels)), np.asarray(labels)]
    return neg(mean(picked))
