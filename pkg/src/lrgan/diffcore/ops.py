"""Differentiable network operations: convolutions, pooling, normalization.

Convolutions are lowered to matrix products through im2col/col2im so the
heavy lifting happens in BLAS. conv2d_transposed is implemented as the
exact adjoint of conv2d (same index maps, scatter instead of gather),
which is what the inner-product identity tests rely on.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import DimensionError, Tensor, _as_tensor, make_op, sigmoid, tanh


def _conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _to_nhwc_padded(x: np.ndarray, pad: int) -> np.ndarray:
    """(N,C,H,W) -> padded contiguous (N,H+2p,W+2p,C)."""
    n, c, h, w = x.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return out


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int):
    """(N,C,H,W) -> (N, Ho, Wo, K, K, C) patch tensor.

    The channel axis is innermost so every slice copy below streams over
    contiguous memory; matching weight matrices use the same (ky, kx, C)
    ordering. For stride 2 the padded input is split into parity planes
    first, turning the strided gathers into dense-row copies.
    """
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kernel, stride, pad)
    wo = _conv_out_size(w, kernel, stride, pad)
    xp = _to_nhwc_padded(x, pad)
    cols = np.empty((n, ho, wo, kernel, kernel, c), dtype=x.dtype)
    if stride == 2:
        planes = [[np.ascontiguousarray(xp[:, py::2, px::2, :]) for px in range(2)]
                  for py in range(2)]
        for ky in range(kernel):
            for kx in range(kernel):
                plane = planes[ky % 2][kx % 2]
                a, b = ky // 2, kx // 2
                cols[:, :, :, ky, kx, :] = plane[:, a:a + ho, b:b + wo, :]
    else:
        for ky in range(kernel):
            for kx in range(kernel):
                cols[:, :, :, ky, kx, :] = xp[:, ky:ky + stride * ho:stride,
                                              kx:kx + stride * wo:stride, :]
    return cols, ho, wo


def _col2im(cols: np.ndarray, out_shape, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (N,Ho,Wo,K,K,C) patches onto an
    (N,C,H,W) canvas. For stride 2 the kernel offsets are grouped by output
    parity so each canvas cell is written once instead of K*K times."""
    n, c, h, w = out_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    cols6 = cols.reshape(n, ho, wo, kernel, kernel, c)
    if stride == 2 and kernel % 2 == 0 and (hp - kernel) % 2 == 0 and (wp - kernel) % 2 == 0:
        kh = kernel // 2
        canvas = np.empty((n, hp, wp, c), dtype=cols.dtype)
        for py in range(2):
            for px in range(2):
                plane = np.zeros((n, ho + kh - 1, wo + kh - 1, c), dtype=cols.dtype)
                for a in range(kh):
                    for b in range(kh):
                        plane[:, a:a + ho, b:b + wo, :] += cols6[:, :, :, py + 2 * a, px + 2 * b, :]
                canvas[:, py::2, px::2, :] = plane
    else:
        canvas = np.zeros((n, hp, wp, c), dtype=cols.dtype)
        for ky in range(kernel):
            for kx in range(kernel):
                canvas[:, ky:ky + stride * ho:stride,
                       kx:kx + stride * wo:stride, :] += cols6[:, :, :, ky, kx, :]
    if pad:
        canvas = canvas[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(canvas.transpose(0, 3, 1, 2))


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (C_out, C_in, K, K) kernel."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    n, cin, h, w = x.shape
    cout, cw, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"square kernels only, got {kh}x{kw}")
    if cw != cin:
        raise DimensionError(
            f"channel axis mismatch: input has {cin} channels (axis 1), kernel expects {cw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"spatial axes too small: input {h}x{w} with padding {padding} against kernel {kh}")
    k = kh
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    cols2 = cols.reshape(n * ho * wo, k * k * cin)
    # weight in the cols ordering: (ky, kx, C_in) rows, C_out columns
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(k * k * cin, cout)
    out = (cols2 @ wmat).reshape(n, ho, wo, cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        dw = None
        if weight.requires_grad:
            dw = np.ascontiguousarray(
                (cols2.T @ g2).reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
        dx = None
        if x.requires_grad:
            dx = _col2im(g2 @ wmat.T, x.shape, k, stride, padding)
        return dx, dw

    return make_op(out, (x, weight), bw)


def conv2d_transposed(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Fractionally-strided convolution; adjoint of conv2d with the same weight.

    ``weight`` has shape (C_in, C_out, K, K) from this op's perspective, so a
    conv2d kernel of shape (C_out, C_in, K, K) can be passed unchanged to map
    back from C_out to C_in.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    n, cin, h, w = x.shape
    cw, cout, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"square kernels only, got {kh}x{kw}")
    if cw != cin:
        raise DimensionError(
            f"channel axis mismatch: input has {cin} channels (axis 1), kernel expects {cw}")
    k = kh
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"output spatial size {ho}x{wo} is empty; check stride/padding")
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, cin)
    # weight in cols ordering: C_in rows, (ky, kx, C_out) columns
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(cin, k * k * cout)
    cols = x2 @ wmat
    out = _col2im(cols, (n, cout, ho, wo), k, stride, padding)

    def bw(g):
        gcols, _, _ = _im2col(g, k, stride, padding)  # (N, H, W, K, K, Cout)
        gcols2 = gcols.reshape(n * h * w, k * k * cout)
        dx = None
        if x.requires_grad:
            dx2 = gcols2 @ wmat.T
            dx = np.ascontiguousarray(dx2.reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        dw = None
        if weight.requires_grad:
            dw = np.ascontiguousarray(
                (x2.T @ gcols2).reshape(cin, k, k, cout).transpose(0, 3, 1, 2))
        return dx, dw

    return make_op(out, (x, weight), bw)


def avg_pool(x, kernel: int, stride: int) -> Tensor:
    """Mean over non-overlapping (or strided) windows; no padding."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h < kernel or w < kernel or (h - kernel) % stride or (w - kernel) % stride:
        raise DimensionError(
            f"spatial size {h}x{w} not divisible by kernel {kernel}/stride {stride} without padding")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = win.mean(axis=(-2, -1))

    def bw(g):
        scale = 1.0 / (kernel * kernel)
        gh = (g * scale).transpose(0, 2, 3, 1)  # (N, Ho, Wo, C)
        patch = np.broadcast_to(gh[:, :, :, None, None, :],
                                (n, ho, wo, kernel, kernel, c))
        return (_col2im(np.ascontiguousarray(patch), x.shape, kernel, stride, 0),)

    return make_op(np.ascontiguousarray(out), (x,), bw)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map x @ W^T + b with W of shape (out_features, in_features)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 2:
        raise DimensionError(f"linear expects a 2-d input, got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"inner axis mismatch: input axis 1 is {x.shape[1]}, weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [g @ weight.data if x.requires_grad else None,
                 g.T @ x.data if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_op(out, parents, bw)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N,) or (N, H, W) per channel.

    In training mode the batch statistics normalize the activations and the
    running buffers are updated in place (unbiased variance, momentum
    convention ``new = (1 - m) * old + m * batch``). Eval mode normalizes
    with the stored running statistics.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    if x.ndim == 4:
        axes = (0, 2, 3)
        cshape = (1, -1, 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        cshape = (1, -1)
    else:
        raise DimensionError(f"batch_norm expects 2-d or 4-d input, got shape {x.shape}")
    if x.shape[1] != gamma.size:
        raise DimensionError(
            f"channel axis mismatch: input has {x.shape[1]} channels, gamma has {gamma.size}")

    gm = gamma.data.reshape(cshape)
    bt = beta.data.reshape(cshape)

    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // x.shape[1]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(cshape)) * inv_std.reshape(cshape)
        out = gm * xhat + bt
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)

        def bw(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gm
            m = float(count)
            dx = (inv_std.reshape(cshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx, dgamma, dbeta

        return make_op(out, (x, gamma, beta), bw)

    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    xn = (x.data - running_mean.reshape(cshape).astype(x.dtype)) * inv_std.reshape(cshape)
    out = gm * xn + bt

    def bw_eval(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xn).sum(axis=axes)
        dx = g * gm * inv_std.reshape(cshape)
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), bw_eval)


def lstm_cell(z, h_prev, c_prev, w_ih, w_hh, bias):
    """One step of a standard LSTM cell; gate order is (input, forget, cell, output).

    Built from differentiable primitives, so unrolled sequences backprop
    through time with no extra machinery.
    """
    z = _as_tensor(z)
    h_prev = _as_tensor(h_prev)
    c_prev = _as_tensor(c_prev)
    if not (z.shape[0] == h_prev.shape[0] == c_prev.shape[0]):
        raise DimensionError(
            f"batch axis mismatch: z {z.shape[0]}, h {h_prev.shape[0]}, c {c_prev.shape[0]}")
    hidden = h_prev.shape[1]
    if w_ih.shape[0] != 4 * hidden:
        raise DimensionError(
            f"w_ih axis 0 must be 4*hidden={4 * hidden}, got {w_ih.shape[0]}")
    pre = linear(z, w_ih, bias) + linear(h_prev, w_hh, None)
    i = sigmoid(pre[:, 0 * hidden:1 * hidden])
    f = sigmoid(pre[:, 1 * hidden:2 * hidden])
    g = tanh(pre[:, 2 * hidden:3 * hidden])
    o = sigmoid(pre[:, 3 * hidden:4 * hidden])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def log_softmax(x, axis: int = 1) -> Tensor:
    """Row-stable log-softmax."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), bw)
