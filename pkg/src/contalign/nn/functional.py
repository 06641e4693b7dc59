"""Layer primitives built on the autodiff core.

Convolutions use an im2col/col2im formulation so the heavy lifting is a
single matmul per call. The transposed convolution is implemented as the
exact adjoint of the forward convolution, which keeps the two consistent
under gradient checking.
"""

from __future__ import annotations

import numpy as np

from .autograd import DimensionError, Tensor

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "conv1d_channel",
    "layer_norm_2d",
    "linear",
    "softmax",
    "log_softmax",
    "global_avg_pool",
]


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Unfold (B,C,h,w) into (B, C*k*k, out_h*out_w) patch columns."""
    b, c, h, w = x.shape
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(
            f"conv output would be empty for input {x.shape} with k={k}, "
            f"stride={stride}, padding={padding}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, out_h * out_w)
    return np.ascontiguousarray(cols), out_h, out_w


def _col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    k: int,
    stride: int,
    padding: int,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    """Adjoint of `_im2col`: scatter-add patch columns back to (B,C,h,w)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    acc = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, k, k, out_h, out_w)
    for i in range(k):
        for j in range(k):
            acc[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols6[
                :, :, i, j
            ]
    if padding:
        acc = acc[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(acc)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of (B,Cin,h,w) with (Cout,Cin,k,k) filters."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-D input, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d expects square (Cout,Cin,k,k) weights, got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 != 1:
        raise DimensionError(f"conv2d kernel size must be odd, got k={k}")
    if x.shape[1] != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {c_in}"
        )

    cols, out_h, out_w = _im2col(x.data, k, stride, padding)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2[None], cols)  # (B, Cout, L)
    b_size = x.shape[0]
    out = out.reshape(b_size, c_out, out_h, out_w)

    def grad_x(g):
        gf = g.reshape(b_size, c_out, out_h * out_w)
        dcols = np.matmul(w2.T[None], gf)
        return _col2im(dcols, x.data.shape, k, stride, padding, out_h, out_w)

    def grad_w(g):
        gf = g.reshape(b_size, c_out, out_h * out_w)
        dw2 = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
        return dw2.reshape(weight.data.shape)

    parents = [x, weight]
    grad_fns = [grad_x, grad_w]
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
        parents.append(bias)
        grad_fns.append(lambda g: g.sum(axis=(0, 2, 3)))
    return Tensor._from_op(out, parents, grad_fns)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 1,
) -> Tensor:
    """Transposed convolution with (Cin,Cout,k,k) weights.

    Output spatial size is (h-1)*stride - 2*padding + k; with k=4, stride=2,
    padding=1 this exactly doubles the input resolution.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects a 4-D input, got {x.shape}")
    c_in, c_out, k, _ = weight.shape
    if x.shape[1] != c_in:
        raise DimensionError(
            f"conv_transpose2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {c_in}"
        )
    b_size, _, h, w = x.shape
    out_h = (h - 1) * stride - 2 * padding + k
    out_w = (w - 1) * stride - 2 * padding + k

    w2 = weight.data.reshape(c_in, c_out * k * k)
    xf = x.data.reshape(b_size, c_in, h * w)
    cols = np.matmul(w2.T[None], xf)  # (B, Cout*k*k, h*w)
    out = _col2im(cols, (b_size, c_out, out_h, out_w), k, stride, padding, h, w)

    def grad_x(g):
        gcols, gh, gw = _im2col(g, k, stride, padding)
        assert (gh, gw) == (h, w)
        dxf = np.matmul(w2[None], gcols)
        return dxf.reshape(x.data.shape)

    def grad_w(g):
        gcols, _, _ = _im2col(g, k, stride, padding)
        dw2 = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0)
        return dw2.reshape(weight.data.shape)

    parents = [x, weight]
    grad_fns = [grad_x, grad_w]
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
        parents.append(bias)
        grad_fns.append(lambda g: g.sum(axis=(0, 2, 3)))
    return Tensor._from_op(out, parents, grad_fns)


def conv1d_channel(x: Tensor, weight: Tensor) -> Tensor:
    """Per-sample 1-D convolution over the channel axis of (B,C) descriptors.

    Zero padding of (k-1)/2 keeps the output length at C. Used to mix a
    pooled channel descriptor with its neighbours before gating.
    """
    w = weight.data.reshape(-1)
    k = w.shape[0]
    if k % 2 != 1:
        raise DimensionError(f"conv1d_channel kernel size must be odd, got k={k}")
    if x.ndim != 2:
        raise DimensionError(f"conv1d_channel expects a (B,C) input, got {x.shape}")
    c = x.shape[1]
    if k > c:
        raise DimensionError(f"conv1d_channel kernel k={k} exceeds channel count C={c}")
    m = (k - 1) // 2

    xp = np.pad(x.data, ((0, 0), (m, m)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, C, k)
    out = win @ w

    def grad_x(g):
        gp = np.pad(g, ((0, 0), (m, m)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=1)
        return gwin @ w[::-1]

    def grad_w(g):
        dw = np.einsum("bc,bck->k", g, win)
        return dw.reshape(weight.data.shape)

    return Tensor._from_op(out, (x, weight), (grad_x, grad_w))


def layer_norm_2d(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Channel-wise layer norm on (B,C,h,w): per sample and position, the
    C values are shifted to mean 0 and scaled to variance 1 before the
    per-channel affine transform."""
    if eps <= 0:
        raise ValueError(f"layer_norm_2d eps must be positive, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"layer_norm_2d expects a 4-D input, got {x.shape}")
    c = x.shape[1]
    if gain.size != c or bias.size != c:
        raise DimensionError(
            f"layer_norm_2d affine parameters must have {c} entries"
        )
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gain.reshape(1, c, 1, 1) + bias.reshape(1, c, 1, 1)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of (B,Din) rows with (Din,Dout) weights."""
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = (x - Tensor(shift, dtype=x.dtype)).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    shifted = x - Tensor(shift, dtype=x.dtype)
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def global_avg_pool(x: Tensor) -> Tensor:
    """Adaptive global average pooling of (B,C,h,w) to (B,C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3))
