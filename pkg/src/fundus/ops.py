"""Dense layer primitives with explicit backward passes.

Everything operates on float64 ndarrays in (H, W, C) layout; convolution
kernels are (k, k, C_in, C_out). There is no autodiff graph: each forward
operation has a matching hand-written backward, which the tests verify
against central finite differences.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fundus.validation import as_float_array


@dataclass
class LayerGradients:
    """Gradients of one convolution layer: parameters plus the input."""

    kernel_grad: np.ndarray
    bias_grad: np.ndarray
    input_grad: np.ndarray


@dataclass
class SymmetricEigenResult:
    """Eigenvalues (descending) and the matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _check_conv_args(x, kernels, bias):
    x = as_float_array(x, "input")
    kernels = as_float_array(kernels, "kernels")
    if x.ndim != 3:
        raise ValueError(f"input must be (H, W, C_in), got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ValueError(f"kernels must be (k, k, C_in, C_out), got shape {kernels.shape}")
    k = kernels.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[2] != kernels.shape[2]:
        raise ValueError(
            f"input has {x.shape[2]} channels but kernels expect {kernels.shape[2]}"
        )
    if bias is not None:
        bias = as_float_array(bias, "bias")
        if bias.shape != (kernels.shape[3],):
            raise ValueError(
                f"bias must have shape ({kernels.shape[3]},), got {bias.shape}"
            )
    return x, kernels, bias


def _pad_amount(k, padding):
    if padding == "same":
        return (k - 1) // 2
    if padding == "valid":
        return 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(x, k, padding):
    """Unfold (H, W, C) into (H_out * W_out, k*k*C) patch rows.

    Patch elements are ordered (ki, kj, c) to match a row-major reshape of
    the (k, k, C_in, C_out) kernel tensor.
    """
    p = _pad_amount(k, padding)
    if p:
        x = np.pad(x, ((p, p), (p, p), (0, 0)))
    H, W, C = x.shape
    if H < k or W < k:
        raise ValueError(f"input {H}x{W} too small for {k}x{k} kernel with padding=valid")
    win = sliding_window_view(x, (k, k), axis=(0, 1))  # (Ho, Wo, C, k, k)
    Ho, Wo = win.shape[0], win.shape[1]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(Ho * Wo, k * k * C)
    return cols, Ho, Wo


def conv2d_forward(x, kernels, bias=None, padding="same"):
    """2-D cross-correlation of (H, W, C_in) with (k, k, C_in, C_out) kernels."""
    x, kernels, bias = _check_conv_args(x, kernels, bias)
    k, cout = kernels.shape[0], kernels.shape[3]
    cols, Ho, Wo = _im2col(x, k, padding)
    out = cols @ kernels.reshape(-1, cout)
    if bias is not None:
        out += bias
    return out.reshape(Ho, Wo, cout)


def conv2d_backward(x, kernels, upstream, padding="same"):
    """Gradients of conv2d_forward w.r.t. kernels, bias, and input."""
    x, kernels, _ = _check_conv_args(x, kernels, None)
    upstream = as_float_array(upstream, "upstream")
    k, cin, cout = kernels.shape[0], kernels.shape[2], kernels.shape[3]
    cols, Ho, Wo = _im2col(x, k, padding)
    if upstream.shape != (Ho, Wo, cout):
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match forward output "
            f"({Ho}, {Wo}, {cout})"
        )
    up2d = upstream.reshape(Ho * Wo, cout)
    kernel_grad = (cols.T @ up2d).reshape(k, k, cin, cout)
    bias_grad = up2d.sum(axis=0)

    # Scatter-add column gradients back onto the (padded) input grid.
    grad_cols = (up2d @ kernels.reshape(-1, cout).T).reshape(Ho, Wo, k, k, cin)
    p = _pad_amount(k, padding)
    Hp, Wp = x.shape[0] + 2 * p, x.shape[1] + 2 * p
    padded = np.zeros((Hp, Wp, cin))
    for di in range(k):
        for dj in range(k):
            padded[di : di + Ho, dj : dj + Wo, :] += grad_cols[:, :, di, dj, :]
    input_grad = padded[p : Hp - p, p : Wp - p, :] if p else padded
    return LayerGradients(kernel_grad, bias_grad, input_grad)


def _pool_windows(x):
    H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x2 requires even spatial dims, got {H}x{W}")
    # Window elements ordered row-major: (0,0), (0,1), (1,0), (1,1).
    return x.reshape(H // 2, 2, W // 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(
        H // 2, W // 2, 4, C
    )


def maxpool2x2(x):
    """2x2 max pooling with stride 2; returns (output, argmax window indices).

    Ties resolve to the first occurrence in row-major window order.
    """
    x = as_float_array(x, "input")
    if x.ndim != 3:
        raise ValueError(f"input must be (H, W, C), got shape {x.shape}")
    win = _pool_windows(x)
    idx = win.argmax(axis=2)
    out = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def maxpool2x2_backward(idx, upstream):
    """Route each upstream gradient entry to its argmax position."""
    upstream = as_float_array(upstream, "upstream")
    if idx.shape != upstream.shape:
        raise ValueError(
            f"argmax indices shape {idx.shape} does not match upstream {upstream.shape}"
        )
    Ho, Wo, C = upstream.shape
    win = np.zeros((Ho, Wo, 4, C))
    np.put_along_axis(win, idx[:, :, None, :], upstream[:, :, None, :], axis=2)
    return win.reshape(Ho, Wo, 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(2 * Ho, 2 * Wo, C)


def relu(x):
    return np.maximum(0.0, as_float_array(x, "input"))


def relu_backward(x, upstream):
    # Subgradient at exactly 0 is defined as 0.
    return np.where(np.asarray(x) > 0.0, upstream, 0.0)


def upsample2x(x):
    """Nearest-neighbor 2x spatial upsampling."""
    x = as_float_array(x, "input")
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def upsample2x_backward(upstream):
    """Each source pixel collects the sum of its 2x2 replica block."""
    upstream = as_float_array(upstream, "upstream")
    H, W, C = upstream.shape
    if H % 2 or W % 2:
        raise ValueError(f"upstream dims must be even, got {H}x{W}")
    return upstream.reshape(H // 2, 2, W // 2, 2, C).sum(axis=(1, 3))


def softmax_channels(logits):
    """Per-pixel softmax over the channel axis, stabilized by max subtraction."""
    z = as_float_array(logits, "logits")
    if z.ndim != 3 or z.shape[2] < 2:
        raise ValueError(f"logits must be (H, W, K) with K >= 2, got shape {z.shape}")
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=2, keepdims=True)


def sym_eig(matrix):
    """Eigendecomposition of a symmetric matrix.

    Eigenvalues come back descending; each eigenvector is sign-fixed so its
    largest-magnitude entry (first occurrence on ties) is positive.
    """
    a = as_float_array(matrix, "matrix")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()) if a.size else 1.0)
    if float(np.abs(a - a.T).max()) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric within 1e-10")
    a = (a + a.T) / 2.0
    evals, evecs = np.linalg.eigh(a)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    for j in range(evecs.shape[1]):
        col = evecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            evecs[:, j] = -col
    return SymmetricEigenResult(evals, evecs)
