"""Pure-numpy reference kernels.

Every routine here has a compiled twin in ``_kernels.pyx``.  Both versions
accumulate in the same order so their outputs agree bit for bit.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, pad):
    """Unfold ``x`` (B, C, H, W) into rows of (C*k*k) patches, stride 1.

    Output has shape (B*H_out*W_out, C*k*k) with H_out = H + 2*pad - k + 1.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, Ho, Wo, k, k
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)


def col2im(cols, b, c, h, w, k, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to (B, C, H, W)."""
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    cols = np.asarray(cols, dtype=np.float64).reshape(b, ho, wo, c, k, k)
    out = np.zeros((b, c, hp, wp))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def avgpool2_forward(x):
    x = np.asarray(x, dtype=np.float64)
    s = x[:, :, 0::2, 0::2] + x[:, :, 0::2, 1::2]
    s = s + x[:, :, 1::2, 0::2]
    s = s + x[:, :, 1::2, 1::2]
    return s * 0.25


def avgpool2_backward(dout):
    g = np.asarray(dout, dtype=np.float64) * 0.25
    b, c, h, w = g.shape
    out = np.empty((b, c, 2 * h, 2 * w))
    out[:, :, 0::2, 0::2] = g
    out[:, :, 0::2, 1::2] = g
    out[:, :, 1::2, 0::2] = g
    out[:, :, 1::2, 1::2] = g
    return out


def sign_step_project(x, g, orig, alpha, eps):
    """x + alpha*sign(g), clamped to the eps-ball around ``orig`` and to [0, 1]."""
    y = x + alpha * np.sign(g)
    y = np.minimum(np.maximum(y, orig - eps), orig + eps)
    return np.clip(y, 0.0, 1.0)
