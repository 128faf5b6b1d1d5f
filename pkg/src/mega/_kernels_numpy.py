"""Pure-numpy implementations of the hot numeric kernels.

This is the fallback backend; `mega._core` provides the same functions as a
compiled extension. Both operate on C-contiguous float64 arrays and share
one calling convention, documented here.
"""

import numpy as np


def dense_fwd(x, W, b, relu):
    """y = x @ W + b, optionally ReLU'd.

    Returns (y, pre) where pre is the pre-activation; when relu is False,
    y *is* pre (same array).
    """
    pre = x @ W
    pre += b
    if relu:
        return np.maximum(pre, 0.0), pre
    return pre, pre


def dense_bwd(x, pre, W, dy, relu, need_dx=True, need_dparams=True):
    """Backward of dense_fwd.

    Returns (dx, dW, db); dx is None when need_dx is False, and dW/db are
    None when need_dparams is False.
    """
    if relu:
        dpre = dy * (pre > 0.0)
    else:
        dpre = dy
    dW = db = dx = None
    if need_dparams:
        dW = x.T @ dpre
        db = dpre.sum(axis=0)
    if need_dx:
        dx = dpre @ W.T
    return dx, dW, db


def weighted_sum(stack, w):
    """sum_j w[j] * stack[j] for stack of shape (J, B, D) -> (B, D)."""
    return np.tensordot(w, stack, axes=1)


def scaled_add(dst, src, alpha):
    """dst += alpha * src, in place."""
    dst += alpha * src


def adam_step(p, g, m, v, t, lr, beta1, beta2, eps):
    """One Adam update, in place on flat arrays (t is the 1-based step)."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def soft_update(target, online, tau):
    """target = (1 - tau) * target + tau * online, in place on target."""
    target *= 1.0 - tau
    target += tau * online
