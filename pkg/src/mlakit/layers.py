"""Forward/backward pairs for the non-attention pieces of the toy model."""

import math

import numpy as np

LN_EPS = 1e-9
_GELU_C = math.sqrt(2.0 / math.pi)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def gelu(x):
    """tanh approximation of GELU."""
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def flat_outer(x, dy):
    """Weight gradient ``sum_{b,s} x[b,s]^T dy[b,s]``."""
    rows = x.size // x.shape[-1]
    return x.reshape(rows, x.shape[-1]).T @ dy.reshape(rows, dy.shape[-1])


def mlp(x, w1, b1, w2, b2):
    pre = x @ w1 + b1
    act, t = gelu(pre)
    return act @ w2 + b2, (x, pre, t, act)


def mlp_backward(dy, cache, w1, w2):
    x, pre, t, act = cache
    grads = {
        "w2": flat_outer(act, dy),
        "b2": dy.sum(axis=(0, 1)),
    }
    dpre = gelu_backward(dy @ w2.T, pre, t)
    grads["w1"] = flat_outer(x, dpre)
    grads["b1"] = dpre.sum(axis=(0, 1))
    return dpre @ w1.T, grads


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
