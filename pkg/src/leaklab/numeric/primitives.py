"""Differentiable primitives as explicit forward / vector-Jacobian pairs.

Every ``*_backward`` takes the upstream gradient first and returns gradients
for the forward inputs in the same order. Arrays are float64 and may carry
arbitrary leading batch dimensions; the last axis is the feature axis.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dy, x, weight, need_weight_grad=True):
    dx = dy @ weight
    if not need_weight_grad:
        return dx, None, None
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return dx, dy2.T @ x2, dy2.sum(axis=0)


def add_backward(dy):
    return dy, dy


def layernorm(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layernorm_backward(dy, cache, gamma, need_param_grad=True):
    xhat, rstd = cache
    dxhat = dy * gamma
    n = xhat.shape[-1]
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    if not need_param_grad:
        return dx, None, None
    dy2 = dy.reshape(-1, n)
    return dx, (dy2 * xhat.reshape(-1, n)).sum(axis=0), dy2.sum(axis=0)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def gelu(x):
    """tanh-approximated GELU (the GPT-2 / OPT variant)."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_backward(dy, x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


ACTIVATIONS = {
    "gelu": (gelu, gelu_backward),
    "relu": (relu, relu_backward),
}


def embedding(table, ids):
    return table[ids]


def embedding_backward(dy, ids, n_rows):
    grad = np.zeros((n_rows, dy.shape[-1]))
    np.add.at(grad, np.asarray(ids).ravel(), dy.reshape(-1, dy.shape[-1]))
    return grad


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_cross_entropy(logits, targets):
    """Per-position negative log-likelihood, shape ``logits.shape[:-1]``."""
    logp = log_softmax(logits)
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def cross_entropy(logits, targets, weights):
    """Weighted mean cross-entropy and its gradient w.r.t. ``logits``.

    ``weights`` is a 0/1 (or real, non-negative) array shaped like ``targets``;
    the reduction is ``sum(w * nll) / sum(w)``.
    """
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    total = weights.sum()
    loss = float((weights * nll).sum() / total)
    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits,
        targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    dlogits *= (weights / total)[..., None]
    return loss, dlogits
