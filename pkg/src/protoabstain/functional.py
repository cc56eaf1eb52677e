"""Numerically stable scalar building blocks."""

import numpy as np


def sigmoid(x):
    """Logistic function; exact 0 and 1 at -inf and +inf."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax(y):
    y = np.asarray(y, dtype=np.float64)
    shift = y - y.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def softmax(y):
    return np.exp(log_softmax(y))


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    lsm = log_softmax(logits)
    rows = np.arange(n)
    grad = np.exp(lsm)
    grad[rows, labels] -= 1.0
    return -float(lsm[rows, labels].mean()), grad / n


def logsumexp(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def strict_argmax(y):
    """Row-wise argmax and whether that maximum is unique."""
    y = np.atleast_2d(y)
    k = np.argmax(y, axis=1)
    top = y[np.arange(len(y)), k]
    unique = (y == top[:, None]).sum(axis=1) == 1
    return k, unique
