"""Column-batched softmax and cross-entropy.

Logits ``z`` and one-hot labels ``a`` are J x N arrays, one sample per
column. Everything is evaluated with the per-column maximum subtracted, so
any finite logits are safe.
"""

import numpy as np


def one_hot(labels, n_classes):
    """J x N one-hot matrix from a length-N vector of class indices."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("class index out of range")
    a = np.zeros((n_classes, labels.size))
    a[labels, np.arange(labels.size)] = 1.0
    return a


def check_labels(a):
    """Validate that every column of ``a`` is one-hot; return it as float64."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("label matrix must be 2-D")
    if not np.all((a == 0.0) | (a == 1.0)) or not np.all(a.sum(axis=0) == 1.0):
        raise ValueError("label matrix columns must be one-hot")
    return a


def _check_pair(z, a):
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if z.shape != a.shape:
        raise ValueError(f"logits {z.shape} and labels {a.shape} differ in shape")
    return z, a


def softmax_cols(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def logsumexp_cols(z):
    m = z.max(axis=0)
    return m + np.log(np.exp(z - m).sum(axis=0))


def ce_loss_vec(z, a):
    """Per-sample losses ``-sum_j a_jn log p_j(z_n)`` (length N, all >= 0)."""
    z, a = _check_pair(z, a)
    loss = logsumexp_cols(z) - np.einsum("jn,jn->n", a, z)
    return np.maximum(loss, 0.0)


def ce_loss_mean(z, a):
    return float(ce_loss_vec(z, a).mean())


def ce_grad(z, a):
    """Gradient of each column loss w.r.t. its logits: ``softmax(z) - a``."""
    z, a = _check_pair(z, a)
    return softmax_cols(z) - a


def ce_parts(z, a):
    """Probabilities and per-sample losses from one exponentiation."""
    z, a = _check_pair(z, a)
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=0)
    p = e / s
    loss = np.log(s) - np.einsum("jn,jn->n", a, shifted)
    return p, np.maximum(loss, 0.0)
