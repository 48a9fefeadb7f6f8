"""Fully connected networks: forward pass, cross-entropy objective, and the
full-batch gradient-descent baseline."""

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .activations import TANH
from .metrics import IterRecord, accuracy, check_finite, should_log
from .softmax_ce import ce_loss_mean, ce_parts


@dataclass
class FnnParams:
    """Weights ``W_1..W_L`` and hidden biases ``b_1..b_{L-1}`` (column vectors)."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        L = len(self.weights)
        if L < 2:
            raise ValueError("an FNN needs depth L >= 2")
        if len(self.biases) != L - 1:
            raise ValueError(f"expected {L - 1} biases, got {len(self.biases)}")
        for l in range(L - 1):
            w, b = self.weights[l], self.biases[l]
            if b.shape != (w.shape[0], 1):
                raise ValueError(f"bias {l + 1} has shape {b.shape}, expected ({w.shape[0]}, 1)")
            if self.weights[l + 1].shape[1] != w.shape[0]:
                raise ValueError(f"W_{l + 2} does not accept the output of W_{l + 1}")

    @property
    def depth(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def n_classes(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return FnnParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self):
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])


def init_fnn(d, width, n_classes, depth, rng):
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` weights and biases.

    Nonzero biases matter for the layer-separated solver: with zero biases
    and an odd activation the first hidden features are odd functions of the
    input, which the circle problem cannot use.
    """
    dims = [d] + [width] * (depth - 1) + [n_classes]
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        if l < depth - 1:
            biases.append(rng.uniform(-bound, bound, size=(fan_out, 1)))
    return FnnParams(weights, biases)


def fnn_forward(p, act, x):
    """Return the logits and the list of hidden pre-activations.

    ``preacts[l]`` is ``W_{l+1} sigma(preacts[l-1]) + b_{l+1} 1^T`` (with the
    input ``x`` in place of ``sigma(preacts[-1])`` for the first layer).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != p.in_dim:
        raise ValueError(f"input must be {p.in_dim} x N, got {x.shape}")
    preacts = []
    h = x
    for w, b in zip(p.weights[:-1], p.biases):
        c = w @ h + b
        preacts.append(c)
        h = act.f(c)
    return p.weights[-1] @ h, preacts


def ce_fnn_loss(p, act, x, a):
    return ce_loss_mean(fnn_forward(p, act, x)[0], a)


def fnn_backprop(p, act, x, a):
    """Exact gradient of :func:`ce_fnn_loss`; returns ``(loss, grads)``.

    ``grads`` is an :class:`FnnParams` holding the partial derivatives.
    """
    z, preacts = fnn_forward(p, act, x)
    n = x.shape[1]
    prob, losses = ce_parts(z, a)
    delta = (prob - a) / n
    hidden = [act.f(c) for c in preacts]
    L = p.depth
    gw = [None] * L
    gb = [None] * (L - 1)
    gw[L - 1] = delta @ hidden[-1].T
    back = p.weights[L - 1].T @ delta
    for l in range(L - 2, -1, -1):
        back = back * act.df(preacts[l])
        inp = x if l == 0 else hidden[l - 1]
        gw[l] = back @ inp.T
        gb[l] = back.sum(axis=1, keepdims=True)
        if l > 0:
            back = p.weights[l].T @ back
    return float(losses.mean()), FnnParams(gw, gb)


@dataclass
class GdConfig:
    iters: int
    lr: float
    log_every: int = 10
    # Mini-batch options (used by the CNN baseline; None means full batch).
    batch: Optional[int] = None
    refresh: int = 200
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


def gd_train_fnn(p0, act, data, cfg, test=None, on_record=None):
    """Full-batch gradient descent on the cross-entropy loss.

    ``data``/``test`` are :class:`~lysep.datasets.Dataset` objects. Returns the
    final parameters and the logged :class:`IterRecord` rows.
    """
    act = act or TANH
    p = p0.copy()
    logs = []
    start = time.perf_counter()
    for k in range(1, cfg.iters + 1):
        loss, g = fnn_backprop(p, act, data.x, data.a)
        check_finite("gradient", g.flat(), logs, iter=k, loss=loss)
        for w, gw in zip(p.weights, g.weights):
            w -= cfg.lr * gw
        for b, gb in zip(p.biases, g.biases):
            b -= cfg.lr * gb
        if should_log(k, cfg.iters, cfg.log_every):
            z = fnn_forward(p, act, data.x)[0]
            ce = ce_loss_mean(z, data.a)
            check_finite("ce_loss", ce, logs, iter=k)
            rec = IterRecord(
                iter=k,
                ce_loss=ce,
                train_acc=accuracy(z, data.a),
                test_acc=None if test is None else accuracy(fnn_forward(p, act, test.x)[0], test.a),
                elapsed_ms=1e3 * (time.perf_counter() - start),
            )
            logs.append(rec)
            if on_record is not None:
                on_record(rec)
    return p, logs
