"""Convolutional networks through the sparse-operator representation.

The network is ``L1`` convolution + average-pooling layers followed by
``L2 >= 2`` fully connected layers:

    c_1 = K_1 X + b_1,  c_l = K_l P_{l-1} sigma(c_{l-1}) + b_l,
    h_1 = W_1 P_{L1} sigma(c_{L1}) + bh_1,  h_l = W_l sigma(h_{l-1}) + bh_l,
    z = W_{L2} sigma(h_{L2-1}).

Conv biases are full vectors over the layer output (one entry per channel
and pixel).
"""

import math
import time
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .activations import TANH
from .convops import ConvLayerSpec, build_conv_matrix, build_pool_matrix, check_kernel, kernel_grad, kernel_patches
from .fnn import GdConfig
from .metrics import IterRecord, accuracy, check_finite, should_log
from .rng import batch_indices
from .softmax_ce import ce_loss_mean, ce_parts


@dataclass(frozen=True)
class CnnArch:
    conv: Tuple[ConvLayerSpec, ...]
    fc_widths: Tuple[int, ...]  # hidden widths of W_1 .. W_{L2-1}
    n_classes: int

    def __post_init__(self):
        if not self.conv:
            raise ValueError("need at least one convolution layer")
        if not self.fc_widths:
            raise ValueError("need L2 >= 2 (at least one hidden fully connected layer)")
        for prev, nxt in zip(self.conv[:-1], self.conv[1:]):
            if (nxt.in_h, nxt.in_w, nxt.in_ch) != (prev.pooled_h, prev.pooled_w, prev.out_ch):
                raise ValueError(f"layer {nxt} does not accept the pooled output of {prev}")

    @property
    def n_conv(self):
        return len(self.conv)

    @property
    def n_fc(self):
        return len(self.fc_widths) + 1

    @property
    def in_dim(self):
        return self.conv[0].in_dim

    @property
    def fc_in_dim(self):
        return self.conv[-1].pooled_dim


def make_arch(in_h, in_w, in_ch, n_conv, channels, fc_width, n_fc, n_classes):
    """Stack of ``n_conv`` layers with ``channels`` outputs each, then ``n_fc`` dense layers."""
    specs = []
    h, w, c = in_h, in_w, in_ch
    for _ in range(n_conv):
        spec = ConvLayerSpec(h, w, c, channels)
        specs.append(spec)
        h, w, c = spec.pooled_h, spec.pooled_w, channels
    if h < 1 or w < 1:
        raise ValueError("too many pooling layers for the input size")
    return CnnArch(tuple(specs), (fc_width,) * (n_fc - 1), n_classes)


@dataclass
class CnnParams:
    arch: CnnArch
    kernels: List[np.ndarray]
    conv_biases: List[np.ndarray]
    fc_weights: List[np.ndarray]
    fc_biases: List[np.ndarray]

    def __post_init__(self):
        arch = self.arch
        if len(self.kernels) != arch.n_conv or len(self.conv_biases) != arch.n_conv:
            raise ValueError("one kernel and one bias per convolution layer required")
        for spec, k, b in zip(arch.conv, self.kernels, self.conv_biases):
            check_kernel(spec, k)
            if b.shape != (spec.out_dim, 1):
                raise ValueError(f"conv bias shape {b.shape}, expected ({spec.out_dim}, 1)")
        dims = [arch.fc_in_dim, *arch.fc_widths, arch.n_classes]
        if len(self.fc_weights) != arch.n_fc or len(self.fc_biases) != arch.n_fc - 1:
            raise ValueError("fully connected weights/biases do not match the architecture")
        for l, w in enumerate(self.fc_weights):
            if w.shape != (dims[l + 1], dims[l]):
                raise ValueError(f"fc weight {l + 1} has shape {w.shape}, expected {(dims[l + 1], dims[l])}")
        for l, b in enumerate(self.fc_biases):
            if b.shape != (dims[l + 1], 1):
                raise ValueError(f"fc bias {l + 1} has shape {b.shape}")

    def copy(self):
        return CnnParams(
            self.arch,
            [k.copy() for k in self.kernels],
            [b.copy() for b in self.conv_biases],
            [w.copy() for w in self.fc_weights],
            [b.copy() for b in self.fc_biases],
        )

    def conv_matrices(self):
        return [build_conv_matrix(s, k) for s, k in zip(self.arch.conv, self.kernels)]

    def pool_matrices(self):
        return [build_pool_matrix(s) for s in self.arch.conv]

    def flat(self):
        parts = self.kernels + self.conv_biases + self.fc_weights + self.fc_biases
        return np.concatenate([np.ravel(m) for m in parts])


def init_cnn(arch, rng):
    """Uniform ``+-1/sqrt(fan_in)`` weights and biases (fan-in 9*in_ch for kernels)."""
    kernels, conv_biases = [], []
    for spec in arch.conv:
        bound = 1.0 / math.sqrt(spec.in_ch * 9)
        kernels.append(rng.uniform(-bound, bound, size=spec.n_kernel))
        conv_biases.append(rng.uniform(-bound, bound, size=(spec.out_dim, 1)))
    dims = [arch.fc_in_dim, *arch.fc_widths, arch.n_classes]
    fc_w, fc_b = [], []
    for l in range(arch.n_fc):
        bound = 1.0 / math.sqrt(dims[l])
        fc_w.append(rng.uniform(-bound, bound, size=(dims[l + 1], dims[l])))
        if l < arch.n_fc - 1:
            fc_b.append(rng.uniform(-bound, bound, size=(dims[l + 1], 1)))
    return CnnParams(arch, kernels, conv_biases, fc_w, fc_b)


def cnn_forward(p, act, xhat, ops=None):
    """Logits plus the conv and fc pre-activations.

    ``ops`` may carry precomputed ``(conv_matrices, pool_matrices)``.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.ndim != 2 or xhat.shape[0] != p.arch.in_dim:
        raise ValueError(f"input must be {p.arch.in_dim} x N, got {xhat.shape}")
    ks, ps = ops if ops is not None else (p.conv_matrices(), p.pool_matrices())
    conv_pre, fc_pre = [], []
    u = xhat
    for k, pool, b in zip(ks, ps, p.conv_biases):
        c = k @ u + b
        conv_pre.append(c)
        u = pool @ act.f(c)
    h = u
    for w, b in zip(p.fc_weights[:-1], p.fc_biases):
        c = w @ h + b
        fc_pre.append(c)
        h = act.f(c)
    return p.fc_weights[-1] @ h, conv_pre, fc_pre


def ce_cnn_loss(p, act, xhat, a):
    return ce_loss_mean(cnn_forward(p, act, xhat)[0], a)


def cnn_backprop(p, act, xhat, a, patches=None):
    """Loss and exact gradient (as a :class:`CnnParams`) of :func:`ce_cnn_loss`.

    ``patches`` may carry :func:`kernel_patches` of ``xhat`` for the first layer.
    """
    ks, ps = p.conv_matrices(), p.pool_matrices()
    z, conv_pre, fc_pre = cnn_forward(p, act, xhat, (ks, ps))
    n = xhat.shape[1]
    prob, losses = ce_parts(z, a)
    delta = (prob - a) / n
    fc_h = [act.f(c) for c in fc_pre]
    conv_h = [act.f(c) for c in conv_pre]
    pooled_last = ps[-1] @ conv_h[-1]
    L2 = p.arch.n_fc
    gw = [None] * L2
    gb = [None] * (L2 - 1)
    gw[-1] = delta @ fc_h[-1].T
    back = p.fc_weights[-1].T @ delta
    for l in range(L2 - 2, -1, -1):
        back = back * act.df(fc_pre[l])
        inp = pooled_last if l == 0 else fc_h[l - 1]
        gw[l] = back @ inp.T
        gb[l] = back.sum(axis=1, keepdims=True)
        back = p.fc_weights[l].T @ back
    L1 = p.arch.n_conv
    gk = [None] * L1
    gcb = [None] * L1
    for l in range(L1 - 1, -1, -1):
        back = (ps[l].T @ back) * act.df(conv_pre[l])
        u = xhat if l == 0 else ps[l - 1] @ conv_h[l - 1]
        gk[l] = kernel_grad(p.arch.conv[l], u, back, patches if l == 0 else None)
        gcb[l] = back.sum(axis=1, keepdims=True)
        if l > 0:
            back = ks[l].T @ back
    return float(losses.mean()), CnnParams(p.arch, gk, gcb, gw, gb)


def eval_cnn(p, act, data, chunk=2000):
    """Mean cross-entropy and accuracy over a dataset, in column chunks."""
    ops = (p.conv_matrices(), p.pool_matrices())
    total, correct = 0.0, 0
    for start in range(0, data.n, chunk):
        x = data.x[:, start : start + chunk]
        a = data.a[:, start : start + chunk]
        z = cnn_forward(p, act, x, ops)[0]
        total += float(ce_parts(z, a)[1].sum())
        correct += int(np.sum(np.argmax(z, axis=0) == np.argmax(a, axis=0)))
    return total / data.n, correct / data.n


def gd_train_cnn(p0, act, data, cfg: GdConfig, test=None, on_record=None):
    """Mini-batch gradient descent; the subset is redrawn every ``cfg.refresh`` iterations.

    Logged loss/accuracy are over the whole of ``data``.
    """
    act = act or TANH
    batch = data.n if cfg.batch is None else cfg.batch
    if batch > data.n:
        raise ValueError(f"batch {batch} exceeds the {data.n} training samples")
    p = p0.copy()
    logs = []
    start = time.perf_counter()
    window = -1
    for k in range(1, cfg.iters + 1):
        w_now = (k - 1) // cfg.refresh
        if w_now != window:
            window = w_now
            if batch == data.n:
                xb, ab = data.x, data.a
            else:
                idx = batch_indices(data.n, batch, cfg.seed, window)
                xb, ab = data.x[:, idx], data.a[:, idx]
            patches = kernel_patches(p.arch.conv[0], xb)
        loss, g = cnn_backprop(p, act, xb, ab, patches)
        check_finite("gradient", g.flat(), logs, iter=k, loss=loss)
        for mats, grads in ((p.kernels, g.kernels), (p.conv_biases, g.conv_biases),
                            (p.fc_weights, g.fc_weights), (p.fc_biases, g.fc_biases)):
            for m, gm in zip(mats, grads):
                m -= cfg.lr * gm
        if should_log(k, cfg.iters, cfg.log_every):
            ce, acc = eval_cnn(p, act, data)
            check_finite("ce_loss", ce, logs, iter=k)
            rec = IterRecord(
                iter=k,
                ce_loss=ce,
                train_acc=acc,
                test_acc=None if test is None else eval_cnn(p, act, test)[1],
                elapsed_ms=1e3 * (time.perf_counter() - start),
                batch_index=window,
            )
            logs.append(rec)
            if on_record is not None:
                on_record(rec)
    return p, logs
