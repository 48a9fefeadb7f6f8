"""Convolution and average pooling as explicit sparse matrices.

Feature vectors are laid out channel-major, then row-major within a channel:
entry ``ch * (h * w) + y * w + x``. A layer is a 3x3, stride-1,
zero-padded ("same") multi-channel cross-correlation followed by
non-overlapping 2x2 average pooling; odd trailing rows/columns are dropped by
the pooling (floor division).

Kernel parameters are a flat vector ordered by output channel, then input
channel, then the 3x3 taps row by row.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

KSIZE = 3
POOL = 2


@dataclass(frozen=True)
class ConvLayerSpec:
    in_h: int
    in_w: int
    in_ch: int
    out_ch: int

    def __post_init__(self):
        if min(self.in_h, self.in_w, self.in_ch, self.out_ch) < 1:
            raise ValueError(f"invalid layer dimensions {self}")

    @property
    def in_dim(self):
        return self.in_ch * self.in_h * self.in_w

    @property
    def out_dim(self):
        return self.out_ch * self.in_h * self.in_w

    @property
    def n_kernel(self):
        return self.out_ch * self.in_ch * KSIZE * KSIZE

    @property
    def pooled_h(self):
        return self.in_h // POOL

    @property
    def pooled_w(self):
        return self.in_w // POOL

    @property
    def pooled_dim(self):
        return self.out_ch * self.pooled_h * self.pooled_w


def check_kernel(spec, k):
    k = np.asarray(k, dtype=np.float64).ravel()
    if k.size != spec.n_kernel:
        raise ValueError(f"kernel has {k.size} entries, layer needs {spec.n_kernel}")
    return k


@lru_cache(maxsize=64)
def _conv_pattern(spec):
    """CSR pattern of the convolution matrix and the kernel entry feeding each slot."""
    h, w, cin, cout = spec.in_h, spec.in_w, spec.in_ch, spec.out_ch
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows, cols, kidx = [], [], []
    for o in range(cout):
        for i in range(cin):
            for dy in range(KSIZE):
                for dx in range(KSIZE):
                    sy, sx = ys + dy - 1, xs + dx - 1
                    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
                    rows.append(o * h * w + (ys * w + xs)[ok])
                    cols.append(i * h * w + (sy * w + sx)[ok])
                    kidx.append(np.full(ok.sum(), ((o * cin + i) * KSIZE + dy) * KSIZE + dx))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    kidx = np.concatenate(kidx)
    order = np.lexsort((cols, rows))
    rows, cols, kidx = rows[order], cols[order], kidx[order]
    indptr = np.zeros(spec.out_dim + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    for arr in (indptr, cols, kidx):
        arr.setflags(write=False)
    return indptr, cols, kidx


def build_conv_matrix(spec, k):
    """CSR matrix ``K`` with ``K @ vec(X)`` the padded cross-correlation of ``X``."""
    k = check_kernel(spec, k)
    indptr, cols, kidx = _conv_pattern(spec)
    return sp.csr_matrix((k[kidx], cols, indptr), shape=(spec.out_dim, spec.in_dim))


@lru_cache(maxsize=64)
def build_pool_matrix(spec):
    """CSR matrix averaging non-overlapping 2x2 blocks of the layer output."""
    h, w, ch = spec.in_h, spec.in_w, spec.out_ch
    ph, pw = spec.pooled_h, spec.pooled_w
    c, py, px, dy, dx = np.meshgrid(
        np.arange(ch), np.arange(ph), np.arange(pw), np.arange(POOL), np.arange(POOL), indexing="ij"
    )
    rows = (c * ph * pw + py * pw + px).ravel()
    cols = (c * h * w + (POOL * py + dy) * w + (POOL * px + dx)).ravel()
    vals = np.full(rows.size, 1.0 / (POOL * POOL))
    return sp.csr_matrix((vals, (rows, cols)), shape=(spec.pooled_dim, spec.out_dim))


def im2row(spec, u):
    """Patch matrix ``D`` with ``(K(k) u)[o, :]`` equal to ``D @ k_o``.

    ``u`` is ``in_dim x N``; ``D`` has one row per (y, x, sample) and one
    column per (input channel, tap).
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape[0] != spec.in_dim:
        raise ValueError(f"input has {u.shape[0]} rows, layer expects {spec.in_dim}")
    n = u.shape[1]
    h, w, cin = spec.in_h, spec.in_w, spec.in_ch
    padded = np.zeros((cin, h + 2, w + 2, n))
    padded[:, 1:-1, 1:-1, :] = u.reshape(cin, h, w, n)
    win = sliding_window_view(padded, (KSIZE, KSIZE), axis=(1, 2))  # cin, h, w, n, 3, 3
    return np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(h * w * n, cin * KSIZE * KSIZE)


def _channel_targets(spec, b):
    """Rearrange an ``out_dim x N`` matrix into ``(h*w*N) x out_ch`` columns."""
    n = b.shape[1]
    return b.reshape(spec.out_ch, spec.in_h * spec.in_w * n).T


def kernel_design(spec, u, p_prev=None, lam=0.0):
    """Dense design for the shared-kernel least-squares problem.

    Returns ``(design, target)`` where ``design @ k`` stacks ``vec(K(k) u)``
    (row-major) over ``sqrt(lam) * vec(K(k) p_prev)``, and ``target(b)`` stacks
    ``vec(b)`` over the matching zeros. Minimizing
    ``||design @ k - target(b)||^2`` is then the same as minimizing
    ``||K(k) u - b||_F^2 + lam ||K(k) p_prev||_F^2``. Intended for small
    problems and checks; :func:`solve_kernel` avoids the block-diagonal blowup.
    """
    blocks = [np.kron(np.eye(spec.out_ch), im2row(spec, u))]
    extra = 0
    if p_prev is not None and lam > 0:
        pd = p_prev.toarray() if sp.issparse(p_prev) else np.asarray(p_prev, dtype=np.float64)
        blocks.append(np.sqrt(lam) * np.kron(np.eye(spec.out_ch), im2row(spec, pd)))
        extra = blocks[-1].shape[0]
    design = np.vstack(blocks)

    def target(b):
        b = np.asarray(b, dtype=np.float64)
        return np.concatenate([_channel_targets(spec, b).T.ravel(), np.zeros(extra)])

    return design, target


def _reg_gram(spec, p_prev, chunk=512):
    """``D_P^T D_P`` for the patch matrix of the columns of ``p_prev``."""
    p_prev = p_prev.tocsc() if sp.issparse(p_prev) else np.asarray(p_prev)
    m = p_prev.shape[1]
    gram = np.zeros((spec.in_ch * KSIZE * KSIZE,) * 2)
    for start in range(0, m, chunk):
        block = p_prev[:, start : start + chunk]
        block = block.toarray() if sp.issparse(block) else block
        d = im2row(spec, block)
        gram += d.T @ d
    return gram


_REG_CACHE = {}


def reg_gram(spec, p_prev):
    key = (spec, id(p_prev))
    hit = _REG_CACHE.get(key)
    if hit is None or hit[0] is not p_prev:
        hit = (p_prev, _reg_gram(spec, p_prev))
        _REG_CACHE[key] = hit
    return hit[1]


def kernel_patches(spec, u):
    """``(D, D^T D)`` for the input ``u``; reusable across solves on the same input."""
    d = im2row(spec, u)
    return d, d.T @ d


def solve_kernel(spec, u, p_prev, b, lam=0.0, patches=None):
    """Kernel minimizing ``||K(k) u - b||_F^2 + lam ||K(k) p_prev||_F^2``.

    The output channels decouple and share one patch matrix, so the problem
    is solved through the small ``(9 in_ch)``-square Gram system with a
    minimum-norm (SVD) solve. ``patches`` may carry the result of
    :func:`kernel_patches` for ``u``.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (spec.out_dim, np.shape(u)[1]):
        raise ValueError(f"target shape {b.shape} does not match layer output ({spec.out_dim}, N)")
    d, gram = patches if patches is not None else kernel_patches(spec, u)
    rhs = d.T @ _channel_targets(spec, b)
    if p_prev is not None and lam > 0:
        gram = gram + lam * reg_gram(spec, p_prev)
    sol = scipy.linalg.lstsq(gram, rhs, lapack_driver="gelsd", check_finite=False)[0]
    return np.ascontiguousarray(sol.T).ravel()


def kernel_grad(spec, u, delta, patches=None):
    """Gradient of ``<delta, K(k) u>`` with respect to ``k`` (design transpose)."""
    d = im2row(spec, u) if patches is None else patches[0]
    return np.ascontiguousarray((d.T @ _channel_targets(spec, np.asarray(delta))).T).ravel()

