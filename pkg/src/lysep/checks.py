"""Quick randomized invariant checks, run by ``lysep check``.

Each check returns ``(name, passed, detail)``; the whole suite takes a few
seconds.
"""

import math

import numpy as np

from . import lysep_cnn, lysep_fnn
from .activations import TANH
from .cnn import init_cnn, make_arch
from .convops import ConvLayerSpec, build_conv_matrix, build_pool_matrix, solve_kernel
from .datasets import Dataset, gen_circle
from .fnn import init_fnn
from .softmax_ce import ce_grad, ce_loss_mean, ce_loss_vec, one_hot


def loop_conv(spec, k, u):
    """Direct zero-padded 3x3 cross-correlation of the columns of ``u``."""
    h, w, cin, cout = spec.in_h, spec.in_w, spec.in_ch, spec.out_ch
    kk = np.asarray(k).reshape(cout, cin, 3, 3)
    img = u.reshape(cin, h, w, -1)
    out = np.zeros((cout, h, w, u.shape[1]))
    for o in range(cout):
        for y in range(h):
            for x in range(w):
                for i in range(cin):
                    for dy in range(3):
                        for dx in range(3):
                            sy, sx = y + dy - 1, x + dx - 1
                            if 0 <= sy < h and 0 <= sx < w:
                                out[o, y, x] += kk[o, i, dy, dx] * img[i, sy, sx]
    return out.reshape(spec.out_dim, -1)


def _fd_max_err(value, mat, grad, rng, count=10, h=1e-5):
    worst = 0.0
    for _ in range(count):
        idx = np.unravel_index(rng.integers(mat.size), mat.shape)
        old = mat[idx]
        mat[idx] = old + h
        up = value()
        mat[idx] = old - h
        down = value()
        mat[idx] = old
        worst = max(worst, abs((up - down) / (2 * h) - grad[idx]))
    return worst


def check_softmax(rng):
    worst_lip, worst_fd = -math.inf, 0.0
    for _ in range(200):
        j, n = rng.integers(2, 6), rng.integers(1, 5)
        a = one_hot(rng.integers(0, j, n), j)
        z1, z2 = rng.normal(scale=3, size=(2, j, n))
        lhs = np.abs(ce_loss_vec(z1, a) - ce_loss_vec(z2, a))
        rhs = math.sqrt(2) * np.linalg.norm(z1 - z2, axis=0)
        worst_lip = max(worst_lip, float(np.max(lhs - rhs)))
        # per-column gradient, so the mean loss has gradient g / n
        g = ce_grad(z1, a) / n
        worst_fd = max(worst_fd, _fd_max_err(lambda: ce_loss_mean(z1, a), z1, g, rng, 3, 1e-6))
    ok = worst_lip <= 1e-12 and worst_fd <= 1e-6
    return "softmax/CE Lipschitz and gradient", ok, f"max excess {worst_lip:.2e}, fd err {worst_fd:.2e}"


def _random_fnn_state(rng, depth=3, width=4, n=7, scale=1.0):
    p = init_fnn(2, width, 3, depth, rng)
    for w in p.weights:
        w *= scale
    x = rng.normal(size=(2, n))
    a = one_hot(rng.integers(0, 3, n), 3)
    s = lysep_fnn.init_aux(p, TANH, x)
    for c in s.aux:
        c += rng.normal(scale=rng.uniform(0, 3), size=c.shape)
    return s, x, a


def _random_cnn_state(rng, n=5, channels=1):
    arch = make_arch(6, 6, 1, 2, channels, 4, 2, 3)
    p = init_cnn(arch, rng)
    x = rng.normal(size=(36, n))
    a = one_hot(rng.integers(0, 3, n), 3)
    s = lysep_cnn.init_aux(p, TANH, x)
    for c in s.aux:
        c += rng.normal(scale=rng.uniform(0, 3), size=c.shape)
    return s, x, a


def check_bounds(rng):
    worst = -math.inf
    for _ in range(100):
        s, x, a = _random_fnn_state(rng, depth=int(rng.integers(2, 6)), scale=rng.uniform(0.1, 4))
        r = lysep_fnn.thm31_check(s, TANH, x, a)
        worst = max(worst, r.lhs - r.rhs)
    for _ in range(30):
        s, x, a = _random_cnn_state(rng)
        r = lysep_cnn.thm41_check(s, TANH, x, a)
        worst = max(worst, r.lhs - r.rhs)
    return "surrogate bounds the loss", worst <= 1e-10, f"max lhs - rhs {worst:.2e}"


def check_gradients(rng):
    s, x, a = _random_fnn_state(rng)
    worst = 0.0
    S = lambda: lysep_fnn.surrogate_S(s, TANH, x, a)  # noqa: E731
    for l in range(1, s.depth):
        worst = max(worst, _fd_max_err(S, s.aux[l - 1], lysep_fnn.grad_c(s, TANH, x, a, l), rng))
    worst = max(worst, _fd_max_err(S, s.params.weights[-1], lysep_fnn.grad_WL(s, TANH, x, a), rng))
    t, xc, ac = _random_cnn_state(rng)
    T = lambda: lysep_cnn.surrogate_T(t, TANH, xc, ac)  # noqa: E731
    for l in (1, 2):
        worst = max(worst, _fd_max_err(T, t.conv_aux[l - 1], lysep_cnn.grad_c_conv(t, TANH, xc, ac, l), rng))
    worst = max(worst, _fd_max_err(T, t.fc_aux[0], lysep_cnn.grad_c_fc(t, TANH, xc, ac, 1), rng))
    worst = max(worst, _fd_max_err(T, t.params.fc_weights[-1], lysep_cnn.grad_WL2(t, TANH, xc, ac), rng))
    return "surrogate gradients vs finite differences", worst <= 1e-5, f"max abs err {worst:.2e}"


def check_conv(rng):
    worst = 0.0
    for _ in range(20):
        spec = ConvLayerSpec(int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        k = rng.normal(size=spec.n_kernel)
        u = rng.normal(size=(spec.in_dim, 2))
        worst = max(worst, float(np.max(np.abs(build_conv_matrix(spec, k) @ u - loop_conv(spec, k, u)))))
    spec = ConvLayerSpec(6, 6, 2, 2)
    k = rng.normal(size=spec.n_kernel)
    u = rng.normal(size=(spec.in_dim, 4))
    rec = float(np.max(np.abs(solve_kernel(spec, u, None, build_conv_matrix(spec, k) @ u) - k)))
    pool = build_pool_matrix(spec)
    rows_ok = np.allclose(pool.sum(axis=1), 1.0)
    ok = worst <= 1e-12 and rec <= 1e-8 and rows_ok
    return "convolution operators", ok, f"loop err {worst:.2e}, kernel recovery err {rec:.2e}"


def check_monotone(rng):
    train, _ = gen_circle(200, 1, int(rng.integers(1 << 30)))
    p = init_fnn(2, 10, 2, 3, rng)
    s0 = lysep_fnn.init_aux(p, TANH, train.x)
    cfg = lysep_fnn.LySepConfig(iters=30, check_monotone=True, log_every=1)
    try:
        lysep_fnn.train_lysep_fnn(s0, TANH, train, cfg)
        t, xc, ac = _random_cnn_state(rng, n=20)
        ccfg = lysep_cnn.LySepCnnConfig(iters=10, check_monotone=True, log_every=1)
        lysep_cnn.train_lysep_cnn(t, TANH, Dataset(xc, ac), ccfg)
    except Exception as exc:  # reported, not raised
        return "monotone descent", False, str(exc)
    return "monotone descent", True, "every sub-update kept the surrogate from rising"


ALL_CHECKS = (check_softmax, check_bounds, check_gradients, check_conv, check_monotone)


def run_checks(seed=0):
    rng = np.random.default_rng(seed)
    return [chk(rng) for chk in ALL_CHECKS]
