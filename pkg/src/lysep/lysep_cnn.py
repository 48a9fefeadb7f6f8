"""Layer-separated surrogate for convolutional networks and its alternating
minimization.

Convolution and fully connected hidden layers are handled as one chain
``j = 1 .. H`` with ``H = L1 + L2 - 1``. Chain layer ``j`` maps
``V_j`` (``X`` for ``j = 1``, else ``sigma(c_{j-1})``) through the linear
operator

    M_j = K_j P_{j-1}         (convolution layers, P_0 = I)
    M_j = W_1 P_{L1}          (first fully connected layer)
    M_j = W_m                 (later fully connected layers)

and the output is ``W_{L2} sigma(c_H)``. With ``f_j = ||M_j||_F^2`` and
``f_{H+1} = ||W_{L2}||_F^2`` the adaptive weights are
``omega_j = prod_{i > j} f_i``; for ``j <= L1`` these are the conv-side
weights, for ``j = L1 + l`` the fully connected weights ``omega_hat_l``.
The ridge weight of each parameter solve is the FNN formula applied along
the chain, so the fully connected ones include the conv-side residuals.
"""

import math
import time
from dataclasses import dataclass
from typing import List

import numpy as np

from .activations import TANH
from .cnn import CnnParams, cnn_forward, eval_cnn
from .convops import build_conv_matrix, kernel_patches, solve_kernel
from .densela import col_mean_solve, frob_norm2, lstsq_right, lstsq_right_reg
from .linesearch import backtrack, backtrack_tau
from .lysep_fnn import BoundCheck, LySepConfig, _head_value_grad_c, _head_value_grad_w, _ridge, _TauState, bound_constant
from .metrics import IterRecord, NumericalAbort, check_finite, should_log
from .rng import batch_indices
from .softmax_ce import ce_loss_mean, ce_parts


@dataclass
class LySepCnnState:
    params: CnnParams
    conv_aux: List[np.ndarray]
    fc_aux: List[np.ndarray]

    def __post_init__(self):
        arch = self.params.arch
        if len(self.conv_aux) != arch.n_conv or len(self.fc_aux) != arch.n_fc - 1:
            raise ValueError("one auxiliary matrix per hidden layer required")
        n = self.conv_aux[0].shape[1]
        rows = [s.out_dim for s in arch.conv] + list(arch.fc_widths)
        for j, (c, r) in enumerate(zip(self.aux, rows)):
            if c.shape != (r, n):
                raise ValueError(f"auxiliary {j + 1} has shape {c.shape}, expected ({r}, {n})")

    @property
    def aux(self):
        return self.conv_aux + self.fc_aux

    @property
    def n_hidden(self):
        return len(self.conv_aux) + len(self.fc_aux)

    @property
    def n_samples(self):
        return self.conv_aux[0].shape[1]

    def copy(self):
        return LySepCnnState(self.params.copy(), [c.copy() for c in self.conv_aux], [c.copy() for c in self.fc_aux])


@dataclass
class CnnAdaptiveWeights:
    omega: List[float]
    omega_hat: List[float]


class _Chain:
    """Operators of the chain for the current parameters."""

    def __init__(self, p):
        self.p = p
        self.L1 = p.arch.n_conv
        self.H = self.L1 + p.arch.n_fc - 1
        self.k = p.conv_matrices()
        self.pool = p.pool_matrices()

    def bias(self, j):
        p = self.p
        return p.conv_biases[j - 1] if j <= self.L1 else p.fc_biases[j - self.L1 - 1]

    def pre_pool(self, j):
        """Pooling matrix applied before layer ``j`` (None for the first layer)."""
        if j == 1 or j > self.L1 + 1:
            return None
        return self.pool[j - 2]

    def lin(self, j, v):
        """``M_j v``."""
        pool = self.pre_pool(j)
        u = v if pool is None else pool @ v
        if j <= self.L1:
            return self.k[j - 1] @ u
        return self.p.fc_weights[j - self.L1 - 1] @ u

    def lin_t(self, j, g):
        """``M_j^T g``."""
        if j <= self.L1:
            r = self.k[j - 1].T @ g
        else:
            r = self.p.fc_weights[j - self.L1 - 1].T @ g
        pool = self.pre_pool(j)
        return r if pool is None else pool.T @ r

    def factor(self, j):
        """``f_j = ||M_j||_F^2`` for ``2 <= j <= H + 1``."""
        p = self.p
        if j == self.H + 1:
            return frob_norm2(p.fc_weights[-1])
        if j <= self.L1:
            prod = self.k[j - 1] @ self.pool[j - 2]
            return float(prod.power(2).sum())
        w = p.fc_weights[j - self.L1 - 1]
        if j == self.L1 + 1:
            prod = (self.pool[self.L1 - 1].T @ w.T).T
            return frob_norm2(prod)
        return frob_norm2(w)

    def factors(self):
        """``[None, None, f_2, ..., f_{H+1}]`` indexed by chain position."""
        return [None, None] + [self.factor(j) for j in range(2, self.H + 2)]


def _conv_matrix(p, j):
    return build_conv_matrix(p.arch.conv[j - 1], p.kernels[j - 1])


def _omega_from(f, H):
    omega = [0.0] * (H + 1)
    acc = 1.0
    for j in range(H, 0, -1):
        acc *= f[j + 1]
        omega[j] = acc
    return omega


def init_aux(p, act, xhat):
    """State whose auxiliaries equal the forward-pass pre-activations."""
    _, conv_pre, fc_pre = cnn_forward(p, act, xhat)
    return LySepCnnState(p.copy(), conv_pre, fc_pre)


def cnn_adaptive_weights(s):
    ch = _Chain(s.params)
    omega = _omega_from(ch.factors(), ch.H)
    return CnnAdaptiveWeights(omega[1 : ch.L1 + 1], omega[ch.L1 + 1 :])


def _input(s, act, xhat, j):
    return xhat if j == 1 else act.f(s.aux[j - 2])


def _residual(ch, s, act, xhat, j):
    return ch.lin(j, _input(s, act, xhat, j)) + ch.bias(j) - s.aux[j - 1]


def surrogate_terms(s, act, xhat, a):
    """``(||R||^2, [omega_j ||residual_j||^2 for chain layers j = 1..H])``."""
    ch = _Chain(s.params)
    omega = _omega_from(ch.factors(), ch.H)
    r = ce_parts(s.params.fc_weights[-1] @ act.f(s.aux[-1]), a)[1]
    pens = [omega[j] * frob_norm2(_residual(ch, s, act, xhat, j)) for j in range(1, ch.H + 1)]
    return float(r @ r), pens


def surrogate_T(s, act, xhat, a):
    head, pens = surrogate_terms(s, act, xhat, a)
    return head + sum(pens)


def lysep_loss(s, act, xhat, a):
    return math.sqrt(surrogate_T(s, act, xhat, a) / s.n_samples)


def _grad_chain_c(ch, s, act, xhat, a, j, omega):
    c = s.aux[j - 1]
    target_self = ch.lin(j, _input(s, act, xhat, j)) + ch.bias(j)
    g = 2.0 * omega[j] * (c - target_self)
    if j == ch.H:
        return g + _head_value_grad_c(s.params.fc_weights[-1], a, act, c)[1]
    nxt = ch.lin(j + 1, act.f(c)) + ch.bias(j + 1) - s.aux[j]
    return g + 2.0 * omega[j + 1] * ch.lin_t(j + 1, nxt) * act.df(c)


def grad_c_conv(s, act, xhat, a, l):
    """Gradient of T with respect to the convolution auxiliary ``c_l``."""
    if not 1 <= l <= s.params.arch.n_conv:
        raise IndexError(f"convolution layer index {l} outside 1..{s.params.arch.n_conv}")
    ch = _Chain(s.params)
    return _grad_chain_c(ch, s, act, xhat, a, l, _omega_from(ch.factors(), ch.H))


def grad_c_fc(s, act, xhat, a, l):
    """Gradient of T with respect to the fully connected auxiliary ``c_hat_l``."""
    n_fc = s.params.arch.n_fc
    if not 1 <= l <= n_fc - 1:
        raise IndexError(f"fully connected layer index {l} outside 1..{n_fc - 1}")
    ch = _Chain(s.params)
    return _grad_chain_c(ch, s, act, xhat, a, ch.L1 + l, _omega_from(ch.factors(), ch.H))


def _residual_norms(ch, s, act, xhat):
    return [frob_norm2(_residual(ch, s, act, xhat, j)) for j in range(1, ch.H + 1)]


def _ridge_chain(f, res, j):
    # _ridge takes norms[i-1] = factor of layer i
    return _ridge([f[i] if i >= 2 else 0.0 for i in range(1, len(f))], res, j)


def lambda_for_layer(s, act, xhat, j):
    """Ridge weight of the parameter solve of chain layer ``j`` (``H + 1``: output)."""
    ch = _Chain(s.params)
    if not 1 <= j <= ch.H + 1:
        raise IndexError(f"chain layer index {j} outside 1..{ch.H + 1}")
    return _ridge_chain(ch.factors(), _residual_norms(ch, s, act, xhat), j)


def grad_WL2(s, act, xhat, a):
    """Gradient of T with respect to the output weights."""
    ch = _Chain(s.params)
    lam = _ridge_chain(ch.factors(), _residual_norms(ch, s, act, xhat), ch.H + 1)
    return _head_value_grad_w(act.f(s.aux[-1]), a, s.params.fc_weights[-1], lam)[1]


def thm41_check(s, act, xhat, a, slack=1e-10):
    """Compare the true loss with ``C_B sqrt(L1+L2-1) sqrt(T/N)``."""
    lhs = ce_loss_mean(cnn_forward(s.params, act, xhat)[0], a)
    h = s.n_hidden
    rhs = bound_constant(act.lipschitz, h) * math.sqrt(h) * lysep_loss(s, act, xhat, a)
    return BoundCheck(lhs, rhs, lhs <= rhs + slack)


# -- training loop -------------------------------------------------------------


@dataclass
class LySepCnnConfig(LySepConfig):
    batch: int = None
    refresh: int = 200
    seed: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.lipschitz_cap:
            raise ValueError("lipschitz_cap is only available for fully connected networks")
        if self.refresh < 1 or (self.batch is not None and self.batch < 1):
            raise ValueError("batch and refresh must be positive")


class _SweepCache:
    """Data tied to one training subset: the first-layer patch matrix."""

    def __init__(self, spec, xhat):
        self.xhat = xhat
        self.patches = kernel_patches(spec, xhat)


def _solve_params(ch, s, j, h_prev, lam, cache):
    p = s.params
    L1 = ch.L1
    target = s.aux[j - 1] - ch.bias(j)
    if j <= L1:
        spec = p.arch.conv[j - 1]
        if j == 1:
            p.kernels[0] = solve_kernel(spec, cache.xhat, None, target, 0.0, cache.patches)
        else:
            p.kernels[j - 1] = solve_kernel(spec, ch.pool[j - 2] @ h_prev, ch.pool[j - 2], target, lam)
        ch.k[j - 1] = _conv_matrix(p, j)
    elif j == L1 + 1:
        pool = ch.pool[L1 - 1]
        p.fc_weights[0] = lstsq_right_reg(pool @ h_prev, target, pool, lam)
    else:
        p.fc_weights[j - L1 - 1] = lstsq_right(h_prev, target, lam)


def lysep_cnn_sweep(s, act, xhat, a, cfg, tau_state=None, monitor=None, cache=None):
    """One outer iteration, in place; returns the smallest accepted step.

    Order: output weights, then the fully connected layers from the top, then
    the convolution layers from the top. Each hidden layer gets a backtracked
    step on its auxiliary, then the exact weight/kernel and bias solves.
    """
    p = s.params
    ch = _Chain(p)
    H = ch.H
    if tau_state is None:
        tau_state = _TauState(cfg, H + 1)
    if cache is None:
        cache = _SweepCache(p.arch.conv[0], xhat)
    frozen = cfg.omega_mode == "per-iteration"
    c = s.aux  # rebound below whenever an auxiliary is replaced

    # sigma(c_j) and M_j V_j for the state at the start of the sweep; layers
    # below the one being updated keep these values until their own turn.
    hs = [None] + [act.f(m) for m in c]
    lins = [None] + [ch.lin(j, xhat if j == 1 else hs[j - 1]) for j in range(1, H + 1)]
    res = [frob_norm2(lins[j] + ch.bias(j) - c[j - 1]) for j in range(1, H + 1)]
    f = ch.factors()
    omega_frozen = _omega_from(f, H) if frozen else None
    taus = []

    def omega_now(j):
        if frozen:
            return omega_frozen[j]
        acc = 1.0
        for i in range(j + 1, H + 2):
            acc *= f[i]
        return acc

    def set_aux(j, value):
        if j <= ch.L1:
            s.conv_aux[j - 1] = value
        else:
            s.fc_aux[j - ch.L1 - 1] = value

    lam = 0.0 if frozen else _ridge_chain(f, res, H + 1)

    def f_wl(m):
        return _head_value_grad_w(hs[H], a, m, lam, grad=False)[0]

    f0, g = _head_value_grad_w(hs[H], a, p.fc_weights[-1], lam)
    new, tau, _ = backtrack(f_wl, p.fc_weights[-1], g, tau_state.start(H), cfg.eta, cfg.max_shrinks, f0)
    p.fc_weights[-1] = new
    tau_state.accept(H, tau)
    taus.append(tau)
    f[H + 1] = frob_norm2(new)
    if monitor:
        monitor("W_out")

    lin_above = None  # M_{j+1} sigma(c_j) after the layer above was solved
    for j in range(H, 0, -1):
        c = s.aux
        c0 = c[j - 1]
        target_self = lins[j] + ch.bias(j)
        om_self = omega_now(j)
        d0 = target_self - c0
        d0_sq = frob_norm2(d0)
        if j == H:
            w_last = p.fc_weights[-1]
            f0, g = _head_value_grad_c(w_last, a, act, c0)
            f0 += om_self * d0_sq
            g -= (2.0 * om_self) * d0

            def head_part(m):
                return _head_value_grad_c(w_last, a, act, m, grad=False)[0]

        else:
            om_next = omega_now(j + 1)
            target_next = c[j] - ch.bias(j + 1)
            inner = lin_above - target_next
            f0 = om_next * frob_norm2(inner) + om_self * d0_sq
            g = ch.lin_t(j + 1, inner)
            g *= act.deriv(c0, hs[j])
            g *= 2.0 * om_next
            g -= (2.0 * om_self) * d0

            def head_part(m):
                return om_next * frob_norm2(ch.lin(j + 1, act.f(m)) - target_next)

        # ||target_self - (c0 - tau g)||^2 = ||d0||^2 + 2 tau <d0, g> + tau^2 ||g||^2
        dg, gg = float(np.vdot(d0, g)), frob_norm2(g)
        del d0

        def phi(tau):
            return head_part(c0 - tau * g) + om_self * (d0_sq + 2.0 * tau * dg + tau * tau * gg)

        tau = 0.0
        if np.any(g):
            tau = backtrack_tau(phi, f0, tau_state.start(j - 1), cfg.eta, cfg.max_shrinks)[0]
        new = c0 - tau * g if tau > 0 else c0
        del g
        set_aux(j, new)
        tau_state.accept(j - 1, tau)
        taus.append(tau)
        if monitor:
            monitor(f"c_{j}")

        lam_j = 0.0 if frozen else _ridge_chain(f, res, j)
        _solve_params(ch, s, j, hs[j - 1], lam_j, cache)
        if j >= 2:
            f[j] = ch.factor(j)
        if monitor:
            monitor(f"M_{j}")
        lin_above = ch.lin(j, xhat if j == 1 else hs[j - 1])
        bias = col_mean_solve(new - lin_above)
        if j <= ch.L1:
            p.conv_biases[j - 1] = bias
        else:
            p.fc_biases[j - ch.L1 - 1] = bias
        if monitor:
            monitor(f"b_{j}")
    return min(taus)


def _log_row(s, act, data, test, k, start, min_tau, surr, window):
    ce, acc = eval_cnn(s.params, act, data)
    check_finite("ce_loss", ce, [], iter=k)
    return IterRecord(
        iter=k,
        ce_loss=ce,
        surrogate_loss=surr,
        train_acc=acc,
        test_acc=None if test is None else eval_cnn(s.params, act, test)[1],
        elapsed_ms=1e3 * (time.perf_counter() - start),
        min_tau_used=min_tau,
        batch_index=window,
    )


def train_lysep_cnn(p0, act, data, cfg: LySepCnnConfig, test=None, on_record=None):
    """Alternating minimization on mini-batches.

    The training subset is redrawn every ``cfg.refresh`` iterations and its
    auxiliaries re-initialized by a forward pass under the current
    parameters. Logged loss/accuracy are those of the network on the whole of
    ``data``; the surrogate is ``sqrt(T/N)`` on the current subset. Returns
    the final state (on the last subset) and the log rows.
    """
    act = act or TANH
    batch = data.n if cfg.batch is None else cfg.batch
    if batch > data.n:
        raise ValueError(f"batch {batch} exceeds the {data.n} training samples")
    p = p0.params.copy() if isinstance(p0, LySepCnnState) else p0.copy()
    logs = []
    start = time.perf_counter()
    window = -1
    s = None
    monitor = None
    last = [0.0]
    for k in range(1, cfg.iters + 1):
        w_now = (k - 1) // cfg.refresh
        if w_now != window:
            window = w_now
            if batch == data.n:
                xb, ab = data.x, data.a
            else:
                idx = batch_indices(data.n, batch, cfg.seed, window)
                xb, ab = data.x[:, idx], data.a[:, idx]
            if s is None and isinstance(p0, LySepCnnState) and p0.n_samples == xb.shape[1]:
                s = p0.copy()
            else:
                s = init_aux(p if s is None else s.params, act, xb)
            if window == 0:
                tau_state = _TauState(cfg, s.n_hidden + 1)
            cache = _SweepCache(p.arch.conv[0], xb)
            if cfg.check_monotone:
                last[0] = surrogate_T(s, act, xb, ab)

                def monitor(label, xb=xb, ab=ab):
                    now = surrogate_T(s, act, xb, ab)
                    if now > last[0] + cfg.monotone_slack * max(1.0, abs(last[0])):
                        raise NumericalAbort(f"surrogate increased at {label}", {"before": last[0], "after": now}, logs)
                    last[0] = now

        min_tau = lysep_cnn_sweep(s, act, xb, ab, cfg, tau_state, monitor, cache)
        if should_log(k, cfg.iters, cfg.log_every):
            surr = lysep_loss(s, act, xb, ab)
            check_finite("surrogate", surr, logs, iter=k)
            rec = _log_row(s, act, data, test, k, start, min_tau, surr, window)
            logs.append(rec)
            if on_record is not None:
                on_record(rec)
        elif not all(np.isfinite(m).all() for m in s.params.fc_weights):
            raise NumericalAbort("non-finite weights", {"iter": k}, logs)
    return s, logs
