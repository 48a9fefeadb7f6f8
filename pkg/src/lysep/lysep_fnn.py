"""Layer-separated surrogate for fully connected networks and its
alternating minimization.

Each hidden layer ``l`` gets an auxiliary matrix ``c_l`` (M x N) standing in
for its pre-activation. The surrogate is

    S = ||R(W_L, c_{L-1})||^2 + sum_l omega_l ||W_l V_l + b_l 1^T - c_l||_F^2

with ``R`` the per-sample cross-entropy vector of ``W_L sigma(c_{L-1})``,
``V_1 = X``, ``V_l = sigma(c_{l-1})`` and the adaptive weights
``omega_l = prod_{j > l} ||W_j||_F^2``. ``sqrt(S / N)`` bounds the true
cross-entropy loss up to a depth-dependent constant.

Layers are numbered from 1 in the public functions, matching the usual
``W_1 .. W_L`` notation; the Python lists are 0-based underneath.
"""

import math
import time
from dataclasses import dataclass
from typing import List

import numpy as np

from .activations import TANH
from .densela import col_mean_solve, frob_norm, frob_norm2, lstsq_right
from .fnn import FnnParams, fnn_forward
from .linesearch import backtrack
from .metrics import IterRecord, NumericalAbort, accuracy, check_finite, should_log
from .softmax_ce import ce_loss_mean, ce_parts


@dataclass
class LySepFnnState:
    params: FnnParams
    aux: List[np.ndarray]

    def __post_init__(self):
        L = self.params.depth
        if len(self.aux) != L - 1:
            raise ValueError(f"expected {L - 1} auxiliary matrices, got {len(self.aux)}")
        n = self.aux[0].shape[1]
        for l, c in enumerate(self.aux):
            if c.shape != (self.params.weights[l].shape[0], n):
                raise ValueError(f"c_{l + 1} has shape {c.shape}")

    @property
    def depth(self):
        return self.params.depth

    @property
    def n_samples(self):
        return self.aux[0].shape[1]

    def copy(self):
        return LySepFnnState(self.params.copy(), [c.copy() for c in self.aux])


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def init_aux(p, act, x):
    """State whose auxiliaries equal the forward-pass pre-activations."""
    _, preacts = fnn_forward(p, act, x)
    return LySepFnnState(p.copy(), [c.copy() for c in preacts])


def adaptive_weights(p):
    """``[omega_1, ..., omega_{L-1}]`` with ``omega_l = prod_{j=l+1}^{L} ||W_j||_F^2``."""
    norms = [frob_norm2(w) for w in p.weights]
    L = len(norms)
    omega = [0.0] * (L - 1)
    acc = 1.0
    for l in range(L - 1, 0, -1):
        acc *= norms[l]
        omega[l - 1] = acc
    return omega


def _check_layer(s, l, upper):
    if not 1 <= l <= upper:
        raise IndexError(f"layer index {l} outside 1..{upper}")


def layer_input(s, act, x, l):
    """``V_l``: the input ``X`` for ``l = 1``, else ``sigma(c_{l-1})``."""
    return x if l == 1 else act.f(s.aux[l - 2])


def residual(s, act, x, l):
    """``W_l V_l + b_l 1^T - c_l`` for hidden layer ``l``."""
    w, b = s.params.weights[l - 1], s.params.biases[l - 1]
    return w @ layer_input(s, act, x, l) + b - s.aux[l - 1]


def output_loss_vec(s, act, a):
    """``R``: per-sample cross-entropy of ``W_L sigma(c_{L-1})``."""
    return ce_parts(s.params.weights[-1] @ act.f(s.aux[-1]), a)[1]


def surrogate_terms(s, act, x, a):
    """``(||R||^2, [omega_l * ||residual_l||^2 for l = 1..L-1])``."""
    r = output_loss_vec(s, act, a)
    omega = adaptive_weights(s.params)
    pens = [omega[l - 1] * frob_norm2(residual(s, act, x, l)) for l in range(1, s.depth)]
    return float(r @ r), pens


def surrogate_S(s, act, x, a):
    head, pens = surrogate_terms(s, act, x, a)
    return head + sum(pens)


def lysep_loss(s, act, x, a):
    return math.sqrt(surrogate_S(s, act, x, a) / s.n_samples)


def _ridge(norms, res, l):
    """``sum_{i<l} (prod_{j=i+1}^{l-1} norms_j) res_i`` with 1-based ``l``.

    ``norms[j-1] = ||W_j||^2`` and ``res[i-1] = ||W_i V_i - B_i||^2``.
    """
    total, acc = 0.0, 1.0
    for i in range(l - 1, 0, -1):
        total += acc * res[i - 1]
        acc *= norms[i - 1]
    return total


def _residual_norms(s, act, x):
    return [frob_norm2(residual(s, act, x, l)) for l in range(1, s.depth)]


def lambda_for_Wl(s, act, x, l):
    """Ridge weight of the ``W_l`` subproblem (``lambda_1 = 0``)."""
    _check_layer(s, l, s.depth - 1)
    norms = [frob_norm2(w) for w in s.params.weights]
    return _ridge(norms, _residual_norms(s, act, x), l)


def lambda_for_WL(s, act, x):
    """Ridge weight collecting every penalty that carries ``||W_L||^2``."""
    norms = [frob_norm2(w) for w in s.params.weights]
    return _ridge(norms, _residual_norms(s, act, x), s.depth)


# -- local objectives and gradients -------------------------------------------
#
# Each block update only touches the terms of S that contain the block, so the
# line search compares those terms; the difference equals the change of S.


def _head_value_grad_c(w_last, a, act, c, grad=True):
    """``||R||^2`` as a function of ``c_{L-1}`` and its gradient."""
    h = act.f(c)
    prob, r = ce_parts(w_last @ h, a)
    val = float(r @ r)
    if not grad:
        return val, None
    g = 2.0 * (w_last.T @ ((prob - a) * r)) * act.df(c)
    return val, g


def _head_value_grad_w(h, a, w, lam, grad=True):
    prob, r = ce_parts(w @ h, a)
    val = float(r @ r) + lam * frob_norm2(w)
    if not grad:
        return val, None
    return val, 2.0 * lam * w + 2.0 * ((prob - a) * r) @ h.T


def _c_objective(act, w_next, target_next, om_next, target_self, om_self):
    """Value of ``om_next ||W_{l+1} sigma(c) - B_{l+1}||^2 + om_self ||T_l - c||^2``."""

    def f(c):
        return om_next * frob_norm2(w_next @ act.f(c) - target_next) + om_self * frob_norm2(target_self - c)

    return f


def _c_grad(act, c, w_next, target_next, om_next, target_self, om_self):
    inner = w_next.T @ (w_next @ act.f(c) - target_next)
    return 2.0 * (om_next * inner * act.df(c) + om_self * (c - target_self))


def grad_c(s, act, x, a, l):
    """Gradient of S with respect to ``c_l`` (``1 <= l <= L-1``)."""
    L = s.depth
    _check_layer(s, l, L - 1)
    omega = adaptive_weights(s.params)
    w, b = s.params.weights, s.params.biases
    c = s.aux[l - 1]
    target_self = w[l - 1] @ layer_input(s, act, x, l) + b[l - 1]
    if l == L - 1:
        g = _head_value_grad_c(w[-1], a, act, c)[1]
        return g + 2.0 * omega[l - 1] * (c - target_self)
    target_next = s.aux[l] - b[l]
    return _c_grad(act, c, w[l], target_next, omega[l], target_self, omega[l - 1])


def grad_WL(s, act, x, a):
    """Gradient of S with respect to ``W_L``."""
    lam = lambda_for_WL(s, act, x)
    return _head_value_grad_w(act.f(s.aux[-1]), a, s.params.weights[-1], lam)[1]


# -- exact block updates ------------------------------------------------------


def update_Wl(s, act, x, l, lam=None):
    """Replace ``W_l`` by its exact minimizer; returns a new state."""
    _check_layer(s, l, s.depth - 1)
    if lam is None:
        lam = lambda_for_Wl(s, act, x, l)
    out = s.copy()
    v = layer_input(s, act, x, l)
    out.params.weights[l - 1] = lstsq_right(v, s.aux[l - 1] - s.params.biases[l - 1], lam)
    return out


def update_bl(s, act, x, l):
    """Replace ``b_l`` by the column mean of ``c_l - W_l V_l``."""
    _check_layer(s, l, s.depth - 1)
    out = s.copy()
    v = layer_input(s, act, x, l)
    out.params.biases[l - 1] = col_mean_solve(s.aux[l - 1] - s.params.weights[l - 1] @ v)
    return out


# -- analysis helpers ---------------------------------------------------------


def bound_constant(lipschitz, n_layers):
    """``max(sqrt 2, 2B, 2B^n)`` for ``n`` separated layers."""
    return max(math.sqrt(2.0), 2.0 * lipschitz, 2.0 * lipschitz**n_layers)


def thm31_check(s, act, x, a, slack=1e-10):
    """Compare the true loss with ``C_B sqrt(L-1) sqrt(S/N)``."""
    lhs = ce_loss_mean(fnn_forward(s.params, act, x)[0], a)
    L = s.depth
    rhs = bound_constant(act.lipschitz, L - 1) * math.sqrt(L - 1) * lysep_loss(s, act, x, a)
    return BoundCheck(lhs, rhs, lhs <= rhs + slack)


def lipschitz_estimates(s, act, x, r_bound):
    """Explicit gradient-Lipschitz constants ``[C_1, ..., C_L]``.

    ``C_l`` (l <= L-2) bounds the Lipschitz constant of ``grad_c(l)``,
    ``C_{L-1}`` that of the last auxiliary block and ``C_L`` that of
    ``grad_WL`` over all ``W_L`` with ``||W_L||_F <= r_bound``. Requires every
    weight, bias and auxiliary matrix to have Frobenius norm at most
    ``r_bound``.
    """
    p = s.params
    for name, mats in (("W", p.weights), ("b", p.biases), ("c", s.aux)):
        for i, m in enumerate(mats):
            if frob_norm(m) > r_bound:
                raise ValueError(f"||{name}_{i + 1}||_F = {frob_norm(m):.4g} exceeds r_bound = {r_bound}")
    m0, m1, m2 = act.bound0, act.bound1, act.bound2
    L = s.depth
    n = s.n_samples
    width = s.aux[-1].shape[0]
    n_classes = p.weights[-1].shape[0]
    omega = adaptive_weights(p)
    consts = []
    for l in range(1, L - 1):
        w_next = p.weights[l]
        b_next = s.aux[l] - p.biases[l]
        m_l = s.aux[l - 1].shape[0]
        fw = frob_norm2(w_next)
        inner = m1**2 * fw + m0 * m2 * math.sqrt(m_l * n) * fw + m2 * frob_norm(w_next.T @ b_next)
        consts.append(2.0 * (omega[l] * inner + omega[l - 1]))
    wl = frob_norm(p.weights[-1])
    head = 2.0 * math.sqrt(width) * m0 * wl + math.log(n_classes)
    consts.append(
        2.0 * wl * ((m1**2 * wl + math.sqrt(2.0 * n) * m2) * head + wl * (1.0 + 2.0 * math.sqrt(n) * m1**2))
    )
    lam = lambda_for_WL(s, act, x)
    consts.append(
        2.0 * lam
        + 2.0 * n * width * m0**2 * (2.0 * math.sqrt(width) * m0 * r_bound + math.log(n_classes) + 2.0)
    )
    return consts


# -- training loop -------------------------------------------------------------


@dataclass
class LySepConfig:
    iters: int
    tau0: float = 1.0
    eta: float = 0.5
    max_shrinks: int = 30
    log_every: int = 10
    # "per-update": adaptive weights follow every W change (default);
    # "per-iteration": weights frozen at the start of each outer iteration.
    omega_mode: str = "per-update"
    # "reset": every line search starts at tau0; "carry": start from the
    # previous accepted step of the same block, enlarged by 1/eta when that
    # step was accepted on its first trial (capped at tau0).
    tau_mode: str = "reset"
    # Cap each block's first trial step by 2/C_l from lipschitz_estimates.
    lipschitz_cap: bool = False
    # Evaluate the full surrogate after every sub-update and abort on increase.
    check_monotone: bool = False
    monotone_slack: float = 1e-10

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.tau0 <= 0 or not 0 < self.eta < 1 or self.max_shrinks < 0:
            raise ValueError("need tau0 > 0, 0 < eta < 1, max_shrinks >= 0")
        if self.omega_mode not in ("per-update", "per-iteration"):
            raise ValueError(f"unknown omega_mode {self.omega_mode!r}")
        if self.tau_mode not in ("reset", "carry"):
            raise ValueError(f"unknown tau_mode {self.tau_mode!r}")


class _TauState:
    def __init__(self, cfg, n_blocks):
        self.cfg = cfg
        self.next = [cfg.tau0] * n_blocks
        self.started = [cfg.tau0] * n_blocks

    def start(self, block, cap=None):
        cfg = self.cfg
        tau = self.next[block] if cfg.tau_mode == "carry" else cfg.tau0
        if cap is not None and cap > 0:
            tau = min(tau, cap)
        self.started[block] = tau
        return tau

    def accept(self, block, tau):
        if tau > 0:
            grow = tau >= self.started[block]
            self.next[block] = min(self.cfg.tau0, tau / self.cfg.eta if grow else tau)


def lysep_fnn_sweep(s, act, x, a, cfg, tau_state=None, monitor=None):
    """One outer iteration of the alternating scheme, in place.

    Order: backtracked gradient step on ``W_L``; then for ``l = L-1 .. 1`` a
    backtracked step on ``c_l``, the exact ``W_l`` solve and the exact ``b_l``
    solve. Returns the smallest accepted step size. ``monitor`` (optional) is
    called with a label after every sub-update.
    """
    p = s.params
    w, b, c = p.weights, p.biases, s.aux
    L = p.depth
    if tau_state is None:
        tau_state = _TauState(cfg, L)
    frozen = cfg.omega_mode == "per-iteration"
    norms = [frob_norm2(m) for m in w]
    res = _residual_norms(s, act, x)
    omega_frozen = adaptive_weights(p) if frozen else None
    caps = lipschitz_estimates(s, act, x, _state_radius(s)) if cfg.lipschitz_cap else None
    taus = []

    def omega_now(l):
        if frozen:
            return omega_frozen[l - 1]
        acc = 1.0
        for j in range(l + 1, L + 1):
            acc *= norms[j - 1]
        return acc

    # W_L: gradient step on ||R||^2 + lam ||W_L||^2.
    h_last = act.f(c[-1])
    lam = 0.0 if frozen else _ridge(norms, res, L)

    def f_wl(m):
        return _head_value_grad_w(h_last, a, m, lam, grad=False)[0]

    f0, g = _head_value_grad_w(h_last, a, w[-1], lam)
    new, tau, _ = backtrack(f_wl, w[-1], g, tau_state.start(L - 1, caps and 2.0 / caps[L - 1]),
                            cfg.eta, cfg.max_shrinks, f0)
    w[-1] = new
    tau_state.accept(L - 1, tau)
    taus.append(tau)
    norms[L - 1] = frob_norm2(new)
    if monitor:
        monitor("W_L")

    for l in range(L - 1, 0, -1):
        v = x if l == 1 else act.f(c[l - 2])
        target_self = w[l - 1] @ v + b[l - 1]
        om_self = omega_now(l)
        if l == L - 1:

            def f_c(m, t=target_self, om=om_self):
                return _head_value_grad_c(w[-1], a, act, m, grad=False)[0] + om * frob_norm2(t - m)

            f0, g = _head_value_grad_c(w[-1], a, act, c[l - 1])
            f0 += om_self * frob_norm2(target_self - c[l - 1])
            g = g + 2.0 * om_self * (c[l - 1] - target_self)
        else:
            om_next = omega_now(l + 1)
            target_next = c[l] - b[l]
            f_c = _c_objective(act, w[l], target_next, om_next, target_self, om_self)
            f0 = f_c(c[l - 1])
            g = _c_grad(act, c[l - 1], w[l], target_next, om_next, target_self, om_self)
        cap = caps and 2.0 / caps[l - 1]
        new, tau, _ = backtrack(f_c, c[l - 1], g, tau_state.start(l - 1, cap), cfg.eta, cfg.max_shrinks, f0)
        c[l - 1] = new
        tau_state.accept(l - 1, tau)
        taus.append(tau)
        if monitor:
            monitor(f"c_{l}")

        lam_l = 0.0 if frozen else _ridge(norms, res, l)
        w[l - 1] = lstsq_right(v, c[l - 1] - b[l - 1], lam_l)
        norms[l - 1] = frob_norm2(w[l - 1])
        if monitor:
            monitor(f"W_{l}")
        b[l - 1] = col_mean_solve(c[l - 1] - w[l - 1] @ v)
        if monitor:
            monitor(f"b_{l}")
    return min(taus)


def _state_radius(s):
    mats = s.params.weights + s.params.biases + s.aux
    return max(frob_norm(m) for m in mats)


def train_lysep_fnn(s0, act, data, cfg, test=None, on_record=None):
    """Run the alternating scheme for ``cfg.iters`` outer iterations.

    Logged rows carry the true network loss and accuracy (weights and biases
    only, auxiliaries ignored) and ``sqrt(S/N)`` as the surrogate loss.
    """
    act = act or TANH
    s = s0.copy()
    x, a = data.x, data.a
    logs = []
    tau_state = _TauState(cfg, s.depth)
    start = time.perf_counter()
    monitor = None
    if cfg.check_monotone:
        last = [surrogate_S(s, act, x, a)]

        def monitor(label):
            now = surrogate_S(s, act, x, a)
            if now > last[0] + cfg.monotone_slack * max(1.0, abs(last[0])):
                raise NumericalAbort(f"surrogate increased at {label}", {"before": last[0], "after": now}, logs)
            last[0] = now

    for k in range(1, cfg.iters + 1):
        min_tau = lysep_fnn_sweep(s, act, x, a, cfg, tau_state, monitor)
        if should_log(k, cfg.iters, cfg.log_every):
            surr = lysep_loss(s, act, x, a)
            check_finite("surrogate", surr, logs, iter=k)
            z = fnn_forward(s.params, act, x)[0]
            rec = IterRecord(
                iter=k,
                ce_loss=ce_loss_mean(z, a),
                surrogate_loss=surr,
                train_acc=accuracy(z, a),
                test_acc=None if test is None else accuracy(fnn_forward(s.params, act, test.x)[0], test.a),
                elapsed_ms=1e3 * (time.perf_counter() - start),
                min_tau_used=min_tau,
            )
            logs.append(rec)
            if on_record is not None:
                on_record(rec)
        elif not all(np.isfinite(m).all() for m in s.params.weights):
            raise NumericalAbort("non-finite weights", {"iter": k}, logs)
    return s, logs
