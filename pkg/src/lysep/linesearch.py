"""Monotone backtracking line search."""

import math

import numpy as np


def backtrack_tau(phi, f0, tau0=1.0, eta=0.5, max_shrinks=30):
    """Largest ``tau = tau0 * eta**k`` (``k <= max_shrinks``) with ``phi(tau) <= f0``.

    Returns ``(tau, phi(tau), k)``; ``tau`` is 0 when every trial fails.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the starting point")
    tau = tau0
    for k in range(max_shrinks + 1):
        f1 = phi(tau)
        if f1 <= f0:
            return tau, f1, k
        tau *= eta
    return 0.0, f0, max_shrinks + 1


def backtrack(f, x0, g, tau0=1.0, eta=0.5, max_shrinks=30, f0=None):
    """Try ``x0 - tau*g`` for ``tau = tau0 * eta**k``, ``k = 0..max_shrinks``.

    The first candidate with ``f(x1) <= f(x0)`` is accepted (no sufficient
    decrease term). Returns ``(x1, tau, f(x1))``; when no candidate is
    accepted the point is left unchanged and ``tau`` is 0.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if f0 is None:
        f0 = f(x0)
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the starting point")
    if not np.any(g):
        return x0, tau0, f0
    tau = tau0
    for _ in range(max_shrinks + 1):
        x1 = x0 - tau * g
        f1 = f(x1)
        if f1 <= f0:
            return x1, tau, f1
        tau *= eta
    return x0, 0.0, f0


def backtrack_step(eval_s, x0, g, tau0=1.0, eta=0.5, max_shrinks=30):
    """Accepted point and step size of :func:`backtrack`."""
    x1, tau, _ = backtrack(eval_s, x0, g, tau0, eta, max_shrinks)
    return x1, tau
