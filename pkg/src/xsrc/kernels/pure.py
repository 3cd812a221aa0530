"""Pure-numpy reservoir state-evolution kernels (fallback backend)."""

from __future__ import annotations

import numpy as np

NAME = "pure"


def drive(W, proj, r0, alpha):
    """Evolve r through all rows of ``proj`` (precomputed W_in @ u per step).

    r <- r + alpha * (tanh(W r + proj[t]) - r), recording the state after
    every step. ``W`` is a scipy CSR matrix; returns (n_steps, d_r) float64.
    """
    n, d = proj.shape
    states = np.empty((n, d))
    r = np.array(r0, dtype=np.float64, copy=True)
    for t in range(n):
        z = W.dot(r)
        z += proj[t]
        r = r + alpha * (np.tanh(z) - r)
        states[t] = r
    return states


def step(W, W_in, u, r, alpha):
    """One Euler step with raw input ``u``; returns (r_next, preact_absmax)."""
    z = W.dot(r)
    z += W_in @ u
    pre = float(np.max(np.abs(z))) if z.size else 0.0
    r_next = r + alpha * (np.tanh(z) - r)
    return r_next, pre
