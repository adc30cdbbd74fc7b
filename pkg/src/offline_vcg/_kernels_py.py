"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_native.pyx`` mirrors them loop for loop.
"""
from __future__ import annotations

import numpy as np

TIE_RTOL = 1e-12
MAX_HALVINGS = 60


def _residuals(f, mu, rbar, phat, pi):
    H = f.shape[0]
    e = np.empty_like(f)
    for h in range(H):
        e[h] = f[h] - rbar[h]
        if h + 1 < H:
            v_next = np.einsum("sa,sa->s", pi[h + 1], f[h + 1])
            e[h] -= phat[h] @ v_next
    return e


def qp_objective(f, mu, rbar, phat, pi, s0, sigma, lam):
    """``sigma * f_1(s0, pi_1) + lam * sum_h sum_{s,a} mu_h (f_h - target_h)^2``."""
    e = _residuals(f, mu, rbar, phat, pi)
    return float(sigma * (f[0, s0] @ pi[0, s0]) + lam * np.sum(mu * e * e))


def qp_gradient(f, mu, rbar, phat, pi, s0, sigma, lam, free):
    H = f.shape[0]
    e = _residuals(f, mu, rbar, phat, pi)
    we = mu * e
    g = 2.0 * lam * we
    g[0, s0] += sigma * pi[0, s0]
    for h in range(1, H):
        w = np.einsum("sa,sat->t", we[h - 1], phat[h - 1])
        g[h] -= 2.0 * lam * pi[h] * w[:, None]
    return g * free


def pgd_box_qp(f0, mu, rbar, phat, pi, s0, sigma, lam, bound, free, step, max_iter, tol):
    """Projected gradient descent with step halving on objective increase.

    Returns ``(f, iterations, converged, objective, projected_grad_norm)``.
    Coordinates where ``free`` is 0 never move.
    """
    f = np.array(f0, dtype=float)
    lo = -bound[:, None, None]
    hi = bound[:, None, None]
    free = np.asarray(free, dtype=float)
    obj = qp_objective(f, mu, rbar, phat, pi, s0, sigma, lam)
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        g = qp_gradient(f, mu, rbar, phat, pi, s0, sigma, lam, free)
        accepted = False
        for _ in range(MAX_HALVINGS):
            cand = np.clip(f - step * g, lo, hi)
            cand_obj = qp_objective(cand, mu, rbar, phat, pi, s0, sigma, lam)
            if cand_obj <= obj:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        decrease = obj - cand_obj
        f, obj = cand, cand_obj
        if decrease < tol:
            converged = True
            break
    g = qp_gradient(f, mu, rbar, phat, pi, s0, sigma, lam, free)
    pg = f - np.clip(f - g, lo, hi)
    return f, it, converged, obj, float(np.sqrt(np.sum(pg * pg)))


def _greedy(Q):
    top = Q.max(axis=-1, keepdims=True)
    tol = TIE_RTOL * np.maximum(1.0, np.abs(top))
    return np.argmax(Q >= top - tol, axis=-1)


def batch_optimal(P, R, s0):
    """Backward induction for a batch of reward tables ``R[b, h, s, a]``.

    Returns ``(V*_1(s0) per batch entry, greedy actions[b, h, s])``.
    """
    B, H, S, A = R.shape
    V = np.zeros((B, S))
    actions = np.zeros((B, H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Q = R[:, h] + np.einsum("sat,bt->bsa", P[h], V)
        actions[:, h] = _greedy(Q)
        V = np.take_along_axis(Q, actions[:, h, :, None], axis=2)[..., 0]
    return V[:, s0].copy(), actions


def batch_policy_value(P, R, actions, s0):
    """``V^pi_1(s0)`` of deterministic policies ``actions[b, h, s]`` on ``R[b]``."""
    B, H, S, A = R.shape
    V = np.zeros((B, S))
    for h in range(H - 1, -1, -1):
        a = actions[:, h]
        Q = R[:, h] + np.einsum("sat,bt->bsa", P[h], V)
        V = np.take_along_axis(Q, a[..., None], axis=2)[..., 0]
    return V[:, s0].copy()
