"""Vectorised numpy versions of the fused routing kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
second side of the backend-equivalence tests. Every function works in
float64 on votes shaped ``[P, h, l, d]`` (P flattened positions, h input
capsules, l output capsules, d output-capsule width) and returns the saved
intermediates the matching backward needs.
"""

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
GAUSS_CONST = 0.5 * (1.0 + LOG_2PI)


def _softmax_last(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _squash(s, eps):
    n2 = (s * s).sum(-1, keepdims=True)
    return s * (n2 / ((1.0 + n2) * np.sqrt(n2 + eps)))


def _squash_backward(s, gv, eps):
    n2 = (s * s).sum(-1, keepdims=True)
    r = np.sqrt(n2 + eps)
    scale = n2 / ((1.0 + n2) * r)
    dscale = (1.0 / (r * (1.0 + n2))) * (1.0 / (1.0 + n2) - n2 / (2.0 * (n2 + eps)))
    return gv * scale + 2.0 * s * (gv * s).sum(-1, keepdims=True) * dscale


def dynamic_forward(votes, iterations, eps=1e-12):
    """Routing-by-agreement. Returns ``(v, c_all, s_all, v_all)``."""
    P, h, l, d = votes.shape
    c_all = np.empty((iterations, P, h, l))
    s_all = np.empty((iterations, P, l, d))
    v_all = np.empty((iterations, P, l, d))
    b = np.zeros((P, h, l))
    for t in range(iterations):
        c = _softmax_last(b)
        s = np.einsum("pij,pijk->pjk", c, votes)
        v = _squash(s, eps)
        c_all[t], s_all[t], v_all[t] = c, s, v
        if t < iterations - 1:
            b = b + np.einsum("pijk,pjk->pij", votes, v)
    return v_all[-1].copy(), c_all, s_all, v_all


def dynamic_backward(votes, c_all, s_all, v_all, grad_v, eps=1e-12):
    iterations = c_all.shape[0]
    g_votes = np.zeros_like(votes)
    g_b_next = None
    for t in range(iterations - 1, -1, -1):
        c, s, v = c_all[t], s_all[t], v_all[t]
        gv = grad_v.copy() if t == iterations - 1 else np.zeros_like(v)
        if g_b_next is not None:
            # b_{t+1} = b_t + <votes, v_t>
            gv += np.einsum("pij,pijk->pjk", g_b_next, votes)
            g_votes += g_b_next[..., None] * v[:, None, :, :]
        gs = _squash_backward(s, gv, eps)
        gc = np.einsum("pjk,pijk->pij", gs, votes)
        g_votes += c[..., None] * gs[:, None, :, :]
        gb = c * (gc - (gc * c).sum(-1, keepdims=True))
        g_b_next = gb if g_b_next is None else g_b_next + gb
    return g_votes


def em_forward(votes, beta_a, beta_m, lambdas, var_floor, mass_floor=1e-12):
    """EM routing ending on an M-step.

    Returns ``(mu_all, var_all, sig_all, alpha_all, c_all, mass_all)`` where
    ``var_all`` holds the unfloored variances and ``sig_all`` the floored ones.
    """
    P, h, l, d = votes.shape
    T = len(lambdas)
    mu_all = np.empty((T, P, l, d))
    var_all = np.empty((T, P, l, d))
    sig_all = np.empty((T, P, l, d))
    alpha_all = np.empty((T, P, l))
    c_all = np.empty((T, P, h, l))
    mass_all = np.empty((T, P, l))
    c = np.full((P, h, l), 1.0 / l)
    for t in range(T):
        c_all[t] = c
        mass = c.sum(1)
        ms = np.maximum(mass, mass_floor)[..., None]
        mu = np.einsum("pij,pijk->pjk", c, votes) / ms
        diff = votes - mu[:, None]
        var = np.einsum("pij,pijk->pjk", c, diff * diff) / ms
        sig = np.maximum(var, var_floor)
        cost = (0.5 * np.log(sig) + GAUSS_CONST) * mass[..., None]
        x = lambdas[t] * (beta_a - beta_m * mass - cost.sum(-1))
        alpha = _sigmoid(x)
        mu_all[t], var_all[t], sig_all[t] = mu, var, sig
        alpha_all[t], mass_all[t] = alpha, mass
        if t < T - 1:
            log_p = (-0.5 * (LOG_2PI + np.log(sig))[:, None] - diff * diff / (2.0 * sig[:, None])).sum(-1)
            log_alpha = -np.logaddexp(0.0, -x)
            c = _softmax_last(log_alpha[:, None, :] + log_p)
    return mu_all, var_all, sig_all, alpha_all, c_all, mass_all


def em_backward(votes, beta_a, beta_m, lambdas, var_floor, mass_floor, saved, grad_mu):
    mu_all, var_all, sig_all, alpha_all, c_all, mass_all = saved
    T = len(lambdas)
    g_votes = np.zeros_like(votes)
    g_ba = np.zeros_like(beta_a, dtype=np.float64)
    g_bm = np.zeros_like(beta_m, dtype=np.float64)
    g_c_next = None
    for t in range(T - 1, -1, -1):
        c, mu, var, sig = c_all[t], mu_all[t], var_all[t], sig_all[t]
        alpha, mass = alpha_all[t], mass_all[t]
        lam = lambdas[t]
        diff = votes - mu[:, None]
        g_mu = grad_mu.copy() if t == T - 1 else np.zeros_like(mu)
        g_sig = np.zeros_like(sig)
        g_x = np.zeros_like(alpha)
        if g_c_next is not None:
            # E-step: c_next = softmax_j(log alpha_j + sum_k log p_ijk)
            cn = c_all[t + 1]
            g_logit = cn * (g_c_next - (g_c_next * cn).sum(-1, keepdims=True))
            g_x += g_logit.sum(1) * (1.0 - alpha)
            inv = 1.0 / sig[:, None]
            gl = g_logit[..., None]
            g_votes += gl * (-diff * inv)
            g_mu += (gl * diff * inv).sum(1)
            g_sig += (gl * (-0.5 * inv + 0.5 * diff * diff * inv * inv)).sum(1)
        # alpha = sigmoid(lam * (beta_a - beta_m * mass - sum_k cost))
        g_ba += lam * g_x.reshape(-1, g_x.shape[-1]).sum(0)
        g_bm += (-lam * g_x * mass).reshape(-1, mass.shape[-1]).sum(0)
        g_mass = -lam * g_x * beta_m
        g_cost = -lam * g_x
        g_sig += g_cost[..., None] * mass[..., None] / (2.0 * sig)
        g_mass += g_cost * (0.5 * np.log(sig) + GAUSS_CONST).sum(-1)
        g_var = g_sig * (var > var_floor)
        ms = np.maximum(mass, mass_floor)
        inv_ms = (1.0 / ms)[..., None]
        # var = sum_i c diff^2 / ms
        g_c = np.einsum("pjk,pijk->pij", g_var * inv_ms, diff * diff)
        g_votes += c[..., None] * (2.0 * diff) * (g_var * inv_ms)[:, None]
        g_mu += -2.0 * np.einsum("pij,pijk->pjk", c, diff) * g_var * inv_ms
        g_ms = -(g_var * var).sum(-1) / ms
        # mu = sum_i c votes / ms
        g_c += np.einsum("pjk,pijk->pij", g_mu * inv_ms, votes)
        g_votes += c[..., None] * (g_mu * inv_ms)[:, None]
        g_ms += -(g_mu * mu).sum(-1) / ms
        g_mass += g_ms * (mass > mass_floor)
        g_c += g_mass[:, None, :]
        g_c_next = g_c
    return g_votes, g_ba, g_bm
