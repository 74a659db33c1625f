# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused routing kernels.

Same signatures and return values as ``capsattn._kernels_py``; the loops run
one position at a time so no [P, h, l, d] temporaries are allocated.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh, log1p

cnp.import_array()

cdef double LOG_2PI = log(2.0 * 3.141592653589793)
cdef double GAUSS_CONST = 0.5 * (1.0 + LOG_2PI)


cdef inline double _log_sigmoid(double x) nogil:
    if x >= 0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


def dynamic_forward(const double[:, :, :, ::1] votes, int iterations, double eps=1e-12):
    cdef Py_ssize_t P = votes.shape[0], H = votes.shape[1], L = votes.shape[2], D = votes.shape[3]
    c_all_a = np.empty((iterations, P, H, L))
    s_all_a = np.empty((iterations, P, L, D))
    v_all_a = np.empty((iterations, P, L, D))
    cdef double[:, :, :, ::1] c_all = c_all_a
    cdef double[:, :, :, ::1] s_all = s_all_a
    cdef double[:, :, :, ::1] v_all = v_all_a
    b_a = np.zeros((H, L))
    cdef double[:, ::1] b = b_a
    cdef Py_ssize_t p, t, i, j, k
    cdef double m, z, acc, n2, scale
    with nogil:
        for p in range(P):
            for i in range(H):
                for j in range(L):
                    b[i, j] = 0.0
            for t in range(iterations):
                for i in range(H):
                    m = b[i, 0]
                    for j in range(1, L):
                        if b[i, j] > m:
                            m = b[i, j]
                    z = 0.0
                    for j in range(L):
                        c_all[t, p, i, j] = exp(b[i, j] - m)
                        z = z + c_all[t, p, i, j]
                    for j in range(L):
                        c_all[t, p, i, j] = c_all[t, p, i, j] / z
                for j in range(L):
                    n2 = 0.0
                    for k in range(D):
                        acc = 0.0
                        for i in range(H):
                            acc = acc + c_all[t, p, i, j] * votes[p, i, j, k]
                        s_all[t, p, j, k] = acc
                        n2 = n2 + acc * acc
                    scale = n2 / ((1.0 + n2) * sqrt(n2 + eps))
                    for k in range(D):
                        v_all[t, p, j, k] = s_all[t, p, j, k] * scale
                if t < iterations - 1:
                    for i in range(H):
                        for j in range(L):
                            acc = 0.0
                            for k in range(D):
                                acc = acc + votes[p, i, j, k] * v_all[t, p, j, k]
                            b[i, j] = b[i, j] + acc
    return v_all_a[iterations - 1].copy(), c_all_a, s_all_a, v_all_a


def dynamic_backward(const double[:, :, :, ::1] votes, const double[:, :, :, ::1] c_all,
                     const double[:, :, :, ::1] s_all, const double[:, :, :, ::1] v_all,
                     const double[:, :, ::1] grad_v, double eps=1e-12):
    cdef Py_ssize_t T = c_all.shape[0]
    cdef Py_ssize_t P = votes.shape[0], H = votes.shape[1], L = votes.shape[2], D = votes.shape[3]
    g_votes_a = np.zeros((P, H, L, D))
    cdef double[:, :, :, ::1] g_votes = g_votes_a
    gbn_a = np.zeros((H, L))
    gc_a = np.zeros((H, L))
    gv_a = np.zeros((L, D))
    gs_a = np.zeros((L, D))
    cdef double[:, ::1] gbn = gbn_a
    cdef double[:, ::1] gc = gc_a
    cdef double[:, ::1] gv = gv_a
    cdef double[:, ::1] gs = gs_a
    cdef Py_ssize_t p, t, i, j, k
    cdef double acc, n2, r, scale, dscale, dot, cdot
    with nogil:
        for p in range(P):
            for i in range(H):
                for j in range(L):
                    gbn[i, j] = 0.0
            for t in range(T - 1, -1, -1):
                for j in range(L):
                    for k in range(D):
                        if t == T - 1:
                            gv[j, k] = grad_v[p, j, k]
                        else:
                            acc = 0.0
                            for i in range(H):
                                acc = acc + gbn[i, j] * votes[p, i, j, k]
                                g_votes[p, i, j, k] += gbn[i, j] * v_all[t, p, j, k]
                            gv[j, k] = acc
                # squash backward
                for j in range(L):
                    n2 = 0.0
                    dot = 0.0
                    for k in range(D):
                        n2 = n2 + s_all[t, p, j, k] * s_all[t, p, j, k]
                        dot = dot + gv[j, k] * s_all[t, p, j, k]
                    r = sqrt(n2 + eps)
                    scale = n2 / ((1.0 + n2) * r)
                    dscale = (1.0 / (r * (1.0 + n2))) * (1.0 / (1.0 + n2) - n2 / (2.0 * (n2 + eps)))
                    for k in range(D):
                        gs[j, k] = gv[j, k] * scale + 2.0 * s_all[t, p, j, k] * dot * dscale
                for i in range(H):
                    cdot = 0.0
                    for j in range(L):
                        acc = 0.0
                        for k in range(D):
                            acc = acc + gs[j, k] * votes[p, i, j, k]
                            g_votes[p, i, j, k] += c_all[t, p, i, j] * gs[j, k]
                        gc[i, j] = acc
                        cdot = cdot + acc * c_all[t, p, i, j]
                    for j in range(L):
                        gbn[i, j] = gbn[i, j] + c_all[t, p, i, j] * (gc[i, j] - cdot)
    return g_votes_a


def em_forward(const double[:, :, :, ::1] votes, const double[::1] beta_a, const double[::1] beta_m,
               const double[::1] lambdas, double var_floor, double mass_floor=1e-12):
    cdef Py_ssize_t P = votes.shape[0], H = votes.shape[1], L = votes.shape[2], D = votes.shape[3]
    cdef Py_ssize_t T = lambdas.shape[0]
    mu_all_a = np.empty((T, P, L, D))
    var_all_a = np.empty((T, P, L, D))
    sig_all_a = np.empty((T, P, L, D))
    alpha_all_a = np.empty((T, P, L))
    c_all_a = np.empty((T, P, H, L))
    mass_all_a = np.empty((T, P, L))
    logit_a = np.empty((H, L))
    xs_a = np.empty(L)
    cdef double[:, :, :, ::1] mu_all = mu_all_a
    cdef double[:, :, :, ::1] var_all = var_all_a
    cdef double[:, :, :, ::1] sig_all = sig_all_a
    cdef double[:, :, ::1] alpha_all = alpha_all_a
    cdef double[:, :, :, ::1] c_all = c_all_a
    cdef double[:, :, ::1] mass_all = mass_all_a
    cdef double[:, ::1] logit = logit_a
    cdef double[::1] xs = xs_a
    cdef Py_ssize_t p, t, i, j, k
    cdef double mass, ms, acc, diff, var, sig, costsum, x, m, z, lp
    cdef double inv_l = 1.0 / L
    with nogil:
        for p in range(P):
            for i in range(H):
                for j in range(L):
                    c_all[0, p, i, j] = inv_l
            for t in range(T):
                for j in range(L):
                    mass = 0.0
                    for i in range(H):
                        mass = mass + c_all[t, p, i, j]
                    ms = mass if mass > mass_floor else mass_floor
                    costsum = 0.0
                    for k in range(D):
                        acc = 0.0
                        for i in range(H):
                            acc = acc + c_all[t, p, i, j] * votes[p, i, j, k]
                        mu_all[t, p, j, k] = acc / ms
                        acc = 0.0
                        for i in range(H):
                            diff = votes[p, i, j, k] - mu_all[t, p, j, k]
                            acc = acc + c_all[t, p, i, j] * diff * diff
                        var = acc / ms
                        sig = var if var > var_floor else var_floor
                        var_all[t, p, j, k] = var
                        sig_all[t, p, j, k] = sig
                        costsum = costsum + (0.5 * log(sig) + GAUSS_CONST) * mass
                    x = lambdas[t] * (beta_a[j] - beta_m[j] * mass - costsum)
                    xs[j] = x
                    alpha_all[t, p, j] = 0.5 * (1.0 + tanh(0.5 * x))
                    mass_all[t, p, j] = mass
                if t < T - 1:
                    for i in range(H):
                        m = -1e308
                        for j in range(L):
                            lp = 0.0
                            for k in range(D):
                                diff = votes[p, i, j, k] - mu_all[t, p, j, k]
                                sig = sig_all[t, p, j, k]
                                lp = lp - 0.5 * (LOG_2PI + log(sig)) - diff * diff / (2.0 * sig)
                            logit[i, j] = _log_sigmoid(xs[j]) + lp
                            if logit[i, j] > m:
                                m = logit[i, j]
                        z = 0.0
                        for j in range(L):
                            c_all[t + 1, p, i, j] = exp(logit[i, j] - m)
                            z = z + c_all[t + 1, p, i, j]
                        for j in range(L):
                            c_all[t + 1, p, i, j] = c_all[t + 1, p, i, j] / z
    return mu_all_a, var_all_a, sig_all_a, alpha_all_a, c_all_a, mass_all_a


def em_backward(const double[:, :, :, ::1] votes, const double[::1] beta_a, const double[::1] beta_m,
                const double[::1] lambdas, double var_floor, double mass_floor, saved,
                const double[:, :, ::1] grad_mu):
    cdef const double[:, :, :, ::1] mu_all = saved[0]
    cdef const double[:, :, :, ::1] var_all = saved[1]
    cdef const double[:, :, :, ::1] sig_all = saved[2]
    cdef const double[:, :, ::1] alpha_all = saved[3]
    cdef const double[:, :, :, ::1] c_all = saved[4]
    cdef const double[:, :, ::1] mass_all = saved[5]
    cdef Py_ssize_t P = votes.shape[0], H = votes.shape[1], L = votes.shape[2], D = votes.shape[3]
    cdef Py_ssize_t T = lambdas.shape[0]
    g_votes_a = np.zeros((P, H, L, D))
    g_ba_a = np.zeros(L)
    g_bm_a = np.zeros(L)
    cdef double[:, :, :, ::1] g_votes = g_votes_a
    cdef double[::1] g_ba = g_ba_a
    cdef double[::1] g_bm = g_bm_a
    gcn_a = np.zeros((H, L))
    gc_a = np.zeros((H, L))
    glog_a = np.zeros((H, L))
    gmu_a = np.zeros((L, D))
    gsig_a = np.zeros((L, D))
    gx_a = np.zeros(L)
    gmass_a = np.zeros(L)
    cdef double[:, ::1] gcn = gcn_a
    cdef double[:, ::1] gc = gc_a
    cdef double[:, ::1] glog = glog_a
    cdef double[:, ::1] gmu = gmu_a
    cdef double[:, ::1] gsig = gsig_a
    cdef double[::1] gx = gx_a
    cdef double[::1] gmass = gmass_a
    cdef Py_ssize_t p, t, i, j, k
    cdef double lam, acc, diff, inv, sig, ms, inv_ms, gvar, gms, mass, logsum, gcost
    cdef bint have_next
    with nogil:
        for p in range(P):
            have_next = False
            for t in range(T - 1, -1, -1):
                lam = lambdas[t]
                for j in range(L):
                    gx[j] = 0.0
                    for k in range(D):
                        gmu[j, k] = grad_mu[p, j, k] if t == T - 1 else 0.0
                        gsig[j, k] = 0.0
                if have_next:
                    for i in range(H):
                        acc = 0.0
                        for j in range(L):
                            acc = acc + gcn[i, j] * c_all[t + 1, p, i, j]
                        for j in range(L):
                            glog[i, j] = c_all[t + 1, p, i, j] * (gcn[i, j] - acc)
                    for j in range(L):
                        acc = 0.0
                        for i in range(H):
                            acc = acc + glog[i, j]
                        gx[j] = acc * (1.0 - alpha_all[t, p, j])
                        for k in range(D):
                            sig = sig_all[t, p, j, k]
                            inv = 1.0 / sig
                            for i in range(H):
                                diff = votes[p, i, j, k] - mu_all[t, p, j, k]
                                g_votes[p, i, j, k] += glog[i, j] * (-diff * inv)
                                gmu[j, k] += glog[i, j] * diff * inv
                                gsig[j, k] += glog[i, j] * (-0.5 * inv + 0.5 * diff * diff * inv * inv)
                for j in range(L):
                    mass = mass_all[t, p, j]
                    g_ba[j] += lam * gx[j]
                    g_bm[j] += -lam * gx[j] * mass
                    gcost = -lam * gx[j]
                    gmass[j] = -lam * gx[j] * beta_m[j]
                    logsum = 0.0
                    for k in range(D):
                        sig = sig_all[t, p, j, k]
                        gsig[j, k] += gcost * mass / (2.0 * sig)
                        logsum = logsum + 0.5 * log(sig) + GAUSS_CONST
                    gmass[j] += gcost * logsum
                    ms = mass if mass > mass_floor else mass_floor
                    inv_ms = 1.0 / ms
                    gms = 0.0
                    for i in range(H):
                        gc[i, j] = 0.0
                    for k in range(D):
                        gvar = gsig[j, k] if var_all[t, p, j, k] > var_floor else 0.0
                        acc = 0.0
                        for i in range(H):
                            diff = votes[p, i, j, k] - mu_all[t, p, j, k]
                            gc[i, j] += gvar * inv_ms * diff * diff
                            g_votes[p, i, j, k] += c_all[t, p, i, j] * 2.0 * diff * gvar * inv_ms
                            acc = acc + c_all[t, p, i, j] * diff
                        gmu[j, k] += -2.0 * acc * gvar * inv_ms
                        gms = gms - gvar * var_all[t, p, j, k] * inv_ms
                        for i in range(H):
                            gc[i, j] += gmu[j, k] * inv_ms * votes[p, i, j, k]
                            g_votes[p, i, j, k] += c_all[t, p, i, j] * gmu[j, k] * inv_ms
                        gms = gms - gmu[j, k] * mu_all[t, p, j, k] * inv_ms
                    if mass > mass_floor:
                        gmass[j] += gms
                    for i in range(H):
                        gc[i, j] += gmass[j]
                for i in range(H):
                    for j in range(L):
                        gcn[i, j] = gc[i, j]
                have_next = True
    return g_votes_a, g_ba_a, g_bm_a
