# cython: language_level=3
"""Compiled hot kernels. Same signatures and semantics as ``_pykernels``.

Loops run without the GIL in a fixed order, so results are reproducible
bit for bit regardless of how many sweep workers run concurrently.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, tanh, lgamma

cnp.import_array()

cdef double PROB_FLOOR = 1e-12


def dense_tanh_forward(const double[:, ::1] X, const double[:, ::1] W, const double[::1] b):
    cdef Py_ssize_t B = X.shape[0], I = X.shape[1], O = W.shape[1]
    cdef Py_ssize_t n, i, o
    cdef double xv
    out = np.empty((B, O), dtype=np.float64)
    cdef double[:, ::1] Y = out
    with nogil:
        for n in range(B):
            for o in range(O):
                Y[n, o] = b[o]
            for i in range(I):
                xv = X[n, i]
                for o in range(O):
                    Y[n, o] += xv * W[i, o]
            for o in range(O):
                Y[n, o] = tanh(Y[n, o])
    return out


def dense_tanh_backward(const double[:, ::1] X, const double[:, ::1] W,
                        const double[:, ::1] Y, const double[:, ::1] dY):
    cdef Py_ssize_t B = X.shape[0], I = X.shape[1], O = W.shape[1]
    cdef Py_ssize_t n, i, o
    cdef double acc, xv
    dW_arr = np.zeros((I, O), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    dX_arr = np.empty((B, I), dtype=np.float64)
    dZ_arr = np.empty((B, O), dtype=np.float64)
    cdef double[:, ::1] dW = dW_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dX = dX_arr
    cdef double[:, ::1] dZ = dZ_arr
    with nogil:
        for n in range(B):
            for o in range(O):
                dZ[n, o] = dY[n, o] * (1.0 - Y[n, o] * Y[n, o])
                db[o] += dZ[n, o]
            for i in range(I):
                xv = X[n, i]
                acc = 0.0
                for o in range(O):
                    dW[i, o] += xv * dZ[n, o]
                    acc += dZ[n, o] * W[i, o]
                dX[n, i] = acc
    return dW_arr, db_arr, dX_arr


def heads_forward(const double[:, ::1] Hh, const double[:, :, ::1] W, const double[:, ::1] b):
    cdef Py_ssize_t B = Hh.shape[0], H = Hh.shape[1], A = W.shape[0], M = W.shape[2]
    cdef Py_ssize_t n, a, h, m
    cdef double mx, tot, hv
    out = np.empty((B, A, M), dtype=np.float64)
    cdef double[:, :, ::1] P = out
    with nogil:
        for n in range(B):
            for a in range(A):
                for m in range(M):
                    P[n, a, m] = b[a, m]
                for h in range(H):
                    hv = Hh[n, h]
                    for m in range(M):
                        P[n, a, m] += hv * W[a, h, m]
                mx = P[n, a, 0]
                for m in range(1, M):
                    if P[n, a, m] > mx:
                        mx = P[n, a, m]
                tot = 0.0
                for m in range(M):
                    P[n, a, m] = exp(P[n, a, m] - mx)
                    tot += P[n, a, m]
                for m in range(M):
                    P[n, a, m] /= tot
    return out


def heads_objective(const double[:, :, ::1] P, const double[:, :, ::1] T,
                    double ent_coeff, double cb_coeff):
    cdef Py_ssize_t B = P.shape[0], A = P.shape[1], M = P.shape[2]
    cdef Py_ssize_t n, a, m
    cdef double loss = 0.0, ent_loss = 0.0, cb_loss = 0.0
    cdef double s, lp, negent, pg, p, inv_b = 1.0 / B
    cdef double ent_scale = ent_coeff / (B * A)
    cdef double cb_scale = cb_coeff / (A * M * B)
    grad_arr = np.empty((B, A, M), dtype=np.float64)
    pbar_arr = np.zeros((A, M), dtype=np.float64)
    cdef double[:, :, ::1] G = grad_arr
    cdef double[:, ::1] pbar = pbar_arr
    with nogil:
        for n in range(B):
            for a in range(A):
                s = 0.0
                negent = 0.0
                for m in range(M):
                    s += T[n, a, m]
                    p = P[n, a, m]
                    lp = log(p if p > PROB_FLOOR else PROB_FLOOR)
                    loss -= T[n, a, m] * lp
                    negent += p * lp
                for m in range(M):
                    p = P[n, a, m]
                    G[n, a, m] = (s * p - T[n, a, m]) * inv_b
                    if ent_coeff != 0.0:
                        lp = log(p if p > PROB_FLOOR else PROB_FLOOR)
                        G[n, a, m] += ent_scale * (p * lp - p * negent)
                if ent_coeff != 0.0:
                    ent_loss += negent
        loss = loss * inv_b
        if ent_coeff != 0.0:
            loss += ent_coeff * ent_loss / (B * A)
        if cb_coeff != 0.0:
            for n in range(B):
                for a in range(A):
                    for m in range(M):
                        pbar[a, m] += P[n, a, m]
            for a in range(A):
                for m in range(M):
                    pbar[a, m] *= inv_b
                    p = pbar[a, m]
                    cb_loss += log(1.0 / M) - log(p if p > PROB_FLOOR else PROB_FLOOR)
            loss += cb_coeff * cb_loss / (A * M)
            for n in range(B):
                for a in range(A):
                    pg = 0.0
                    for m in range(M):
                        pg += P[n, a, m] * (-cb_scale / pbar[a, m])
                    for m in range(M):
                        G[n, a, m] += P[n, a, m] * (-cb_scale / pbar[a, m] - pg)
    return float(loss), grad_arr


def heads_backward(const double[:, ::1] Hh, const double[:, :, ::1] W,
                   const double[:, :, ::1] dlogits):
    cdef Py_ssize_t B = Hh.shape[0], H = Hh.shape[1], A = W.shape[0], M = W.shape[2]
    cdef Py_ssize_t n, a, h, m
    cdef double hv, acc
    dW_arr = np.zeros((A, H, M), dtype=np.float64)
    db_arr = np.zeros((A, M), dtype=np.float64)
    dH_arr = np.zeros((B, H), dtype=np.float64)
    cdef double[:, :, ::1] dW = dW_arr
    cdef double[:, ::1] db = db_arr
    cdef double[:, ::1] dH = dH_arr
    with nogil:
        for n in range(B):
            for a in range(A):
                for m in range(M):
                    db[a, m] += dlogits[n, a, m]
                for h in range(H):
                    hv = Hh[n, h]
                    acc = 0.0
                    for m in range(M):
                        dW[a, h, m] += hv * dlogits[n, a, m]
                        acc += dlogits[n, a, m] * W[a, h, m]
                    dH[n, h] += acc
    return dW_arr, db_arr, dH_arr


def beta_log_pdf(x, double a, double b):
    xs = np.ascontiguousarray(x, dtype=np.float64)
    flat = xs.reshape(-1)
    out = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double norm = lgamma(a + b) - lgamma(a) - lgamma(b)
    with nogil:
        for i in range(n):
            ov[i] = (a - 1.0) * log(xv[i]) + (b - 1.0) * log1p(-xv[i]) + norm
    return out.reshape(xs.shape)
