# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled ensemble kernels: fused forward/backward of the RBF-weighted MLP sum.

Same parameter layout and semantics as pure.py.  Matrix products go straight
to BLAS through pointers; the elementwise stages live in _fastloops.c where
restrict-qualified loops vectorize (sigmoid via libmvec).
"""

import threading

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

_tls = threading.local()

cdef extern from "_fastloops.h":
    void dflow_sigmoid_act(double* Z, double* S, const double* b, long R, long d) nogil
    void dflow_bias_kappa_accum(const double* Z, const double* b, const double* kap,
                                double* Y, long R, long d, long K, long m) nogil
    void dflow_kappa_scale(const double* dY, const double* kap, double* G,
                           long R, long d, long K, long m, long r0) nogil
    void dflow_colsum(const double* G, double* dw, long R, long d) nogil
    void dflow_swish_prime_mul(double* G, const double* S, const double* A, long n) nogil
    void dflow_acc(double* dst, const double* src, long n) nogil


def member_size(dims):
    return int(sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1)))


cdef void _mm(double* A, double* B, double* C, int M, int N, int K, double beta) noexcept nogil:
    # row-major C(M,N) = A(M,K) @ B(K,N) + beta*C  (all tight)
    cdef char n = b'N'
    cdef double one = 1.0
    dgemm(&n, &n, &N, &M, &K, &one, B, &N, A, &K, &beta, C, &N)


cdef void _mm_atb(double* A, double* G, double* C, int R, int M, int N) noexcept nogil:
    # row-major C(M,N) += A(R,M).T @ G(R,N)
    cdef char n = b'N'
    cdef char t = b'T'
    cdef double one = 1.0
    dgemm(&n, &t, &N, &M, &R, &one, G, &N, A, &M, &one, C, &N)


cdef void _mm_abt(double* G, double* W, double* C, int R, int dout, int din) noexcept nogil:
    # row-major C(R,din) = G(R,dout) @ W(din,dout).T
    cdef char n = b'N'
    cdef char t = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&t, &n, &din, &R, &dout, &one, W, &dout, G, &dout, &zero, C, &din)


cdef class _Work:
    """Reusable per-call buffers: acts[l] holds layer-l activations in place."""
    cdef public list acts   # (R, d_{l+1}) for each layer
    cdef public list sigs   # (R, d_{l+1}) for hidden layers
    cdef public list grads  # (R, d_l) for every depth

    def __init__(self, dims, long R, bint with_grads):
        self.acts = [np.empty((R, d)) for d in dims[1:]]
        self.sigs = [np.empty((R, d)) for d in dims[1:-1]]
        self.grads = [np.empty((R, d)) for d in dims] if with_grads else []


def _get_work(dims_py, long R, bint with_grads):
    # scratch reuse across calls; keyed per thread, calls never overlap in one
    cache = getattr(_tls, "work", None)
    if cache is None:
        cache = _tls.work = {}
    key = (tuple(dims_py), R, with_grads)
    wk = cache.get(key)
    if wk is None:
        wk = cache[key] = _Work(dims_py, R, with_grads)
    return wk


cdef void _member_forward(double[::1] w, long woff0, list dims_py, double[:, ::1] X,
                          _Work wk, long rc, bint hidden_only) :
    cdef long L = len(dims_py) - 1
    cdef long l, din, dout, woff
    cdef long off = woff0
    cdef double[:, ::1] Av
    cdef double[:, ::1] Zv
    cdef double[:, ::1] Sv
    cdef long stop = L - 1 if hidden_only else L
    for l in range(stop):
        din = dims_py[l]
        dout = dims_py[l + 1]
        woff = off
        off += din * dout + dout
        Av = X if l == 0 else wk.acts[l - 1][:rc]
        Zv = wk.acts[l][:rc]
        with nogil:
            _mm(&Av[0, 0], &w[woff], &Zv[0, 0], <int> rc, <int> dout, <int> din, 0.0)
        if l < L - 1:
            Sv = wk.sigs[l][:rc]
            with nogil:
                dflow_sigmoid_act(&Zv[0, 0], &Sv[0, 0], &w[woff + din * dout], rc, dout)


def ensemble_forward(double[::1] w, long[::1] dims, double[:, ::1] X, double[:, ::1] kappa):
    cdef long R = X.shape[0]
    cdef long K = kappa.shape[1]
    cdef long L = dims.shape[0] - 1
    cdef long msize = member_size(np.asarray(dims))

    dims_py = [int(d) for d in np.asarray(dims)]
    Y_np = np.zeros((R, dims_py[L]))
    cdef double[:, ::1] Y = Y_np
    wk = _get_work(dims_py, R, False)

    cdef long m, din, dout, woff
    cdef double[:, ::1] Av
    cdef double[:, ::1] Zv
    din = dims_py[L - 1]
    dout = dims_py[L]
    for m in range(K):
        _member_forward(w, m * msize, dims_py, X, wk, R, True)
        woff = m * msize + (msize - (din + 1) * dout)
        Av = X if L == 1 else wk.acts[L - 2]
        Zv = wk.acts[L - 1]
        with nogil:
            _mm(&Av[0, 0], &w[woff], &Zv[0, 0], <int> R, <int> dout, <int> din, 0.0)
            dflow_bias_kappa_accum(&Zv[0, 0], &w[woff + din * dout], &kappa[0, 0],
                                   &Y[0, 0], R, dout, K, m)
    return Y_np


def ensemble_backward(double[::1] w, long[::1] dims, double[:, ::1] X,
                      double[:, ::1] kappa, double[:, ::1] dY):
    cdef long R = X.shape[0]
    cdef long K = kappa.shape[1]
    cdef long L = dims.shape[0] - 1
    cdef long msize = member_size(np.asarray(dims))
    cdef long chunk = 16384

    dims_py = [int(d) for d in np.asarray(dims)]
    dX_np = np.zeros((R, dims_py[0]))
    dw_np = np.zeros(w.shape[0])
    cdef double[:, ::1] dX = dX_np
    cdef double[::1] dw = dw_np

    cdef long cmax = min(R, chunk)
    wk = _get_work(dims_py, cmax, True)

    cdef long r0, r1, rc, m, l, din, dout, woff, off
    cdef long d0 = dims_py[0]
    cdef double[:, ::1] Xv
    cdef double[:, ::1] Av
    cdef double[:, ::1] Sv
    cdef double[:, ::1] Gv
    cdef double[:, ::1] G2v

    for r0 in range(0, R, chunk):
        r1 = min(R, r0 + chunk)
        rc = r1 - r0
        Xv = X[r0:r1]
        for m in range(K):
            # recompute hidden activations (the output layer's values are not needed)
            _member_forward(w, m * msize, dims_py, Xv, wk, rc, True)
            dout = dims_py[L]
            Gv = wk.grads[L][:rc]
            with nogil:
                dflow_kappa_scale(&dY[0, 0], &kappa[0, 0], &Gv[0, 0], rc, dout, K, m, r0)
            off = (m + 1) * msize
            for l in range(L - 1, -1, -1):
                din = dims_py[l]
                dout = dims_py[l + 1]
                off -= din * dout + dout
                woff = off
                Av = Xv if l == 0 else wk.acts[l - 1][:rc]
                Gv = wk.grads[l + 1][:rc]
                G2v = wk.grads[l][:rc]
                with nogil:
                    dflow_colsum(&Gv[0, 0], &dw[woff + din * dout], rc, dout)
                    _mm_atb(&Av[0, 0], &Gv[0, 0], &dw[woff], <int> rc, <int> din, <int> dout)
                    _mm_abt(&Gv[0, 0], &w[woff], &G2v[0, 0], <int> rc, <int> dout, <int> din)
                if l > 0:
                    Sv = wk.sigs[l - 1][:rc]
                    Av = wk.acts[l - 1][:rc]
                    with nogil:
                        dflow_swish_prime_mul(&G2v[0, 0], &Sv[0, 0], &Av[0, 0], rc * din)
            with nogil:
                dflow_acc(&dX[r0, 0], &G2v[0, 0], rc * d0)
    return dX_np, dw_np
