# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pointer-network kernels.

Same calling convention and cache layout as ``_kernels_py``; see that module
for the argument shapes. Each recurrence step handles the whole batch at once:
the matrix products go through BLAS ``dgemm`` (scipy's Cython bindings) and
the gate activations, attention and selection run as fused C loops. Parameter
gradients are reduced over the batch inside ``dgemm``, whose summation order
is fixed for given shapes, so results are reproducible run to run.
"""

import numpy as np
from libc.math cimport exp
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

cdef extern from "_vecmath.h" nogil:
    double tanh(double)
    void _vtanh "s2sl_vtanh"(double* x, int n)

cdef enum:
    C_FORCED = 0
    C_GREEDY = 1
    C_SAMPLE = 2

FORCED = C_FORCED
GREEDY = C_GREEDY
SAMPLE = C_SAMPLE


cdef inline void _mm(char ta, char tb, int M, int N, int K, double alpha,
                     const double* A, int lda, const double* Bm, int ldb,
                     double beta, double* C, int ldc) noexcept nogil:
    # row-major C = alpha * op(A) @ op(B) + beta * C, as the column-major
    # product C^T = op(B)^T @ op(A)^T
    if M == 0 or N == 0:
        return
    dgemm(&tb, &ta, &N, &M, &K, &alpha, <double*>Bm, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef void _lstm_act(double* gates, const double* c_prev, double* c_out, double* h_out, int r) noexcept nogil:
    # gates holds the pre-activations (i, f, o, g) on entry and the activations on exit
    cdef int G = 4 * r
    cdef int k
    cdef double cn
    for k in range(3 * r):
        gates[k] = 0.5 * gates[k]
    _vtanh(gates, G)
    for k in range(3 * r):
        gates[k] = 0.5 * (1.0 + gates[k])
    for k in range(r):
        cn = gates[r + k] * c_prev[k] + gates[k] * gates[3 * r + k]
        c_out[k] = cn
        h_out[k] = cn
    _vtanh(h_out, r)
    for k in range(r):
        h_out[k] = gates[2 * r + k] * h_out[k]


cdef void _lstm_dz(double* dh, double* dc, const double* c_prev, const double* c,
                   const double* gates, double* tc, double* dz, int r) noexcept nogil:
    # dh, dc: grads w.r.t. this step's (h, c); dc becomes the grad w.r.t. c_prev
    cdef int k
    cdef double ig, fg, og, cg, t, dck
    memcpy(tc, c, r * sizeof(double))
    _vtanh(tc, r)
    for k in range(r):
        ig = gates[k]
        fg = gates[r + k]
        og = gates[2 * r + k]
        cg = gates[3 * r + k]
        t = tc[k]
        dck = dc[k] + dh[k] * og * (1.0 - t * t)
        dz[k] = dck * cg * ig * (1.0 - ig)
        dz[r + k] = dck * c_prev[k] * fg * (1.0 - fg)
        dz[2 * r + k] = dh[k] * t * og * (1.0 - og)
        dz[3 * r + k] = dck * ig * (1.0 - cg * cg)
        dc[k] = dck * fg


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def forward(Xe, Xd, go, dec_mask, We, be, Wd, bd, Wenc, Wdec, v, int mode, perm, uniforms, int n_steps):
    Xe = _c(Xe)
    Xd = _c(Xd)
    dec_mask = _c(dec_mask)
    cdef int B = Xe.shape[0], n = Xe.shape[1], m = Xe.shape[2]
    cdef int r = Wenc.shape[0]
    cdef int T = n_steps
    cdef int G = 4 * r

    if mode == FORCED:
        perm_arr = np.array(perm, dtype=np.int64, copy=True, order="C")
    else:
        perm_arr = np.zeros((B, n), dtype=np.int64)
    if mode == SAMPLE:
        unif_arr = _c(uniforms)
    else:
        unif_arr = np.zeros((B, n))

    enc_h_arr = np.zeros((B, n + 1, r))
    enc_c_arr = np.zeros((B, n + 1, r))
    enc_g_arr = np.empty((B, n, G))
    A_arr = np.empty((B, n, r))
    dec_in_arr = np.empty((B, T, m))
    dec_h_arr = np.empty((B, T + 1, r))
    dec_c_arr = np.empty((B, T + 1, r))
    dec_g_arr = np.empty((B, T, G))
    tanh_arr = np.empty((B, T, n, r))
    S_arr = np.empty((B, T, n))
    placed_arr = np.zeros((B, n), dtype=np.uint8)
    Q_arr = np.empty((B, r))
    w_arr = np.empty(n)

    cdef const double[:, :, ::1] xe = Xe
    cdef const double[:, :, ::1] xd = Xd
    cdef const double[::1] go_v = _c(go)
    cdef const double[:, :, ::1] dmask = dec_mask
    cdef const double[:, ::1] we = _c(We)
    cdef const double[::1] be_v = _c(be)
    cdef const double[:, ::1] wd = _c(Wd)
    cdef const double[::1] bd_v = _c(bd)
    cdef const double[:, ::1] wenc = _c(Wenc)
    cdef const double[:, ::1] wdec = _c(Wdec)
    cdef const double[::1] v_v = _c(v)
    cdef long long[:, ::1] pm = perm_arr
    cdef const double[:, ::1] unif = unif_arr
    cdef double[:, :, ::1] enc_h = enc_h_arr
    cdef double[:, :, ::1] enc_c = enc_c_arr
    cdef double[:, :, ::1] enc_g = enc_g_arr
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, :, ::1] dec_in = dec_in_arr
    cdef double[:, :, ::1] dec_h = dec_h_arr
    cdef double[:, :, ::1] dec_c = dec_c_arr
    cdef double[:, :, ::1] dec_g = dec_g_arr
    cdef double[:, :, :, ::1] th = tanh_arr
    cdef double[:, :, ::1] S = S_arr
    cdef unsigned char[:, ::1] placed = placed_arr
    cdef double[:, ::1] Q = Q_arr
    cdef double[::1] w = w_arr

    cdef int b, t, i, j, k, src, best, last
    cdef double acc, s, total, thr, top
    cdef double* trow
    cdef const double* arow
    cdef const double* qrow

    with nogil:
        # encoder: one batched product per input block and time step
        for t in range(n):
            for b in range(B):
                memcpy(&enc_g[b, t, 0], &be_v[0], G * sizeof(double))
            _mm(b'n', b'n', B, G, m, 1.0, &xe[0, t, 0], n * m, &we[0, 0], G, 1.0, &enc_g[0, t, 0], n * G)
            if t > 0:
                _mm(b'n', b'n', B, G, r, 1.0, &enc_h[0, t, 0], (n + 1) * r, &we[m, 0], G,
                    1.0, &enc_g[0, t, 0], n * G)
            for b in range(B):
                _lstm_act(&enc_g[b, t, 0], &enc_c[b, t, 0], &enc_c[b, t + 1, 0], &enc_h[b, t + 1, 0], r)
        # attention keys A[b] = H[b] @ Wenc^T
        for b in range(B):
            _mm(b'n', b't', n, r, r, 1.0, &enc_h[b, 1, 0], r, &wenc[0, 0], r, 0.0, &A[b, 0, 0], r)
            memcpy(&dec_h[b, 0, 0], &enc_h[b, n, 0], r * sizeof(double))
            memcpy(&dec_c[b, 0, 0], &enc_c[b, n, 0], r * sizeof(double))

        for j in range(T):
            for b in range(B):
                if j == 0:
                    for k in range(m):
                        dec_in[b, j, k] = go_v[k] * dmask[b, j, k]
                else:
                    src = <int>pm[b, j - 1]
                    for k in range(m):
                        dec_in[b, j, k] = xd[b, src, k] * dmask[b, j, k]
                memcpy(&dec_g[b, j, 0], &bd_v[0], G * sizeof(double))
            _mm(b'n', b'n', B, G, m, 1.0, &dec_in[0, j, 0], T * m, &wd[0, 0], G, 1.0, &dec_g[0, j, 0], T * G)
            _mm(b'n', b'n', B, G, r, 1.0, &dec_h[0, j, 0], (T + 1) * r, &wd[m, 0], G,
                1.0, &dec_g[0, j, 0], T * G)
            for b in range(B):
                _lstm_act(&dec_g[b, j, 0], &dec_c[b, j, 0], &dec_c[b, j + 1, 0], &dec_h[b, j + 1, 0], r)
            # queries Q = H_dec @ Wdec^T
            _mm(b'n', b't', B, r, r, 1.0, &dec_h[0, j + 1, 0], (T + 1) * r, &wdec[0, 0], r, 0.0, &Q[0, 0], r)

            for b in range(B):
                qrow = &Q[b, 0]
                for i in range(n):
                    trow = &th[b, j, i, 0]
                    arow = &A[b, i, 0]
                    for k in range(r):
                        trow[k] = arow[k] + qrow[k]
                _vtanh(&th[b, j, 0, 0], n * r)
                for i in range(n):
                    trow = &th[b, j, i, 0]
                    s = 0.0
                    for k in range(r):
                        s = s + v_v[k] * trow[k]
                    S[b, j, i] = s

                if mode == C_GREEDY:
                    best = -1
                    for i in range(n):
                        if placed[b, i] == 0 and (best < 0 or S[b, j, i] > S[b, j, best]):
                            best = i
                    pm[b, j] = best
                elif mode == C_SAMPLE:
                    best = -1
                    top = 0.0
                    for i in range(n):
                        if placed[b, i] == 0 and (best < 0 or S[b, j, i] > top):
                            best = i
                            top = S[b, j, i]
                    total = 0.0
                    last = -1
                    for i in range(n):
                        if placed[b, i] == 0:
                            w[i] = exp(S[b, j, i] - top)
                            last = i
                        else:
                            w[i] = 0.0
                        total = total + w[i]
                    thr = unif[b, j] * total
                    acc = 0.0
                    best = last
                    for i in range(n):
                        acc = acc + w[i]
                        if acc > thr:
                            best = i
                            break
                    pm[b, j] = best
                placed[b, pm[b, j]] = 1

        if mode != C_FORCED:
            for b in range(B):
                for j in range(T, n):
                    pm[b, j] = 0

    cache = {
        "Xe": Xe, "enc_h": enc_h_arr, "enc_c": enc_c_arr, "enc_g": enc_g_arr,
        "dec_in": dec_in_arr, "dec_h": dec_h_arr, "dec_c": dec_c_arr, "dec_g": dec_g_arr,
        "tanh": tanh_arr, "dec_mask": dec_mask, "perm": perm_arr, "m": m,
    }
    return S_arr, perm_arr, cache


def backward(cache, dS, We, Wd, Wenc, Wdec, v):
    Xe_arr = cache["Xe"]
    cdef int B = Xe_arr.shape[0], n = Xe_arr.shape[1], m = Xe_arr.shape[2]
    dec_in_arr = cache["dec_in"]
    cdef int T = dec_in_arr.shape[1]
    cdef int r = Wenc.shape[0]
    cdef int G = 4 * r

    dWe_arr = np.zeros((m + r, G))
    dbe_arr = np.zeros(G)
    dWd_arr = np.zeros((m + r, G))
    dbd_arr = np.zeros(G)
    dWenc_arr = np.zeros((r, r))
    dWdec_arr = np.zeros((r, r))
    dv_arr = np.zeros(r)
    dgo_arr = np.zeros(m)
    dXe_arr = np.zeros((B, n, m))
    dXd_arr = np.zeros((B, n, m))
    dA_arr = np.zeros((B, n, r))
    dQ_arr = np.zeros((B, T, r))
    dE_arr = np.empty((B, n, r))
    dD_arr = np.empty((B, T, r))
    dh_arr = np.zeros((B, r))
    dc_arr = np.zeros((B, r))
    du_arr = np.empty((B, m))
    dz_arr = np.empty((B, G))
    tc_arr = np.empty(r)
    dS_arr = _c(dS)

    cdef const double[:, :, ::1] xe = Xe_arr
    cdef const double[:, :, ::1] enc_h = cache["enc_h"]
    cdef const double[:, :, ::1] enc_c = cache["enc_c"]
    cdef const double[:, :, ::1] enc_g = cache["enc_g"]
    cdef const double[:, :, ::1] dec_in = dec_in_arr
    cdef const double[:, :, ::1] dec_h = cache["dec_h"]
    cdef const double[:, :, ::1] dec_c = cache["dec_c"]
    cdef const double[:, :, ::1] dec_g = cache["dec_g"]
    cdef const double[:, :, :, ::1] th = cache["tanh"]
    cdef const double[:, :, ::1] dmask = cache["dec_mask"]
    cdef const long long[:, ::1] pm = cache["perm"]
    cdef const double[:, :, ::1] ds = dS_arr
    cdef const double[:, ::1] we = _c(We)
    cdef const double[:, ::1] wd = _c(Wd)
    cdef const double[:, ::1] wenc = _c(Wenc)
    cdef const double[:, ::1] wdec = _c(Wdec)
    cdef const double[::1] v_v = _c(v)

    cdef double[:, ::1] dWe = dWe_arr
    cdef double[::1] dbe = dbe_arr
    cdef double[:, ::1] dWd = dWd_arr
    cdef double[::1] dbd = dbd_arr
    cdef double[:, ::1] dWenc = dWenc_arr
    cdef double[:, ::1] dWdec = dWdec_arr
    cdef double[::1] dv = dv_arr
    cdef double[::1] dgo = dgo_arr
    cdef double[:, :, ::1] dXe = dXe_arr
    cdef double[:, :, ::1] dXd = dXd_arr
    cdef double[:, :, ::1] dA = dA_arr
    cdef double[:, :, ::1] dQ = dQ_arr
    cdef double[:, :, ::1] dE = dE_arr
    cdef double[:, :, ::1] dD = dD_arr
    cdef double[:, ::1] dh = dh_arr
    cdef double[:, ::1] dc = dc_arr
    cdef double[:, ::1] du = du_arr
    cdef double[:, ::1] dz = dz_arr
    cdef double[::1] tc = tc_arr

    cdef int b, t, i, j, k, src
    cdef double g_s, t_val, dp
    cdef const double* trow

    with nogil:
        # attention: dS * v * (1 - tanh^2), reduced into dA (over steps) and dQ (over items)
        _mm(b'n', b'n', 1, r, B * T * n, 1.0, &ds[0, 0, 0], B * T * n, &th[0, 0, 0, 0], r, 0.0, &dv[0], r)
        for b in range(B):
            for j in range(T):
                for i in range(n):
                    g_s = ds[b, j, i]
                    trow = &th[b, j, i, 0]
                    for k in range(r):
                        t_val = trow[k]
                        dp = g_s * v_v[k] * (1.0 - t_val * t_val)
                        dA[b, i, k] += dp
                        dQ[b, j, k] += dp
        for b in range(B):
            _mm(b't', b'n', r, r, T, 1.0, &dQ[b, 0, 0], r, &dec_h[b, 1, 0], r, 1.0, &dWdec[0, 0], r)
            _mm(b't', b'n', r, r, n, 1.0, &dA[b, 0, 0], r, &enc_h[b, 1, 0], r, 1.0, &dWenc[0, 0], r)
        _mm(b'n', b'n', B * T, r, r, 1.0, &dQ[0, 0, 0], r, &wdec[0, 0], r, 0.0, &dD[0, 0, 0], r)
        _mm(b'n', b'n', B * n, r, r, 1.0, &dA[0, 0, 0], r, &wenc[0, 0], r, 0.0, &dE[0, 0, 0], r)

        # decoder LSTM, last step first
        for j in range(T - 1, -1, -1):
            for b in range(B):
                for k in range(r):
                    dh[b, k] += dD[b, j, k]
                _lstm_dz(&dh[b, 0], &dc[b, 0], &dec_c[b, j, 0], &dec_c[b, j + 1, 0], &dec_g[b, j, 0],
                         &tc[0], &dz[b, 0], r)
                for k in range(G):
                    dbd[k] += dz[b, k]
            _mm(b't', b'n', m, G, B, 1.0, &dec_in[0, j, 0], T * m, &dz[0, 0], G, 1.0, &dWd[0, 0], G)
            _mm(b't', b'n', r, G, B, 1.0, &dec_h[0, j, 0], (T + 1) * r, &dz[0, 0], G, 1.0, &dWd[m, 0], G)
            _mm(b'n', b't', B, m, G, 1.0, &dz[0, 0], G, &wd[0, 0], G, 0.0, &du[0, 0], m)
            _mm(b'n', b't', B, r, G, 1.0, &dz[0, 0], G, &wd[m, 0], G, 0.0, &dh[0, 0], r)
            for b in range(B):
                if j == 0:
                    for k in range(m):
                        dgo[k] += du[b, k] * dmask[b, j, k]
                else:
                    src = <int>pm[b, j - 1]
                    for k in range(m):
                        dXd[b, src, k] += du[b, k] * dmask[b, j, k]

        # encoder LSTM; its final state fed the decoder, so dh and dc carry over
        for t in range(n - 1, -1, -1):
            for b in range(B):
                for k in range(r):
                    dh[b, k] += dE[b, t, k]
                _lstm_dz(&dh[b, 0], &dc[b, 0], &enc_c[b, t, 0], &enc_c[b, t + 1, 0], &enc_g[b, t, 0],
                         &tc[0], &dz[b, 0], r)
                for k in range(G):
                    dbe[k] += dz[b, k]
            _mm(b't', b'n', m, G, B, 1.0, &xe[0, t, 0], n * m, &dz[0, 0], G, 1.0, &dWe[0, 0], G)
            if t > 0:
                _mm(b't', b'n', r, G, B, 1.0, &enc_h[0, t, 0], (n + 1) * r, &dz[0, 0], G, 1.0, &dWe[m, 0], G)
            _mm(b'n', b't', B, m, G, 1.0, &dz[0, 0], G, &we[0, 0], G, 0.0, &dXe[0, t, 0], n * m)
            _mm(b'n', b't', B, r, G, 1.0, &dz[0, 0], G, &we[m, 0], G, 0.0, &dh[0, 0], r)

    return {
        "We": dWe_arr, "be": dbe_arr, "Wd": dWd_arr, "bd": dbd_arr,
        "Wenc": dWenc_arr, "Wdec": dWdec_arr, "v": dv_arr, "go": dgo_arr,
        "dXe": dXe_arr, "dXd": dXd_arr,
    }
