# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""C loops for the weight-pack kernels; same contracts as ``_fallback``."""
import numpy as np

from libc.math cimport exp, log, sqrt, fmod, INFINITY, isinf
from libc.stdlib cimport malloc, free

cdef double TIE_TOL = 1e-9


cdef inline double _fgrad(const double* p, int K, int dx, int G, int E,
                          double beta, const double* x, double* work,
                          double* gx) noexcept nogil:
    # work layout: K*h group weights | cur (G+dx) | nxt (G+dx) | hbuf (h) | gcur (G+dx) | gh (h)
    cdef int h = G * E
    cdef double* wts = work
    cdef double* cur = wts + K * h
    cdef double* nxt = cur + G + dx
    cdef double* hbuf = nxt + G + dx
    cdef double* gcur = hbuf + h
    cdef double* gh = gcur + G + dx
    cdef const double* q = p
    cdef const double* Wx
    cdef const double* Wr
    cdef const double* bk
    cdef int k, i, j, g, e, din, dlast, best
    cdef double s, m, tot, f
    cdef const double* lay_Wx[16]
    cdef const double* lay_Wr[16]

    for j in range(dx):
        cur[j] = x[j]
    din = dx
    for k in range(K):
        Wx = q
        q += h * din
        if k >= 1:
            Wr = q
            q += h * dx
        else:
            Wr = NULL
        bk = q
        q += h
        lay_Wx[k] = Wx
        lay_Wr[k] = Wr
        for i in range(h):
            s = bk[i]
            for j in range(din):
                s += Wx[i * din + j] * cur[j]
            if Wr != NULL:
                for j in range(dx):
                    s += Wr[i * dx + j] * x[j]
            hbuf[i] = s
        for g in range(G):
            best = 0
            m = hbuf[g * E]
            for e in range(1, E):
                if hbuf[g * E + e] > m:
                    m = hbuf[g * E + e]
                    best = e
            if isinf(beta):
                for e in range(E):
                    wts[k * h + g * E + e] = 0.0
                wts[k * h + g * E + best] = 1.0
                nxt[g] = m
            else:
                tot = 0.0
                for e in range(E):
                    s = beta * (hbuf[g * E + e] - m)
                    # exp underflows to exactly 0 below -745.2
                    s = exp(s) if s > -746.0 else 0.0
                    wts[k * h + g * E + e] = s
                    tot += s
                for e in range(E):
                    wts[k * h + g * E + e] /= tot
                nxt[g] = m + log(tot) / beta
        for g in range(G):
            cur[g] = nxt[g]
        din = G
    dlast = din
    f = q[dlast + dx]
    for j in range(dlast):
        f += q[j] * cur[j]
        gcur[j] = q[j]
    for j in range(dx):
        f += q[dlast + j] * x[j]
        gx[j] = q[dlast + j]
    for k in range(K - 1, -1, -1):
        din = dx if k == 0 else G
        for i in range(h):
            gh[i] = gcur[i // E] * wts[k * h + i]
        Wr = lay_Wr[k]
        if Wr != NULL:
            for i in range(h):
                if gh[i] == 0.0:
                    continue
                for j in range(dx):
                    gx[j] += Wr[i * dx + j] * gh[i]
        Wx = lay_Wx[k]
        for j in range(din):
            nxt[j] = 0.0
        for i in range(h):
            if gh[i] != 0.0:
                for j in range(din):
                    nxt[j] += Wx[i * din + j] * gh[i]
        for j in range(din):
            gcur[j] = nxt[j]
    for j in range(dx):
        gx[j] += gcur[j]
    return f


cdef inline size_t _work_size(int K, int dx, int G, int E) noexcept nogil:
    cdef int h = G * E
    return <size_t>(K * h + 3 * (G + dx) + 2 * h + 8)


def _prep(pack, layout):
    K, dx, G, E = (int(v) for v in layout)
    if K > 16:
        raise ValueError("at most 16 hidden layers supported by the compiled kernel")
    pack = np.ascontiguousarray(pack, dtype=np.float64)
    stride = 0 if pack.ndim == 1 else pack.shape[1]
    return pack.reshape(-1), stride, K, dx, G, E


def value_and_xgrad(pack, layout, x, double soft_beta=INFINITY):
    flat, stride, K, dx, G, E = _prep(pack, layout)
    cdef const double[::1] P = flat
    xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] X = xa
    cdef Py_ssize_t B = X.shape[0]
    f_out = np.empty(B)
    g_out = np.empty((B, dx))
    cdef double[::1] F = f_out
    cdef double[:, ::1] GX = g_out
    cdef Py_ssize_t b
    cdef Py_ssize_t st = stride
    cdef int cK = K, cdx = dx, cG = G, cE = E
    cdef double* work = <double*>malloc(_work_size(cK, cdx, cG, cE) * sizeof(double))
    if work == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                F[b] = _fgrad(&P[b * st], cK, cdx, cG, cE, soft_beta, &X[b, 0], work, &GX[b, 0])
    finally:
        free(work)
    return f_out, g_out


cdef inline double _util(const double* p, int K, int dx, int G, int E, double beta,
                         const double* t, const double* x, double* work, double* gtmp) noexcept nogil:
    cdef double u = -_fgrad(p, K, dx, G, E, beta, x, work, gtmp)
    cdef int j
    for j in range(dx):
        u += t[j] * x[j]
    return u


def best_response(pack, layout, t, x0, int iters, double lr0, double lr1,
                  double momentum, double soft_beta=INFINITY):
    flat, stride, K, dx, G, E = _prep(pack, layout)
    cdef const double[::1] P = flat
    ta = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[:, ::1] T = ta
    x_out = np.array(x0, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] X = x_out
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t b, st = stride
    cdef int cK = K, cdx = dx, cG = G, cE = E
    cdef int it, j, done
    cdef double lr, decay, gj, vn, xn, u, uc
    cdef double* work = <double*>malloc((_work_size(cK, cdx, cG, cE) + 4 * cdx) * sizeof(double))
    if work == NULL:
        raise MemoryError()
    cdef double* gf = work + _work_size(cK, cdx, cG, cE)
    cdef double* v = gf + cdx
    cdef double* cand = v + cdx
    cdef double* gtmp = cand + cdx
    decay = (lr1 / lr0) ** (1.0 / max(iters - 1, 1))
    try:
        with nogil:
            for b in range(B):
                for j in range(cdx):
                    v[j] = 0.0
                lr = lr0
                for it in range(iters):
                    _fgrad(&P[b * st], cK, cdx, cG, cE, soft_beta, &X[b, 0], work, gf)
                    done = 1
                    for j in range(cdx):
                        gj = T[b, j] - gf[j]
                        vn = momentum * v[j] + lr * gj
                        xn = X[b, j] + vn
                        if xn < 0.0:
                            xn = 0.0
                        elif xn > 1.0:
                            xn = 1.0
                        if not (xn == X[b, j] and (
                                (xn >= 1.0 and vn >= 0 and gj >= 0)
                                or (xn <= 0.0 and vn <= 0 and gj <= 0)
                                or (vn == 0 and gj == 0))):
                            done = 0
                        v[j] = vn
                        X[b, j] = xn
                    if done:
                        break
                    lr *= decay
                for j in range(cdx):
                    u = _util(&P[b * st], cK, cdx, cG, cE, soft_beta, &T[b, 0], &X[b, 0], work, gtmp)
                    for it in range(cdx):
                        cand[it] = X[b, it]
                    cand[j] = 1.0
                    uc = _util(&P[b * st], cK, cdx, cG, cE, soft_beta, &T[b, 0], cand, work, gtmp)
                    if uc >= u - TIE_TOL:
                        X[b, j] = 1.0
    finally:
        free(work)
    return x_out


cdef inline double _reflect(double y) noexcept nogil:
    y = fmod(y, 2.0)
    if y < 0.0:
        y += 2.0
    if y > 1.0:
        y = 2.0 - y
    return y


def langevin(pack, layout, t, y, noise, double eta, double beta,
             double soft_beta=INFINITY, bint reflect=True):
    flat, stride, K, dx, G, E = _prep(pack, layout)
    cdef const double[::1] P = flat
    ta = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[:, ::1] T = ta
    y_out = np.array(y, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] Y = y_out
    na = np.ascontiguousarray(noise, dtype=np.float64)
    cdef const double[:, :, ::1] N = na
    cdef Py_ssize_t S = N.shape[0]
    cdef Py_ssize_t B = Y.shape[0]
    cdef Py_ssize_t b, s, st = stride
    cdef int cK = K, cdx = dx, cG = G, cE = E
    cdef int j
    cdef double yn
    cdef double sigma = sqrt(2.0 * eta / beta) if not isinf(beta) else 0.0
    cdef double* work = <double*>malloc((_work_size(cK, cdx, cG, cE) + cdx) * sizeof(double))
    if work == NULL:
        raise MemoryError()
    cdef double* gf = work + _work_size(cK, cdx, cG, cE)
    try:
        with nogil:
            for s in range(S):
                for b in range(B):
                    _fgrad(&P[b * st], cK, cdx, cG, cE, soft_beta, &Y[b, 0], work, gf)
                    for j in range(cdx):
                        yn = Y[b, j] + eta * (T[b, j] - gf[j]) + sigma * N[s, b, j]
                        if reflect:
                            yn = _reflect(yn)
                        elif yn < 0.0:
                            yn = 0.0
                        elif yn > 1.0:
                            yn = 1.0
                        Y[b, j] = yn
    finally:
        free(work)
    return y_out
