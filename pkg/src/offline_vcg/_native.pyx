# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``."""
import numpy as np

from libc.math cimport fabs, sqrt

cdef double TIE_RTOL = 1e-12
cdef int MAX_HALVINGS = 60


cdef void _residuals(const double[:, :, ::1] f, const double[:, :, ::1] rbar, const double[:, :, :, ::1] phat,
                     const double[:, :, ::1] pi, double[:, :, ::1] e, double[::1] vbuf) noexcept nogil:
    cdef Py_ssize_t H = f.shape[0], S = f.shape[1], A = f.shape[2]
    cdef Py_ssize_t h, s, a, t
    cdef double acc
    for h in range(H):
        if h + 1 < H:
            for t in range(S):
                acc = 0.0
                for a in range(A):
                    acc += pi[h + 1, t, a] * f[h + 1, t, a]
                vbuf[t] = acc
        for s in range(S):
            for a in range(A):
                acc = f[h, s, a] - rbar[h, s, a]
                if h + 1 < H:
                    for t in range(S):
                        acc -= phat[h, s, a, t] * vbuf[t]
                e[h, s, a] = acc


cdef double _objective(const double[:, :, ::1] f, const double[:, :, ::1] mu, const double[:, :, ::1] rbar,
                       const double[:, :, :, ::1] phat, const double[:, :, ::1] pi, Py_ssize_t s0,
                       double sigma, double lam, double[:, :, ::1] e, double[::1] vbuf) noexcept nogil:
    cdef Py_ssize_t H = f.shape[0], S = f.shape[1], A = f.shape[2]
    cdef Py_ssize_t h, s, a
    cdef double lin = 0.0, quad = 0.0
    _residuals(f, rbar, phat, pi, e, vbuf)
    for a in range(A):
        lin += f[0, s0, a] * pi[0, s0, a]
    for h in range(H):
        for s in range(S):
            for a in range(A):
                quad += mu[h, s, a] * e[h, s, a] * e[h, s, a]
    return sigma * lin + lam * quad


cdef void _gradient(const double[:, :, ::1] f, const double[:, :, ::1] mu, const double[:, :, ::1] rbar,
                    const double[:, :, :, ::1] phat, const double[:, :, ::1] pi, Py_ssize_t s0,
                    double sigma, double lam, const double[:, :, ::1] free,
                    double[:, :, ::1] e, double[::1] vbuf, double[:, :, ::1] g) noexcept nogil:
    cdef Py_ssize_t H = f.shape[0], S = f.shape[1], A = f.shape[2]
    cdef Py_ssize_t h, s, a, t
    cdef double w
    _residuals(f, rbar, phat, pi, e, vbuf)
    for h in range(H):
        for s in range(S):
            for a in range(A):
                g[h, s, a] = 2.0 * lam * mu[h, s, a] * e[h, s, a]
    for a in range(A):
        g[0, s0, a] += sigma * pi[0, s0, a]
    for h in range(1, H):
        for t in range(S):
            w = 0.0
            for s in range(S):
                for a in range(A):
                    w += mu[h - 1, s, a] * e[h - 1, s, a] * phat[h - 1, s, a, t]
            for a in range(A):
                g[h, t, a] -= 2.0 * lam * pi[h, t, a] * w
    for h in range(H):
        for s in range(S):
            for a in range(A):
                g[h, s, a] *= free[h, s, a]


cdef inline double _clip(double x, double b) noexcept nogil:
    if x > b:
        return b
    if x < -b:
        return -b
    return x


def qp_objective(f, mu, rbar, phat, pi, s0, sigma, lam):
    cdef const double[:, :, ::1] fv = np.ascontiguousarray(f, dtype=float)
    e = np.empty_like(fv)
    vbuf = np.empty(fv.shape[1])
    return _objective(fv, np.ascontiguousarray(mu, dtype=float), np.ascontiguousarray(rbar, dtype=float),
                      np.ascontiguousarray(phat, dtype=float), np.ascontiguousarray(pi, dtype=float),
                      s0, sigma, lam, e, vbuf)


def qp_gradient(f, mu, rbar, phat, pi, s0, sigma, lam, free):
    fv = np.ascontiguousarray(f, dtype=float)
    e = np.empty_like(fv)
    g = np.empty_like(fv)
    vbuf = np.empty(fv.shape[1])
    _gradient(fv, np.ascontiguousarray(mu, dtype=float), np.ascontiguousarray(rbar, dtype=float),
              np.ascontiguousarray(phat, dtype=float), np.ascontiguousarray(pi, dtype=float),
              s0, sigma, lam, np.ascontiguousarray(free, dtype=float), e, vbuf, g)
    return g


def pgd_box_qp(f0, mu_, rbar_, phat_, pi_, Py_ssize_t s0, double sigma, double lam,
               bound_, free_, double step, Py_ssize_t max_iter, double tol):
    cdef double[:, :, ::1] f = np.array(f0, dtype=float, order="C")
    cdef const double[:, :, ::1] mu = np.ascontiguousarray(mu_, dtype=float)
    cdef const double[:, :, ::1] rbar = np.ascontiguousarray(rbar_, dtype=float)
    cdef const double[:, :, :, ::1] phat = np.ascontiguousarray(phat_, dtype=float)
    cdef const double[:, :, ::1] pi = np.ascontiguousarray(pi_, dtype=float)
    cdef const double[::1] bound = np.ascontiguousarray(bound_, dtype=float)
    cdef const double[:, :, ::1] free = np.ascontiguousarray(free_, dtype=float)
    cdef Py_ssize_t H = f.shape[0], S = f.shape[1], A = f.shape[2]
    cdef double[:, :, ::1] cand = np.empty((H, S, A))
    cdef double[:, :, ::1] g = np.empty((H, S, A))
    cdef double[:, :, ::1] e = np.empty((H, S, A))
    cdef double[::1] vbuf = np.empty(S)
    cdef Py_ssize_t it = 0, k, h, s, a
    cdef bint converged = False, accepted
    cdef double obj, cand_obj = 0.0, decrease, pgn = 0.0, d

    with nogil:
        obj = _objective(f, mu, rbar, phat, pi, s0, sigma, lam, e, vbuf)
        while it < max_iter:
            it += 1
            _gradient(f, mu, rbar, phat, pi, s0, sigma, lam, free, e, vbuf, g)
            accepted = False
            for k in range(MAX_HALVINGS):
                for h in range(H):
                    for s in range(S):
                        for a in range(A):
                            cand[h, s, a] = _clip(f[h, s, a] - step * g[h, s, a], bound[h])
                cand_obj = _objective(cand, mu, rbar, phat, pi, s0, sigma, lam, e, vbuf)
                if cand_obj <= obj:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                converged = True
                break
            decrease = obj - cand_obj
            f[...] = cand
            obj = cand_obj
            if decrease < tol:
                converged = True
                break
        _gradient(f, mu, rbar, phat, pi, s0, sigma, lam, free, e, vbuf, g)
        for h in range(H):
            for s in range(S):
                for a in range(A):
                    d = f[h, s, a] - _clip(f[h, s, a] - g[h, s, a], bound[h])
                    pgn += d * d
    return np.asarray(f), it, bool(converged), obj, sqrt(pgn)


def batch_optimal(P_, R_, Py_ssize_t s0):
    cdef const double[:, :, :, ::1] P = np.ascontiguousarray(P_, dtype=float)
    cdef const double[:, :, :, ::1] R = np.ascontiguousarray(R_, dtype=float)
    cdef Py_ssize_t B = R.shape[0], H = R.shape[1], S = R.shape[2], A = R.shape[3]
    out_v = np.empty(B)
    out_a = np.zeros((B, H, S), dtype=np.int64)
    cdef double[::1] v0 = out_v
    cdef long long[:, :, ::1] act = out_a
    cdef double[::1] V = np.empty(S)
    cdef double[::1] Vn = np.empty(S)
    cdef double[::1] q = np.empty(A)
    cdef Py_ssize_t b, h, s, a, t, best
    cdef double top, tol
    with nogil:
        for b in range(B):
            for s in range(S):
                Vn[s] = 0.0
            for h in range(H - 1, -1, -1):
                for s in range(S):
                    top = -1e300
                    for a in range(A):
                        q[a] = R[b, h, s, a]
                        for t in range(S):
                            q[a] += P[h, s, a, t] * Vn[t]
                        if q[a] > top:
                            top = q[a]
                    tol = TIE_RTOL * (fabs(top) if fabs(top) > 1.0 else 1.0)
                    best = 0
                    for a in range(A):
                        if q[a] >= top - tol:
                            best = a
                            break
                    act[b, h, s] = best
                    V[s] = q[best]
                for s in range(S):
                    Vn[s] = V[s]
            v0[b] = Vn[s0]
    return out_v, out_a


def batch_policy_value(P_, R_, actions_, Py_ssize_t s0):
    cdef const double[:, :, :, ::1] P = np.ascontiguousarray(P_, dtype=float)
    cdef const double[:, :, :, ::1] R = np.ascontiguousarray(R_, dtype=float)
    cdef const long long[:, :, ::1] act = np.ascontiguousarray(actions_, dtype=np.int64)
    cdef Py_ssize_t B = R.shape[0], H = R.shape[1], S = R.shape[2]
    out_v = np.empty(B)
    cdef double[::1] v0 = out_v
    cdef double[::1] V = np.empty(S)
    cdef double[::1] Vn = np.empty(S)
    cdef Py_ssize_t b, h, s, a, t
    cdef double acc
    with nogil:
        for b in range(B):
            for s in range(S):
                Vn[s] = 0.0
            for h in range(H - 1, -1, -1):
                for s in range(S):
                    a = act[b, h, s]
                    acc = R[b, h, s, a]
                    for t in range(S):
                        acc += P[h, s, a, t] * Vn[t]
                    V[s] = acc
                for s in range(S):
                    Vn[s] = V[s]
            v0[b] = Vn[s0]
    return out_v
