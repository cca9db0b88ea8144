# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Euler-Maruyama loops; same contracts as ``_pykernels``.

All matrices arrive C-contiguous.  BLAS/LAPACK see them transposed
(column-major), which the call sites account for.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite, fabs
from scipy.linalg.cython_blas cimport zgemm, zgemv
from scipy.linalg.cython_lapack cimport zgesv

cnp.import_array()

cdef enum:
    OK = 0
    NONFINITE = 1
    TRACE_DRIFT = 2
    INVERSE_RESIDUAL = 3


cdef inline void matvec(double complex[:, ::1] A, double complex *x, double complex *y) noexcept nogil:
    # y = A x for C-ordered A: column-major view is A^T, so use trans='T'
    cdef int m = A.shape[1], n = A.shape[0], one = 1, i
    cdef double complex alpha = 1.0, beta = 0.0
    if m == 0 or n == 0:
        for i in range(n):
            y[i] = 0.0
        return
    zgemv(b"T", &m, &n, &alpha, &A[0, 0], &m, x, &one, &beta, y, &one)


cdef inline void matmul(double complex *A, double complex *B, double complex *C, int n) noexcept nogil:
    # C = A B, all n x n C-ordered: column-major C^T = B^T A^T
    cdef double complex alpha = 1.0, beta = 0.0
    zgemm(b"N", b"N", &n, &n, &n, &alpha, B, &n, A, &n, &beta, C, &n)


cdef inline double complex dotu(double complex *w, double complex *x, int n) noexcept nogil:
    cdef double complex s = 0.0
    cdef int i
    for i in range(n):
        s = s + w[i] * x[i]
    return s


def linear_sme_em(double complex[:, ::1] M, double complex[:, ::1] G, double complex[::1] w,
                  double complex[::1] tr, double complex[::1] x0, double[::1] dI, double dt,
                  bint renorm, double trace_tol):
    cdef Py_ssize_t N = dI.shape[0], D = x0.shape[0]
    X_arr = np.zeros((N + 1, D), dtype=complex)
    c_arr = np.zeros(N + 1)
    cdef double complex[:, ::1] X = X_arr
    cdef double[::1] c = c_arr
    cdef double complex[::1] x = np.array(x0, dtype=complex)
    cdef double complex[::1] y = np.zeros(D, dtype=complex)
    cdef double complex[::1] g = np.zeros(D, dtype=complex)
    cdef Py_ssize_t n, i
    cdef double cn, trv, tr0, dIn
    cdef int status = OK
    cdef Py_ssize_t step = N
    for i in range(D):
        X[0, i] = x[i]
    tr0 = dotu(&tr[0], &x[0], <int>D).real
    with nogil:
        for n in range(N):
            cn = dotu(&w[0], &x[0], <int>D).real
            c[n] = cn
            dIn = dI[n]
            matvec(M, &x[0], &y[0])
            matvec(G, &x[0], &g[0])
            for i in range(D):
                x[i] = x[i] + y[i] * dt + (g[i] - cn * x[i]) * dIn
            if renorm:
                trv = dotu(&tr[0], &x[0], <int>D).real
                for i in range(D):
                    x[i] = x[i] / trv
            for i in range(D):
                if not (isfinite(x[i].real) and isfinite(x[i].imag)):
                    status = NONFINITE
                    break
            if status != OK:
                step = n + 1
                break
            if not renorm:
                trv = dotu(&tr[0], &x[0], <int>D).real
                if fabs(trv - tr0) > trace_tol:
                    status = TRACE_DRIFT
                    step = n + 1
                    break
            for i in range(D):
                X[n + 1, i] = x[i]
        if status == OK:
            c[N] = dotu(&w[0], &x[0], <int>D).real
    return X_arr, c_arr, status, step


cdef double frob_residual(double complex *A, double complex *B, double complex *tmp, int n) noexcept nogil:
    cdef int i, j
    cdef double s = 0.0
    cdef double complex v
    matmul(A, B, tmp, n)
    for i in range(n):
        for j in range(n):
            v = tmp[i * n + j]
            if i == j:
                v = v - 1.0
            s += v.real * v.real + v.imag * v.imag
    return sqrt(s)


def reduced_em(double complex[:, ::1] App, double complex[:, ::1] Apq, double complex[:, ::1] Aqp,
               double complex[:, ::1] Aqq, double complex[:, ::1] Gp, double complex[:, ::1] Gq,
               double complex[::1] w, double complex[::1] p0, double complex[::1] q0,
               double[::1] dI, double dt, long window_steps, bint include_initial,
               bint exact_inverse, long reinv_period, double check_tol, long[::1] record_idx):
    cdef Py_ssize_t N = dI.shape[0], Dp = p0.shape[0], Dq = q0.shape[0]
    cdef int dq = <int>Dq
    P_arr = np.zeros((N + 1, Dp), dtype=complex)
    c_arr = np.zeros(N + 1)
    C_arr = np.zeros((N + 1, Dq), dtype=complex)
    cdef Py_ssize_t nrec = record_idx.shape[0]
    phi_rec_arr = np.zeros((nrec, Dq, Dq), dtype=complex)
    phiinv_rec_arr = np.zeros((nrec, Dq, Dq), dtype=complex)
    cdef double complex[:, ::1] P = P_arr
    cdef double[::1] c = c_arr
    cdef double complex[:, ::1] C = C_arr
    cdef double complex[:, :, ::1] phi_rec = phi_rec_arr
    cdef double complex[:, :, ::1] phiinv_rec = phiinv_rec_arr
    cdef double complex[:, ::1] phi = np.eye(Dq, dtype=complex)
    cdef double complex[:, ::1] phi_inv = np.eye(Dq, dtype=complex)
    cdef double complex[:, ::1] stepm = np.zeros((Dq, Dq), dtype=complex)
    cdef double complex[:, ::1] tmp = np.zeros((Dq, Dq), dtype=complex)
    cdef double complex[:, ::1] tmp2 = np.zeros((Dq, Dq), dtype=complex)
    cdef double complex[:, ::1] lu = np.zeros((Dq, Dq), dtype=complex)
    cdef int[::1] ipiv = np.zeros(max(Dq, 1), dtype=np.intc)
    cdef double complex[::1] p = np.array(p0, dtype=complex)
    cdef double complex[::1] pnew = np.zeros(Dp, dtype=complex)
    cdef double complex[::1] y = np.zeros(Dp, dtype=complex)
    cdef double complex[::1] g = np.zeros(Dp, dtype=complex)
    cdef double complex[::1] z = np.zeros(Dq, dtype=complex)
    cdef double complex[::1] u = np.zeros(Dq, dtype=complex)
    cdef double complex[::1] mem = np.zeros(Dp, dtype=complex)
    cdef double complex[::1] aq = np.zeros(Dq, dtype=complex)
    cdef double complex[::1] h = np.zeros(Dq, dtype=complex)
    cdef Py_ssize_t n, i, j, lo, ri = 0
    cdef double cn, dIn, res, max_res = 0.0
    cdef int status = OK, info = 0
    cdef Py_ssize_t step = N
    cdef bint ok
    for i in range(Dp):
        P[0, i] = p[i]
    with nogil:
        for n in range(N + 1):
            while ri < nrec and record_idx[ri] == n:
                for i in range(Dq):
                    for j in range(Dq):
                        phi_rec[ri, i, j] = phi[i, j]
                        phiinv_rec[ri, i, j] = phi_inv[i, j]
                ri += 1
            cn = dotu(&w[0], &p[0], <int>Dp).real
            c[n] = cn
            if n == N:
                break
            dIn = dI[n]
            lo = 0
            if window_steps >= 0 and n - window_steps > 0:
                lo = n - window_steps
            for i in range(Dq):
                z[i] = C[n, i] - C[lo, i]
                if include_initial:
                    z[i] = z[i] + q0[i]
            if Dq > 0:
                matvec(phi, &z[0], &u[0])
                matvec(Apq, &u[0], &mem[0])
            else:
                for i in range(Dp):
                    mem[i] = 0.0
            matvec(App, &p[0], &y[0])
            matvec(Gp, &p[0], &g[0])
            for i in range(Dp):
                pnew[i] = p[i] + (y[i] + mem[i]) * dt + (g[i] - cn * p[i]) * dIn
            if Dq > 0:
                matvec(Aqp, &p[0], &aq[0])
                matvec(phi_inv, &aq[0], &h[0])
                for i in range(Dq):
                    C[n + 1, i] = C[n, i] + h[i] * dt
                for i in range(Dq):
                    for j in range(Dq):
                        stepm[i, j] = Aqq[i, j] * dt + Gq[i, j] * dIn
                    stepm[i, i] = stepm[i, i] + 1.0 - cn * dIn
                matmul(&stepm[0, 0], &phi[0, 0], &tmp[0, 0], dq)
                for i in range(Dq):
                    for j in range(Dq):
                        phi[i, j] = tmp[i, j]
                if exact_inverse:
                    # column-major views: stepm^T Z = phi_inv^T  gives Z^T = phi_inv stepm^{-1}
                    for i in range(Dq):
                        for j in range(Dq):
                            lu[i, j] = stepm[i, j]
                    zgesv(&dq, &dq, &lu[0, 0], &dq, &ipiv[0], &phi_inv[0, 0], &dq, &info)
                else:
                    # B = Gq - c I ; factor I + (B^2 - Aqq) dt - B dI
                    for i in range(Dq):
                        for j in range(Dq):
                            lu[i, j] = Gq[i, j]
                        lu[i, i] = lu[i, i] - cn
                    matmul(&lu[0, 0], &lu[0, 0], &tmp2[0, 0], dq)
                    for i in range(Dq):
                        for j in range(Dq):
                            tmp2[i, j] = (tmp2[i, j] - Aqq[i, j]) * dt - lu[i, j] * dIn
                        tmp2[i, i] = tmp2[i, i] + 1.0
                    matmul(&phi_inv[0, 0], &tmp2[0, 0], &tmp[0, 0], dq)
                    for i in range(Dq):
                        for j in range(Dq):
                            phi_inv[i, j] = tmp[i, j]
            ok = info == 0
            for i in range(Dp):
                if not (isfinite(pnew[i].real) and isfinite(pnew[i].imag)):
                    ok = False
            for i in range(Dq):
                for j in range(Dq):
                    if not (isfinite(phi[i, j].real) and isfinite(phi[i, j].imag)):
                        ok = False
            if not ok:
                status = NONFINITE
                step = n + 1
                break
            if Dq > 0 and reinv_period > 0 and (n + 1) % reinv_period == 0:
                res = frob_residual(&phi[0, 0], &phi_inv[0, 0], &tmp[0, 0], dq)
                if res > max_res:
                    max_res = res
                if res > check_tol:
                    status = INVERSE_RESIDUAL
                    step = n + 1
                    break
                for i in range(Dq):
                    for j in range(Dq):
                        lu[i, j] = phi[i, j]
                        phi_inv[i, j] = 1.0 if i == j else 0.0
                # phi^T Z = I in column-major gives Z^T = phi^{-1}
                zgesv(&dq, &dq, &lu[0, 0], &dq, &ipiv[0], &phi_inv[0, 0], &dq, &info)
                if info != 0:
                    status = NONFINITE
                    step = n + 1
                    break
            for i in range(Dp):
                p[i] = pnew[i]
                P[n + 1, i] = p[i]
    return P_arr, c_arr, status, step, phi_rec_arr, phiinv_rec_arr, max_res
