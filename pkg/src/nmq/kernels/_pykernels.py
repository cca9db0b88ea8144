"""Pure-Python Euler-Maruyama loops, used when the compiled module is unavailable.

Both loops take constant generator matrices unless a ``gen`` callback is
given.  Status codes returned alongside
the arrays: 0 ok, 1 non-finite state, 2 trace drift, 3 propagator inverse
residual above tolerance.  On failure the returned step index is the first
step whose result was rejected.
"""

import numpy as np

OK, NONFINITE, TRACE_DRIFT, INVERSE_RESIDUAL = 0, 1, 2, 3


def linear_sme_em(M, G, w, tr, x0, dI, dt, renorm, trace_tol, gen=None, t0=0.0):
    """EM loop for ``dx = M x dt + (G x - Re(w.x) x) dI``.

    Returns ``(X, c, status, step)`` with ``c[n] = Re(w . x_n)``.  With
    ``gen``, the generators are rebuilt as ``M, G, w = gen(t0 + n dt)`` at
    every step (time-dependent models; no compiled twin).
    """
    N = dI.shape[0]
    D = x0.shape[0]
    X = np.zeros((N + 1, D), complex)
    c = np.zeros(N + 1)
    x = np.array(x0, dtype=complex)
    X[0] = x
    tr0 = (tr @ x).real
    for n in range(N):
        if gen is not None:
            M, G, w = gen(t0 + n * dt)
        cn = (w @ x).real
        c[n] = cn
        x = x + (M @ x) * dt + (G @ x - cn * x) * dI[n]
        if renorm:
            x = x / (tr @ x).real
        if not np.isfinite(x).all():
            return X, c, NONFINITE, n + 1
        if not renorm and abs((tr @ x).real - tr0) > trace_tol:
            return X, c, TRACE_DRIFT, n + 1
        X[n + 1] = x
    if gen is not None:
        M, G, w = gen(t0 + N * dt)
    c[N] = (w @ x).real
    return X, c, OK, N


def reduced_em(
    App, Apq, Aqp, Aqq, Gp, Gq, w, p0, q0, dI, dt,
    window_steps, include_initial, exact_inverse, reinv_period, check_tol, record_idx,
    gen=None, t0=0.0,
):
    """EM loop for the reduced SDE with a stochastic-exponential memory term.

    Per step: ``p += (App p + Apq Phi_n z_n) dt + (Gp p - c p) dI`` with
    ``z_n = [q0] + sum_{lo <= m < n} Phi_m^{-1} Aqp p_m dt``, then
    ``Phi_{n+1} = (I + Aqq dt + (Gq - c I) dI) Phi_n`` and the inverse.

    Returns ``(P, c, status, step, phi_rec, phiinv_rec, max_residual)``;
    ``phi_rec[i]`` is ``Phi`` at grid index ``record_idx[i]``.  ``gen(t)``
    optionally rebuilds ``(App, Apq, Aqp, Aqq, Gp, Gq, w)`` every step.
    """
    N = dI.shape[0]
    Dp = p0.shape[0]
    Dq = q0.shape[0]
    I_q = np.eye(Dq, dtype=complex)
    P = np.zeros((N + 1, Dp), complex)
    c = np.zeros(N + 1)
    C = np.zeros((N + 1, Dq), complex)
    phi = I_q.copy()
    phi_inv = I_q.copy()
    nrec = record_idx.shape[0]
    phi_rec = np.zeros((nrec, Dq, Dq), complex)
    phiinv_rec = np.zeros((nrec, Dq, Dq), complex)
    ri = 0
    max_res = 0.0
    p = np.array(p0, dtype=complex)
    P[0] = p
    for n in range(N + 1):
        while ri < nrec and record_idx[ri] == n:
            phi_rec[ri] = phi
            phiinv_rec[ri] = phi_inv
            ri += 1
        if gen is not None:
            App, Apq, Aqp, Aqq, Gp, Gq, w = gen(t0 + n * dt)
        cn = (w @ p).real
        c[n] = cn
        if n == N:
            break
        lo = 0 if window_steps < 0 else max(0, n - window_steps)
        z = C[n] - C[lo]
        if include_initial:
            z = z + q0
        mem = Apq @ (phi @ z)
        p_new = p + (App @ p + mem) * dt + (Gp @ p - cn * p) * dI[n]
        h = phi_inv @ (Aqp @ p)
        C[n + 1] = C[n] + h * dt
        B = Gq - cn * I_q
        step = I_q + Aqq * dt + B * dI[n]
        phi = step @ phi
        if exact_inverse:
            # phi_inv @ step^{-1} via a transposed solve
            phi_inv = np.linalg.solve(step.T, phi_inv.T).T
        else:
            phi_inv = phi_inv @ (I_q + (B @ B - Aqq) * dt - B * dI[n])
        if not (np.isfinite(p_new).all() and np.isfinite(phi).all()):
            return P, c, NONFINITE, n + 1, phi_rec, phiinv_rec, max_res
        if reinv_period > 0 and (n + 1) % reinv_period == 0:
            res = np.linalg.norm(phi @ phi_inv - I_q)
            max_res = max(max_res, res)
            if res > check_tol:
                return P, c, INVERSE_RESIDUAL, n + 1, phi_rec, phiinv_rec, max_res
            phi_inv = np.linalg.inv(phi)
        p = p_new
        P[n + 1] = p
    return P, c, OK, N, phi_rec, phiinv_rec, max_res
