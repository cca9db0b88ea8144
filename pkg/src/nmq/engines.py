"""Trajectory and master-equation solvers for the embedded model.

Stochastic engines share one Ito Euler-Maruyama discretization so that runs
on the same :class:`~nmq.sde.NoisePath` can be compared step by step.
Deterministic engines use RK4 on the same grid.  Start time is 0.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .model import BlockState, ModelError, ModelSpec
from .sde import NoisePath, derive_seed, wiener_path
from .superops import (
    block_generators,
    g_superop,
    lindbladian,
    measurement_weight,
    projector_p,
    vec,
)

__all__ = [
    "SimulationAbort",
    "TrajectoryRecord",
    "KernelEvaluation",
    "MonteCarloResult",
    "principal_only",
    "run_full_sme",
    "run_coupled_blocks",
    "run_reduced_diag",
    "run_reduced_p",
    "run_principal_sme",
    "solve_gksl",
    "solve_coupled_me",
    "solve_nz",
    "monte_carlo_mean",
    "kernel_dump",
    "measurement_record",
    "STOCHASTIC_ENGINES",
    "write_trajectory_csv",
    "write_mean_csv",
    "write_kernel_csv",
    "config_hash",
]

TRACE_ABORT = 0.1


class SimulationAbort(RuntimeError):
    """Numerical failure inside an engine; carries the step index and noise seed."""

    def __init__(self, engine: str, reason: str, step: int, seed=None):
        super().__init__(f"{engine}: {reason} at step {step} (seed {seed})")
        self.engine = engine
        self.reason = reason
        self.step = step
        self.seed = seed


_REASONS = {
    kernels.NONFINITE: "non-finite state",
    kernels.TRACE_DRIFT: f"trace drift above {TRACE_ABORT}",
    kernels.INVERSE_RESIDUAL: "propagator inverse residual above tolerance",
}


def _check(engine, status, step, seed):
    if status != kernels.OK:
        raise SimulationAbort(engine, _REASONS.get(status, f"status {status}"), step, seed)


@dataclass
class TrajectoryRecord:
    """States of one engine run on a uniform grid.

    ``states`` holds column-stacked vectors per grid point; ``layout`` says
    which: ``composite`` (d x d joint operator), ``blocks`` (diagonal stack
    then off-diagonal stack), ``diag`` (diagonal stack only) or ``p``
    (projected joint operator).  ``principal`` is the reduced principal
    state and ``Y`` the homodyne record (``None`` for deterministic runs).
    """

    engine: str
    times: np.ndarray
    states: np.ndarray
    layout: str
    principal: np.ndarray
    n_s: int
    n_a: int
    Y: np.ndarray | None = None
    seed: int | None = None
    config_hash: str | None = None
    meta: dict = field(default_factory=dict)
    aux_basis: np.ndarray | None = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def diag_stack(self) -> np.ndarray:
        """Diagonal blocks as ``(N+1, n_a * n_s^2)`` column-stacked vectors."""
        m = self.n_a * self.n_s**2
        if self.layout in ("blocks", "diag"):
            return self.states[:, :m]
        if self.layout in ("composite", "p"):
            n_s, n_a = self.n_s, self.n_a
            # column-stacked vec of X[(s a), (t b)] reshaped C-order gives [n, t, b, s, a]
            X4 = self.states.reshape(-1, n_s, n_a, n_s, n_a)
            phi = np.eye(n_a) if self.aux_basis is None else self.aux_basis
            out = np.einsum("aj,ntbsa,bj->njts", phi.conj(), X4, phi)
            return out.reshape(len(self.states), -1)
        raise ValueError(f"no diagonal stack for layout {self.layout!r}")

    def offdiag_stack(self) -> np.ndarray:
        m = self.n_a * self.n_s**2
        if self.layout != "blocks":
            raise ValueError("off-diagonal stack only stored for the blocks layout")
        return self.states[:, m:]

    def composite(self, n: int) -> np.ndarray:
        d = self.n_s * self.n_a
        if self.layout in ("composite", "p"):
            return self.states[n].reshape(d, d, order="F")
        if self.layout == "blocks":
            return BlockState.from_vector(self.states[n], self.n_s, self.n_a).to_composite(self.aux_basis)
        raise ValueError(f"layout {self.layout!r} has no composite state")


@dataclass
class KernelEvaluation:
    """Two-time memory kernels ``K(t, t')`` for ``t' <= t`` on one noise path."""

    formulation: str
    pairs: np.ndarray
    kernels: np.ndarray
    seed: int | None = None

    def sup_norm(self) -> float:
        return float(np.abs(self.kernels).max()) if self.kernels.size else 0.0


def principal_only(spec: ModelSpec) -> ModelSpec:
    """The principal-only model: ``H_s``, the ``L_{k,s}`` and the probe ``L0``."""
    keep = {k: v for k, v in spec.schedules.items() if k in ("H_s", "L0") or k.endswith("_s")}
    return ModelSpec.build(
        n_s=spec.n_s,
        n_a=1,
        H_s=spec.H_s,
        couplings=[{"L_s": c.L_s} for c in spec.couplings],
        L0=spec.L0,
        schedules=keep,
        name=f"{spec.name}-principal",
    )


def _as_composite(init, spec: ModelSpec) -> np.ndarray:
    if isinstance(init, BlockState):
        return init.to_composite(spec.aux_basis)
    X = np.asarray(init, dtype=complex)
    if X.shape != (spec.d, spec.d):
        raise ModelError(f"initial state has shape {X.shape}, expected {(spec.d, spec.d)}")
    return X


def _as_blocks(init, spec: ModelSpec) -> BlockState:
    if isinstance(init, BlockState):
        return init
    return BlockState.from_composite(_as_composite(init, spec), spec.n_s, spec.n_a, spec.aux_basis)


def _principal_from_diag(diag: np.ndarray, n_s: int, n_a: int) -> np.ndarray:
    blocks = diag.reshape(len(diag), n_a, n_s, n_s).transpose(0, 1, 3, 2)
    return blocks.sum(axis=1)


def _principal_from_composite(states: np.ndarray, n_s: int, n_a: int) -> np.ndarray:
    d = n_s * n_a
    X = states.reshape(-1, d, d).transpose(0, 2, 1)
    X4 = X.reshape(-1, n_s, n_a, n_s, n_a)
    return np.einsum("nsata->nst", X4)


def _record_from_c(c: np.ndarray, path: NoisePath) -> np.ndarray:
    Y = np.zeros(path.n_steps + 1)
    Y[1:] = np.cumsum(c[:-1] * path.dt + path.increments)
    return Y


def _backend(name):
    return kernels.get_backend(name)


def _linear_run(engine, build, x0, tr, path, renorm, spec, backend):
    dI = np.array(path.increments, dtype=float)  # owned, writable copy for the compiled kernels
    if spec.time_independent:
        M, G, w = build(0.0)
        be = _backend(backend)
        X, c, status, step = be.linear_sme_em(
            np.ascontiguousarray(M), np.ascontiguousarray(G), np.ascontiguousarray(w),
            np.ascontiguousarray(tr, dtype=complex), np.ascontiguousarray(x0), dI, path.dt,
            bool(renorm), TRACE_ABORT,
        )
    else:
        M, G, w = build(path.t0)
        X, c, status, step = kernels._pykernels.linear_sme_em(
            M, G, w, tr, x0, dI, path.dt, bool(renorm), TRACE_ABORT, gen=build, t0=path.t0
        )
    _check(engine, status, step, path.seed)
    return X, c


def run_full_sme(spec: ModelSpec, init, path: NoisePath, renorm: bool = False, backend=None) -> TrajectoryRecord:
    """Conditional joint state under homodyne detection of the probe."""
    rho0 = _as_composite(init, spec)

    def build(t):
        return lindbladian(spec, t).matrix, g_superop(spec, t).matrix, measurement_weight(spec, t)

    tr = vec(np.eye(spec.d))
    X, c = _linear_run("full_sme", build, vec(rho0).astype(complex), tr, path, renorm, spec, backend)
    return TrajectoryRecord(
        engine="full_sme",
        times=path.times,
        states=X,
        layout="composite",
        principal=_principal_from_composite(X, spec.n_s, spec.n_a),
        n_s=spec.n_s,
        n_a=spec.n_a,
        aux_basis=spec.aux_basis,
        Y=_record_from_c(c, path),
        seed=path.seed,
        meta={"renorm": bool(renorm), "c": c},
    )


def run_principal_sme(spec: ModelSpec, rho_s0, path: NoisePath, renorm: bool = False, backend=None) -> TrajectoryRecord:
    """Markovian SME of :func:`principal_only` ``(spec)``."""
    rec = run_full_sme(principal_only(spec), rho_s0, path, renorm=renorm, backend=backend)
    rec.engine = "principal_sme"
    return rec


def _block_trace_vec(spec: ModelSpec) -> np.ndarray:
    m2 = spec.n_s**2
    tr = np.zeros(spec.d**2, complex)
    e = vec(np.eye(spec.n_s))
    for j in range(spec.n_a):
        tr[j * m2 : (j + 1) * m2] = e
    return tr


def run_coupled_blocks(spec: ModelSpec, init, path: NoisePath, renorm: bool = False, backend=None) -> TrajectoryRecord:
    """All principal blocks ``rho^{jk}`` evolved by the coupled block SDEs."""
    bs0 = _as_blocks(init, spec)

    def build(t):
        bg = block_generators(spec, t)
        w = bg.full_weight()
        # the nonlinear scalar may only see the diagonal blocks
        assert not np.any(w[bg.weight.shape[0]:])
        return bg.drift_matrix(), bg.noise_matrix(), w

    X, c = _linear_run("coupled_blocks", build, bs0.to_vector(), _block_trace_vec(spec), path, renorm, spec, backend)
    m = spec.n_a * spec.n_s**2
    return TrajectoryRecord(
        engine="coupled_blocks",
        times=path.times,
        states=X,
        layout="blocks",
        principal=_principal_from_diag(X[:, :m], spec.n_s, spec.n_a),
        n_s=spec.n_s,
        n_a=spec.n_a,
        aux_basis=spec.aux_basis,
        Y=_record_from_c(c, path),
        seed=path.seed,
        meta={"renorm": bool(renorm), "c": c},
    )


def _window_steps(memory_window, dt) -> int:
    if memory_window is None:
        return -1
    if memory_window < 0:
        raise ValueError("memory_window must be nonnegative")
    return int(math.floor(memory_window / dt + 1e-9))


def _grid_index(t, dt, n_steps) -> int:
    k = t / dt
    n = int(round(k))
    if abs(k - n) > 1e-9 * max(1.0, abs(k)) or not 0 <= n <= n_steps:
        raise ValueError(f"time {t} is not on the grid (dt={dt}, {n_steps} steps)")
    return n


def _reduced_run(engine, build, p0, q0, path, spec, memory_window, include_initial, inverse,
                 reinversion_period, check_tol, record_idx, backend):
    if memory_window is not None and memory_window > path.n_steps * path.dt + 1e-12:
        raise ValueError(
            f"memory_window {memory_window} exceeds the horizon {path.n_steps * path.dt}"
        )
    if include_initial is None:
        include_initial = memory_window is None
    if inverse not in ("exact", "ito"):
        raise ValueError(f"unknown inverse method {inverse!r}")
    dI = np.array(path.increments, dtype=float)  # owned, writable copy for the compiled kernels
    rec = np.ascontiguousarray(np.unique(np.asarray(record_idx, dtype=np.int64)))
    args = (dI, path.dt, _window_steps(memory_window, path.dt), bool(include_initial),
            inverse == "exact", int(reinversion_period), float(check_tol), rec)
    if spec.time_independent:
        mats = [np.ascontiguousarray(a, dtype=complex) for a in build(0.0)]
        out = _backend(backend).reduced_em(*mats, np.ascontiguousarray(p0), np.ascontiguousarray(q0), *args)
    else:
        mats = build(path.t0)
        out = kernels._pykernels.reduced_em(*mats, p0, q0, *args, gen=build, t0=path.t0)
    P, c, status, step, phi_rec, phiinv_rec, max_res = out
    _check(engine, status, step, path.seed)
    return P, c, rec, phi_rec, phiinv_rec, max_res


def run_reduced_diag(
    spec: ModelSpec,
    init,
    path: NoisePath,
    memory_window: float | None = None,
    include_initial: bool | None = None,
    inverse: str = "exact",
    reinversion_period: int = 100,
    check_tol: float = 1e-4,
    record_indices=(),
    fault: str | None = None,
    backend=None,
) -> TrajectoryRecord:
    """Closed SDE for the diagonal blocks with the off-diagonal blocks eliminated.

    The off-diagonal stack enters only through its initial value (propagated
    by the stochastic exponential ``Psi``) and the memory integral of
    ``Psi_n Psi_m^{-1} A00 rho_diag_m``.  With ``memory_window`` the integral
    is truncated to the trailing window and, unless ``include_initial`` is
    set, the initial-value term is dropped.  ``fault="A00-sign"`` flips the
    sign of ``A00`` (negative control).
    """
    bs0 = _as_blocks(init, spec)
    if fault not in (None, "A00-sign"):
        raise ValueError(f"unknown fault {fault!r}")
    sign = -1.0 if fault == "A00-sign" else 1.0

    def build(t):
        bg = block_generators(spec, t)
        return bg.A10, bg.A11, sign * bg.A00, bg.A01, bg.G_diag, bg.G_off, bg.weight

    p0 = bs0.to_vector()
    m = spec.n_a * spec.n_s**2
    P, c, rec, phi_rec, phiinv_rec, max_res = _reduced_run(
        "reduced_diag", build, p0[:m], p0[m:], path, spec, memory_window, include_initial,
        inverse, reinversion_period, check_tol, record_indices, backend,
    )
    return TrajectoryRecord(
        engine="reduced_diag",
        times=path.times,
        states=P,
        layout="diag",
        principal=_principal_from_diag(P, spec.n_s, spec.n_a),
        n_s=spec.n_s,
        n_a=spec.n_a,
        aux_basis=spec.aux_basis,
        Y=_record_from_c(c, path),
        seed=path.seed,
        meta={
            "c": c,
            "record_indices": rec,
            "psi": phi_rec,
            "psi_inv": phiinv_rec,
            "max_inverse_residual": max_res,
            "memory_window": memory_window,
            "fault": fault,
        },
    )


def _aux_marginal(rho, spec):
    X4 = np.asarray(rho).reshape(spec.n_s, spec.n_a, spec.n_s, spec.n_a)
    return np.einsum("sasb->ab", X4)


def run_reduced_p(
    spec: ModelSpec,
    P_kind: str,
    init,
    path: NoisePath,
    memory_window: float | None = None,
    include_initial: bool | None = None,
    rho_a=None,
    inverse: str = "exact",
    reinversion_period: int = 100,
    check_tol: float = 1e-4,
    record_indices=(),
    backend=None,
) -> TrajectoryRecord:
    """Reduced SDE for ``P rho`` in the projection-superoperator formulation.

    For ``P_kind="product"`` the auxiliary reference state defaults to the
    auxiliary marginal of ``init``.
    """
    rho0 = _as_composite(init, spec)
    if P_kind == "product" and rho_a is None:
        rho_a = _aux_marginal(rho0, spec)
    P, Q = projector_p(spec, P_kind, rho_a)
    Pm, Qm = P.matrix, Q.matrix

    def build(t):
        L = lindbladian(spec, t).matrix
        G = g_superop(spec, t).matrix
        return Pm @ L @ Pm, Pm @ L @ Qm, Qm @ L @ Pm, Qm @ L @ Qm, G, G, measurement_weight(spec, t)

    x0 = vec(rho0).astype(complex)
    Pv, c, rec, phi_rec, phiinv_rec, max_res = _reduced_run(
        "reduced_p", build, Pm @ x0, Qm @ x0, path, spec, memory_window, include_initial,
        inverse, reinversion_period, check_tol, record_indices, backend,
    )
    return TrajectoryRecord(
        engine="reduced_p",
        times=path.times,
        states=Pv,
        layout="p",
        principal=_principal_from_composite(Pv, spec.n_s, spec.n_a),
        n_s=spec.n_s,
        n_a=spec.n_a,
        aux_basis=spec.aux_basis,
        Y=_record_from_c(c, path),
        seed=path.seed,
        meta={
            "c": c,
            "P_kind": P_kind,
            "record_indices": rec,
            "phi": phi_rec,
            "phi_inv": phiinv_rec,
            "max_inverse_residual": max_res,
            "memory_window": memory_window,
        },
    )


# ----------------------------------------------------------------------------
# deterministic engines


def _rk4_poly(A: np.ndarray, h: float) -> np.ndarray:
    """One-step RK4 propagator of ``x' = A x``."""
    hA = h * A
    hA2 = hA @ hA
    return np.eye(A.shape[0]) + hA + hA2 / 2 + hA2 @ hA / 6 + hA2 @ hA2 / 24


def _rk4_linear(gen: Callable[[float], np.ndarray], x0, dt: float, n_steps: int, constant: bool) -> np.ndarray:
    X = np.zeros((n_steps + 1, x0.shape[0]), complex)
    X[0] = x0
    if constant:
        R = _rk4_poly(gen(0.0), dt)
        for n in range(n_steps):
            X[n + 1] = R @ X[n]
    else:
        for n in range(n_steps):
            t = n * dt
            x = X[n]
            A0, Ah, A1 = gen(t), gen(t + dt / 2), gen(t + dt)
            k1 = A0 @ x
            k2 = Ah @ (x + dt / 2 * k1)
            k3 = Ah @ (x + dt / 2 * k2)
            k4 = A1 @ (x + dt * k3)
            X[n + 1] = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.isfinite(X).all():
        bad = int(np.argmax(~np.isfinite(X).all(axis=1)))
        raise SimulationAbort("rk4", "non-finite state", bad)
    return X


def _n_steps(dt, horizon=None, n_steps=None) -> int:
    if n_steps is None:
        if horizon is None:
            raise ValueError("give horizon or n_steps")
        k = horizon / dt
        n_steps = int(round(k))
        if abs(k - n_steps) > 1e-9 * max(1.0, k):
            raise ValueError(f"horizon {horizon} is not a multiple of dt {dt}")
    if n_steps < 1:
        raise ValueError("need at least one step")
    return int(n_steps)


def solve_gksl(spec: ModelSpec, init, dt: float, horizon: float | None = None, n_steps: int | None = None) -> TrajectoryRecord:
    """Unconditional joint state by RK4 on the GKSL equation."""
    N = _n_steps(dt, horizon, n_steps)
    rho0 = _as_composite(init, spec)
    X = _rk4_linear(lambda t: lindbladian(spec, t).matrix, vec(rho0).astype(complex), dt, N, spec.time_independent)
    return TrajectoryRecord(
        engine="gksl",
        times=dt * np.arange(N + 1),
        states=X,
        layout="composite",
        principal=_principal_from_composite(X, spec.n_s, spec.n_a),
        n_s=spec.n_s,
        n_a=spec.n_a,
        aux_basis=spec.aux_basis,
    )


def solve_coupled_me(spec: ModelSpec, init, dt: float, horizon: float | None = None, n_steps: int | None = None) -> TrajectoryRecord:
    """Unconditional principal blocks by RK4 on the coupled block ODEs."""
    N = _n_steps(dt, horizon, n_steps)
    bs0 = _as_blocks(init, spec)
    X = _rk4_linear(lambda t: block_generators(spec, t).drift_matrix(), bs0.to_vector(), dt, N, spec.time_independent)
    m = spec.n_a * spec.n_s**2
    return TrajectoryRecord(
        engine="coupled_me",
        times=dt * np.arange(N + 1),
        states=X,
        layout="blocks",
        principal=_principal_from_diag(X[:, :m], spec.n_s, spec.n_a),
        n_s=spec.n_s,
        n_a=spec.n_a,
        aux_basis=spec.aux_basis,
    )


def solve_nz(
    spec: ModelSpec,
    P_kind: str,
    init,
    dt: float,
    horizon: float | None = None,
    n_steps: int | None = None,
    generator_choice: str = "qq",
    include_initial: bool = True,
    quadrature: str = "rk4",
    rho_a=None,
    reinversion_period: int = 100,
) -> TrajectoryRecord:
    """Projected unconditional state from the Nakajima-Zwanzig equation.

    The time-ordered exponential factors as ``Gamma(t, t') = U_t U_{t'}^{-1}``
    with ``U`` propagated by RK4 on half steps (``dU/dt = L_gen U``) and
    ``V = U^{-1}`` by ``dV/dt = -V L_gen``; ``L_gen`` is ``Q L Q``
    (``generator_choice="qq"``) or ``Q L`` (``"q"``).

    ``quadrature="rk4"`` carries the memory integral
    ``S_t = int_0^t V L^{qp} rho^p dt'`` as an extra RK4 state, so the whole
    step is fourth order.  ``quadrature="left"`` uses the left-rectangle sum
    ``sum_{m<n} V_m L^{qp} rho^p_m dt`` with the memory term frozen over
    each RK4 step (first order).
    """
    if generator_choice not in ("qq", "q"):
        raise ValueError(f"unknown generator_choice {generator_choice!r}")
    if quadrature not in ("rk4", "left"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    N = _n_steps(dt, horizon, n_steps)
    rho0 = _as_composite(init, spec)
    if P_kind == "product" and rho_a is None:
        rho_a = _aux_marginal(rho0, spec)
    Ps, Qs = projector_p(spec, P_kind, rho_a)
    Pm, Qm = Ps.matrix, Qs.matrix
    D = Pm.shape[0]
    eye = np.eye(D, dtype=complex)

    def parts(t):
        L = lindbladian(spec, t).matrix
        Lgen = Qm @ L @ Qm if generator_choice == "qq" else Qm @ L
        return Pm @ L @ Pm, Pm @ L @ Qm, Qm @ L @ Pm, Lgen

    x0 = vec(rho0).astype(complex)
    p = Pm @ x0
    q0 = Qm @ x0 if include_initial else np.zeros(D, complex)
    S = np.zeros(D, complex)
    U = eye.copy()
    V = eye.copy()
    const = spec.time_independent
    if const:
        Lpp, Lpq, Lqp, Lgen = parts(0.0)
        RU = _rk4_poly(Lgen, dt / 2)
        RV = _rk4_poly(-Lgen, dt / 2)

    def half_step(U, V, t):
        if const:
            return RU @ U, V @ RV
        h = dt / 2
        A0, Am, A1 = parts(t)[3], parts(t + h / 2)[3], parts(t + h)[3]
        k1 = A0 @ U
        k2 = Am @ (U + h / 2 * k1)
        k3 = Am @ (U + h / 2 * k2)
        k4 = A1 @ (U + h * k3)
        U2 = U + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        m1 = -V @ A0
        m2 = -(V + h / 2 * m1) @ Am
        m3 = -(V + h / 2 * m2) @ Am
        m4 = -(V + h * m3) @ A1
        V2 = V + h / 6 * (m1 + 2 * m2 + 2 * m3 + m4)
        return U2, V2

    states = np.zeros((N + 1, D), complex)
    states[0] = p
    for n in range(N):
        t = n * dt
        Uh, Vh = half_step(U, V, t)
        U1, V1 = half_step(Uh, Vh, t + dt / 2)
        if const:
            pp = [(Lpp, Lpq, Lqp)] * 3
        else:
            pp = [parts(t)[:3], parts(t + dt / 2)[:3], parts(t + dt)[:3]]
        if quadrature == "rk4":

            def f(i, Ui, Vi, p_, S_):
                a, b, c_ = pp[i]
                return a @ p_ + b @ (Ui @ (q0 + S_)), Vi @ (c_ @ p_)

            k1p, k1s = f(0, U, V, p, S)
            k2p, k2s = f(1, Uh, Vh, p + dt / 2 * k1p, S + dt / 2 * k1s)
            k3p, k3s = f(1, Uh, Vh, p + dt / 2 * k2p, S + dt / 2 * k2s)
            k4p, k4s = f(2, U1, V1, p + dt * k3p, S + dt * k3s)
            p_new = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
            S = S + dt / 6 * (k1s + 2 * k2s + 2 * k3s + k4s)
        else:
            mem = pp[0][1] @ (U @ (q0 + S))
            a = [x[0] for x in pp]
            k1 = a[0] @ p + mem
            k2 = a[1] @ (p + dt / 2 * k1) + mem
            k3 = a[1] @ (p + dt / 2 * k2) + mem
            k4 = a[2] @ (p + dt * k3) + mem
            p_new = p + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            S = S + V @ (pp[0][2] @ p) * dt
        p = p_new
        U, V = U1, V1
        if reinversion_period > 0 and (n + 1) % reinversion_period == 0:
            cond = np.linalg.cond(U)
            if not np.isfinite(cond) or cond > 1e12:
                raise SimulationAbort("nz", f"singular propagator (condition {cond:.2e})", n + 1)
            V = np.linalg.inv(U)
        if not np.isfinite(p).all():
            raise SimulationAbort("nz", "non-finite state", n + 1)
        states[n + 1] = p
    return TrajectoryRecord(
        engine="nz",
        times=dt * np.arange(N + 1),
        states=states,
        layout="p",
        principal=_principal_from_composite(states, spec.n_s, spec.n_a),
        n_s=spec.n_s,
        n_a=spec.n_a,
        aux_basis=spec.aux_basis,
        meta={"P_kind": P_kind, "generator_choice": generator_choice, "quadrature": quadrature},
    )


# ----------------------------------------------------------------------------
# aggregation, kernels, records

STOCHASTIC_ENGINES = {
    "full_sme": run_full_sme,
    "coupled_blocks": run_coupled_blocks,
    "reduced_diag": run_reduced_diag,
    "reduced_p": lambda spec, init, path, **kw: run_reduced_p(spec, kw.pop("P_kind", "block"), init, path, **kw),
}


@dataclass
class MonteCarloResult:
    """Pointwise mean and standard error of the principal state over trajectories.

    ``se`` is ``sqrt((var Re + var Im) / n)`` entrywise, ``None`` for one trajectory.
    """

    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray | None
    n_ok: int
    aborted: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def se_scalar(self) -> float | None:
        """Largest Frobenius norm of the entrywise standard error over time."""
        if self.se is None:
            return None
        return float(np.linalg.norm(self.se, axis=(1, 2)).max())


def _mc_worker(args):
    engine, spec, init, seed, dt, n_steps, stride, kw = args
    path = wiener_path(seed, 0.0, dt, n_steps)
    fn = STOCHASTIC_ENGINES[engine] if isinstance(engine, str) else engine
    try:
        rec = fn(spec, init, path, **dict(kw))
    except SimulationAbort as exc:
        return seed, None, (exc.reason, exc.step)
    return seed, rec.principal[::stride], None


def monte_carlo_mean(
    engine,
    spec: ModelSpec,
    init,
    n_traj: int,
    master_seed: int,
    dt: float,
    horizon: float | None = None,
    n_steps: int | None = None,
    record_every: int = 1,
    workers: int | None = 1,
    max_abort_fraction: float = 0.01,
    **engine_kwargs,
) -> MonteCarloResult:
    """Sample mean of the principal state over ``n_traj`` trajectories.

    Trajectory ``i`` uses the noise seed ``derive_seed(master_seed, i)``.
    Results are accumulated in index order, so the output does not depend
    on ``workers``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    N = _n_steps(dt, horizon, n_steps)
    seeds = [derive_seed(master_seed, i) for i in range(n_traj)]
    jobs = [(engine, spec, init, s, dt, N, record_every, tuple(engine_kwargs.items())) for s in seeds]
    if workers is None or workers == 0:
        workers = os.cpu_count() or 1
    total = None
    total_sq = None
    n_ok = 0
    aborted = []

    def consume(results):
        nonlocal total, total_sq, n_ok
        for seed, pr, err in results:
            if err is not None:
                aborted.append((seed, *err))
                continue
            if total is None:
                total = np.zeros_like(pr)
                total_sq = np.zeros(pr.shape)
            total += pr
            total_sq += pr.real**2 + pr.imag**2
            n_ok += 1

    if workers > 1 and n_traj > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            consume(ex.map(_mc_worker, jobs, chunksize=max(1, n_traj // (4 * workers))))
    else:
        consume(map(_mc_worker, jobs))
    if len(aborted) > max_abort_fraction * n_traj:
        raise SimulationAbort(
            "monte_carlo",
            f"{len(aborted)} of {n_traj} trajectories aborted; first: seed {aborted[0][0]} "
            f"({aborted[0][1]} at step {aborted[0][2]})",
            aborted[0][2],
            aborted[0][0],
        )
    if n_ok == 0:
        raise SimulationAbort("monte_carlo", "no trajectory completed", 0)
    mean = total / n_ok
    se = None
    if n_ok > 1:
        var = (total_sq - n_ok * (mean.real**2 + mean.imag**2)) / (n_ok - 1)
        se = np.sqrt(np.clip(var, 0, None) / n_ok)
    times = dt * np.arange(N + 1)[::record_every]
    return MonteCarloResult(times, mean, se, n_ok, aborted, seeds)


def kernel_dump(
    spec: ModelSpec,
    formulation: str,
    init,
    path: NoisePath,
    t_samples,
    tp_samples,
    rho_a=None,
    **engine_kwargs,
) -> KernelEvaluation:
    """Two-time kernels on one noise path.

    ``formulation`` is ``"block"`` (``A11(t) Psi_t Psi_{t'}^{-1} A00(t')``)
    or ``"pq-block"`` / ``"pq-product"`` (``L^{pq}(t) Phi_t Phi_{t'}^{-1}
    L^{qp}(t')`` with the block-diagonal or product projector).  Every pair
    of a ``t`` sample and a ``t'`` sample with ``t' <= t`` is evaluated.
    """
    idx_t = [_grid_index(t, path.dt, path.n_steps) for t in np.atleast_1d(t_samples)]
    idx_tp = [_grid_index(t, path.dt, path.n_steps) for t in np.atleast_1d(tp_samples)]
    needed = sorted(set(idx_t) | set(idx_tp))
    if formulation == "block":
        rec = run_reduced_diag(spec, init, path, record_indices=needed, **engine_kwargs)
        props, invs = rec.meta["psi"], rec.meta["psi_inv"]

        def left(t):
            return block_generators(spec, t).A11

        def right(t):
            return block_generators(spec, t).A00

    elif formulation in ("pq-block", "pq-product"):
        kind = formulation.split("-")[1]
        rec = run_reduced_p(spec, kind, init, path, rho_a=rho_a, record_indices=needed, **engine_kwargs)
        props, invs = rec.meta["phi"], rec.meta["phi_inv"]
        rho0 = _as_composite(init, spec)
        ra = rho_a if rho_a is not None or kind != "product" else _aux_marginal(rho0, spec)
        P, Q = projector_p(spec, kind, ra)

        def left(t):
            return P.matrix @ lindbladian(spec, t).matrix @ Q.matrix

        def right(t):
            return Q.matrix @ lindbladian(spec, t).matrix @ P.matrix

    else:
        raise ValueError(f"unknown kernel formulation {formulation!r}")
    pos = {n: i for i, n in enumerate(rec.meta["record_indices"])}
    pairs, mats = [], []
    for a in idx_t:
        for b in idx_tp:
            if b > a:
                continue
            K = left(a * path.dt) @ props[pos[a]] @ invs[pos[b]] @ right(b * path.dt)
            pairs.append((a * path.dt, b * path.dt))
            mats.append(K)
    return KernelEvaluation(
        formulation,
        np.array(pairs, dtype=float).reshape(-1, 2),
        np.array(mats) if mats else np.zeros((0, 0, 0), complex),
        path.seed,
    )


def measurement_record(spec: ModelSpec, record: TrajectoryRecord, path: NoisePath) -> np.ndarray:
    """Homodyne record ``Y`` with ``dY = Tr((L0 + L0^dag) rho_s) dt + dI``, ``Y_0 = 0``."""
    if len(record.times) != path.n_steps + 1 or abs(record.dt - path.dt) > 1e-15 * max(1.0, path.dt):
        raise ValueError("record and noise path are on different grids")
    times = record.times
    if spec.time_independent:
        M = spec.L0 + spec.L0.conj().T
        c = np.einsum("st,nts->n", M, record.principal).real
    else:
        c = np.array([
            np.trace((lambda L: (L + L.conj().T))(spec.schedule("L0")(t) * spec.L0) @ rs).real
            for t, rs in zip(times, record.principal)
        ])
    Y = np.zeros(path.n_steps + 1)
    Y[1:] = np.cumsum(c[:-1] * path.dt + path.increments)
    return Y


# ----------------------------------------------------------------------------
# output files


def _fmt(x: float) -> str:
    return repr(float(x))


def _cplx_cols(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}_{part}" for i in range(n) for part in ("re", "im")]


def _cplx_vals(v) -> list[str]:
    out = []
    for z in np.asarray(v).ravel():
        out += [_fmt(z.real), _fmt(z.imag)]
    return out


def write_trajectory_csv(record: TrajectoryRecord, path) -> None:
    """One row per grid point: ``t``, ``Y``, the engine state vector, the
    principal state (row-major), its trace and minimum eigenvalue.

    Complex entries are paired ``_re``/``_im`` columns and floats are written
    with ``repr`` so reruns are byte-identical.
    """
    n_s = record.n_s
    D = record.states.shape[1]
    header = ["t", "Y"] + _cplx_cols("x", D) + _cplx_cols("rho_s", n_s * n_s) + ["trace", "min_eig"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for n, t in enumerate(record.times):
            rs = record.principal[n]
            herm = (rs + rs.conj().T) / 2
            y = "" if record.Y is None else _fmt(record.Y[n])
            w.writerow(
                [_fmt(t), y]
                + _cplx_vals(record.states[n])
                + _cplx_vals(rs)
                + [_fmt(np.trace(rs).real), _fmt(np.linalg.eigvalsh(herm)[0])]
            )


def write_mean_csv(result: MonteCarloResult, path) -> None:
    """Monte Carlo mean principal state with entrywise standard errors."""
    n = result.mean.shape[1] ** 2
    header = ["t"] + _cplx_cols("mean", n) + [f"se{i}" for i in range(n)] + ["trace", "min_eig"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, t in enumerate(result.times):
            m = result.mean[k]
            se = [""] * n if result.se is None else [_fmt(x) for x in result.se[k].ravel()]
            w.writerow(
                [_fmt(t)] + _cplx_vals(m) + se
                + [_fmt(np.trace(m).real), _fmt(np.linalg.eigvalsh((m + m.conj().T) / 2)[0])]
            )


def write_kernel_csv(kev: KernelEvaluation, path) -> None:
    """Rows ``t, t_prime`` followed by the row-major kernel matrix."""
    n = kev.kernels.shape[1] * kev.kernels.shape[2] if kev.kernels.size else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "t_prime"] + _cplx_cols("k", n))
        for (t, tp), K in zip(kev.pairs, kev.kernels):
            w.writerow([_fmt(t), _fmt(tp)] + _cplx_vals(K))


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON encoding of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
