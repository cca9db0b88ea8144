"""Cross-validation of the engines: metrics, convergence fits and the consistency suite.

Every check returns a :class:`ComparisonReport`.  Tolerances live in
:data:`TOLERANCES`, the single source of defaults for the tests and the CLI.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import engines as E
from .model import BlockState, ModelSpec, partial_trace_aux
from .sde import derive_seed, propagate_stoch_exp, variation_of_constants, wiener_path
from .superops import block_generators, g_superop, lindbladian, projector_p, vec

__all__ = [
    "TOLERANCES",
    "ComparisonReport",
    "trace_distance",
    "stack_trace_distance",
    "convergence_fit",
    "convergence_order",
    "decoupled_variant",
    "q_reconstruction",
    "offdiag_reconstruction",
    "consistency_suite",
    "format_reports",
    "reports_to_json",
]

TOLERANCES = {
    "algebraic": 1e-9,  # identical discrete recursions in different encodings
    "cross_formulation": 1e-8,
    "propagator_inverse": 1e-6,
    "min_order": 0.4,
    "elimination_sup": 1e-2,  # at the finest dt of the sweep
    "statistical_se": 3.0,
    "statistical_floor": 0.05,
    "trace": 1e-3,
    "nz": 1e-6,
    "kernel_zero": 1e-12,
    "ablation": 1e-12,
}


@dataclass
class ComparisonReport:
    """Outcome of one comparison.

    ``kind`` is ``"check"`` for a property that must hold and
    ``"negative_control"`` for a fault injection that must be detected; for
    a negative control ``passed`` means the fault was detected.
    """

    metric: str
    sup_error: float
    tolerance: float
    passed: bool
    dt: float | None = None
    errors: np.ndarray | None = None
    order: float | None = None
    fit_residual: float | None = None
    kind: str = "check"
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        dt = f" dt={self.dt:g}" if self.dt is not None else ""
        if self.order is not None:
            body = f"order={self.order:.3f} (fit residual {self.fit_residual:.2e}, need >= {self.tolerance:g})"
        else:
            body = f"sup={self.sup_error:.3e} tol={self.tolerance:g}"
        tag = " [negative control]" if self.kind == "negative_control" else ""
        extra = f" {self.detail}" if self.detail else ""
        return f"{status} {self.metric}{tag}{dt} {body}{extra}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["errors"] = None if self.errors is None else [float(e) for e in np.asarray(self.errors)]
        return d


def trace_distance(a, b) -> float:
    """Half the trace norm of ``a - b``, from singular values."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return 0.5 * float(np.linalg.svd(a - b, compute_uv=False).sum())


def stack_trace_distance(x, y, n_s: int) -> np.ndarray:
    """Per-time trace distance between diagonal stacks.

    A diagonal stack represents the block-diagonal operator
    ``sum_j rho^{jj} (x) |phi_j><phi_j|``, whose trace norm is the sum of the
    blocks' trace norms.  ``x`` and ``y`` have shape ``(N, n_a * n_s^2)``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    D = (x - y).reshape(x.shape[0], -1, n_s, n_s)  # column-stacked blocks, transposed view
    return 0.5 * np.linalg.svd(D, compute_uv=False).sum(axis=(1, 2))


def convergence_fit(errors, dts) -> tuple[float, float]:
    """Least-squares slope of ``log(error)`` against ``log(dt)`` and its RMS residual."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(dts, dtype=float)
    if e.shape != h.shape or e.size < 3:
        raise ValueError("need at least three (error, dt) points")
    if not (np.all(e > 0) and np.all(np.isfinite(e))):
        raise ValueError("errors must be positive and finite")
    if not np.all(h > 0):
        raise ValueError("dt values must be positive")
    X = np.vstack([np.log(h), np.ones_like(h)]).T
    coef, *_ = np.linalg.lstsq(X, np.log(e), rcond=None)
    resid = np.log(e) - X @ coef
    return float(coef[0]), float(np.sqrt(np.mean(resid**2)))


def convergence_order(errors, dts) -> float:
    """Observed order: least-squares slope of ``log(error)`` vs ``log(dt)``."""
    return convergence_fit(errors, dts)[0]


def decoupled_variant(spec: ModelSpec) -> ModelSpec:
    """Drop ``H_sa`` and every ``L_{k,sa}``; principal and auxiliary parts of a
    channel are split into separate channels so no cross term survives."""
    chans = []
    for c in spec.couplings:
        if np.any(c.L_s):
            chans.append({"L_s": c.L_s})
        if np.any(c.L_a):
            chans.append({"L_a": c.L_a})
    return ModelSpec.build(
        n_s=spec.n_s,
        n_a=spec.n_a,
        H_s=spec.H_s,
        H_a=spec.H_a,
        couplings=chans,
        L0=spec.L0,
        aux_basis=spec.aux_basis,
        schedules={k: v for k, v in spec.schedules.items() if k in ("H_s", "H_a", "L0")},
        name=f"{spec.name}-decoupled",
    )


# ----------------------------------------------------------------------------
# variation-of-constants oracles


def offdiag_reconstruction(spec: ModelSpec, init, path) -> np.ndarray:
    """Sup-norm-in-time error between the reconstructed and the directly
    integrated off-diagonal stack, per grid point.

    The direct solution is the off-diagonal part of :func:`run_coupled_blocks`.
    The reconstruction propagates ``Psi`` with drift ``A01`` and noise
    ``B01(c)``, ``c`` taken from the same run's diagonal stack, and applies
    :func:`variation_of_constants` with source ``A00 rho_diag``.
    """
    rec = E.run_coupled_blocks(spec, init, path)
    m = spec.n_a * spec.n_s**2
    diag, off = rec.states[:, :m], rec.states[:, m:]
    if off.shape[1] == 0:
        return np.zeros(len(rec.times))
    bg = block_generators(spec, 0.0)
    if spec.time_independent:
        drift = lambda t: bg.A01  # noqa: E731
        diff = lambda t, c: bg.B01(c)  # noqa: E731
        source = diag @ bg.A00.T
    else:
        drift = lambda t: block_generators(spec, t).A01  # noqa: E731
        diff = lambda t, c: block_generators(spec, t).B01(c)  # noqa: E731
        source = np.array([block_generators(spec, t).A00 @ x for t, x in zip(rec.times, diag)])
    prop = propagate_stoch_exp(drift, diff, path, scalar_feed=rec.meta["c"])
    recon = variation_of_constants(prop, source, off[0])
    return np.abs(recon - off).max(axis=1)


def q_reconstruction(spec: ModelSpec, init, path, P_kind: str = "block", rho_a=None) -> np.ndarray:
    """As :func:`offdiag_reconstruction` for the ``q`` part of the joint state.

    Direct solution: ``Q`` applied to :func:`run_full_sme`.  Reconstruction:
    ``Phi`` with drift ``L^{qq}`` and noise ``G - c I``, source
    ``L^{qp} rho^p``.
    """
    rec = E.run_full_sme(spec, init, path)
    if P_kind == "product" and rho_a is None:
        rho_a = E._aux_marginal(np.asarray(init), spec)
    P, Q = projector_p(spec, P_kind, rho_a)
    Pm, Qm = P.matrix, Q.matrix
    eye = np.eye(Pm.shape[0])

    xp = rec.states @ Pm.T
    xq = rec.states @ Qm.T
    if spec.time_independent:
        L = lindbladian(spec, 0.0).matrix
        G = g_superop(spec, 0.0).matrix
        Lqq = Qm @ L @ Qm

        def drift(t):
            return Lqq

        def diff(t, c):
            return G - c * eye

        source = xp @ (Qm @ L).T
    else:

        def drift(t):
            return Qm @ lindbladian(spec, t).matrix @ Qm

        def diff(t, c):
            return g_superop(spec, t).matrix - c * eye

        source = np.array([Qm @ lindbladian(spec, t).matrix @ x for t, x in zip(rec.times, xp)])
    prop = propagate_stoch_exp(drift, diff, path, scalar_feed=rec.meta["c"])
    recon = variation_of_constants(prop, source, xq[0])
    return np.abs(recon - xq).max(axis=1)


# ----------------------------------------------------------------------------
# suite


def _report(metric, errs, tol, dt, kind="check", detail="", cmp="le"):
    errs = np.asarray(errs, dtype=float)
    sup = float(errs.max()) if errs.size else 0.0
    ok = bool(np.isfinite(sup) and sup <= tol)
    if kind == "negative_control":
        ok = bool(not np.isfinite(sup) or sup > tol)
    return ComparisonReport(metric, sup, tol, ok, dt=dt, errors=errs, kind=kind, detail=detail)


def _run_or_nan(fn, *args, **kw):
    try:
        return fn(*args, **kw), ""
    except E.SimulationAbort as exc:
        return None, f"aborted: {exc}"


def _per_dt(spec, init, path, fault, n_traj, master_seed, tol, mc_workers):
    dt = path.dt
    n_s, n_a = spec.n_s, spec.n_a
    m = n_a * n_s**2
    reps = []
    init = np.asarray(init, dtype=complex)

    full = E.run_full_sme(spec, init, path)
    blocks = E.run_coupled_blocks(spec, init, path)
    full_blocks = np.array(
        [BlockState.from_composite(full.composite(n), n_s, n_a, spec.aux_basis).to_vector() for n in range(len(full.times))]
    )
    reps.append(_report("block_equivalence", np.abs(full_blocks - blocks.states).max(axis=1), tol["algebraic"], dt))
    reps.append(_report("measurement_record", np.abs(full.Y - blocks.Y), tol["algebraic"], dt))

    red, why = _run_or_nan(E.run_reduced_diag, spec, init, path, fault=fault)
    if red is None:
        elim = np.array([np.inf])
    else:
        elim = stack_trace_distance(red.states, blocks.states[:, :m], n_s)
    reps.append(_report("elimination", elim, tol["elimination_sup"], dt, detail=why + (f" fault={fault}" if fault else "")))

    rp = E.run_reduced_p(spec, "block", init, path)
    red_ok = red if fault is None else E.run_reduced_diag(spec, init, path)
    reps.append(_report("cross_formulation", np.abs(rp.diag_stack() - red_ok.states).max(axis=1), tol["cross_formulation"], dt))
    reps.append(_report("propagator_inverse", [red_ok.meta["max_inverse_residual"]], tol["propagator_inverse"], dt))

    tr = np.einsum("njss->n", blocks.states[:, :m].reshape(-1, n_a, n_s, n_s)).real
    reps.append(_report("trace", np.abs(tr - 1.0), tol["trace"], dt))

    reps.append(_report("offdiag_reconstruction", offdiag_reconstruction(spec, init, path), np.inf, dt, detail="see offdiag_reconstruction_order"))
    reps.append(_report("q_reconstruction", q_reconstruction(spec, init, path), np.inf, dt, detail="see q_reconstruction_order"))

    if n_traj:
        mc = E.monte_carlo_mean(
            "coupled_blocks", spec, init, n_traj, master_seed, dt, n_steps=path.n_steps, workers=mc_workers
        )
        me = E.solve_coupled_me(spec, init, dt, n_steps=path.n_steps)
        dist = np.array([trace_distance(a, b) for a, b in zip(mc.mean, me.principal)])
        bound = max(tol["statistical_se"] * (mc.se_scalar() or 0.0), tol["statistical_floor"])
        reps.append(_report("unconditional_closure", dist, bound, dt, detail=f"n_traj={n_traj}"))

    # Markovian degeneration on the decoupled variant
    dec = decoupled_variant(spec)
    ref = E.run_principal_sme(dec, _principal(init, spec), path)
    worst = 0.0
    for run in (
        E.run_full_sme(dec, init, path),
        E.run_coupled_blocks(dec, init, path),
        E.run_reduced_diag(dec, init, path),
        E.run_reduced_p(dec, "block", init, path),
    ):
        worst = max(worst, float(np.abs(run.principal - ref.principal).max()))
    reps.append(_report("markovian_degeneration", [worst], tol["algebraic"], dt))
    N = path.n_steps
    ker = E.kernel_dump(dec, "block", init, path, [N * dt], [k * N // 4 * dt for k in range(5)])
    reps.append(_report("decoupled_kernel", [ker.sup_norm()], tol["kernel_zero"], dt))

    # negative control: flipped A00 must break elimination consistency; it is
    # unobservable (and skipped) when A11 vanishes and no memory reaches the diagonal
    if fault is None and _has_memory(spec, path):
        bad, why = _run_or_nan(E.run_reduced_diag, spec, init, path, fault="A00-sign")
        err = np.array([np.inf]) if bad is None else stack_trace_distance(bad.states, blocks.states[:, :m], n_s)
        reps.append(_report("elimination_A00_sign", err, tol["elimination_sup"], dt, kind="negative_control", detail=why))
    return reps


def _has_memory(spec, path) -> bool:
    times = [0.0] if spec.time_independent else path.times[:: max(1, path.n_steps // 16)]
    return any(np.abs(block_generators(spec, t).A11).max() > 0 for t in times)


def _principal(init, spec):
    return partial_trace_aux(np.asarray(init), spec.n_s, spec.n_a)


def _nz_reports(spec, init, dt, horizon, tol):
    reps = []
    init = np.asarray(init, dtype=complex)
    g = E.solve_gksl(spec, init, dt, horizon=horizon)
    for kind in ("product", "block"):
        rho_a = E._aux_marginal(init, spec) if kind == "product" else None
        P, _ = projector_p(spec, kind, rho_a)
        proj = g.states @ P.matrix.T
        nz = E.solve_nz(spec, kind, init, dt, horizon=horizon, rho_a=rho_a)
        d = spec.d
        dist = [trace_distance(a.reshape(d, d, order="F"), b.reshape(d, d, order="F")) for a, b in zip(nz.states, proj)]
        reps.append(_report(f"nakajima_zwanzig_{kind}", dist, tol["nz"], dt))
        qnorm = float(np.abs((np.eye(d * d) - P.matrix) @ vec(init)).max())
        if qnorm > 1e-6:
            nz0 = E.solve_nz(spec, kind, init, dt, horizon=horizon, rho_a=rho_a, include_initial=False)
            dist0 = [trace_distance(a.reshape(d, d, order="F"), b.reshape(d, d, order="F")) for a, b in zip(nz0.states, proj)]
            reps.append(_report(f"nakajima_zwanzig_{kind}_no_initial", dist0, tol["nz"], dt, kind="negative_control"))
    return reps


def consistency_suite(
    spec: ModelSpec,
    init,
    master_seed: int,
    dt_list,
    horizon: float = 2.0,
    fault: str | None = None,
    n_traj: int = 0,
    tolerances: dict | None = None,
    workers: int = 1,
    nz_dt: float | None = None,
) -> list[ComparisonReport]:
    """Run every engine comparison on shared noise for each ``dt``.

    The Brownian path is drawn once at the smallest ``dt`` from
    ``derive_seed(master_seed, 0)`` and coarsened, so every ``dt`` in
    ``dt_list`` must be an integer multiple of the smallest.  ``n_traj > 0``
    adds the Monte Carlo closure check.  ``fault="A00-sign"`` corrupts the
    eliminated engine.  Order fits are appended after the per-dt reports.
    """
    dts = [float(x) for x in dt_list]
    if not dts:
        raise ValueError("dt_list is empty")
    if any(b > a for a, b in zip(dts, dts[1:])):
        raise ValueError("dt_list must be descending")
    if fault not in (None, "A00-sign"):
        raise ValueError(f"unknown fault {fault!r}")
    tol = dict(TOLERANCES, **(tolerances or {}))
    fine = dts[-1]
    n_fine = E._n_steps(fine, horizon)
    factors = []
    for h in dts:
        f = h / fine
        if abs(f - round(f)) > 1e-9 or n_fine % int(round(f)):
            raise ValueError(f"dt {h} is not a multiple of {fine} dividing the horizon")
        factors.append(int(round(f)))
    base = wiener_path(derive_seed(master_seed, 0), 0.0, fine, n_fine)
    jobs = [(spec, init, base.coarsen(f), fault, n_traj, master_seed, tol, 1) for f in factors]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            per = list(ex.map(_star_per_dt, jobs))
    else:
        per = [_per_dt(*j) for j in jobs]
    reports = [r for rs in per for r in rs]
    if len(dts) >= 3:
        for metric, name in (("elimination", "elimination_order"), ("offdiag_reconstruction", "offdiag_reconstruction_order"), ("q_reconstruction", "q_reconstruction_order")):
            errs = [r.sup_error for r in reports if r.metric == metric]
            if fault is None and max(errs) <= tol["algebraic"]:
                # exact at every dt (no memory coupling): nothing to fit
                reports.append(ComparisonReport(name, float(max(errs)), tol["algebraic"], True,
                                                errors=np.array(errs), detail="exact at every dt"))
                continue
            try:
                order, res = convergence_fit(errs, dts)
            except ValueError as exc:
                reports.append(ComparisonReport(name, float("nan"), tol["min_order"], False, detail=str(exc)))
                continue
            reports.append(
                ComparisonReport(name, float(max(errs)), tol["min_order"], bool(order >= tol["min_order"]),
                                 errors=np.array(errs), order=order, fit_residual=res)
            )
    reports.extend(_nz_reports(spec, init, nz_dt or max(dts[0], 1e-3), horizon, tol))
    return reports


def _star_per_dt(job):
    return _per_dt(*job)


def suite_passed(reports: list[ComparisonReport]) -> bool:
    """All checks pass and every negative control fires."""
    return all(r.passed for r in reports)


def format_reports(reports: list[ComparisonReport]) -> str:
    lines = [r.line() for r in reports]
    lines.append(f"{'PASS' if suite_passed(reports) else 'FAIL'} suite ({sum(r.passed for r in reports)}/{len(reports)})")
    return "\n".join(lines)


def reports_to_json(reports: list[ComparisonReport]) -> str:
    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return str(v)
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v

    rows = [{k: clean(v) for k, v in r.to_dict().items()} for r in reports]
    return json.dumps({"passed": suite_passed(reports), "reports": rows}, indent=2)
