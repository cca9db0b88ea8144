"""Acceptance criteria 1-10 on the reference model at the stated tolerances.

Every test prints one ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (also repeated in the pytest terminal summary) and then asserts it.
Reference model: qubit principal and qubit auxiliary, ``H_s = sigma_z/2``,
``H_a = sigma_z``, ``H_sa = 0.3 sigma_x (x) sigma_x``, auxiliary damping
``sigma_-`` at rate 1, probe ``0.5 sigma_-``; init ``|1><1| (x) |0><0|``;
``T = 2``, ``dt = 1e-4``.
"""

import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from nmq.cli import main as cli_main
from nmq.engines import (
    kernel_dump,
    monte_carlo_mean,
    run_coupled_blocks,
    run_full_sme,
    run_principal_sme,
    run_reduced_diag,
    run_reduced_p,
    solve_coupled_me,
    solve_gksl,
    solve_nz,
)
from nmq.harness import (
    TOLERANCES,
    convergence_fit,
    decoupled_variant,
    q_reconstruction,
    offdiag_reconstruction,
    stack_trace_distance,
    trace_distance,
)
from nmq.model import BlockState, partial_trace_aux, reference_init, reference_model, save_model
from nmq.sde import derive_seed, wiener_path
from nmq.superops import projector_p, vec

from oracles import random_density, random_matrix

T = 2.0
DT = 1e-4
N = 20_000
SWEEP = (4e-4, 2e-4, 1e-4)
MASTER_SEED = 2024


def verdict(n, ok, text):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def spec():
    return reference_model()


@pytest.fixture(scope="module")
def init():
    return reference_init()


@pytest.fixture(scope="module")
def fine_path():
    return wiener_path(derive_seed(MASTER_SEED, 0), 0.0, DT, N)


def _elimination_sweep(spec, rho0, fine, **kw):
    errs = []
    for h in SWEEP:
        path = fine.coarsen(int(round(h / DT)))
        red = run_reduced_diag(spec, rho0, path, **kw)
        blk = run_coupled_blocks(spec, rho0, path)
        m = spec.n_a * spec.n_s**2
        errs.append(float(stack_trace_distance(red.states, blk.states[:, :m], spec.n_s).max()))
    return errs


def test_criterion_1_projection_algebra(spec):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    d = spec.d
    rho_a = random_density(rng, spec.n_a)
    worst = 0.0
    for kind, ra in (("block", None), ("product", rho_a)):
        P, Q = projector_p(spec, kind, ra)
        Pm, Qm = P.matrix, Q.matrix
        worst = max(worst, np.abs(Pm @ Pm - Pm).max(), np.abs(Pm @ Qm).max())
        for _ in range(100):
            X = random_matrix(rng, d)
            O = random_matrix(rng, spec.n_s)
            PX = P.apply(X)
            worst = max(worst, np.abs(partial_trace_aux(PX, spec.n_s, spec.n_a) - partial_trace_aux(X, spec.n_s, spec.n_a)).max())
            OI = np.kron(O, np.eye(spec.n_a))
            worst = max(worst, np.abs(P.apply(OI @ X) - OI @ PX).max())
            worst = max(worst, np.abs(Pm @ vec(X) - vec(PX)).max())
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and elapsed < 1.0,
            f"projection algebra max error {worst:.2e} (tol 1e-12), {elapsed:.2f} s (limit 1 s)")


def test_criterion_2_block_equivalence(spec, init, fine_path):
    t0 = time.perf_counter()
    full = run_full_sme(spec, init, fine_path)
    blk = run_coupled_blocks(spec, init, fine_path)
    full_blocks = np.array([BlockState.from_composite(full.composite(n), 2, 2).to_vector() for n in range(N + 1)])
    err = float(np.abs(full_blocks - blk.states).max())
    elapsed = time.perf_counter() - t0
    verdict(2, err <= 1e-9 and elapsed < 30,
            f"block equivalence sup error {err:.2e} over {N} steps (tol 1e-9), {elapsed:.1f} s (limit 30 s)")


def test_criterion_3_elimination(spec, init, fine_path):
    t0 = time.perf_counter()
    errs = _elimination_sweep(spec, init, fine_path)
    order, resid = convergence_fit(errs, SWEEP)
    elapsed = time.perf_counter() - t0
    ok = order >= TOLERANCES["min_order"] and errs[-1] <= TOLERANCES["elimination_sup"] and elapsed < 300
    verdict(3, ok, f"elimination order {order:.3f} (need >= 0.4, fit residual {resid:.1e}), "
                   f"sup trace distance {errs[-1]:.2e} at dt=1e-4 (tol 1e-2), {elapsed:.1f} s (limit 300 s)")


def test_criterion_4_cross_formulation(spec, init, fine_path):
    t0 = time.perf_counter()
    red = run_reduced_diag(spec, init, fine_path)
    rp = run_reduced_p(spec, "block", init, fine_path)
    err = float(np.abs(rp.diag_stack() - red.states).max())
    elapsed = time.perf_counter() - t0
    verdict(4, err <= 1e-8 and elapsed < 300,
            f"reduced_p(block) vs reduced_diag sup error {err:.2e} (tol 1e-8), {elapsed:.1f} s (limit 300 s)")


def test_criterion_5_variation_of_constants(spec, fine_path):
    # a correlated start so both the initial-value and the source terms are exercised
    rho0 = random_density(np.random.default_rng(5), 4)
    e2, e1 = [], []
    for h in SWEEP:
        path = fine_path.coarsen(int(round(h / DT)))
        e2.append(float(offdiag_reconstruction(spec, rho0, path).max()))
        e1.append(float(q_reconstruction(spec, rho0, path).max()))
    o2, _ = convergence_fit(e2, SWEEP)
    o1, _ = convergence_fit(e1, SWEEP)
    ok = min(o1, o2) >= TOLERANCES["min_order"]
    verdict(5, ok, f"off-diagonal reconstruction order {o2:.3f}, q-part reconstruction order {o1:.3f} (need >= 0.4); "
                   f"errors at dt=1e-4 {e2[-1]:.2e} / {e1[-1]:.2e}")


def test_criterion_6_unconditional_closure(spec, init):
    t0 = time.perf_counter()
    mc = monte_carlo_mean("coupled_blocks", spec, init, 2000, MASTER_SEED, DT, horizon=T, workers=os.cpu_count() or 1)
    me = solve_coupled_me(spec, init, DT, horizon=T)
    dist = max(trace_distance(a, b) for a, b in zip(mc.mean, me.principal))
    se = mc.se_scalar()
    bound = max(TOLERANCES["statistical_se"] * se, TOLERANCES["statistical_floor"])
    elapsed = time.perf_counter() - t0
    verdict(6, dist <= bound and mc.n_ok == 2000 and elapsed < 600,
            f"2000-trajectory mean vs coupled ME sup trace distance {dist:.2e} "
            f"(bound max(3 SE={3 * se:.2e}, 0.05)), {elapsed:.1f} s (limit 600 s)")


def test_criterion_7_nakajima_zwanzig(spec):
    t0 = time.perf_counter()
    worst = {}
    inits = {"reference": reference_init(), "correlated": random_density(np.random.default_rng(5), 4)}
    for name, rho0 in inits.items():
        g = solve_gksl(spec, rho0, DT, horizon=T)
        for kind in ("block", "product"):
            ra = np.einsum("sasb->ab", rho0.reshape(2, 2, 2, 2)) if kind == "product" else None
            P, _ = projector_p(spec, kind, ra)
            nz = solve_nz(spec, kind, rho0, DT, horizon=T, rho_a=ra)
            proj = g.states @ P.matrix.T
            diff = (nz.states - proj).reshape(-1, 4, 4).transpose(0, 2, 1)
            worst[(name, kind)] = float(0.5 * np.linalg.svd(diff, compute_uv=False).sum(axis=1).max())
    elapsed = time.perf_counter() - t0
    err = max(worst.values())
    # the 10 s budget applies to one comparison; four are run here
    verdict(7, err <= TOLERANCES["nz"] and elapsed / len(worst) < 10,
            f"NZ vs projected GKSL sup trace distance {err:.2e} over block/product projectors and two inits "
            f"(tol 1e-6), {elapsed / len(worst):.1f} s per comparison (limit 10 s)")


def test_criterion_8_markovian_degeneration(spec, init, fine_path):
    dec = decoupled_variant(spec)
    path = fine_path
    knorm = 0.0
    for form in ("block", "pq-block", "pq-product"):
        kev = kernel_dump(dec, form, init, path, [0.5, 1.0, T], [0.0, 0.25, 0.5, 1.0, T])
        knorm = max(knorm, kev.sup_norm())
    ref = run_principal_sme(dec, partial_trace_aux(init, 2, 2), path)
    runs = {
        "full_sme": run_full_sme(dec, init, path),
        "coupled_blocks": run_coupled_blocks(dec, init, path),
        "reduced_diag": run_reduced_diag(dec, init, path),
        "reduced_p(block)": run_reduced_p(dec, "block", init, path),
        "reduced_p(product)": run_reduced_p(dec, "product", init, path),
    }
    dev = {k: float(np.abs(r.principal - ref.principal).max()) for k, r in runs.items()}
    worst = max(dev.values())
    verdict(8, knorm <= 1e-12 and worst <= 1e-9,
            f"decoupled kernel sup norm {knorm:.2e} (tol 1e-12), max stepwise deviation from the principal-only SME "
            f"{worst:.2e} (tol 1e-9; worst engine {max(dev, key=dev.get)})")


def test_criterion_9_product_state_vanishing(fine_path):
    rng = np.random.default_rng(9)
    # product init with a non-diagonal auxiliary state; aux_basis = its eigenbasis
    rho_s = random_density(rng, 2)
    rho_a = random_density(rng, 2)
    _, U = np.linalg.eigh(rho_a)
    spec_e = reference_model().replace(aux_basis=U)
    rho0 = np.kron(rho_s, rho_a)
    off = float(np.abs(BlockState.from_composite(rho0, 2, 2, U).offdiag).max())
    path = fine_path.coarsen(4)
    with_term = run_reduced_diag(spec_e, rho0, path, include_initial=True)
    ablated = run_reduced_diag(spec_e, rho0, path, include_initial=False)
    abl = float(np.abs(with_term.states - ablated.states).max())
    # negative control: entangled init (|1,0> + |0,1>)/sqrt(2) with the term ablated
    v = np.zeros(4, complex)
    v[[1, 2]] = 1 / np.sqrt(2)
    ent = np.outer(v, v.conj())
    errs = _elimination_sweep(reference_model(), ent, fine_path, include_initial=False)
    order, _ = convergence_fit(errs, SWEEP)
    control_fails_c3 = order < TOLERANCES["min_order"] or errs[-1] > TOLERANCES["elimination_sup"]
    ok = off <= 1e-12 and abl <= TOLERANCES["ablation"] and control_fails_c3
    verdict(9, ok, f"eigenbasis off-diagonal init {off:.1e}, ablation change {abl:.1e} (tol 1e-12); "
                   f"entangled-init ablation fails criterion 3: order {order:.3f}, sup {errs[-1]:.2e} "
                   f"({'detected' if control_fails_c3 else 'NOT detected'})")


def test_criterion_10_determinism(spec, init, tmp_path):
    model = tmp_path / "reference.json"
    save_model(spec, model, init=init)
    same = True
    checked = []
    for engine, extra, files in (
        ("full_sme", ["--traj", "2"], ["traj_0000.csv", "traj_0001.csv"]),
        ("reduced_diag", [], ["traj_0000.csv"]),
        ("mc", ["--traj", "20", "--workers", "1"], ["mean.csv"]),
    ):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{engine}-{run}"
            rc = cli_main(["simulate", "--model", str(model), "--engine", engine, "--dt", str(DT), "--horizon", str(T),
                           "--seed", str(MASTER_SEED), "--out", str(out)] + extra)
            assert rc == 0
            outs.append(out)
        for f in files:
            same &= (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
            checked.append(f"{engine}/{f}")
    verdict(10, same, f"two cmd_simulate runs byte-identical across {len(checked)} CSV files ({', '.join(checked)})")
