import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmq.model import (
    SIGMA_MINUS,
    SIGMA_X,
    SIGMA_Z,
    BlockState,
    ModelError,
    ModelSpec,
    Schedule,
    block,
    partial_trace_aux,
    reference_model,
)
from nmq.superops import (
    SuperOp,
    block_generators,
    coupled_drift,
    dump_superop_csv,
    g_superop,
    lindbladian,
    measurement_weight,
    projector_p,
    restrict,
    spost,
    spre,
    superop_from_map,
    unvec,
    vec,
)

from oracles import joint_operators, lindblad_action, random_density, random_hermitian, random_matrix, random_spec

seeds = st.integers(0, 2**32 - 1)


def _rho_a(rng, n_a):
    return random_density(rng, n_a)


class TestVectorization:
    def test_sandwich_identity(self):
        rng = np.random.default_rng(0)
        A, B, X = (random_matrix(rng, 3) for _ in range(3))
        assert np.allclose(spre(A) @ vec(X), vec(A @ X))
        assert np.allclose(spost(B) @ vec(X), vec(X @ B))
        assert np.array_equal(unvec(vec(X)), X)

    def test_apply_round_trip(self):
        rng = np.random.default_rng(1)
        S = SuperOp(random_matrix(rng, 9))
        X = random_matrix(rng, 3)
        assert np.allclose(S.apply(X), unvec(S.matrix @ vec(X)))

    def test_from_map(self):
        rng = np.random.default_rng(2)
        A = random_matrix(rng, 3)
        S = superop_from_map(lambda X: A @ X - X.T, 3)
        X = random_matrix(rng, 3)
        assert np.allclose(S.apply(X), A @ X - X.T)


class TestLindbladian:
    def test_zero(self):
        assert not np.any(lindbladian(ModelSpec.build(n_s=2, n_a=2)).matrix)

    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_matches_direct_action_and_preserves_trace(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng, K=2)
        rho = random_density(rng, 4)
        H, Ls = joint_operators(spec)
        out = lindbladian(spec).apply(rho)
        assert np.allclose(out, lindblad_action(H, Ls, rho), atol=1e-12)
        assert abs(np.trace(out)) < 1e-12

    def test_amplitude_damping_qubit(self):
        # H = sigma_z, L0 = sigma_-, rho = |1><1|: the commutator vanishes and
        # L rho L^dag = |0><0|, -{L^dag L, rho}/2 = -|1><1|
        spec = ModelSpec.build(n_s=2, n_a=1, H_s=SIGMA_Z, L0=SIGMA_MINUS)
        out = lindbladian(spec).apply(np.diag([0.0, 1.0]))
        assert np.allclose(out, np.diag([1.0, -1.0]), atol=1e-15)

    def test_schedule_applied(self):
        spec = ModelSpec.build(n_s=2, n_a=1, H_s=SIGMA_X, schedules={"H_s": Schedule("sinusoidal", 2.0, 1.0, 0.0)})
        assert not np.any(lindbladian(spec, 0.0).matrix)
        ref = ModelSpec.build(n_s=2, n_a=1, H_s=2 * np.sin(0.7) * SIGMA_X)
        assert np.allclose(lindbladian(spec, 0.7).matrix, lindbladian(ref).matrix)


class TestG:
    def test_zero(self):
        assert not np.any(g_superop(ModelSpec.build(n_s=2, n_a=2)).matrix)

    def test_hermitian_anticommutator(self):
        rng = np.random.default_rng(3)
        L0 = random_hermitian(rng, 2)
        spec = ModelSpec.build(n_s=2, n_a=2, L0=L0)
        X = random_matrix(rng, 4)
        A = np.kron(L0, np.eye(2))
        assert np.allclose(g_superop(spec).apply(X), A @ X + X @ A)

    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_trace_and_weight(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng)
        rho = random_matrix(rng, 4)
        M = np.kron(spec.L0 + spec.L0.conj().T, np.eye(2))
        want = np.trace(M @ rho)
        assert np.isclose(np.trace(g_superop(spec).apply(rho)), want)
        assert np.isclose(measurement_weight(spec) @ vec(rho), want)


class TestProjector:
    def test_offdiag_input_killed(self):
        spec = reference_model()
        A = random_matrix(np.random.default_rng(4), 2)
        X = np.kron(A, np.array([[0, 1], [0, 0]]))
        P, _ = projector_p(spec, "block_diagonal")
        assert np.array_equal(P.apply(X), np.zeros((4, 4)))

    @pytest.mark.parametrize("kind", ["block", "product"])
    @pytest.mark.parametrize("n_a", [1, 2, 3])
    def test_algebra(self, kind, n_a):
        rng = np.random.default_rng(5 + n_a)
        spec = random_spec(rng, n_s=2, n_a=n_a, basis=True)
        P, Q = projector_p(spec, kind, _rho_a(rng, n_a))
        Pm, Qm = P.matrix, Q.matrix
        assert np.abs(Pm @ Pm - Pm).max() < 1e-12
        assert np.abs(Pm @ Qm).max() < 1e-12 and np.abs(Qm @ Pm).max() < 1e-12
        for t in (0.0, 1.3):
            G = g_superop(spec, t).matrix
            assert np.linalg.norm(Pm @ G - G @ Pm) < 1e-12
        w = measurement_weight(spec)
        for _ in range(5):
            rho = random_matrix(rng, 2 * n_a)
            assert np.isclose(w @ vec(rho), w @ (Pm @ vec(rho)), atol=1e-12)

    @pytest.mark.parametrize("kind", ["block", "product"])
    def test_properties_one_and_two(self, kind):
        rng = np.random.default_rng(6)
        spec = random_spec(rng, n_a=3, basis=True)
        P, _ = projector_p(spec, kind, _rho_a(rng, 3))
        for _ in range(20):
            rho = random_matrix(rng, 6)
            O = np.kron(random_matrix(rng, 2), np.eye(3))
            assert np.allclose(partial_trace_aux(P.apply(rho), 2, 3), partial_trace_aux(rho, 2, 3), atol=1e-12)
            assert np.allclose(P.apply(O @ rho), O @ P.apply(rho), atol=1e-12)

    def test_block_projector_keeps_diagonal_blocks(self):
        rng = np.random.default_rng(7)
        spec = random_spec(rng, n_a=3, basis=True)
        P, _ = projector_p(spec, "block")
        X = random_matrix(rng, 6)
        got = BlockState.from_composite(P.apply(X), 2, 3, spec.aux_basis)
        want = BlockState.from_composite(X, 2, 3, spec.aux_basis)
        assert np.allclose(got.diag, want.diag, atol=1e-13)
        assert np.allclose(got.offdiag, 0, atol=1e-13)

    def test_invalid_rho_a(self):
        spec = reference_model()
        for bad in (np.eye(2), np.array([[1, 1], [0, 0]]), np.diag([1.5, -0.5]), np.eye(3) / 3, None):
            with pytest.raises(ModelError):
                projector_p(spec, "product", bad)
        with pytest.raises(ModelError):
            projector_p(spec, "mystery")


class TestRestrict:
    def test_identity(self):
        spec = reference_model()
        P, Q = projector_p(spec, "block")
        I = np.eye(16)
        assert np.array_equal(restrict(I, P, Q, "pp").matrix, P.matrix)
        assert np.allclose(restrict(I, P, Q, "pq").matrix, 0, atol=1e-15)

    @given(seeds)
    @settings(max_examples=15, deadline=None)
    def test_resolution(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng)
        P, Q = projector_p(spec, "product", _rho_a(rng, 2))
        L = lindbladian(spec)
        total = sum(restrict(L, P, Q, w).matrix for w in ("pp", "pq", "qp", "qq"))
        assert np.allclose(total, L.matrix, atol=1e-12)

    def test_decoupled_cross_terms_vanish(self):
        # H_sa = 0, L_sa = 0, L_a diagonal in the aux basis
        rng = np.random.default_rng(8)
        spec = ModelSpec.build(
            n_s=2, n_a=3, H_s=random_hermitian(rng, 2), H_a=np.diag([0.3, -1.0, 2.0]),
            couplings=[{"L_s": random_matrix(rng, 2)}, {"L_a": np.diag([1.0, 0.5j, -0.2])}],
            L0=random_matrix(rng, 2),
        )
        P, Q = projector_p(spec, "block")
        L = lindbladian(spec)
        assert np.abs(restrict(L, P, Q, "pq").matrix).max() < 1e-13
        assert np.abs(restrict(L, P, Q, "qp").matrix).max() < 1e-13

    def test_non_idempotent(self):
        with pytest.raises(ModelError):
            restrict(np.eye(4), 0.5 * np.eye(4), 0.5 * np.eye(4), "pp")
        P, Q = projector_p(reference_model(), "block")
        with pytest.raises(ModelError):
            restrict(np.eye(16), P, Q, "xy")


class TestBlockGenerators:
    def test_decoupled(self):
        spec = ModelSpec.build(
            n_s=2, n_a=2, H_s=SIGMA_Z, H_a=SIGMA_Z, couplings=[{"L_s": SIGMA_MINUS}], L0=0.5 * SIGMA_MINUS
        )
        bg = block_generators(spec)
        assert not np.any(bg.A00) and not np.any(bg.A11)

    def test_decoupled_needs_diagonal_H_a(self):
        # an auxiliary Hamiltonian that is off-diagonal in aux_basis mixes blocks
        spec = ModelSpec.build(n_s=2, n_a=2, H_s=SIGMA_Z, H_a=SIGMA_X, L0=0.5 * SIGMA_MINUS)
        bg = block_generators(spec)
        assert np.any(bg.A00) and np.any(bg.A11)
        rotated = spec.replace(aux_basis=np.array([[1, 1], [1, -1]]) / np.sqrt(2))
        bg = block_generators(rotated)
        assert np.abs(bg.A00).max() < 1e-15 and np.abs(bg.A11).max() < 1e-15

    def test_single_auxiliary_level(self):
        rng = np.random.default_rng(9)
        spec = random_spec(rng, n_s=3, n_a=1, K=2)
        bg = block_generators(spec)
        assert bg.A00.shape == (0, 9) and bg.A01.shape == (0, 0)
        assert np.allclose(bg.A10, lindbladian(spec).matrix, atol=1e-13)

    @given(seeds, st.integers(1, 3), st.booleans())
    @settings(max_examples=15, deadline=None)
    def test_drift_matches_lindbladian_blocks(self, seed, n_a, use_basis):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng, n_s=2, n_a=n_a, basis=use_basis)
        rho = random_density(rng, 2 * n_a)
        bs = BlockState.from_composite(rho, 2, n_a, spec.aux_basis)
        bg = block_generators(spec, 0.4)
        x = bs.to_vector()
        got = BlockState.from_vector(bg.drift_matrix() @ x, 2, n_a)
        Lrho = lindbladian(spec, 0.4).apply(rho)
        want = BlockState.from_composite(Lrho, 2, n_a, spec.aux_basis)
        assert np.allclose(got.diag, want.diag, atol=1e-10)
        assert np.allclose(got.offdiag, want.offdiag, atol=1e-10)
        # blockwise evaluation of the coupled equations gives the same drift
        V = spec.aux_basis
        blocks = np.array([[block(rho, j, k, 2, n_a, V) for k in range(n_a)] for j in range(n_a)])
        direct = coupled_drift(spec, 0.4, blocks)
        for j in range(n_a):
            assert np.allclose(direct[j, j], want.diag[j], atol=1e-10)
        # trace preservation of the coupled system
        assert abs(sum(np.trace(direct[j, j]) for j in range(n_a))) < 1e-12

    def test_noise_parts(self):
        rng = np.random.default_rng(10)
        spec = random_spec(rng, n_a=3)
        rho = random_density(rng, 6)
        bg = block_generators(spec)
        bs = BlockState.from_composite(rho, 2, 3)
        x = bs.to_vector()
        Gx = BlockState.from_composite(g_superop(spec).apply(rho), 2, 3).to_vector()
        assert np.allclose(bg.noise_matrix() @ x, Gx, atol=1e-13)
        assert np.isclose(bg.scalar(x[:12]), (measurement_weight(spec) @ vec(rho)).real)
        c = 0.7
        assert np.allclose(bg.B01(c), bg.G_off - c * np.eye(bg.G_off.shape[0]))
        assert np.allclose(bg.B10(c), bg.G_diag - c * np.eye(12))


def test_dump_csv(tmp_path):
    S = lindbladian(reference_model())
    dump_superop_csv(S, tmp_path / "L.csv")
    rows = list(csv.reader(open(tmp_path / "L.csv")))
    assert rows[0][:2] == ["c0_re", "c0_im"] and len(rows) == 17
    back = np.array([[float(x) for x in r] for r in rows[1:]])
    assert np.array_equal(back[:, 0::2] + 1j * back[:, 1::2], S.matrix)
