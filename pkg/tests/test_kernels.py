import numpy as np
import pytest

from nmq import kernels
from nmq.model import reference_init, reference_model
from nmq.sde import wiener_path
from nmq.superops import block_generators, g_superop, lindbladian, measurement_weight, vec

from oracles import random_matrix, sme_em_direct

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


def _full_generators(spec):
    M = lindbladian(spec).matrix
    G = g_superop(spec).matrix
    w = measurement_weight(spec)
    tr = np.eye(spec.n_s * spec.n_a).reshape(-1).astype(complex)
    return M, G, w, tr


def _dI(seed, dt, n):
    return np.array(wiener_path(seed, 0.0, dt, n).increments, dtype=float)


def _reduced_args(seed=0, n=400, dt=1e-3, **kw):
    bg = block_generators(reference_model())
    p0 = np.tile(np.array([0, 0, 0, 1], complex), 2) * 0.5
    q0 = 0.05 * random_matrix(np.random.default_rng(seed), 8)[0]
    args = dict(
        App=bg.A10, Apq=bg.A11, Aqp=bg.A00, Aqq=bg.A01, Gp=bg.G_diag, Gq=bg.G_off, w=bg.weight.astype(complex),
        p0=p0, q0=q0, dI=_dI(seed + 1, dt, n), dt=dt, window_steps=-1, include_initial=True, exact_inverse=True,
        reinv_period=100, check_tol=1e-4, record_idx=np.array([0, 50, n], dtype=np.int64),
    )
    args.update(kw)
    return args


def _call_reduced(backend, a):
    mod = kernels.get_backend(backend)
    return mod.reduced_em(
        np.ascontiguousarray(a["App"]), np.ascontiguousarray(a["Apq"]), np.ascontiguousarray(a["Aqp"]),
        np.ascontiguousarray(a["Aqq"]), np.ascontiguousarray(a["Gp"]), np.ascontiguousarray(a["Gq"]),
        np.ascontiguousarray(a["w"]), a["p0"].copy(), a["q0"].copy(), a["dI"].copy(), a["dt"], a["window_steps"],
        a["include_initial"], a["exact_inverse"], a["reinv_period"], a["check_tol"], a["record_idx"],
    )


class TestLinear:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_matches_matrix_oracle(self, backend):
        spec = reference_model()
        M, G, w, tr = _full_generators(spec)
        rho0 = reference_init()
        dI = _dI(3, 1e-3, 500)
        X, c, status, step = kernels.get_backend(backend).linear_sme_em(
            M, G, w, tr, vec(rho0), dI.copy(), 1e-3, False, 1e-3
        )
        assert status == kernels.OK and step == 500
        want = sme_em_direct(spec, rho0, dI, 1e-3)
        got = X.reshape(-1, 4, 4).transpose(0, 2, 1)
        assert np.abs(got - want).max() < 1e-12
        assert np.allclose(c[:-1], [np.trace((w.reshape(4, 4)) @ r).real for r in want[:-1]])

    @pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled backend not built")
    def test_backend_parity(self):
        M, G, w, tr = _full_generators(reference_model())
        dI = _dI(4, 1e-4, 3000)
        out = [kernels.get_backend(b).linear_sme_em(M, G, w, tr, vec(reference_init()), dI.copy(), 1e-4, r, 1e-3)
               for b in ("python", "cython") for r in (False, True)]
        for a, b in ((out[0], out[2]), (out[1], out[3])):
            assert a[2] == b[2] and a[3] == b[3]
            assert np.abs(a[0] - b[0]).max() < 1e-12
            assert np.abs(a[1] - b[1]).max() < 1e-12

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_trace_drift_status(self, backend):
        # a non-trace-preserving drift trips the trace check
        d = 4
        M = np.eye(d * d, dtype=complex)
        G = np.zeros_like(M)
        w = np.zeros(d * d, complex)
        tr = np.eye(d).reshape(-1).astype(complex)
        X, c, status, step = kernels.get_backend(backend).linear_sme_em(
            M, G, w, tr, vec(reference_init()), np.zeros(100), 1e-2, False, 1e-3
        )
        assert status == kernels.TRACE_DRIFT and step == 1

    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_nonfinite_status(self, backend):
        d = 4
        M = np.zeros((d * d, d * d), complex)
        G = np.zeros_like(M)
        w = np.zeros(d * d, complex)
        tr = np.eye(d).reshape(-1).astype(complex)
        dI = np.zeros(10)
        dI[3] = np.nan
        G[:] = np.eye(d * d)
        out = kernels.get_backend(backend).linear_sme_em(M, G, w, tr, vec(reference_init()), dI, 1e-2, True, 1e-3)
        assert out[2] == kernels.NONFINITE and out[3] == 4


class TestReduced:
    @pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled backend not built")
    @pytest.mark.parametrize("exact", [True, False])
    @pytest.mark.parametrize("window", [-1, 37])
    def test_backend_parity(self, exact, window):
        a = _reduced_args(exact_inverse=exact, window_steps=window, include_initial=window < 0, check_tol=1.0)
        py = _call_reduced("python", a)
        cy = _call_reduced("cython", a)
        assert py[2] == cy[2] == kernels.OK and py[3] == cy[3]
        for i in (0, 1, 4, 5):
            assert np.abs(py[i] - cy[i]).max() < 1e-12
        assert abs(py[6] - cy[6]) < 1e-12

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_inverse_status(self, backend):
        a = _reduced_args(exact_inverse=False, reinv_period=10, check_tol=1e-30)
        out = _call_reduced(backend, a)
        assert out[2] == kernels.INVERSE_RESIDUAL and out[3] == 10

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_zero_coupling_is_principal_loop(self, backend):
        # with Apq = 0 the memory never reaches p, and p follows the linear loop
        a = _reduced_args()
        a["Apq"] = np.zeros_like(a["Apq"])
        out = _call_reduced(backend, a)
        tr = np.zeros(8, complex)
        X, c, status, _ = kernels.get_backend(backend).linear_sme_em(
            np.ascontiguousarray(a["App"]), np.ascontiguousarray(a["Gp"]), np.ascontiguousarray(a["w"]), tr,
            a["p0"].copy(), a["dI"].copy(), a["dt"], False, 1.0,
        )
        assert status == kernels.OK
        assert np.abs(out[0] - X).max() < 1e-13
        assert np.abs(out[1] - c).max() < 1e-13

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_record_indices(self, backend):
        a = _reduced_args()
        out = _call_reduced(backend, a)
        assert np.array_equal(out[4][0], np.eye(8))
        assert np.abs(out[4][1] @ out[5][1] - np.eye(8)).max() < 1e-10


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
