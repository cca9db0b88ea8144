"""Superoperators as matrices acting on column-stacked operators.

``vec(X) = X.reshape(-1, order="F")`` throughout, so ``vec(A X B) = (B^T (x) A) vec(X)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .model import ModelError, ModelSpec, assemble_operator, offdiag_pairs, partial_trace_aux

__all__ = [
    "vec",
    "unvec",
    "spre",
    "spost",
    "SuperOp",
    "superop_from_map",
    "lindbladian",
    "g_superop",
    "projector_p",
    "restrict",
    "BlockGenerators",
    "block_generators",
    "coupled_drift",
    "block_operators",
    "dump_superop_csv",
    "IDEMPOTENCE_TOL",
]

IDEMPOTENCE_TOL = 1e-10


def vec(X) -> np.ndarray:
    return np.asarray(X).reshape(-1, order="F")


def unvec(v, n: int | None = None) -> np.ndarray:
    v = np.asarray(v)
    if n is None:
        n = int(round(np.sqrt(v.size)))
    return v.reshape(n, n, order="F")


def spre(A) -> np.ndarray:
    """Left multiplication ``X -> A X``."""
    A = np.asarray(A)
    return np.kron(np.eye(A.shape[0]), A)


def spost(B) -> np.ndarray:
    """Right multiplication ``X -> X B``."""
    B = np.asarray(B)
    return np.kron(B.T, np.eye(B.shape[0]))


def _sandwich(A, B) -> np.ndarray:
    """``X -> A X B``."""
    return np.kron(np.asarray(B).T, np.asarray(A))


@dataclass(frozen=True)
class SuperOp:
    """A ``d^2 x d^2`` matrix acting on ``d x d`` operators; ``space`` is a free-form tag."""

    matrix: np.ndarray
    space: str = "composite"

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.matrix.shape[0])))

    def apply(self, X) -> np.ndarray:
        return unvec(self.matrix @ vec(X), self.dim)

    def __matmul__(self, other: "SuperOp") -> "SuperOp":
        return SuperOp(self.matrix @ other.matrix, self.space)


def superop_from_map(f: Callable[[np.ndarray], np.ndarray], d: int, space: str = "composite") -> SuperOp:
    """Materialize a linear map on ``d x d`` matrices column by column."""
    S = np.zeros((d * d, d * d), complex)
    for idx in range(d * d):
        E = np.zeros(d * d, complex)
        E[idx] = 1.0
        S[:, idx] = vec(f(unvec(E, d)))
    return SuperOp(S, space)


def _jump_ops(spec: ModelSpec, t: float) -> list[np.ndarray]:
    return [assemble_operator(spec, "L0", t)] + [assemble_operator(spec, f"L{k}", t) for k in range(1, spec.K + 1)]


def lindbladian(spec: ModelSpec, t: float = 0.0) -> SuperOp:
    """GKSL generator including the probe channel k = 0."""
    H = assemble_operator(spec, "H", t)
    S = -1j * (spre(H) - spost(H))
    for L in _jump_ops(spec, t):
        LdL = L.conj().T @ L
        S = S + _sandwich(L, L.conj().T) - 0.5 * spre(LdL) - 0.5 * spost(LdL)
    return SuperOp(S)


def g_superop(spec: ModelSpec, t: float = 0.0) -> SuperOp:
    """``X -> L0 X + X L0^dag`` with ``L0`` ampliated."""
    L0 = assemble_operator(spec, "L0", t)
    return SuperOp(spre(L0) + spost(L0.conj().T))


def measurement_weight(spec: ModelSpec, t: float = 0.0) -> np.ndarray:
    """Row vector ``w`` with ``w @ vec(X) = Tr((L0 + L0^dag) X)`` on the composite space."""
    L0 = assemble_operator(spec, "L0", t)
    return (L0 + L0.conj().T).reshape(-1)


def projector_p(spec: ModelSpec, kind: str = "block", rho_a=None) -> tuple[SuperOp, SuperOp]:
    """Projection pair ``(P, Q = I - P)``.

    ``kind="block"`` keeps the diagonal blocks in ``spec.aux_basis``;
    ``kind="product"`` maps ``X -> Tr_a(X) (x) rho_a``.
    """
    n_s, n_a, d = spec.n_s, spec.n_a, spec.d
    if kind in ("block", "block_diagonal"):
        V = np.asarray(spec.aux_basis)
        P = np.zeros((d * d, d * d), complex)
        for j in range(n_a):
            Pi = np.kron(np.eye(n_s), np.outer(V[:, j], V[:, j].conj()))
            P += _sandwich(Pi, Pi)
    elif kind == "product":
        if rho_a is None:
            raise ModelError("product projector needs rho_a")
        rho_a = np.asarray(rho_a, dtype=complex)
        if rho_a.shape != (n_a, n_a):
            raise ModelError(f"rho_a has shape {rho_a.shape}, expected {(n_a, n_a)}")
        evals = np.linalg.eigvalsh((rho_a + rho_a.conj().T) / 2)
        if (
            np.abs(rho_a - rho_a.conj().T).max() > 1e-10
            or abs(np.trace(rho_a) - 1) > 1e-10
            or evals.min() < -1e-10
        ):
            raise ModelError("rho_a is not a valid auxiliary density matrix")
        P = superop_from_map(lambda X: np.kron(partial_trace_aux(X, n_s, n_a), rho_a), d).matrix
    else:
        raise ModelError(f"unknown projector kind {kind!r}")
    return SuperOp(P, "composite"), SuperOp(np.eye(d * d) - P, "composite")


def restrict(S, P, Q, which: str) -> SuperOp:
    """``S^{pp} = P S P`` and the pq, qp, qq analogues."""
    Sm, Pm, Qm = (x.matrix if isinstance(x, SuperOp) else np.asarray(x) for x in (S, P, Q))
    if np.abs(Pm @ Pm - Pm).max() > IDEMPOTENCE_TOL:
        raise ModelError("projector is not idempotent")
    left = {"p": Pm, "q": Qm}
    if which not in ("pp", "pq", "qp", "qq"):
        raise ModelError(f"unknown restriction {which!r}")
    return SuperOp(left[which[0]] @ Sm @ left[which[1]])


# ----------------------------------------------------------------------------
# block formulation


def block_operators(spec: ModelSpec, t: float = 0.0):
    """Principal blocks ``H^{jk}``, ``L_m^{jk}`` (m = 0..K) and ``(L_m^dag L_m)^{jk}``.

    Returns arrays of shape ``(n_a, n_a, n_s, n_s)`` (and a leading m axis for
    the coupling lists).
    """
    n_s, n_a = spec.n_s, spec.n_a
    V = np.asarray(spec.aux_basis)
    I_s = np.eye(n_s)
    sch = spec.schedule

    def blocks_of(X_s, X_sa, X_a, ss, ssa, sa):
        X4 = np.einsum("aj,satb,bk->jkst", V.conj(), np.asarray(X_sa).reshape(n_s, n_a, n_s, n_a), V)
        Xa = V.conj().T @ np.asarray(X_a) @ V
        out = ssa * X4 + sa * Xa[:, :, None, None] * I_s
        for j in range(n_a):
            out[j, j] += ss * np.asarray(X_s)
        return out

    H = blocks_of(spec.H_s, spec.H_sa, spec.H_a, sch("H_s")(t), sch("H_sa")(t), sch("H_a")(t))
    Ls = []
    L0 = np.zeros((n_a, n_a, n_s, n_s), complex)
    for j in range(n_a):
        L0[j, j] = sch("L0")(t) * np.asarray(spec.L0)
    Ls.append(L0)
    for k, c in enumerate(spec.couplings, start=1):
        Ls.append(blocks_of(c.L_s, c.L_sa, c.L_a, sch(f"L{k}_s")(t), sch(f"L{k}_sa")(t), sch(f"L{k}_a")(t)))
    Ls = np.array(Ls)
    # (L^dag L)^{jk} = sum_r (L^{rj})^dag L^{rk}
    LdL = np.einsum("mrjts,mrktu->mjksu", Ls.conj(), Ls)
    return H, Ls, LdL


def coupled_drift(spec: ModelSpec, t: float, blocks: np.ndarray) -> np.ndarray:
    """Drift of the coupled block equations evaluated block by block.

    ``blocks[j, k]`` is ``rho^{jk}``; returns the array of drifts in the same layout.
    """
    H, Ls, LdL = block_operators(spec, t)
    n_a = spec.n_a
    out = np.zeros_like(blocks, dtype=complex)
    for j in range(n_a):
        for k in range(n_a):
            acc = np.zeros(blocks.shape[2:], complex)
            for l in range(n_a):
                acc += 1j * (blocks[j, l] @ H[l, k] - H[j, l] @ blocks[l, k])
            for m in range(len(Ls)):
                for r in range(n_a):
                    for s in range(n_a):
                        acc += Ls[m, j, r] @ blocks[r, s] @ Ls[m, k, s].conj().T
                    acc -= 0.5 * (LdL[m, j, r] @ blocks[r, k] + blocks[j, r] @ LdL[m, r, k])
            out[j, k] = acc
    return out


@dataclass(frozen=True)
class BlockGenerators:
    """Linear maps of the coupled block SDEs over the stacked block vectors.

    The diagonal stack has ``n_a`` blocks, the off-diagonal stack
    ``n_a (n_a - 1)`` blocks, each column-stacked (``n_s^2`` entries).

    ``A10``: diag -> diag, ``A11``: offdiag -> diag, ``A00``: diag -> offdiag,
    ``A01``: offdiag -> offdiag.  ``G_diag`` and ``G_off`` are the linear
    parts of ``B10`` and ``B01``; the state-dependent scalar is
    ``weight @ x_diag``.
    """

    A00: np.ndarray
    A01: np.ndarray
    A10: np.ndarray
    A11: np.ndarray
    G_diag: np.ndarray
    G_off: np.ndarray
    weight: np.ndarray

    def scalar(self, x_diag) -> float:
        """``sum_l Tr((L0 + L0^dag) rho^{ll})``."""
        return float((self.weight @ x_diag).real)

    def B10(self, c: float) -> np.ndarray:
        return self.G_diag - c * np.eye(self.G_diag.shape[0])

    def B01(self, c: float) -> np.ndarray:
        return self.G_off - c * np.eye(self.G_off.shape[0])

    def drift_matrix(self) -> np.ndarray:
        """Full coupled drift on ``[x_diag; x_off]``."""
        return np.block([[self.A10, self.A11], [self.A00, self.A01]])

    def noise_matrix(self) -> np.ndarray:
        return np.block(
            [
                [self.G_diag, np.zeros((self.G_diag.shape[0], self.G_off.shape[0]), complex)],
                [np.zeros((self.G_off.shape[0], self.G_diag.shape[0]), complex), self.G_off],
            ]
        )

    def full_weight(self) -> np.ndarray:
        return np.concatenate([self.weight, np.zeros(self.G_off.shape[0], complex)])


@lru_cache(maxsize=None)
def _stack_index(n_a: int) -> dict:
    idx = {(j, j): j for j in range(n_a)}
    for p, pair in enumerate(offdiag_pairs(n_a)):
        idx[pair] = n_a + p
    return idx


def block_generators(spec: ModelSpec, t: float = 0.0) -> BlockGenerators:
    """Materialize the six block maps at time ``t``.

    Every term ``A rho^{rs} B`` of the coupled equation for ``rho^{jk}`` lands
    in the sub-matrix selected by whether ``(j, k)`` and ``(r, s)`` are
    diagonal; the (1 - delta) factors of the individual maps fall out of that
    partition.
    """
    n_s, n_a = spec.n_s, spec.n_a
    H, Ls, LdL = block_operators(spec, t)
    m2 = n_s * n_s
    nb = n_a * n_a
    idx = _stack_index(n_a)
    M = np.zeros((nb * m2, nb * m2), complex)
    I_s = np.eye(n_s)

    def add(jk, rs, A, B):
        a, b = idx[jk], idx[rs]
        M[a * m2 : (a + 1) * m2, b * m2 : (b + 1) * m2] += _sandwich(A, B)

    for j in range(n_a):
        for k in range(n_a):
            for l in range(n_a):
                add((j, k), (j, l), 1j * I_s, H[l, k])
                add((j, k), (l, k), -1j * H[j, l], I_s)
            for m in range(Ls.shape[0]):
                for r in range(n_a):
                    for s in range(n_a):
                        add((j, k), (r, s), Ls[m, j, r], Ls[m, k, s].conj().T)
                    add((j, k), (r, k), -0.5 * LdL[m, j, r], I_s)
                    add((j, k), (j, r), I_s, -0.5 * LdL[m, r, k])
    nd = n_a * m2
    L0 = spec.schedule("L0")(t) * np.asarray(spec.L0)
    G1 = spre(L0) + spost(L0.conj().T)
    n_off = n_a * (n_a - 1)
    w = np.tile((L0 + L0.conj().T).reshape(-1), n_a)
    return BlockGenerators(
        A00=M[nd:, :nd].copy(),
        A01=M[nd:, nd:].copy(),
        A10=M[:nd, :nd].copy(),
        A11=M[:nd, nd:].copy(),
        G_diag=np.kron(np.eye(n_a), G1),
        G_off=np.kron(np.eye(n_off), G1),
        weight=w,
    )


def dump_superop_csv(S, path) -> None:
    """Write a superoperator matrix row-major with paired ``_re``/``_im`` columns."""
    M = S.matrix if isinstance(S, SuperOp) else np.asarray(S)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"c{j}_{p}" for j in range(M.shape[1]) for p in ("re", "im")])
        for row in M:
            wr.writerow([f"{x:.17g}" for z in row for x in (z.real, z.imag)])
