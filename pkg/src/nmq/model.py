"""Operator algebra on the principal/auxiliary/composite spaces and the model spec.

Conventions
-----------
Composite operators act on ``h_s (x) h_a`` with the principal factor first,
so ``np.kron(A_s, B_a)`` is the ampliation pattern and composite index
``i = s * n_a + a``.  Auxiliary indices ``j, k`` are 0-based.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Schedule",
    "Coupling",
    "ModelSpec",
    "ModelError",
    "ModelParseError",
    "BlockState",
    "offdiag_pairs",
    "assemble_operator",
    "block",
    "partial_trace_aux",
    "validate_model",
    "load_model",
    "save_model",
    "default_init",
    "load_model_and_init",
    "model_from_dict",
    "model_to_dict",
    "reference_model",
    "decoupled_reference_model",
    "reference_init",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "SIGMA_MINUS",
]

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# lowers |1> to |0>
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)

HERMITIAN_TOL = 1e-12
ORTHONORMAL_TOL = 1e-12


class ModelError(ValueError):
    """Raised when an operation receives an inconsistent model or operand."""


class ModelParseError(ModelError):
    """Raised when a model file cannot be parsed; ``where`` names the field."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass(frozen=True)
class Schedule:
    """Time modulation of one operator part.

    ``constant`` multiplies by 1; ``sinusoidal`` multiplies by
    ``amplitude * sin(frequency * t + phase)``.
    """

    kind: str = "constant"
    amplitude: float = 1.0
    frequency: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoidal"):
            raise ModelError(f"unknown schedule kind {self.kind!r}")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return 1.0
        return self.amplitude * math.sin(self.frequency * t + self.phase)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"


CONSTANT = Schedule()


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=complex)
    if shape is not None and arr.shape != shape:
        raise ModelError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Coupling:
    """One bath channel ``L_k = L_s (x) I + L_sa + I (x) L_a``."""

    L_s: np.ndarray
    L_a: np.ndarray
    L_sa: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """Principal + auxiliary Markovian embedding with a homodyne probe on the principal.

    ``aux_basis`` holds the orthonormal basis vectors ``|phi_j>`` as columns.
    ``schedules`` maps part names (``H_s``, ``H_a``, ``H_sa``, ``L0``,
    ``L{k}_s``, ``L{k}_a``, ``L{k}_sa`` with k starting at 1) to a
    :class:`Schedule`; missing names are constant.
    """

    n_s: int
    n_a: int
    H_s: np.ndarray
    H_a: np.ndarray
    H_sa: np.ndarray
    couplings: tuple[Coupling, ...]
    L0: np.ndarray
    aux_basis: np.ndarray
    schedules: Mapping[str, Schedule] = field(default_factory=dict)
    name: str = "model"

    @classmethod
    def build(
        cls,
        n_s: int,
        n_a: int,
        H_s=None,
        H_a=None,
        H_sa=None,
        couplings: Sequence = (),
        L0=None,
        aux_basis=None,
        schedules: Mapping[str, Schedule] | None = None,
        name: str = "model",
    ) -> "ModelSpec":
        """Construct a spec, filling omitted parts with zeros.

        ``couplings`` items are ``Coupling`` objects or dicts with any of the
        keys ``L_s``, ``L_a``, ``L_sa``.
        """
        if n_s < 2 or n_a < 1:
            raise ModelError(f"need n_s >= 2 and n_a >= 1, got n_s={n_s}, n_a={n_a}")
        d = n_s * n_a
        zs, za, zsa = (np.zeros((n, n), complex) for n in (n_s, n_a, d))
        cs = []
        for c in couplings:
            if isinstance(c, Coupling):
                c = {"L_s": c.L_s, "L_a": c.L_a, "L_sa": c.L_sa}
            cs.append(
                Coupling(
                    L_s=_frozen(zs if c.get("L_s") is None else c["L_s"], (n_s, n_s)),
                    L_a=_frozen(za if c.get("L_a") is None else c["L_a"], (n_a, n_a)),
                    L_sa=_frozen(zsa if c.get("L_sa") is None else c["L_sa"], (d, d)),
                )
            )
        return cls(
            n_s=n_s,
            n_a=n_a,
            H_s=_frozen(zs if H_s is None else H_s, (n_s, n_s)),
            H_a=_frozen(za if H_a is None else H_a, (n_a, n_a)),
            H_sa=_frozen(zsa if H_sa is None else H_sa, (d, d)),
            couplings=tuple(cs),
            L0=_frozen(zs if L0 is None else L0, (n_s, n_s)),
            aux_basis=_frozen(np.eye(n_a) if aux_basis is None else aux_basis, (n_a, n_a)),
            schedules=dict(schedules or {}),
            name=name,
        )

    @property
    def d(self) -> int:
        """Composite dimension ``n_s * n_a``."""
        return self.n_s * self.n_a

    @property
    def K(self) -> int:
        return len(self.couplings)

    @property
    def time_independent(self) -> bool:
        return all(s.is_constant for s in self.schedules.values())

    def schedule(self, part: str) -> Schedule:
        return self.schedules.get(part, CONSTANT)

    def replace(self, **changes) -> "ModelSpec":
        """Return a copy with some constructor arguments replaced."""
        kw = dict(
            n_s=self.n_s,
            n_a=self.n_a,
            H_s=self.H_s,
            H_a=self.H_a,
            H_sa=self.H_sa,
            couplings=self.couplings,
            L0=self.L0,
            aux_basis=self.aux_basis,
            schedules=self.schedules,
            name=self.name,
        )
        kw.update(changes)
        return ModelSpec.build(**kw)


def offdiag_pairs(n_a: int) -> list[tuple[int, int]]:
    """Ordering of the off-diagonal block stack.

    Upper pairs ``(j, k)``, ``j < k`` row by row, followed by the transposed
    pairs ``(k, j)`` in the same order.
    """
    upper = [(j, k) for j in range(n_a) for k in range(j + 1, n_a)]
    return upper + [(k, j) for j, k in upper]


def _aux_change(X: np.ndarray, n_s: int, n_a: int, basis: np.ndarray) -> np.ndarray:
    """Return X expressed in the aux basis: (I (x) V^dag) X (I (x) V), as 4-index array."""
    X4 = np.asarray(X).reshape(n_s, n_a, n_s, n_a)
    if basis is None:
        return X4
    V = np.asarray(basis)
    return np.einsum("aj,satb,bk->sjtk", V.conj(), X4, V)


def block(X, j: int, k: int, n_s: int, n_a: int, basis=None) -> np.ndarray:
    """``<phi_j| X |phi_k>`` as an ``n_s x n_s`` principal matrix."""
    if not (0 <= j < n_a and 0 <= k < n_a):
        raise ModelError(f"block index ({j}, {k}) out of range for n_a={n_a}")
    X = np.asarray(X)
    if X.shape != (n_s * n_a, n_s * n_a):
        raise ModelError(f"composite matrix has shape {X.shape}, expected {(n_s * n_a,) * 2}")
    if basis is None:
        return X.reshape(n_s, n_a, n_s, n_a)[:, j, :, k].copy()
    V = np.asarray(basis)
    return np.einsum("a,satb,b->st", V[:, j].conj(), X.reshape(n_s, n_a, n_s, n_a), V[:, k])


def partial_trace_aux(X, n_s: int, n_a: int) -> np.ndarray:
    """Trace out the auxiliary factor by explicit index summation over ``a``."""
    X = np.asarray(X)
    if X.shape != (n_s * n_a, n_s * n_a):
        raise ModelError(f"composite matrix has shape {X.shape}, expected {(n_s * n_a,) * 2}")
    X4 = X.reshape(n_s, n_a, n_s, n_a)
    out = np.zeros((n_s, n_s), dtype=np.result_type(X, complex))
    for a in range(n_a):
        out += X4[:, a, :, a]
    return out


def _ampl_s(A, n_a):
    return np.kron(A, np.eye(n_a))


def _ampl_a(B, n_s):
    return np.kron(np.eye(n_s), B)


def assemble_operator(spec: ModelSpec, which: str, t: float = 0.0) -> np.ndarray:
    """Composite matrix of ``H``, ``L{k}`` (k >= 1) or ``L0`` at time ``t``.

    ``which`` is ``"H"``, ``"L0"`` or ``"L1"``, ``"L2"``, ...  ``L0`` is returned
    ampliated as ``L0 (x) I``.
    """
    if t < 0:
        raise ModelError(f"negative time {t}")
    n_s, n_a = spec.n_s, spec.n_a
    sch = spec.schedule
    if which == "H":
        return (
            sch("H_s")(t) * _ampl_s(spec.H_s, n_a)
            + sch("H_sa")(t) * spec.H_sa
            + sch("H_a")(t) * _ampl_a(spec.H_a, n_s)
        )
    if which == "L0":
        return sch("L0")(t) * _ampl_s(spec.L0, n_a)
    if which.startswith("L") and which[1:].isdigit():
        k = int(which[1:])
        if not 1 <= k <= spec.K:
            raise ModelError(f"unknown operator tag {which!r} (model has K={spec.K})")
        c = spec.couplings[k - 1]
        return (
            sch(f"L{k}_s")(t) * _ampl_s(c.L_s, n_a)
            + sch(f"L{k}_sa")(t) * c.L_sa
            + sch(f"L{k}_a")(t) * _ampl_a(c.L_a, n_s)
        )
    raise ModelError(f"unknown operator tag {which!r}")


def principal_L0(spec: ModelSpec, t: float) -> np.ndarray:
    """Probe coupling on the principal alone, schedule applied."""
    return spec.schedule("L0")(t) * np.asarray(spec.L0)


def _rel_herm_err(A) -> float:
    A = np.asarray(A)
    nrm = np.linalg.norm(A)
    if nrm == 0:
        return 0.0
    return float(np.linalg.norm(A - A.conj().T) / nrm)


def validate_model(spec: ModelSpec) -> list[str]:
    """List violated invariants of ``spec``; empty means valid."""
    problems = []
    n_s, n_a, d = spec.n_s, spec.n_a, spec.n_s * spec.n_a
    if n_s < 2:
        problems.append(f"n_s must be >= 2, got {n_s}")
    if n_a < 1:
        problems.append(f"n_a must be >= 1, got {n_a}")
    shapes = {"H_s": (spec.H_s, n_s), "H_a": (spec.H_a, n_a), "H_sa": (spec.H_sa, d), "L0": (spec.L0, n_s)}
    for k, c in enumerate(spec.couplings, start=1):
        shapes[f"L{k}_s"] = (c.L_s, n_s)
        shapes[f"L{k}_a"] = (c.L_a, n_a)
        shapes[f"L{k}_sa"] = (c.L_sa, d)
    for nm, (A, n) in shapes.items():
        if np.shape(A) != (n, n):
            problems.append(f"{nm} has shape {np.shape(A)}, expected {(n, n)}")
        elif not np.all(np.isfinite(A)):
            problems.append(f"{nm} has non-finite entries")
    for nm in ("H_s", "H_a", "H_sa"):
        A = getattr(spec, nm)
        if np.ndim(A) == 2 and _rel_herm_err(A) > HERMITIAN_TOL:
            problems.append(f"{nm} not Hermitian (relative error {_rel_herm_err(A):.2e})")
    V = np.asarray(spec.aux_basis)
    if V.shape != (n_a, n_a):
        problems.append(f"aux_basis has shape {V.shape}, expected {(n_a, n_a)}")
    else:
        gram_err = np.abs(V.conj().T @ V - np.eye(n_a)).max()
        if gram_err > ORTHONORMAL_TOL:
            problems.append(f"aux_basis not orthonormal (Gram error {gram_err:.2e})")
    known = {"H_s", "H_a", "H_sa", "L0"} | {f"L{k}_{p}" for k in range(1, spec.K + 1) for p in ("s", "a", "sa")}
    for nm in spec.schedules:
        if nm not in known:
            problems.append(f"schedule for unknown part {nm!r}")
    return problems


@dataclass(frozen=True)
class BlockState:
    """The collection of principal blocks ``<phi_j| rho |phi_k>``.

    ``diag`` has shape ``(n_a, n_s, n_s)``; ``offdiag`` has shape
    ``(n_a * (n_a - 1), n_s, n_s)`` ordered as :func:`offdiag_pairs`.
    """

    diag: np.ndarray
    offdiag: np.ndarray

    @property
    def n_a(self) -> int:
        return self.diag.shape[0]

    @property
    def n_s(self) -> int:
        return self.diag.shape[1]

    @classmethod
    def from_composite(cls, X, n_s: int, n_a: int, basis=None) -> "BlockState":
        X = np.asarray(X)
        if X.shape != (n_s * n_a, n_s * n_a):
            raise ModelError(f"composite matrix has shape {X.shape}")
        X4 = _aux_change(X, n_s, n_a, basis)
        diag = np.stack([X4[:, j, :, j] for j in range(n_a)])
        pairs = offdiag_pairs(n_a)
        off = np.stack([X4[:, j, :, k] for j, k in pairs]) if pairs else np.zeros((0, n_s, n_s), complex)
        return cls(np.ascontiguousarray(diag, dtype=complex), np.ascontiguousarray(off, dtype=complex))

    def to_composite(self, basis=None) -> np.ndarray:
        """Reassemble ``sum_jk rho^{jk} (x) |phi_j><phi_k|``."""
        n_s, n_a = self.n_s, self.n_a
        X4 = np.zeros((n_s, n_a, n_s, n_a), complex)
        for j in range(n_a):
            X4[:, j, :, j] = self.diag[j]
        for (j, k), B in zip(offdiag_pairs(n_a), self.offdiag):
            X4[:, j, :, k] = B
        if basis is not None:
            V = np.asarray(basis)
            X4 = np.einsum("aj,sjtk,bk->satb", V, X4, V.conj())
        return X4.reshape(n_s * n_a, n_s * n_a)

    def principal(self) -> np.ndarray:
        """Reduced principal state ``sum_k rho^{kk}``."""
        return self.diag.sum(axis=0)

    def to_vector(self) -> np.ndarray:
        """Column-stacked blocks, diagonal stack first, then the off-diagonal stack."""
        blocks = np.concatenate([self.diag, self.offdiag])
        return blocks.transpose(0, 2, 1).reshape(-1).copy()

    @classmethod
    def from_vector(cls, v, n_s: int, n_a: int) -> "BlockState":
        blocks = np.asarray(v).reshape(-1, n_s, n_s).transpose(0, 2, 1)
        return cls(np.ascontiguousarray(blocks[:n_a]), np.ascontiguousarray(blocks[n_a:]))

    def total_trace(self) -> complex:
        return complex(np.trace(self.diag, axis1=1, axis2=2).sum())

    def check(self, tol: float = 1e-10) -> list[str]:
        """Structural invariants: adjoint pairing and Hermitian diagonal blocks."""
        problems = []
        n_pair = len(self.offdiag) // 2
        for i in range(n_pair):
            err = np.abs(self.offdiag[i].conj().T - self.offdiag[i + n_pair]).max()
            if err > tol:
                problems.append(f"offdiag pair {i} not adjoint (error {err:.2e})")
        for j, B in enumerate(self.diag):
            err = np.abs(B - B.conj().T).max()
            if err > tol:
                problems.append(f"diag block {j} not Hermitian (error {err:.2e})")
        return problems


# ----------------------------------------------------------------------------
# model files


def _cmat(value, where: str, n: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelParseError(f"matrix entries must be [re, im] pairs ({exc})", where) from None
    if arr.shape != (n, n, 2):
        raise ModelParseError(f"expected {n}x{n} matrix of [re, im] pairs, got array of shape {arr.shape}", where)
    return arr[..., 0] + 1j * arr[..., 1]


def _cmat_out(A) -> list:
    A = np.asarray(A)
    return [[[float(z.real), float(z.imag)] for z in row] for row in A]


def model_from_dict(data: Mapping) -> ModelSpec:
    """Build a spec from the JSON-compatible model layout."""
    if not isinstance(data, Mapping):
        raise ModelParseError("model must be a JSON object", "<root>")
    try:
        n_s = int(data["n_s"])
        n_a = int(data["n_a"])
    except KeyError as exc:
        raise ModelParseError("missing required dimension", str(exc.args[0])) from None
    except (TypeError, ValueError):
        raise ModelParseError("dimensions must be integers", "n_s/n_a") from None
    d = n_s * n_a
    ops = {}
    for nm, n in (("H_s", n_s), ("H_a", n_a), ("H_sa", d), ("L0", n_s)):
        if nm in data:
            ops[nm] = _cmat(data[nm], nm, n)
    couplings = []
    for i, c in enumerate(data.get("couplings", []), start=1):
        if not isinstance(c, Mapping):
            raise ModelParseError("coupling must be an object", f"couplings[{i - 1}]")
        couplings.append(
            {p: _cmat(c[p], f"couplings[{i - 1}].{p}", n) for p, n in (("L_s", n_s), ("L_a", n_a), ("L_sa", d)) if p in c}
        )
    basis = _cmat(data["aux_basis"], "aux_basis", n_a) if "aux_basis" in data else None
    schedules = {}
    for nm, s in (data.get("schedules") or {}).items():
        if not isinstance(s, Mapping) or "kind" not in s:
            raise ModelParseError("schedule must be an object with a 'kind' tag", f"schedules.{nm}")
        try:
            schedules[nm] = Schedule(
                kind=s["kind"],
                amplitude=float(s.get("amplitude", 1.0)),
                frequency=float(s.get("frequency", 0.0)),
                phase=float(s.get("phase", 0.0)),
            )
        except ModelError as exc:
            raise ModelParseError(str(exc), f"schedules.{nm}") from None
    try:
        return ModelSpec.build(
            n_s=n_s,
            n_a=n_a,
            H_s=ops.get("H_s"),
            H_a=ops.get("H_a"),
            H_sa=ops.get("H_sa"),
            couplings=couplings,
            L0=ops.get("L0"),
            aux_basis=basis,
            schedules=schedules,
            name=str(data.get("name", "model")),
        )
    except ModelError as exc:
        raise ModelParseError(str(exc), "<root>") from None


def model_to_dict(spec: ModelSpec) -> dict:
    out = {
        "name": spec.name,
        "n_s": spec.n_s,
        "n_a": spec.n_a,
        "H_s": _cmat_out(spec.H_s),
        "H_a": _cmat_out(spec.H_a),
        "H_sa": _cmat_out(spec.H_sa),
        "L0": _cmat_out(spec.L0),
        "couplings": [
            {"L_s": _cmat_out(c.L_s), "L_a": _cmat_out(c.L_a), "L_sa": _cmat_out(c.L_sa)} for c in spec.couplings
        ],
        "aux_basis": _cmat_out(spec.aux_basis),
    }
    if spec.schedules:
        out["schedules"] = {
            nm: {"kind": s.kind, "amplitude": s.amplitude, "frequency": s.frequency, "phase": s.phase}
            for nm, s in spec.schedules.items()
        }
    return out


def load_model(path) -> ModelSpec:
    """Read a model file; JSON syntax errors carry line/column context."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    return model_from_dict(data)


def save_model(spec: ModelSpec, path, init=None) -> None:
    data = model_to_dict(spec)
    if init is not None:
        data["init"] = _cmat_out(init)
    Path(path).write_text(json.dumps(data, indent=1))


def default_init(spec: ModelSpec) -> np.ndarray:
    """Top principal basis state times the first auxiliary basis state."""
    e = np.zeros(spec.n_s, complex)
    e[-1] = 1.0
    phi = np.asarray(spec.aux_basis)[:, 0]
    v = np.kron(e, phi)
    return np.outer(v, v.conj())


def load_model_and_init(path) -> tuple[ModelSpec, np.ndarray]:
    """Read a model file plus its optional ``init`` composite state.

    Without an ``init`` entry the state is :func:`default_init`.
    """
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    spec = model_from_dict(data)
    if "init" in data:
        return spec, _cmat(data["init"], "init", spec.d)
    return spec, default_init(spec)


# ----------------------------------------------------------------------------
# reference models


def reference_model(coupling: float = 0.3) -> ModelSpec:
    """Qubit principal, qubit auxiliary damped at rate 1, homodyne probe ``0.5 sigma_-``."""
    return ModelSpec.build(
        n_s=2,
        n_a=2,
        H_s=SIGMA_Z / 2,
        H_a=SIGMA_Z,
        H_sa=coupling * np.kron(SIGMA_X, SIGMA_X),
        couplings=[{"L_a": SIGMA_MINUS}],
        L0=0.5 * SIGMA_MINUS,
        name="reference" if coupling else "reference-decoupled",
    )


def decoupled_reference_model() -> ModelSpec:
    """The reference model with ``H_sa = 0``."""
    return reference_model(coupling=0.0)


def reference_init() -> np.ndarray:
    """Product state ``|1><1| (x) |0><0|``."""
    e1 = np.diag([0.0, 1.0]).astype(complex)
    e0 = np.diag([1.0, 0.0]).astype(complex)
    return np.kron(e1, e0)
