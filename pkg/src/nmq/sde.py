"""Seeded Wiener paths, Ito Euler-Maruyama steps and stochastic exponentials."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "GENERATOR_NAME",
    "NoisePath",
    "PropagatorPath",
    "PropagatorError",
    "derive_seed",
    "wiener_path",
    "em_step",
    "propagate_stoch_exp",
    "variation_of_constants",
    "write_propagator_cache",
    "read_propagator_cache",
]

GENERATOR_NAME = "numpy.random.Philox (Philox4x64-10), standard_normal ziggurat"

CACHE_MAGIC = b"NMQPROP1"


class PropagatorError(RuntimeError):
    """The propagator inverse drifted beyond tolerance at a reinversion checkpoint."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def derive_seed(master_seed: int, index: int) -> int:
    """Per-trajectory 64-bit seed derived by hashing ``(master_seed, index)``."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class NoisePath:
    """Wiener increments ``dI_n ~ N(0, dt)`` on a uniform grid starting at ``t0``."""

    seed: int
    t0: float
    dt: float
    increments: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def W(self) -> np.ndarray:
        """Cumulative path with ``W[0] = 0``."""
        return np.concatenate([[0.0], np.cumsum(self.increments)])

    def coarsen(self, factor: int) -> "NoisePath":
        """Same Brownian path sampled every ``factor`` steps."""
        if factor < 1 or self.n_steps % factor:
            raise ValueError(f"cannot coarsen {self.n_steps} steps by {factor}")
        inc = self.increments.reshape(-1, factor).sum(axis=1)
        return NoisePath(self.seed, self.t0, self.dt * factor, inc)

    def truncate(self, n_steps: int) -> "NoisePath":
        return NoisePath(self.seed, self.t0, self.dt, self.increments[:n_steps])

    def zeroed(self) -> "NoisePath":
        return NoisePath(self.seed, self.t0, self.dt, np.zeros_like(self.increments))


def wiener_path(seed: int, t0: float = 0.0, dt: float = 1e-3, n_steps: int = 1000) -> NoisePath:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    inc = rng.standard_normal(int(n_steps)) * np.sqrt(dt)
    inc.setflags(write=False)
    return NoisePath(int(seed), float(t0), float(dt), inc)


def em_step(x, drift, diffusion, dI: float, dt: float) -> np.ndarray:
    """One Ito Euler-Maruyama step ``x + drift dt + diffusion dI``."""
    x, drift, diffusion = (np.asarray(a) for a in (x, drift, diffusion))
    if not (x.shape == drift.shape == diffusion.shape):
        raise ValueError(f"shape mismatch: {x.shape}, {drift.shape}, {diffusion.shape}")
    if not (np.isfinite(x).all() and np.isfinite(drift).all() and np.isfinite(diffusion).all()):
        raise ValueError("non-finite input to em_step")
    if not (np.isfinite(dI) and np.isfinite(dt)):
        raise ValueError("non-finite dI or dt")
    return x + drift * dt + diffusion * dI


@dataclass(frozen=True)
class PropagatorPath:
    """Stochastic exponential ``Phi_n`` and its inverse on a noise path's grid."""

    times: np.ndarray
    phi: np.ndarray
    phi_inv: np.ndarray
    reinversion_period: int
    inverse: str = "exact"

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def residuals(self) -> np.ndarray:
        """``||Phi_n Phi_n^{-1} - I||_F`` at every stored step."""
        eye = np.eye(self.phi.shape[1])
        return np.linalg.norm(self.phi @ self.phi_inv - eye, axis=(1, 2))


def propagate_stoch_exp(
    drift_gen: Callable,
    diff_gen: Callable,
    path: NoisePath,
    scalar_feed=None,
    reinversion_period: int = 100,
    inverse: str = "exact",
    check_tol: float = 1e-4,
) -> PropagatorPath:
    """Propagate ``dPhi = (A(t) dt + B(t) dI) Phi`` with ``Phi_0 = I``.

    ``drift_gen(t)`` returns ``A``.  ``diff_gen(t)`` returns ``B``, or
    ``diff_gen(t, c)`` when ``scalar_feed`` is given; ``scalar_feed`` is an
    array indexed by grid step or a callable ``(n, t) -> c``.

    ``inverse="exact"`` right-multiplies by the inverse of each one-step
    factor; ``inverse="ito"`` uses the recursion of the inverse SDE,
    ``Phi^{-1} (I + (B^2 - A) dt - B dI)``.  Every ``reinversion_period``
    steps the inverse is replaced by a direct inversion of ``Phi`` after
    checking that its residual is below ``check_tol``.
    """
    if inverse not in ("exact", "ito"):
        raise ValueError(f"unknown inverse method {inverse!r}")
    times = path.times
    dt = path.dt
    N = path.n_steps
    if callable(scalar_feed):
        feed = scalar_feed
    elif scalar_feed is not None:
        arr = np.asarray(scalar_feed)
        if arr.shape[0] < N:
            raise ValueError("scalar_feed shorter than the noise path")
        feed = lambda n, t: arr[n]  # noqa: E731
    else:
        feed = None
    A0 = np.asarray(drift_gen(times[0]))
    D = A0.shape[0]
    eye = np.eye(D, dtype=complex)
    phi = np.empty((N + 1, D, D), complex)
    phi_inv = np.empty((N + 1, D, D), complex)
    phi[0] = eye
    phi_inv[0] = eye
    for n in range(N):
        t = times[n]
        A = np.asarray(drift_gen(t))
        B = np.asarray(diff_gen(t, feed(n, t)) if feed is not None else diff_gen(t))
        dI = path.increments[n]
        step = eye + A * dt + B * dI
        phi[n + 1] = step @ phi[n]
        if inverse == "exact":
            phi_inv[n + 1] = np.linalg.solve(step.T, phi_inv[n].T).T
        else:
            phi_inv[n + 1] = phi_inv[n] @ (eye + (B @ B - A) * dt - B * dI)
        if reinversion_period > 0 and (n + 1) % reinversion_period == 0:
            res = np.linalg.norm(phi[n + 1] @ phi_inv[n + 1] - eye)
            if not res <= check_tol:
                raise PropagatorError(
                    f"inverse residual {res:.3e} above {check_tol:g} at step {n + 1}; "
                    "propagator unstable or dt too large",
                    step=n + 1,
                )
            phi_inv[n + 1] = np.linalg.inv(phi[n + 1])
    return PropagatorPath(times, phi, phi_inv, reinversion_period, inverse)


def variation_of_constants(prop: PropagatorPath, source, x0_q) -> np.ndarray:
    """``x_n = Phi_n x0 + Phi_n sum_{m<n} Phi_m^{-1} s_m dt`` on the whole grid.

    ``source`` is an ``(N+1, D)`` array sampled on the propagator grid or a
    callable of time.
    """
    N1, D, _ = prop.phi.shape
    if callable(source):
        s = np.array([source(t) for t in prop.times])
    else:
        s = np.asarray(source)
    if s.shape[0] != N1:
        raise ValueError(f"source has {s.shape[0]} samples, propagator grid has {N1}")
    dt = prop.dt
    h = np.einsum("nij,nj->ni", prop.phi_inv, s) * dt
    acc = np.concatenate([np.zeros((1, D), complex), np.cumsum(h[:-1], axis=0)])
    return np.einsum("nij,nj->ni", prop.phi, acc + np.asarray(x0_q)[None, :])


def write_propagator_cache(prop: PropagatorPath, path) -> None:
    """Binary layout: magic, uint64 dims, uint64 N (matrices), float64 dt,
    then N row-major complex64 ``Phi`` matrices followed by N inverses."""
    N1, D, _ = prop.phi.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<QQd", D, N1, prop.dt))
        fh.write(np.ascontiguousarray(prop.phi, dtype="<c8").tobytes())
        fh.write(np.ascontiguousarray(prop.phi_inv, dtype="<c8").tobytes())


def read_propagator_cache(path) -> PropagatorPath:
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path} is not a propagator cache file")
        D, N1, dt = struct.unpack("<QQd", fh.read(24))
        body = np.frombuffer(fh.read(), dtype="<c8")
    if body.size != 2 * N1 * D * D:
        raise ValueError(f"{path}: truncated cache body")
    phi = body[: N1 * D * D].reshape(N1, D, D).astype(complex)
    phi_inv = body[N1 * D * D :].reshape(N1, D, D).astype(complex)
    return PropagatorPath(dt * np.arange(N1), phi, phi_inv, 0, "cached")
