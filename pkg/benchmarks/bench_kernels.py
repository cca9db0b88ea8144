"""Time the compiled and pure-Python Euler-Maruyama kernels on the reference model.

Usage::

    python benchmarks/bench_kernels.py [--steps 20000] [--repeat 3]

Both backends run the same inputs; the script also reports their largest
disagreement so a speedup is never bought with a wrong answer.
"""

import argparse
import time

import numpy as np

from nmq import kernels
from nmq.model import BlockState, reference_init, reference_model
from nmq.sde import wiener_path
from nmq.superops import block_generators


def _linear_args(spec, dI, dt):
    bg = block_generators(spec)
    x0 = BlockState.from_composite(reference_init(), 2, 2).to_vector()
    tr = np.zeros(x0.shape[0], complex)
    tr[: bg.weight.shape[0]] = np.tile(np.eye(2).reshape(-1), 2)
    w = np.ascontiguousarray(bg.full_weight(), dtype=complex)
    return (np.ascontiguousarray(bg.drift_matrix()), np.ascontiguousarray(bg.noise_matrix()), w, tr, x0, dI, dt, False, 0.1)


def _reduced_args(spec, dI, dt):
    bg = block_generators(spec)
    x0 = BlockState.from_composite(reference_init(), 2, 2).to_vector()
    m = bg.weight.shape[0]
    mats = [np.ascontiguousarray(a, dtype=complex) for a in (bg.A10, bg.A11, bg.A00, bg.A01, bg.G_diag, bg.G_off, bg.weight)]
    return (*mats, x0[:m].copy(), x0[m:].copy(), dI, dt, -1, True, True, 100, 1e-4, np.zeros(0, dtype=np.int64))


def _time(fn, args, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--dt", type=float, default=1e-4)
    args = ap.parse_args(argv)

    spec = reference_model()
    dI = np.array(wiener_path(1, 0.0, args.dt, args.steps).increments)
    cases = {
        "linear_sme_em (coupled blocks)": ("linear_sme_em", _linear_args(spec, dI, args.dt)),
        "reduced_em (eliminated off-diagonal)": ("reduced_em", _reduced_args(spec, dI, args.dt)),
    }
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"active backend: {kernels.BACKEND}; {args.steps} steps, best of {args.repeat}")
    for label, (name, fargs) in cases.items():
        times, outs = {}, {}
        for b in backends:
            times[b], outs[b] = _time(getattr(kernels.get_backend(b), name), fargs, args.repeat)
        line = f"{label:40s}" + "".join(f"  {b}: {times[b] * 1e3:9.1f} ms" for b in backends)
        if "cython" in times:
            diff = np.abs(outs["python"][0] - outs["cython"][0]).max()
            line += f"  speedup {times['python'] / times['cython']:5.1f}x  max diff {diff:.1e}"
        print(line)


if __name__ == "__main__":
    main()
