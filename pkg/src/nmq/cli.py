"""Command-line front end: ``nmq {validate, simulate, verify, kernel}``.

Settings come from an optional JSON run config (``--config``) and are
overridden by flags; ``NMQ_SEED`` overrides the config seed but not an
explicit ``--seed``.  Exit codes: 0 ok, 1 check failure, 2 usage or parse
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import engines as E
from . import harness as H
from . import kernels
from .model import ModelError, ModelParseError, load_model_and_init, model_to_dict, validate_model
from .sde import GENERATOR_NAME, PropagatorError, derive_seed, wiener_path
from .superops import lindbladian, projector_p

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

ENGINES = ("full_sme", "coupled_blocks", "reduced_diag", "reduced_p", "gksl", "coupled_me", "nz", "mc")

DEFAULTS = {
    "engine": "full_sme",
    "dt": 1e-3,
    "horizon": 1.0,
    "seed": 0,
    "traj": 1,
    "projector": "block",
    "window": None,
    "renorm": False,
    "out": "nmq-out",
    "workers": None,
    "inject_fault": None,
    "mc_engine": "coupled_blocks",
    "dt_list": None,
    "t_samples": None,
    "tp_samples": None,
    "formulation": None,
    "tolerances": {},
}


class UsageError(Exception):
    pass


def _floats(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read run config {args.config}: {exc}") from None
        unknown = set(data) - set(DEFAULTS) - {"model"}
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        cfg.update(data)
    if os.environ.get("NMQ_SEED"):
        try:
            cfg["seed"] = int(os.environ["NMQ_SEED"])
        except ValueError:
            raise UsageError("NMQ_SEED must be an integer") from None
    for key, val in vars(args).items():
        if key in ("command", "config", "func") or val is None:
            continue
        if key == "renorm" and val is False:
            continue
        cfg[key] = val
    if not cfg.get("model"):
        raise UsageError("a model file is required (--model)")
    cfg["dt"] = float(cfg["dt"])
    cfg["horizon"] = float(cfg["horizon"])
    cfg["seed"] = int(cfg["seed"])
    cfg["traj"] = int(cfg["traj"])
    if not cfg["dt"] > 0:
        raise UsageError("dt must be positive")
    if cfg["traj"] < 1:
        raise UsageError("--traj must be >= 1")
    k = cfg["horizon"] / cfg["dt"]
    if abs(k - round(k)) > 1e-9 * max(1.0, k) or round(k) < 1:
        raise UsageError(f"horizon {cfg['horizon']} is not a positive integer multiple of dt {cfg['dt']}")
    cfg["n_steps"] = int(round(k))
    if cfg["window"] is not None and not 0 <= float(cfg["window"]) <= cfg["horizon"]:
        raise UsageError(f"memory window {cfg['window']} must lie in [0, horizon={cfg['horizon']}]")
    if cfg["projector"] not in ("block", "product"):
        raise UsageError("--projector must be block or product")
    return cfg


def _load(cfg):
    spec, init = load_model_and_init(cfg["model"])
    return spec, init


def _manifest(cfg, spec, extra) -> dict:
    run = {k: v for k, v in cfg.items() if k not in ("out",)}
    run["model_content"] = model_to_dict(spec)
    tol = dict(H.TOLERANCES, **(cfg.get("tolerances") or {}))
    man = {
        "config": dict(cfg),
        "config_hash": E.config_hash(run),
        "generator": GENERATOR_NAME,
        "kernel_backend": kernels.BACKEND,
        "t0": 0.0,
        "dt": cfg["dt"],
        "n_steps": cfg["n_steps"],
        "engine": cfg["engine"],
        "tolerances": tol,
        "trace_abort": E.TRACE_ABORT,
        "reinversion_period": 100,
        "inverse_check_tol": 1e-4,
    }
    man.update(extra)
    return man


def _write_manifest(out: Path, man: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")


def cmd_validate(args) -> int:
    path = args.model_file or args.model
    if not path:
        raise UsageError("a model file is required")
    spec, init = load_model_and_init(path)
    problems = validate_model(spec)
    if not problems:
        for kind in ("block", "product"):
            P, Q = projector_p(spec, kind, np.eye(spec.n_a) / spec.n_a if kind == "product" else None)
            err = np.abs(P.matrix @ P.matrix - P.matrix).max()
            if err > 1e-12:
                problems.append(f"{kind} projector not idempotent (error {err:.2e})")
        rng = np.random.default_rng(0)
        X = rng.standard_normal((spec.d, spec.d)) + 1j * rng.standard_normal((spec.d, spec.d))
        X = X + X.conj().T
        for t in (0.0, 0.37):
            tr = abs(np.trace(lindbladian(spec, t).apply(X)))
            if tr > 1e-10 * max(1.0, np.abs(X).max()):
                problems.append(f"Lindbladian not trace preserving at t={t} (|Tr| = {tr:.2e})")
        r = np.trace(init)
        if abs(r - 1) > 1e-10 or np.abs(init - init.conj().T).max() > 1e-10 or np.linalg.eigvalsh(init)[0] < -1e-8:
            problems.append("init is not a density matrix")
    for p in problems:
        print(p)
    if problems:
        return EXIT_CHECK
    print(f"{path}: ok ({spec.name}, n_s={spec.n_s}, n_a={spec.n_a}, K={spec.K})")
    return EXIT_OK


def _engine_kwargs(cfg, engine):
    kw = {}
    if engine in ("full_sme", "coupled_blocks"):
        kw["renorm"] = bool(cfg["renorm"])
    if engine in ("reduced_diag", "reduced_p"):
        kw["memory_window"] = None if cfg["window"] is None else float(cfg["window"])
    if engine == "reduced_diag":
        kw["fault"] = cfg["inject_fault"]
    if engine == "reduced_p":
        kw["P_kind"] = cfg["projector"]
    return kw


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    if cfg["engine"] not in ENGINES:
        raise UsageError(f"unknown engine {cfg['engine']!r}; choose from {', '.join(ENGINES)}")
    spec, init = _load(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    eng, dt, N = cfg["engine"], cfg["dt"], cfg["n_steps"]
    files, seeds = [], []
    if eng in ("gksl", "coupled_me", "nz"):
        if eng == "gksl":
            rec = E.solve_gksl(spec, init, dt, n_steps=N)
        elif eng == "coupled_me":
            rec = E.solve_coupled_me(spec, init, dt, n_steps=N)
        else:
            rec = E.solve_nz(spec, cfg["projector"], init, dt, n_steps=N)
        E.write_trajectory_csv(rec, out / f"{eng}.csv")
        files.append(f"{eng}.csv")
    elif eng == "mc":
        inner = cfg["mc_engine"]
        if inner not in E.STOCHASTIC_ENGINES:
            raise UsageError(f"unknown --mc-engine {inner!r}")
        res = E.monte_carlo_mean(
            inner, spec, init, cfg["traj"], cfg["seed"], dt, n_steps=N,
            workers=cfg["workers"] or os.cpu_count() or 1, **_engine_kwargs(cfg, inner),
        )
        E.write_mean_csv(res, out / "mean.csv")
        files.append("mean.csv")
        seeds = res.seeds
        if res.aborted:
            print(f"{len(res.aborted)} trajectories aborted: {res.aborted}", file=sys.stderr)
    else:
        fn = E.STOCHASTIC_ENGINES[eng]
        kw = _engine_kwargs(cfg, eng)
        for i in range(cfg["traj"]):
            s = derive_seed(cfg["seed"], i)
            seeds.append(s)
            rec = fn(spec, init, wiener_path(s, 0.0, dt, N), **dict(kw))
            name = f"traj_{i:04d}.csv"
            E.write_trajectory_csv(rec, out / name)
            files.append(name)
    _write_manifest(out, _manifest(cfg, spec, {"files": files, "seeds": seeds, "master_seed": cfg["seed"]}))
    print(f"wrote {len(files)} file(s) to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _resolve(args)
    dts = _floats(cfg["dt_list"]) if cfg["dt_list"] is not None else [4e-4, 2e-4, 1e-4]
    if not dts:
        raise UsageError("--dt-list is empty")
    spec, init = _load(cfg)
    try:
        reports = H.consistency_suite(
            spec, init, cfg["seed"], dts, horizon=cfg["horizon"], fault=cfg["inject_fault"],
            n_traj=0 if cfg["traj"] <= 1 else cfg["traj"], tolerances=cfg.get("tolerances"),
            workers=cfg["workers"] or 1,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(H.format_reports(reports))
    if args.out:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(H.reports_to_json(reports) + "\n")
        _write_manifest(out, _manifest(cfg, spec, {"dt_list": dts, "master_seed": cfg["seed"],
                                                   "noise_seed": derive_seed(cfg["seed"], 0)}))
    return EXIT_OK if H.suite_passed(reports) else EXIT_CHECK


def cmd_kernel(args) -> int:
    cfg = _resolve(args)
    spec, init = _load(cfg)
    form = cfg["formulation"] or ("block" if cfg["projector"] == "block" else "pq-product")
    T = cfg["horizon"]
    ts = _floats(cfg["t_samples"]) or [T]
    N = cfg["n_steps"]
    tps = _floats(cfg["tp_samples"]) or [k * N // 4 * cfg["dt"] for k in range(5)]
    seed = derive_seed(cfg["seed"], 0)
    path = wiener_path(seed, 0.0, cfg["dt"], cfg["n_steps"])
    try:
        kev = E.kernel_dump(spec, form, init, path, ts, tps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    E.write_kernel_csv(kev, out / "kernel.csv")
    _write_manifest(out, _manifest(cfg, spec, {"formulation": form, "seeds": [seed], "master_seed": cfg["seed"],
                                               "files": ["kernel.csv"]}))
    print(f"wrote {len(kev.pairs)} kernel pair(s) to {out / 'kernel.csv'} (sup norm {kev.sup_norm():.3e})")
    return EXIT_OK


def _common(p, with_engine=True):
    p.add_argument("--config", help="JSON run config; flags override its entries")
    p.add_argument("--model", help="model file (JSON)")
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=float, help="final time T (start is 0)")
    p.add_argument("--seed", type=int, help="master seed (NMQ_SEED overrides the config value)")
    p.add_argument("--traj", type=int, help="number of trajectories")
    p.add_argument("--projector", choices=("block", "product"))
    p.add_argument("--window", type=float, help="memory window for the reduced engines")
    p.add_argument("--renorm", action="store_true", default=False, help="renormalize the trace each step")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes (default: logical cores)")
    p.add_argument("--inject-fault", dest="inject_fault", choices=("A00-sign",))
    if with_engine:
        p.add_argument("--engine", choices=ENGINES)
        p.add_argument("--mc-engine", dest="mc_engine", choices=tuple(E.STOCHASTIC_ENGINES))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nmq", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a model file")
    p.add_argument("model_file", nargs="?")
    p.add_argument("--model")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run an engine and write CSV + manifest")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run the consistency suite")
    _common(p, with_engine=False)
    p.add_argument("--dt-list", dest="dt_list", help="descending comma-separated dt values")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("kernel", help="dump two-time memory kernels on one noise path")
    _common(p, with_engine=False)
    p.add_argument("--formulation", choices=("block", "pq-block", "pq-product"))
    p.add_argument("--t-samples", dest="t_samples", help="comma-separated t values")
    p.add_argument("--tp-samples", dest="tp_samples", help="comma-separated t' values")
    p.set_defaults(func=cmd_kernel)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (E.SimulationAbort, PropagatorError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
