"""Batch experiment runner.

Exit codes: 0 pass, 2 invariant violation, 3 numerical failure (blow-up,
positivity loss, non-convergence), 4 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load
from .diagnostics import (
    HarnackCheck, HeatPositivityError, InsufficientDataError, MonitorReport, Trajectory,
    contraction_check, envelope_violations, fit_decay, gradient_estimate_constant,
    harnack_check, harnack_time_factor, heat_solve, shifted_solutions,
)
from .elliptic import newton_solve
from .fields import pack_complex, read_dump, unpack_complex, write_dump
from .flow import (
    FlowBlowUp, FlowConsistencyError, load_snapshot, run,
)
from .manifold import (
    build_model, check_invariants, invariant_violations, model_from_arrays, nijenhuis_norm,
)
from .operator import PositivityError

log = logging.getLogger("maflow")

EXIT_OK, EXIT_INVARIANT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CommandFailure(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


# --- artifact helpers -----------------------------------------------------------


def _versions() -> dict:
    import numba
    import scipy

    return {"maflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(out: Path, config_hash: str, command: str) -> None:
    """``manifest.txt`` listing every file in ``out`` with its sha256."""
    lines = [f"command = {command}", f"config_hash = {config_hash}"]
    lines += [f"{k}_version = {v}" for k, v in _versions().items()]
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "manifest.txt":
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"file {p.relative_to(out)} = {digest}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def write_keyvalues(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in items.items()))


def read_keyvalues(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _model_for(config: ExperimentConfig, base: Path):
    if not config.model_dumps:
        return build_model(config.model)
    spec = config.model
    n, dim = spec.n, 2 * spec.n
    paths = [(base / p) for p in config.model_dumps]
    _, J = read_dump(paths[0])
    _, G = read_dump(paths[1])
    _, E = read_dump(paths[2])
    for name, arr, count in (("J", J, dim * dim), ("G", G, dim * dim), ("frame", E, 2 * n * dim)):
        if arr.shape[0] != count or arr.shape[1:] != tuple(spec.shape):
            raise ConfigError(f"{name} dump has shape {arr.shape}, expected {count} records on {spec.shape}")
    J = unpack_complex(J, (dim, dim), False)
    G = unpack_complex(G, (dim, dim), False)
    E = unpack_complex(E, (n, dim), True)
    return model_from_arrays(spec, J, G, E)


def write_model_dumps(model, out: Path) -> None:
    write_dump(out / "J.maflow", model.grid, pack_complex(model.J, model.grid))
    write_dump(out / "G.maflow", model.grid, pack_complex(model.G, model.grid))
    write_dump(out / "frame.maflow", model.grid, pack_complex(model.frame, model.grid))
    spec = model.spec
    write_keyvalues(out / "model.txt", {
        "kind": spec.kind,
        "n": spec.n,
        "shape": ", ".join(map(str, spec.shape)),
        "amplitude": spec.amplitude,
        "wave": ", ".join(map(str, spec.wave)),
    })


def save_trajectory(traj: Trajectory, grid, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_dump(out / "phi.maflow", grid, traj.phi)
    write_dump(out / "phi_t.maflow", grid, traj.phi_t)
    (out / "times.txt").write_text("".join(f"{t!r}\n" for t in traj.times))


def load_trajectory(path: Path) -> Trajectory:
    times = [float(v) for v in (path / "times.txt").read_text().split()]
    _, phi = read_dump(path / "phi.maflow")
    _, phi_t = read_dump(path / "phi_t.maflow")
    if not len(times) == phi.shape[0] == phi_t.shape[0]:
        raise ConfigError(f"trajectory in {path} is inconsistent")
    traj = Trajectory()
    for t, p, q in zip(times, phi, phi_t):
        traj.add(t, p, q)
    return traj


# --- commands -------------------------------------------------------------------


def cmd_verify_model(config: ExperimentConfig, out: Path, args) -> int:
    model = _model_for(config, args.config_dir)
    report = check_invariants(model)
    _, nij = nijenhuis_norm(model)
    violations = invariant_violations(model)
    rows = [(k, float(v)) for k, v in report.items()] + [("nijenhuis_sup", nij)]
    _write_csv(out / "invariants.csv", ["quantity", "value"], rows)
    (out / "violations.txt").write_text("".join(v + "\n" for v in violations))
    if args.write_dumps:
        write_model_dumps(model, out)
    write_manifest(out, config.digest(), "verify-model")
    for v in violations:
        log.error("invariant violation: %s", v)
    print(f"nijenhuis_sup = {nij:.6e}")
    return EXIT_INVARIANT if violations else EXIT_OK


def _decay_records(report: MonitorReport, config: ExperimentConfig, t_end: float, out: Path):
    d = config.diagnostics
    t, theta = report.column("t"), report.column("theta")
    hi = t_end if d.decay_window[1] is None else d.decay_window[1]
    try:
        fit = fit_decay(t, theta, (d.decay_window[0], hi), d.decay_min_rows)
        (out / "decay.csv").write_text(fit.csv_header() + "\n" + fit.to_csv_line() + "\n")
    except InsufficientDataError as exc:
        log.warning("decay fit skipped: %s", exc)
        fit = None
    cc = contraction_check(t, theta, d.contraction_floor)
    _write_csv(out / "contraction.csv", ["m", "kappa"], [(m, float(k)) for m, k in zip(cc.ms, cc.kappas)])
    return fit, cc


def cmd_run_flow(config: ExperimentConfig, out: Path, args) -> int:
    model = _model_for(config, args.config_dir)
    F = config.F.build(model)
    phi0 = config.initial.build(model)
    state = None
    if args.resume:
        state, digest = load_snapshot(args.resume)
        if digest and digest != config.flow.digest():
            raise ConfigError(f"snapshot {args.resume} was written under a different flow config")
        if state.phi.shape != model.grid.shape:
            raise ConfigError("snapshot grid does not match the configured model")
    result = run(phi0, F, model, config.flow, state=state, snapshot_dir=out / "snapshots")
    report = result.monitor
    report.to_csv(out / "monitor.csv")
    grid = model.grid
    write_dump(out / "phi_mean.maflow", grid, [result.phi_mean])
    write_dump(out / "phi_sup.maflow", grid, [result.phi_sup])
    write_dump(out / "phi_t.maflow", grid, [result.state.phi_t])
    if len(result.trajectory.times) > 1:
        save_trajectory(result.trajectory, grid, out / "trajectory")
    write_keyvalues(out / "result.txt", {
        "converged": int(result.converged),
        "t": result.state.t,
        "steps": result.state.steps,
        "theta": result.theta,
        "b": result.b,
        "b_integral": result.b_integral,
    })
    fit, cc = _decay_records(report, config, result.state.t, out)
    write_manifest(out, config.digest(), "run-flow")
    bad = envelope_violations(report.column("sup_env"), report.column("inf_env"))
    if bad:
        log.warning("maximum-principle envelope violated at rows %s", bad[:10])
    print(f"converged = {result.converged}, t = {result.state.t:.6g}, b = {result.b!r}")
    if not result.converged:
        raise CommandFailure(EXIT_NUMERIC, f"flow not converged by t={result.state.t:.6g} (theta={result.theta:.3e})")
    return EXIT_OK


def cmd_solve_elliptic(config: ExperimentConfig, out: Path, args) -> int:
    model = _model_for(config, args.config_dir)
    F = config.F.build(model)
    sol = newton_solve(F, model, tol=args.tol)
    write_dump(out / "phi.maflow", model.grid, [sol.phi])
    sol.write_log(out / "newton.csv")
    write_keyvalues(out / "result.txt", {
        "converged": int(sol.converged),
        "iterations": sol.iterations,
        "residual_sup": sol.residual_sup,
        "b": sol.b,
        "message": sol.message or "ok",
    })
    if args.compare:
        _compare_dirs(Path(args.compare), out, out / "compare.csv")
    write_manifest(out, config.digest(), "solve-elliptic")
    print(f"converged = {sol.converged}, b = {sol.b!r}, residual_sup = {sol.residual_sup:.3e}")
    if not sol.converged:
        raise CommandFailure(EXIT_NUMERIC, f"Newton solve failed: {sol.message}")
    return EXIT_OK


def _potential(path: Path):
    for name in ("phi_mean.maflow", "phi.maflow"):
        if (path / name).exists():
            _, data = read_dump(path / name)
            return data[0], float(read_keyvalues(path / "result.txt")["b"])
    raise ConfigError(f"{path} holds neither a flow nor an elliptic result")


def _compare_dirs(left: Path, right: Path, dest: Path):
    a, ba = _potential(left)
    b, bb = _potential(right)
    if a.shape != b.shape:
        raise ConfigError("compared fields live on different grids")
    a, b = a - a.mean(), b - b.mean()
    diff, bdiff = float(np.max(np.abs(a - b))), abs(ba - bb)
    _write_csv(dest, ["phi_sup_diff", "b_diff"], [(diff, bdiff)])
    print(f"phi_sup_diff = {diff:.6e}, b_diff = {bdiff:.6e}")
    return diff, bdiff


def cmd_compare(config, out: Path, args) -> int:
    diff, bdiff = _compare_dirs(Path(args.left), Path(args.right), out / "compare.csv")
    write_manifest(out, config.digest() if config else "", "compare")
    if args.tol is not None and max(diff, bdiff) > args.tol:
        raise CommandFailure(EXIT_NUMERIC, f"difference {max(diff, bdiff):.3e} exceeds {args.tol:.1e}")
    return EXIT_OK


def cmd_decay_fit(config, out: Path, args) -> int:
    src = Path(args.monitor) if args.monitor else Path(args.flow_dir or out) / "monitor.csv"
    report = MonitorReport.from_csv(src)
    if config is None:
        from .config import ExperimentConfig as _EC
        from .manifold import ModelSpec

        config = _EC(ModelSpec())
    fit, cc = _decay_records(report, config, float(report.column("t")[-1]), out)
    write_manifest(out, config.digest(), "decay-fit")
    if fit is None:
        raise CommandFailure(EXIT_NUMERIC, "not enough monitor rows for a decay fit")
    print(f"eta = {fit.eta:.6g}, r_squared = {fit.r_squared:.6f}, kappa_max = {cc.kappa_max:.4f}")
    return EXIT_OK if fit.eta > 0 and cc.passed else EXIT_NUMERIC


def cmd_harnack(config: ExperimentConfig, out: Path, args) -> int:
    model = _model_for(config, args.config_dir)
    flow_dir = Path(args.flow_dir or out)
    traj_dir = flow_dir / "trajectory"
    if not traj_dir.exists():
        raise ConfigError(f"no stored trajectory in {flow_dir}; run run-flow with flow.trajectory_until > 0")
    traj = load_trajectory(traj_dir)
    d = config.diagnostics
    header = ["m", "solution", "vacuous"] + HarnackCheck.csv_header().split(",") + ["gradient_C"]
    rows = []
    failed = []
    for eps, alpha, t1, t2 in d.harnack:
        m = 1
        while m - 1.0 + t2 <= traj.t_end + 1e-12:
            for label, u0 in zip(("v", "w"), shifted_solutions(traj, m)):
                if float(np.max(u0) - np.min(u0)) <= 1e-14 * max(1.0, float(np.max(np.abs(u0)))):
                    factor = harnack_time_factor(model.n, eps, alpha, t1, t2)
                    rows.append([m, label, 1, eps, alpha, t1, t2, 0.0, 0.0, factor, 0.0, 0.0, 0.0, 0.0])
                    continue
                try:
                    heat = heat_solve(u0, m - 1.0, m - 1.0 + t2, traj, model, cfl_safety=d.heat_cfl)
                    chk = harnack_check(heat, eps, alpha, t1, t2)
                    gc, _, _ = gradient_estimate_constant(heat, alpha, eps, traj, model)
                except (HeatPositivityError, ValueError) as exc:
                    failed.append(f"m={m} {label}: {exc}")
                    log.error("Harnack m=%d %s: %s", m, label, exc)
                    continue
                rows.append([m, label, 0] + [float(v) for v in chk.to_csv_line().split(",")] + [float(gc)])
            m += 1
    _write_csv(out / "harnack.csv", header, rows)
    phit_osc = [float(np.max(q) - np.min(q)) for q in traj.phi_t]
    cc = contraction_check(np.array(traj.times), np.array(phit_osc), d.contraction_floor)
    _write_csv(out / "harnack_contraction.csv", ["m", "kappa"], [(m, float(k)) for m, k in zip(cc.ms, cc.kappas)])
    write_manifest(out, config.digest(), "harnack")
    if failed:
        raise CommandFailure(EXIT_NUMERIC, "; ".join(failed))
    return EXIT_OK


# --- entry point ----------------------------------------------------------------


COMMANDS = {
    "verify-model": cmd_verify_model,
    "run-flow": cmd_run_flow,
    "solve-elliptic": cmd_solve_elliptic,
    "harnack": cmd_harnack,
    "decay-fit": cmd_decay_fit,
    "compare": cmd_compare,
}
NEEDS_CONFIG = {"verify-model", "run-flow", "solve-elliptic", "harnack"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"maflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--out", help="output directory (default: the config's [output] directory)")
        p.add_argument("--jobs", type=int, default=None, help="cap on worker threads for inner kernels")
        p.add_argument("-v", "--verbose", action="count", default=0)
        return p

    p = common(sub.add_parser("verify-model", help="check geometric invariants of the model"))
    p.add_argument("--write-dumps", action="store_true", help="also write J, G and frame dumps")
    p = common(sub.add_parser("run-flow", help="integrate the flow to convergence"))
    p.add_argument("--resume", help="snapshot directory to resume from")
    p = common(sub.add_parser("solve-elliptic", help="Newton solve of the elliptic equation"))
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--compare", help="flow output directory to compare against")
    p = common(sub.add_parser("harnack", help="Harnack checks on a stored flow trajectory"))
    p.add_argument("--flow-dir", help="run-flow output holding trajectory/ (default: --out)")
    p = common(sub.add_parser("decay-fit", help="decay fit and contraction check of a monitor CSV"))
    p.add_argument("--monitor", help="monitor CSV (default: <flow-dir>/monitor.csv)")
    p.add_argument("--flow-dir")
    p = common(sub.add_parser("compare", help="sup-norm distance between two stored results"))
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("--tol", type=float, default=None, help="fail with exit 3 above this distance")
    return parser


def _limit_threads(jobs):
    if jobs is None:
        return None
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=jobs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = None
        args.config_dir = Path(".")
        if args.config:
            config = load(args.config)
            args.config_dir = Path(args.config).resolve().parent
        elif args.command in NEEDS_CONFIG:
            raise ConfigError(f"{args.command} requires --config")
        out = Path(args.out or (config.output if config else "."))
        out.mkdir(parents=True, exist_ok=True)
        limiter = _limit_threads(args.jobs)
        try:
            return COMMANDS[args.command](config, out, args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except CommandFailure as exc:
        log.error("%s", exc)
        return exc.code
    except (FlowBlowUp, FlowConsistencyError, PositivityError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        log.error("I/O or configuration error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
