"""Command-line entry point: ``vicet simulate | register | unwarp | eval``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 registration did not
converge (the result file is still written).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from vicet.cloud import CloudFormatError, read_cloud, unwarp, write_cloud
from vicet.evaluation import DegenerateReportError, chamfer, error_stats
from vicet.keyvalue import ConfigError, floats
from vicet.registration import (
    METHODS,
    ConditioningError,
    ResultFormatError,
    load_config,
    read_result,
    register,
    write_result,
)
from vicet.simulator import SimulationError, load_scene, simulate_map, simulate_scan
from vicet.voxelgrid import EmptyGridError, UnderConstrainedError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOT_CONVERGED = 0, 1, 2, 3

STATE_NAMES = ("x0", "y0", "z0", "dx", "dy", "dz", "roll0", "pitch0", "yaw0", "droll", "dpitch", "dyaw")

DATA_ERRORS = (
    OSError,
    CloudFormatError,
    ConfigError,
    ResultFormatError,
    SimulationError,
    EmptyGridError,
    UnderConstrainedError,
    ConditioningError,
    DegenerateReportError,
    ValueError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _state_arg(text: str, sizes=(12,)) -> np.ndarray:
    try:
        vals = floats(text, name="state")
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if len(vals) not in sizes:
        raise UsageError(f"state needs {' or '.join(map(str, sizes))} numbers, got {len(vals)}")
    return np.array(vals)


def _csv_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _emit(rows, header, out):
    fh, close = _csv_out(out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if close:
            fh.close()


def cmd_simulate(args) -> int:
    state = _state_arg(args.state) if args.state is not None else None
    sf = load_scene(args.scene)
    state = sf.state if state is None else state
    if state is None:
        raise UsageError("no motion state: pass --state or set 'state' in the scene file")
    seed = args.seed if args.seed is not None else sf.seed
    rng = np.random.default_rng(seed)
    scan = simulate_scan(sf.scene, state, sf.pattern, sf.noise_sigma, sf.noise_model, rng, sf.period)
    write_cloud(scan, args.out)
    if args.map_out:
        write_cloud(simulate_map(sf.scene, sf.map_pattern, sf.map_poses or None), args.map_out)
    if args.truth_out:
        path = Path(args.truth_out)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(("name", *STATE_NAMES))
            w.writerow((args.name or Path(args.out).stem, *(f"{v:.17g}" for v in state)))
    return EXIT_OK


def cmd_register(args) -> int:
    overrides = {"method": args.method}
    if args.no_seed:
        overrides["seed_with_ndt"] = False
    cfg = load_config(args.config, **overrides)
    init = _state_arg(args.init, (6, 12)) if args.init else np.zeros(12)
    map_cloud = read_cloud(args.map)
    scan = read_cloud(args.scan)
    result = register(map_cloud, scan, init, cfg)
    write_result(result, args.out)
    _emit(
        [(result.method, int(result.converged), result.iterations, f"{result.cost:.9g}", *(f"{v:.9g}" for v in result.state))],
        ("method", "converged", "iterations", "cost", *STATE_NAMES),
        None,
    )
    if not result.converged:
        print(f"register: {result.method} did not converge in {result.iterations} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _read_state_file(path) -> np.ndarray:
    try:
        return read_result(path).state
    except ResultFormatError:
        text = Path(path).read_text()
        try:
            return np.array(floats(" ".join(ln.split("#")[0] for ln in text.splitlines()), 12, "state"))
        except ConfigError:
            raise ResultFormatError(f"{path}: neither a result file nor 12 state numbers") from None


def cmd_unwarp(args) -> int:
    write_cloud(unwarp(read_cloud(args.scan), _read_state_file(args.state_file)), args.out)
    return EXIT_OK


def cmd_chamfer(args) -> int:
    scan = read_cloud(args.scan)
    if scan.frame != "map":
        if args.state_file is None:
            raise UsageError("scan is in the body frame: pass --state-file or an unwarped cloud")
        scan = unwarp(scan, _read_state_file(args.state_file))
    rep = chamfer(scan, read_cloud(args.map), args.inflation)
    _emit(
        [(f"{rep.normalized:.9g}", rep.used, rep.rejected, rep.inflation)],
        ("chamfer_m2", "used", "rejected", "inflation"),
        args.out,
    )
    return EXIT_OK


def _read_truth(path) -> dict:
    truth = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#") or (lineno == 1 and row[0] == "name"):
                continue
            if len(row) != 13:
                raise ConfigError(f"{path}: line {lineno}: expected name plus 12 states, got {len(row)} fields")
            try:
                truth[row[0].strip()] = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise ConfigError(f"{path}: line {lineno}: non-numeric state") from None
    return truth


def cmd_errors(args) -> int:
    truth = _read_truth(args.truth)
    forward = _state_arg(args.forward, (3,))
    groups: dict[str, tuple[list, list]] = {}
    files = sorted(p for p in Path(args.results).iterdir() if p.is_file())
    for path in files:
        res = read_result(path)
        name = path.stem.split(".")[0]
        if name not in truth:
            raise ConfigError(f"{path.name}: no truth row named {name!r}")
        est, tru = groups.setdefault(res.method, ([], []))
        est.append(res)
        tru.append(truth[name])
    if not groups:
        raise ConfigError(f"{args.results}: no result files")
    rows = []
    for method in sorted(groups):
        st = error_stats(*groups[method], forward_axis=forward)
        rows += [(method, name, unit, f"{m:.9g}", f"{s:.9g}", st.n) for name, unit, m, s in st.rows()]
    _emit(rows, ("method", "component", "unit", "mean", "std", "n"), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vicet", description="Simulate, register and evaluate distorted spinning-lidar scans.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="ray-cast a distorted scan of a scene file")
    s.add_argument("--scene", required=True, help="scene file (key = value)")
    s.add_argument("--state", help="12 comma-separated states, angles in radians (overrides the scene file); "
        "write --state=-0.3,... when the first value is negative")
    s.add_argument("--out", required=True, help="raw scan cloud to write")
    s.add_argument("--map-out", help="also write the reference map cloud")
    s.add_argument("--seed", type=int, help="noise seed (overrides the scene file)")
    s.add_argument("--truth-out", help="append 'name,<12 states>' to this CSV")
    s.add_argument("--name", help="row name for --truth-out (default: stem of --out)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser(
        "register",
        help="register a raw scan to a map",
        description="Writes a result file to --out and prints one CSV row to stdout: "
        "method, converged, iterations, cost, " + ", ".join(STATE_NAMES) + ".",
    )
    r.add_argument("--map", required=True)
    r.add_argument("--scan", required=True)
    r.add_argument("--method", choices=METHODS, default="vicet")
    r.add_argument("--config", help="registration config file (key = value)")
    r.add_argument("--init", help="initial guess: 6 (x0, theta0) or 12 numbers, radians (default zeros); use --init=... for a leading minus")
    r.add_argument("--out", required=True, help="result file to write")
    r.add_argument("--no-seed", action="store_true", help="start VICET from --init instead of an NDT solution")
    r.set_defaults(func=cmd_register)

    u = sub.add_parser("unwarp", help="map a raw scan through a state")
    u.add_argument("--scan", required=True)
    u.add_argument("--state-file", required=True, help="result file, or a file holding 12 numbers")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_unwarp)

    e = sub.add_parser("eval", help="evaluation metrics as CSV")
    esub = e.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    c = esub.add_parser(
        "chamfer",
        help="normalized chamfer distance",
        description="CSV columns: chamfer_m2 (mean squared nearest-map distance), used, rejected, inflation.",
    )
    c.add_argument("--map", required=True)
    c.add_argument("--scan", required=True, help="map-frame cloud, or a raw scan together with --state-file")
    c.add_argument("--state-file")
    c.add_argument("--inflation", type=float, default=0.05, help="hull inflation fraction; 'inf' disables rejection")
    c.add_argument("--out")
    c.set_defaults(func=cmd_chamfer)

    er = esub.add_parser(
        "errors",
        help="start-pose error statistics per method",
        description="Result files in --results are matched to truth rows by file stem (text before the first dot). "
        "CSV columns: method, component (x, y, z, forward, roll, pitch, yaw), unit, mean, std, n.",
    )
    er.add_argument("--results", required=True, help="directory of result files")
    er.add_argument("--truth", required=True, help="CSV: name plus 12 true states")
    er.add_argument("--forward", default="1,0,0", help="map-frame forward axis")
    er.add_argument("--out")
    er.set_defaults(func=cmd_errors)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, OSError) and exc.filename is not None:
            msg = f"{exc.strerror}: {os.fspath(exc.filename)}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
