"""Command line front end.

    garmentdyn simulate --scenario grasp --solver fem --preset cotton --out run/
    garmentdyn evaluate --trajectory run/grasp/trajectory.gdfp --gt captures/ --out eval/
    garmentdyn bench --solver fem --solver mass-spring --out bench/
    garmentdyn presets

Exit codes: 0 ok, 2 bad configuration, 3 numerical failure, 4 no overlap
between simulation and ground truth.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .assets import FABRICS, load_material_file, load_obj, load_point_cloud, material_preset, sample_cloth_path
from .errors import GarmentDynError, NoOverlap, NumericalFailure
from .metrics import RigidTransform, evaluate, icp_align
from .parallel import thread_count
from .scenarios import (SCRIPT_BUILDERS, SOLVERS, RunOptions, ScenarioScript, load_frame_pack, run_scenario,
                        save_frame_pack, save_obj_frames, timing_benchmark, timing_csv)
from .solver import SolverConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NO_OVERLAP = 0, 2, 3, 4


class ConfigError(Exception):
    pass


def _positive_float(text: str) -> float:
    try:
        v = float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="garmentdyn", description="Garment dynamics simulation and evaluation.")
    p.add_argument("--version", action="version", version=f"garmentdyn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def material_args(sp):
        sp.add_argument("--preset", default="cotton", help=f"fabric preset ({', '.join(FABRICS)})")
        sp.add_argument("--material-file", type=Path, help="JSON material, optionally {'preset': name, ...overrides}")

    def solver_args(sp):
        sp.add_argument("--dt", type=_positive_float, default=Fraction(1, 30), help="step size in seconds (e.g. 1/30)")
        sp.add_argument("--newton", type=_positive_int, default=4, help="Newton iterations per step")
        sp.add_argument("--pcg", type=_positive_int, default=50, help="PCG iterations per Newton iteration")

    s = sub.add_parser("simulate", help="run manipulation scenarios")
    s.add_argument("--mesh", type=Path, help="OBJ garment (default: bundled 17x17 sample cloth)")
    s.add_argument("--scenario", action="append", default=None,
                   help="scenario JSON or one of grasp/fling/fold; repeat for several")
    s.add_argument("--solver", choices=SOLVERS, default="fem")
    material_args(s)
    solver_args(s)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--obj-frames", action="store_true", help="also write one OBJ per frame")
    s.add_argument("--no-self-collision", action="store_true")
    s.add_argument("--jobs", type=_positive_int, default=1, help="scenarios run concurrently")
    s.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("evaluate", help="compare a trajectory with captured point clouds")
    e.add_argument("--trajectory", type=Path, required=True, help="frame pack written by simulate")
    e.add_argument("--gt", type=Path, required=True, help="directory of .xyz/.ply frames or a single file")
    e.add_argument("--delay", type=float, default=0.0, help="capture delay in seconds")
    e.add_argument("--icp", action="store_true", help="refine the alignment with ICP on the first matched frame")
    e.add_argument("--pose", type=float, nargs=7, metavar="P",
                   help="sim-to-capture transform [tx ty tz qw qx qy qz] (default identity)")
    e.add_argument("--percentile", type=float, help="trimmed Hausdorff percentile (default: plain maximum)")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="step-time benchmark on square grids")
    b.add_argument("--solver", choices=SOLVERS, action="append", default=None)
    b.add_argument("--counts", type=_positive_int, nargs="+", default=[1024, 4096, 9216, 16384])
    b.add_argument("--steps", type=_positive_int, default=100)
    b.add_argument("--settle", type=int, default=20)
    material_args(b)
    solver_args(b)
    b.add_argument("--out", type=Path, required=True)
    b.add_argument("--jobs", type=_positive_int, default=1)
    b.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("presets", help="list the fabric presets in SI units")
    r.add_argument("--out", type=Path, help="write JSON here instead of stdout")
    return p


# --- helpers ---------------------------------------------------------------------

def _material(args):
    if args.material_file is not None:
        if not args.material_file.exists():
            raise ConfigError(f"material file not found: {args.material_file}")
        return load_material_file(args.material_file)
    return material_preset(args.preset)


def _config(args) -> SolverConfig:
    return SolverConfig(h=float(args.dt), newton_iters=args.newton, pcg_iters=args.pcg)


def _mesh(args):
    path = args.mesh if args.mesh is not None else sample_cloth_path()
    if not Path(path).exists():
        raise ConfigError(f"mesh not found: {path}")
    return load_obj(path)


def _script(spec: str, mesh) -> ScenarioScript:
    if spec in SCRIPT_BUILDERS:
        return SCRIPT_BUILDERS[spec](mesh)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"scenario not found: {spec} (give a JSON file or one of {', '.join(SCRIPT_BUILDERS)})")
    return ScenarioScript.from_json(path)


def _gt_frames(path: Path):
    if not path.exists():
        raise ConfigError(f"ground truth not found: {path}")
    files = [path] if path.is_file() else sorted(p for p in path.iterdir() if p.suffix.lower() in (".xyz", ".ply", ".txt"))
    if not files:
        raise ConfigError(f"no point cloud frames in {path}")
    frames = [load_point_cloud(f) for f in files]
    return sorted(frames, key=lambda f: f.timestamp)


def _limit_native_threads():
    # BLAS/LAPACK only ever sees small dense blocks here; keeping it on one
    # thread avoids oversubscription and crashes when several jobs call into
    # a multi-threaded OpenBLAS at once, and keeps results thread-count free
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


# --- commands --------------------------------------------------------------------

def _simulate_one(spec, mesh, material, options, out: Path, obj_frames: bool, seed: int) -> int:
    script = _script(spec, mesh)
    name = script.name if spec in SCRIPT_BUILDERS else Path(spec).stem
    target = out / name
    target.mkdir(parents=True, exist_ok=True)
    result = run_scenario(script, mesh, material, options)
    script.to_json(target / "scenario.json")
    save_frame_pack(target / "trajectory.gdfp", result.trajectory)
    if obj_frames:
        save_obj_frames(target / "frames", result.mesh, result.trajectory)
    diag = result.diagnostics.to_dict()
    diag.update({"scenario": name, "frames": len(result.trajectory), "grasp_vertices": result.grasp_vertices,
                 "material": material.to_dict(), "config": dataclasses.asdict(options.config), "seed": seed})
    (target / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    if result.diagnostics.failed:
        print(f"{name}: numerical failure: {result.diagnostics.message}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"{name}: {len(result.trajectory)} frames -> {target}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    mesh = _mesh(args)
    material = _material(args)
    options = RunOptions(solver=args.solver, config=_config(args), self_collision=not args.no_self_collision)
    specs = args.scenario or ["grasp"]
    for s in specs:  # validate everything before running anything
        _script(s, mesh)
    args.out.mkdir(parents=True, exist_ok=True)
    jobs = min(args.jobs, len(specs), thread_count())
    run = lambda s: _simulate_one(s, mesh, material, options, args.out, args.obj_frames, args.seed)  # noqa: E731
    if jobs <= 1:
        codes = [run(s) for s in specs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            codes = list(pool.map(run, specs))
    return max(codes)


def cmd_evaluate(args) -> int:
    if not args.trajectory.exists():
        raise ConfigError(f"trajectory not found: {args.trajectory}")
    traj = load_frame_pack(args.trajectory)
    real = _gt_frames(args.gt)
    if args.delay < 0:
        raise ConfigError("--delay must be >= 0")
    align = RigidTransform.from_pose(args.pose) if args.pose else RigidTransform.identity()
    if args.icp and len(traj):
        from .metrics import compensate_delay, pair_frames

        shifted = compensate_delay(real, args.delay)
        pairs = pair_frames(traj.times, [f.timestamp for f in shifted])
        if pairs:
            k, j = pairs[0]
            align = icp_align(traj.frames[k], shifted[j].points, init=align).transform
    report = evaluate(traj.pairs(), real, align, args.delay, percentile=args.percentile)
    args.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out / "metrics.csv")
    summary = report.summary()
    summary["alignment"] = align.to_pose()
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{report.n_frames} matched frames -> {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    material = _material(args)
    solvers = args.solver or ["fem"]
    args.out.mkdir(parents=True, exist_ok=True)

    def run(solver):
        opts = RunOptions(solver=solver, config=_config(args))
        recs = timing_benchmark(args.counts, solver, material, args.steps, args.settle, opts)
        timing_csv(recs, args.out / f"bench_{solver}.csv")
        return recs

    jobs = min(args.jobs, len(solvers), thread_count())
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, solvers))
    else:
        for s in solvers:
            run(s)
    print(f"benchmarks for {', '.join(solvers)} -> {args.out}")
    return EXIT_OK


def cmd_presets(args) -> int:
    table = {name: material_preset(name).to_dict() for name in FABRICS}
    text = json.dumps(table, indent=2) + "\n"
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "evaluate": cmd_evaluate, "bench": cmd_bench, "presets": cmd_presets}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2 already
        return int(exc.code or 0)
    np.random.seed(getattr(args, "seed", 0) % 2**32)
    try:
        with _limit_native_threads():
            return COMMANDS[args.command](args)
    except NoOverlap as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_OVERLAP
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, GarmentDynError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
