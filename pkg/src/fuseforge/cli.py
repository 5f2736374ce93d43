"""Command line driver: ``fuseforge {rigid,nonrigid,eval,mesh} ...``."""
import argparse
from dataclasses import replace
import json
import logging
import os
from pathlib import Path
import sys
import tempfile

from .config import ConfigError, RunConfig, format_config, load_config

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _write_atomic(path: Path, content):
    """Write via a temp file in the same directory, then rename. `content` is
    text or a callable taking the temp path."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            if not callable(content):
                fh.write(content)
        if callable(content):
            content(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _set_threads():
    n = os.environ.get("FUSEFORGE_THREADS")
    if n:
        import numba
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "levels", None) is not None:
        cfg = replace(cfg, preprocess=replace(cfg.preprocess, levels=args.levels))
    if getattr(args, "lambda_photo", None) is not None:
        cfg = replace(cfg, tracker=replace(cfg.tracker, lambda_photo=args.lambda_photo))
    if getattr(args, "phi", None) is not None:
        cfg = replace(cfg, nonrigid=replace(cfg.nonrigid, phi=args.phi))
    return cfg


def _manifest(args, cfg: RunConfig) -> str:
    head = [f"# command: {args.command}"]
    for k, v in sorted(vars(args).items()):
        if k not in ("command", "func"):
            head.append(f"# {k}: {v}")
    return "\n".join(head) + "\n" + format_config(cfg)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_rigid(args) -> int:
    from .datasets import DatasetError, format_trajectory, load_tum_dataset
    from .pipeline import iter_dataset_frames, run_rigid
    from .ply import export_ply
    from .surface import marching_cubes
    from .tracking import TrackingFailure

    try:
        cfg = _config(args)
        frames, _ = load_tum_dataset(args.dataset)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if not frames:
        print(f"error: no associated frames in {args.dataset}", file=sys.stderr)
        return EXIT_INPUT
    out = _outdir(args.out)
    _write_atomic(out / "manifest.txt", _manifest(args, cfg))
    try:
        run = run_rigid(iter_dataset_frames(frames, args.max_frames), cfg.camera.intrinsics(), cfg,
                        continue_on_failure=args.continue_on_failure)
    except TrackingFailure as exc:
        print(f"error: tracking failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    _write_atomic(out / "trajectory.txt", format_trajectory(run.trajectory))
    _write_atomic(out / "frame_stats.csv", run.stats_csv())
    _write_atomic(out / "timing.csv", run.timing_csv())
    _write_atomic(out / "volume.tsdf", run.volume.save)
    mesh = marching_cubes(run.volume)
    _write_atomic(out / "mesh.ply", lambda p: export_ply(mesh, p))
    print(f"{len(run.trajectory)} frames, {mesh.n_vertices} mesh vertices -> {out}")
    return EXIT_OK


def _load_mesh(spec: str, cfg):
    from .ply import import_ply
    from .pipeline import synthetic_mesh
    if spec.startswith("plane"):
        return synthetic_mesh(spec, cfg)
    return import_ply(spec)


def cmd_nonrigid(args) -> int:
    from .ply import MalformedMeshError, export_ply
    from .pipeline import run_nonrigid

    try:
        cfg = _config(args)
        source = _load_mesh(args.source, cfg)
        target = _load_mesh(args.target, cfg)
    except (ConfigError, MalformedMeshError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        run = run_nonrigid(source, target, cfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as exc:
        print(f"error: optimization failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = _outdir(args.out)
    _write_atomic(out / "manifest.txt", _manifest(args, cfg))
    _write_atomic(out / "warped.ply", lambda p: export_ply(run.warped, p))
    _write_atomic(out / "energy.csv", run.result.energy_csv())
    _write_atomic(out / "stats.csv", run.stats_csv())
    _write_atomic(out / "graph.txt", run.graph.to_text())
    s = run.stats()
    print(f"max {s['max_distance']:.6g} mean {s['mean_distance']:.6g} std {s['std_distance']:.6g} "
          f"after {run.result.iterations} iterations -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .datasets import DatasetError, read_trajectory
    from .metrics import MetricError, evaluate_ate_rmse, evaluate_rpe

    try:
        est = read_trajectory(args.estimated)
        ref = read_trajectory(args.reference)
        ate = evaluate_ate_rmse(est, ref, align=not args.no_align)
        _, rpe = evaluate_rpe(est, ref, args.delta)
    except (DatasetError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.json:
        print(json.dumps({"ate_rmse_m": ate, "rpe_rmse_m": rpe, "delta": args.delta, "aligned": not args.no_align}))
    else:
        print(f"ATE-RMSE {ate:.6f} m")
        print(f"RPE-RMSE {rpe:.6f} m (delta {args.delta})")
    return EXIT_OK


def cmd_mesh(args) -> int:
    from .ply import export_ply
    from .surface import marching_cubes
    from .volume import HashedTsdfVolume

    try:
        vol = HashedTsdfVolume.load(args.volume)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load volume: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = _outdir(args.out)
    mesh = marching_cubes(vol)
    _write_atomic(out / "mesh.ply", lambda p: export_ply(mesh, p))
    print(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces -> {out / 'mesh.ply'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fuseforge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rigid", help="track and fuse a TUM-format RGB-D sequence")
    r.add_argument("dataset")
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--max-frames", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--levels", type=int)
    r.add_argument("--lambda-photo", type=float)
    r.add_argument("--continue-on-failure", action="store_true")
    r.set_defaults(func=cmd_rigid)

    n = sub.add_parser("nonrigid", help="register two meshes with an embedded deformation graph")
    n.add_argument("source", help="PLY path or 'plane[:kind[:amplitude]]'")
    n.add_argument("target", help="PLY path or 'plane[:kind[:amplitude]]'")
    n.add_argument("--out", required=True)
    n.add_argument("--config")
    n.add_argument("--seed", type=int)
    n.add_argument("--phi", type=float)
    n.set_defaults(func=cmd_nonrigid)

    e = sub.add_parser("eval", help="ATE and RPE of an estimated trajectory")
    e.add_argument("estimated")
    e.add_argument("reference")
    e.add_argument("--delta", type=int, default=1)
    e.add_argument("--no-align", action="store_true")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mesh", help="extract a PLY mesh from a saved volume")
    m.add_argument("volume")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
