"""Rigid fusion on a TUM RGB-D sequence (first N frames) with ATE/RPE against groundtruth.txt.

    python scripts/run_tum.py /data/rgbd_dataset_freiburg2_xyz --frames 200 --out /tmp/fr2xyz
"""
import argparse
from pathlib import Path
import time

from fuseforge.config import RunConfig, load_config
from fuseforge.datasets import format_trajectory, load_tum_dataset
from fuseforge.metrics import evaluate_ate_rmse, evaluate_rpe
from fuseforge.pipeline import iter_dataset_frames, run_rigid
from fuseforge.ply import export_ply
from fuseforge.surface import marching_cubes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset")
    ap.add_argument("--out", required=True)
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--config")
    ap.add_argument("--continue-on-failure", action="store_true")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    frames, gt = load_tum_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    run = run_rigid(iter_dataset_frames(frames, args.frames), cfg.camera.intrinsics(), cfg,
                    continue_on_failure=args.continue_on_failure)
    secs = time.perf_counter() - t0
    (out / "trajectory.txt").write_text(format_trajectory(run.trajectory))
    (out / "frame_stats.csv").write_text(run.stats_csv())
    export_ply(marching_cubes(run.volume), out / "mesh.ply")
    msg = f"{len(run.trajectory)} frames in {secs:.0f} s"
    if gt:
        ate = evaluate_ate_rmse(run.trajectory, gt)
        _, rpe = evaluate_rpe(run.trajectory, gt)
        msg += f": ATE-RMSE {ate:.4f} m, RPE-RMSE {rpe:.4f} m"
    print(msg)


if __name__ == "__main__":
    main()
