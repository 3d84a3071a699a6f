"""Time the full pipeline on a 512x512-detector, 128^3-atlas phantom, stage by stage.

    python scripts/runtime_budget.py --out runs/budget
"""

import argparse
import json
import os
from pathlib import Path

from angioatlas.experiments import run_cohort
from angioatlas.phantom import make_case, phantom_geometry, phantom_lut, synth_atlas, write_case


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/budget")
    ap.add_argument("--det", type=int, default=512)
    ap.add_argument("--dims", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    atlas = synth_atlas(args.dims, 6, seed=1)
    case = make_case(atlas, phantom_geometry(det=args.det), phantom_lut(atlas), seed=args.seed)
    d = write_case(case, Path(args.out) / "case")
    row = run_cohort([d])[0]
    timing = json.loads((d / "out" / "timing.json").read_text())
    print(f"cpus available: {len(os.sched_getaffinity(0))}")
    for stage, sec in timing["stages_s"].items():
        print(f"  {stage:<18} {sec:7.2f} s")
    print(f"total {row['runtime_s']:.1f} s   ssim_affine {row['ssim_affine']:.4f}   ssim_final {row['ssim_final']:.4f}")


if __name__ == "__main__":
    main()
