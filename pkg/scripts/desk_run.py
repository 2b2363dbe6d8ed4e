"""Train the desk configuration end to end and compare against bicubic.

    python scripts/desk_run.py [--steps N] [--seed S] [--out results/desk.json]
"""
import argparse
import json
import logging
from pathlib import Path

from diwa.config import TrainConfig
from diwa.experiment import desk_run


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--seed", type=int, default=TrainConfig.seed)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="write the summary as JSON")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = TrainConfig(steps=args.steps, seed=args.seed, name="desk")
    run = desk_run(cfg, on_log=print, sample_seed=args.sample_seed)
    summary = {
        "steps": cfg.steps,
        "seed": cfg.seed,
        "diwa": {"psnr": run.report.mean_psnr, "ssim": run.report.mean_ssim},
        "bicubic": {"psnr": run.bicubic.mean_psnr, "ssim": run.bicubic.mean_ssim},
        "psnr_gain_db": run.report.mean_psnr - run.bicubic.mean_psnr,
        "seconds": run.seconds,
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
