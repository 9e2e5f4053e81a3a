"""Concrete vs Bernoulli vs DG generation on the MUTAG-sized instance.

    python scripts/bench_generation.py --teacher-ckpt runs/train-teacher-MUTAG-s0/checkpoints/teacher.ckpt

Thin wrapper over ``acgkd bench`` at matched 1800 loops and 3 seeds; prints the
wall-time reduction of the Concrete path relative to the score-function one.
"""
import argparse
import dataclasses

import numpy as np

from acgkd import cli
from acgkd.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--teacher-ckpt", required=True)
    ap.add_argument("--loops", type=int, default=1800)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--outdir", default="runs")
    args = ap.parse_args()
    cfg = dataclasses.replace(load_config(), teacher_ckpt=args.teacher_ckpt, num_loops=args.loops,
                              bench_seeds=args.seeds, outdir=args.outdir).validate()
    res = cli.cmd_bench(cfg)
    conc, bern = np.array(res["times"]["concrete"]), np.array(res["times"]["bernoulli"])
    print(f"wall-time reduction per seed: {np.round(100 * (1 - conc / bern), 1).tolist()} %")
    print(f"csv: {res['csv']}")


if __name__ == "__main__":
    main()
