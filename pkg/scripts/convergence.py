"""Val MRR against traversed edges for several (i, j, k) layouts at equal budget.

    python3 scripts/convergence.py --epochs 20 --layouts 1,1,1 1,1,4 1,4,1 --out runs/conv
"""
import argparse
import os

from tgpar.config import TrainConfig
from tgpar.engine import run_training
from tgpar.synth import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--events", type=int, default=5000)
    ap.add_argument("--epochs", type=float, default=20)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layouts", nargs="+", default=["1,1,1", "1,1,4", "1,4,1"])
    ap.add_argument("--backend", default="thread")
    ap.add_argument("--out", default="runs/convergence")
    args = ap.parse_args()

    g = generate(SynthConfig(events=args.events, seed=args.seed))
    for lay in args.layouts:
        i, j, k = (int(x) for x in lay.split(","))
        cfg = TrainConfig(i=i, j=j, k=k, local_batch=100, d_mem=32, d_time=32, d_static=32,
                          epochs=args.epochs, lr_base=args.lr, seed=args.seed, backend=args.backend)
        out = os.path.join(args.out, f"{i}x{j}x{k}")
        rec = run_training(cfg, g, out_dir=out)
        print(f"{i}x{j}x{k}: final val MRR {rec.final_val_mrr:.4f}  "
              f"{rec.iters_per_sec:.1f} it/s  -> {out}/metrics.csv")


if __name__ == "__main__":
    main()
