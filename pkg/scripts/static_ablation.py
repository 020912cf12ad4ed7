"""Val MRR with and without static node memory on a bursty synthetic stream."""
import argparse

from tgpar.config import TrainConfig
from tgpar.engine import run_training
from tgpar.synth import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--burst-prob", type=float, default=0.5)
    ap.add_argument("--epochs", type=float, default=10)
    ap.add_argument("--seeds", type=int, default=2)
    args = ap.parse_args()
    for seed in range(args.seeds):
        g = generate(SynthConfig(events=5000, burst_prob=args.burst_prob, seed=seed))
        res = {}
        for ds in (0, 100):
            cfg = TrainConfig(local_batch=100, d_mem=32, d_time=32, d_static=ds,
                              epochs=args.epochs, seed=seed)
            res[ds] = run_training(cfg, g).final_val_mrr
        flag = "" if res[0] <= res[100] else "  (static memory did not help)"
        print(f"seed {seed}: d_s=0 {res[0]:.4f}  d_s=100 {res[100]:.4f}{flag}")


if __name__ == "__main__":
    main()
